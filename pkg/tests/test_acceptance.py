"""Top-level acceptance criteria, one test (and one printed verdict line) each.

Every test collects its sub-check failures and ends in a single assert, so
the pytest verdict is the pass/fail line for that criterion.  Tolerances are
pinned here and do not adapt to the data.

Criterion 8's smoothing-slope sub-check fails by design and is left failing:
the pinned aperture triple (1/4, 1/8, 1/16) straddles the saturation knee of
the cutoff ramp, where the squared smoothing error grows slower than the
square of the aperture.  The measured slope (~1.33 in the best-case flat
configuration, pairwise slopes increasing toward the asymptotic value 2) is
asserted alongside the failing target so the failure stays informative.
"""

import json
import time

import numpy as np

from parabolab import calculus, cli, lp, tb
from parabolab.dyadic import (
    carleson_embedding_check,
    cube_length,
    cube_measures,
    cube_shape,
)
from parabolab.grid import GridFunction, GridSpec, inner
from parabolab.operator import (
    ParabolicOperator,
    hidden_coercivity_check,
    make_coefficients,
    offdiag_decay_fit,
)
from parabolab.weights import make_weight


def _op(spec, kind, kappa, coeff_seed, **wkw):
    w = make_weight(kind, spec, **wkw)
    return ParabolicOperator(spec, w, make_coefficients(spec, w, kappa=kappa, seed=coeff_seed))


def _verdict(num, label, failures, detail=""):
    state = "PASS" if not failures else "FAIL"
    line = f"criterion {num:02d} [{label}] {state}" + (f" - {detail}" if detail else "")
    print(line)
    for f in failures:
        print(f"    failed: {f}")
    assert not failures, line + "\n" + "\n".join(failures)


# five small rough weighted operators shared by criteria 3 and 4
_ENSEMBLE_SMALL = (
    ("power", 0.5, 0, dict(exponent=0.3)),
    ("power", 0.6, 1, dict(exponent=0.7)),
    ("dyadic_random", 0.4, 2, dict(amplitude=0.6, seed=21)),
    ("dyadic_random", 0.7, 3, dict(amplitude=0.8, seed=22)),
    ("power", 0.8, 4, dict(exponent=-0.4)),
)


def test_criterion_01_flat_symbol_anchor():
    t0 = time.perf_counter()
    spec = GridSpec(n=1, nx=32, nt=16)
    op = _op(spec, "unit", 0.0, 0)
    failures = []

    ratios = calculus.kato_ratios(op, n_samples=20, seed=0)
    lo, hi = 2.0**-0.25 - 1e-6, 1.0 + 1e-6
    if not (ratios["r_min"] >= lo and ratios["r_max"] <= hi):
        failures.append(
            f"kato ratios [{ratios['r_min']:.8f}, {ratios['r_max']:.8f}] "
            f"outside [{lo:.8f}, {hi:.8f}]"
        )

    # closed-form root: the flat operator diagonalizes over Fourier modes
    root = calculus.sqrt_schur(op)
    modes = np.empty((spec.size, spec.size), dtype=np.complex128)
    eigs = np.empty(spec.size, dtype=np.complex128)
    i = 0
    tau = spec.tau_banded()
    for k in range(spec.nx):
        lam_x = spec.laplace_symbol(k)
        for m in range(spec.nt):
            mode = GridFunction.fourier_mode(spec, k, m)
            modes[:, i] = mode.values.ravel()
            eigs[i] = np.sqrt(1j * tau[m] + lam_x)
            i += 1
    out = root @ modes
    err = np.abs(out - eigs[None, :] * modes)
    worst, worst_kernel = 0.0, 0.0
    for i in range(spec.size):
        e = float(err[:, i].max())
        if eigs[i] == 0:
            # exactly singular modes (the constant, and the spatial
            # constant at the unpaired Nyquist time frequency where the
            # banded symbol vanishes): the Schur recurrence loses digits
            # at 0-0 diagonal pairs; pinned separately at this grid size
            worst_kernel = max(worst_kernel, e)
            if e > 1e-5:
                failures.append(f"kernel mode error {e:.2e} > 1e-5")
        else:
            worst = max(worst, e / (1.0 + abs(eigs[i])))
    if worst > 1e-8:
        failures.append(f"symbol-root error {worst:.2e} > 1e-8")

    elapsed = time.perf_counter() - t0
    if elapsed >= 10.0:
        failures.append(f"runtime {elapsed:.1f}s >= 10s")
    _verdict(1, "flat symbol anchor", failures,
             f"ratios in [{ratios['r_min']:.6f}, {ratios['r_max']:.6f}], "
             f"symbol err {worst:.1e} (kernel {worst_kernel:.1e}), {elapsed:.1f}s")


def test_criterion_02_square_root_oracle_agreement():
    t0 = time.perf_counter()
    spec = GridSpec(n=1, nx=32, nt=16)
    failures = []
    worst = {}
    for label, op in (
        ("flat", _op(spec, "unit", 0.0, 0)),
        ("rough", _op(spec, "power", 0.5, 7, exponent=0.5)),
    ):
        rng = np.random.default_rng(np.random.Philox(key=42))
        fs = rng.standard_normal((20,) + spec.shape) + 1j * rng.standard_normal(
            (20,) + spec.shape
        )
        mat = calculus.sqrt_schur(op)
        exact = (mat @ fs.reshape(20, -1).T).T.reshape(fs.shape)
        approx, _info = calculus.sqrt_calderon(op, fs, per_octave=8)
        num = np.sqrt(np.sum(np.abs(approx - exact) ** 2, axis=(1, 2)))
        den = np.sqrt(np.sum(np.abs(exact) ** 2, axis=(1, 2)))
        worst[label] = float(np.max(num / den))
        if worst[label] > 1e-3:  # measured ~6e-6
            failures.append(f"{label}: calderon vs schur rel {worst[label]:.2e} > 1e-3")
        del op, mat, exact, approx
    elapsed = time.perf_counter() - t0
    if elapsed >= 60.0:
        failures.append(f"runtime {elapsed:.1f}s >= 60s")
    _verdict(2, "square-root oracle agreement", failures,
             f"max rel {max(worst.values()):.1e} on 20 probes x 2 operators, {elapsed:.1f}s")


def test_criterion_03_resolvent_contraction_exact():
    spec = GridSpec(n=1, nx=16, nt=16)
    failures = []
    worst_excess = -np.inf
    for kind, kappa, seed, wkw in _ENSEMBLE_SMALL:
        op = _op(spec, kind, kappa, seed, **wkw)
        w = op.weight.values
        rng = np.random.default_rng(np.random.Philox(key=100 + seed))
        for sigma in (0.01 + 0j, 1.0 + 0j, 1.0 + 10.0j):
            bound = 1.0 / sigma.real
            for _ in range(20):
                f = GridFunction(
                    spec,
                    rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape),
                )
                sol = op.resolvent_sigma(sigma, f)
                nf = np.sqrt(inner(f.values, f.values, weight=w, spec=spec).real)
                ns = np.sqrt(inner(sol.values, sol.values, weight=w, spec=spec).real)
                excess = ns / (bound * nf) - 1.0
                worst_excess = max(worst_excess, excess)
                if excess > 1e-10:
                    failures.append(
                        f"{kind}/seed={seed} sigma={sigma}: ||sol|| exceeds "
                        f"(Re s)^-1 ||f|| by {excess:.2e}"
                    )
        del op
    _verdict(3, "resolvent contraction", failures,
             f"5 ops x 3 sigma x 20 probes, worst excess {worst_excess:.1e}")


def test_criterion_04_hidden_coercivity_zero_violations():
    spec = GridSpec(n=1, nx=16, nt=16)
    failures = []
    checked = 0
    worst_margin = np.inf
    for kind, kappa, seed, wkw in _ENSEMBLE_SMALL:
        op = _op(spec, kind, kappa, seed, **wkw)
        rng = np.random.default_rng(np.random.Philox(key=200 + seed))
        for sigma, reps in ((1.0 + 0j, 34), (1.0 + 10.0j, 33), (0.01 + 0j, 33)):
            for _ in range(reps):
                u = GridFunction(
                    spec,
                    rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape),
                )
                lhs, rhs, _delta = hidden_coercivity_check(op, u, sigma)
                checked += 1
                worst_margin = min(worst_margin, lhs / rhs)
                if lhs < rhs * (1.0 - 1e-12):
                    failures.append(
                        f"{kind}/seed={seed} sigma={sigma}: Re B = {lhs:.6e} < "
                        f"delta ||u||_E^2 = {rhs:.6e}"
                    )
        del op
    _verdict(4, "hidden coercivity", failures,
             f"{checked} probes across 5 ops, min margin {worst_margin:.4f}")


def test_criterion_05_offdiagonal_decay():
    spec = GridSpec(n=1, nx=64, nt=16, lx=1.0, lt=0.25)
    failures = []
    fits = {}
    for label, (kind, kappa, seed, wkw) in {
        "power0.4": ("power", 0.4, 47, dict(exponent=0.4)),
        "power0.7": ("power", 0.5, 3, dict(exponent=0.7)),
        "dyadic": ("dyadic_random", 0.5, 11, dict(amplitude=0.6, seed=5)),
    }.items():
        op = _op(spec, kind, kappa, seed, **wkw)
        fit = offdiag_decay_fit(op, seed=1)  # d/lam spans [2, 20]
        fits[label] = (fit["c"], fit["r2"])
        if not fit["c"] > 0:
            failures.append(f"{label}: fitted rate c = {fit['c']:.4f} not positive")
        if fit["r2"] < 0.9:  # measured .990-.994
            failures.append(f"{label}: R^2 = {fit['r2']:.4f} < 0.9")
        del op
    detail = ", ".join(f"{k}: c={c:.2f} R2={r2:.3f}" for k, (c, r2) in fits.items())
    _verdict(5, "off-diagonal decay", failures, detail)


def test_criterion_06_carleson_embedding():
    failures = []
    spec = GridSpec(n=1, nx=16, nt=64)
    w = make_weight("power", spec, exponent=0.5)
    rng = np.random.default_rng(np.random.Philox(key=6))
    worst_gap, worst_slack = 0.0, -np.inf
    for _ in range(50):
        data = {j: rng.random(cube_shape(spec, j)) for j in (1, 2)}
        f = rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
        rep = carleson_embedding_check(f, data, spec, weight=w)
        worst_gap = max(worst_gap, rep["gap"])
        worst_slack = max(worst_slack, rep["majorant_slack"])
    if worst_gap > 1e-10:  # measured ~4e-16
        failures.append(f"direct vs layer-cake gap {worst_gap:.2e} > 1e-10")
    if worst_slack > 1e-9:
        failures.append(f"maximal-cube domination violated by {worst_slack:.2e}")

    # resolution stability of the measured constant on a fixed structured
    # pair: nu = mu on the cubes of physical length 1/8 and 1/4, f a fixed
    # smooth mode, so both grids sample the same continuum objects
    consts = {}
    for nx, nt in ((16, 64), (32, 256)):
        s = GridSpec(n=1, nx=nx, nt=nt)
        ww = make_weight("power", s, exponent=0.5)
        gens = [j for j in range(1, s.max_generation + 1)
                if cube_length(s, j) in (0.125, 0.25)]
        data = {j: np.asarray(cube_measures(s, ww, j)) for j in gens}
        f = GridFunction.fourier_mode(s, 2, 1).values
        consts[nx] = carleson_embedding_check(f, data, s, weight=ww)["constant"]
    drift = abs(consts[32] - consts[16]) / consts[16]
    if drift > 0.2:
        failures.append(
            f"embedding constant drift {drift:.3f} > 0.2 "
            f"({consts[16]:.5f} vs {consts[32]:.5f})"
        )
    _verdict(6, "Carleson embedding", failures,
             f"50 pairs gap {worst_gap:.1e}, constant {consts[16]:.4f} -> "
             f"{consts[32]:.4f} (drift {drift:.3f})")


def test_criterion_07_littlewood_paley_stability():
    failures = []
    drifts = {}
    for kind, wkw in (("unit", {}), ("power", dict(exponent=0.5))):
        suites = {}
        for nx, nt in ((32, 64), (64, 256)):
            s = GridSpec(n=1, nx=nx, nt=nt)
            ww = make_weight(kind, s, **wkw)
            f = GridFunction.fourier_mode(s, 3, 2).values
            suites[nx] = lp.lp_suite(f, s, weight=ww, per_octave=6)
        for key in ("smoothing", "inverse", "average_gap"):
            for nx in (32, 64):
                v = suites[nx][key]
                if not (np.isfinite(v) and v > 0):
                    failures.append(f"{kind}/{key} at nx={nx}: {v}")
        drift = lp.refinement_drift(suites[32], suites[64])
        drifts[kind] = drift
        for key, v in drift.items():  # measured <= 0.031
            if v > 0.2:
                failures.append(f"{kind}/{key}: drift {v:.3f} > 0.2")
    detail = "; ".join(
        f"{kind}: " + ", ".join(f"{k} {v:.3f}" for k, v in d.items())
        for kind, d in drifts.items()
    )
    _verdict(7, "Littlewood-Paley stability", failures, detail)


# ten-operator ensemble for the stopping-time sub-check of criterion 8
_ENSEMBLE_TB = (
    ("unit", 0.0, 0, {}),
    ("unit", 0.5, 1, {}),
    ("power", 0.3, 2, dict(exponent=0.3)),
    ("power", 0.5, 3, dict(exponent=0.5)),
    ("power", 0.5, 4, dict(exponent=-0.4)),
    ("power", 0.7, 5, dict(exponent=0.5)),
    ("dyadic_random", 0.4, 6, dict(amplitude=0.6, seed=21)),
    ("dyadic_random", 0.5, 7, dict(amplitude=0.8, seed=22)),
    ("dyadic_random", 0.6, 8, dict(amplitude=0.6, seed=23)),
    ("power", 0.6, 9, dict(exponent=0.6)),
)


def test_criterion_08_tb_pipeline():
    failures = []

    # (a) aperture-squared scaling of the smoothing error.  Best-case
    # configuration: flat operator, first generation.  Measured slope
    # ~1.33 against the pinned target 2 +/- 0.2: the (eps l)^2 * curvature
    # saturation parameter is ~(4 pi eps)^2 ~ 9.9 at eps = 1/4,
    # scale-free, so the pinned triple sits below the asymptotic regime.
    # The sub-check is asserted as specified and fails honestly; the
    # monotone pairwise slopes (toward 2) are asserted as supporting
    # evidence that the asymptotic regime exists.
    spec = GridSpec(n=1, nx=32, nt=64)
    op = _op(spec, "unit", 0.0, 0)
    ci = [
        tb.build_test_function(op, (1, (4, 2)), np.ones(1), eps).laa["i"]
        for eps in (0.25, 0.125, 0.0625)
    ]
    del op
    logs = np.log2(ci)
    s01, s12 = logs[0] - logs[1], logs[1] - logs[2]
    slope = (logs[0] - logs[2]) / 2
    if not s12 > s01:
        failures.append(f"pairwise slopes not increasing: {s01:.3f}, {s12:.3f}")
    if not 1.8 <= slope <= 2.2:
        failures.append(
            f"smoothing-error slope {slope:.3f} outside 2 +/- 0.2 "
            f"(c_i = {np.array2string(np.asarray(ci), precision=4)}; pairwise "
            f"{s01:.2f} -> {s12:.2f}, rising toward 2; the eps range "
            "(1/4..1/16) sits below the quadratic regime of the cutoff ramp)"
        )

    # (b) stopped region stays small at the calibrated aperture across the
    # ten-operator ensemble (operators built one at a time: the dense
    # factor caches are per-instance and must not coexist)
    spec8 = GridSpec(n=1, nx=32, nt=64)
    cal_ops = [
        _op(spec8, *_ENSEMBLE_TB[3][:3], **_ENSEMBLE_TB[3][3]),
        _op(spec8, *_ENSEMBLE_TB[7][:3], **_ENSEMBLE_TB[7][3]),
    ]
    cal = tb.calibrate_aperture(cal_ops, max_cubes=1)
    del cal_ops
    eps = cal["eps"]
    if cal["fallback"]:
        failures.append(f"aperture calibration fell back to eps={eps}")
    worst_ratio, worst_tag = 0.0, ""
    for kind, kappa, seed, wkw in _ENSEMBLE_TB:
        op = _op(spec8, kind, kappa, seed, **wkw)
        for j in tb.admissible_generations(spec8):
            shape = cube_shape(spec8, j)
            n_cubes = int(np.prod(shape))
            for flat in sorted({0, n_cubes // 2}):
                idx = tuple(int(v) for v in np.unravel_index(flat, shape))
                tf = tb.build_test_function(op, (j, idx), np.ones(1), eps)
                sd = tb.stopping_time(spec8, (j, idx), tf.grad_f, tf.zeta, eps,
                                      weight=op.weight)
                if sd.measure_ratio > worst_ratio:
                    worst_ratio, worst_tag = sd.measure_ratio, f"{kind}/seed={seed}/j={j}"
        del op
    if worst_ratio > 0.95:  # measured 0.719
        failures.append(
            f"stopping measure ratio {worst_ratio:.4f} > 0.95 at eps={eps} ({worst_tag})"
        )

    # (c) the Whitney-box pairing bound in the phase-resolved cone mode:
    # zero violations; the literal mode is recorded as a finding only
    op = _op(GridSpec(n=1, nx=16, nt=64), "power", 0.5, 7, exponent=0.5)
    rep = tb.carleson_main(op, eps=0.125, per_octave=2, max_cubes=2, probe_cubes=1)
    del op
    if rep["est9"]["checked"] == 0:
        failures.append("no Whitney boxes were checked")
    if rep["est9"]["violations"] != 0:
        failures.append(f"{rep['est9']['violations']} pairing violations (phase mode)")
    print(
        f"    finding: literal-cone mode checked={rep['est9_literal']['checked']} "
        f"violations={rep['est9_literal']['violations']} "
        f"assignment disagreement={rep['phase_literal_disagreement']:.3f}"
    )

    _verdict(8, "test-function pipeline", failures,
             f"slope {slope:.3f} (target 2 +/- 0.2), ensemble max ratio "
             f"{worst_ratio:.3f} at eps={eps}, est9 {rep['est9']['violations']}"
             f"/{rep['est9']['checked']} violations")


def test_criterion_09_rough_case_stability():
    t0 = time.perf_counter()
    failures = []
    vals = {}
    # the stability comparison holds the lambda window fixed to the coarse
    # grid's (same truncated continuum functional; refining the grid then
    # isolates discretization error, as with the matched cube lengths of
    # criterion 6).  The fine grid's extra resolved bottom octave is
    # reported as a finding, not compared.
    coarse = GridSpec(n=1, nx=32, nt=16)
    lam_lo = coarse.hx * 2.0**-0.5
    lam_hi = cube_length(coarse, coarse.max_generation) * 2.0**-0.5
    window = tb.LambdaQuadrature.from_range(lam_lo, lam_hi, per_octave=2)
    sup_full = None
    # one operator instance per measurement: the dense square root and the
    # resolvent sweep each hold O(N^2) state that must not coexist at 4096
    for nx, nt in ((32, 16), (64, 64)):
        s = GridSpec(n=1, nx=nx, nt=nt)
        op = _op(s, "power", 0.5, 7, exponent=0.5)
        kr = calculus.kato_ratios(op, n_samples=10, seed=1)
        del op
        op = _op(s, "power", 0.5, 7, exponent=0.5)
        sup, _ = tb.principal_carleson(op, quad=window)
        if nx == 64:
            sup_full, _ = tb.principal_carleson(op, per_octave=2)
        del op
        vals[nx] = (sup, kr["r_min"], kr["r_max"])
        for label, v in (("sup", sup), ("r_min", kr["r_min"]), ("r_max", kr["r_max"])):
            if not (np.isfinite(v) and v > 0):
                failures.append(f"({nx},{nt}) {label} = {v}")
    drifts = {
        label: abs(vals[64][i] - vals[32][i]) / vals[32][i]
        for i, label in enumerate(("sup", "r_min", "r_max"))
    }
    for label, d in drifts.items():
        if d > 0.3:
            failures.append(f"{label} drift {d:.3f} > 0.3 "
                            f"({vals[32]} vs {vals[64]})")
    print(
        f"    finding: fine-grid sup over its full lambda window is "
        f"{sup_full:.4f} (vs {vals[64][0]:.4f} on the matched window): the "
        f"newly resolved octave below the coarse cell scale still carries "
        f"mass at these resolutions"
    )
    elapsed = time.perf_counter() - t0
    if elapsed >= 1800.0:
        failures.append(f"runtime {elapsed:.0f}s >= 30 min")
    _verdict(9, "rough-case stability", failures,
             f"sup {vals[32][0]:.4f} -> {vals[64][0]:.4f}, "
             f"r_max/r_min {vals[32][2]:.4f}/{vals[32][1]:.4f} -> "
             f"{vals[64][2]:.4f}/{vals[64][1]:.4f}, {elapsed:.0f}s")


def test_criterion_10_determinism(tmp_path):
    failures = []
    scenario = cli.normalize_scenario({
        "seed": 11,
        "experiments": ["ellipticity", "coercivity", "lp", "poincare", "carleson_embed"],
        "grid": {"n": 1, "nx": 16, "nt": 64},
        "weight": {"kind": "power", "exponent": 0.5},
        "coefficients": {"kappa": 0.5, "time_dependent": True},
        "coercivity": {"n_samples": 5},
        "lp": {"probes": 1, "per_octave": 3},
        "carleson_embed": {"n_samples": 3},
    })
    cli.run_scenario(scenario, tmp_path / "a", threads=1)
    cli.run_scenario(scenario, tmp_path / "b", threads=3)
    b1 = (tmp_path / "a" / "summary.json").read_bytes()
    b2 = (tmp_path / "b" / "summary.json").read_bytes()
    if b1 != b2:
        failures.append("summary.json differs between identical-seed runs")
    if not json.loads(b1)["all_passed"]:
        failures.append("scenario checks did not pass")
    _verdict(10, "determinism", failures,
             f"byte-identical summaries ({len(b1)} bytes) across thread counts")
