"""Scenario runner: reproducible experiment bundles from one TOML file.

Subcommands
-----------
``parabolab run scenario.toml [--threads N] [--seed S] [--out DIR]``
    Execute the scenario's experiments, write per-experiment CSV tables,
    ``summary.json`` (the machine contract: sorted keys, no timestamps) and
    ``timings.json`` (wall-clock sidecar, excluded from the determinism
    contract).  Exit 0 iff every asserted check passes, 1 with the failing
    tags on stderr otherwise, 2 on an invalid scenario.
``parabolab sweep scenario.toml --param dotted.path --values v1,v2,...``
    Re-run the scenario once per value (``grid.nx 32,64`` style), one output
    directory per run plus ``sweep_summary.json`` collecting the constants.
``parabolab report DIR``
    Pretty-print a previously written summary; exit mirrors its pass state.

Scenario file
-------------
::

    seed = 7
    experiments = ["ellipticity", "coercivity", "kato"]

    [grid]
    n = 1          # 1 or 2
    nx = 16        # power of two
    nt = 64        # power of four
    # lx = 1.0, lt = 1.0

    [weight]
    kind = "power"         # unit | power | dyadic_random
    exponent = 0.5         # kind-specific parameters pass through
    # amplitude = 0.8, seed = ...   (dyadic_random)

    [coefficients]
    kappa = 0.5
    time_dependent = true
    # seed = ...           (defaults to a stream derived from the top seed)

    [tolerances]           # any TOLERANCES key may be overridden
    measure_ratio_max = 0.95

Optional per-experiment tables: ``[resolvents] sigmas/n_samples``,
``[offdiag] distances_cells/ratios/variant``, ``[lp] per_octave/profile``,
``[poincare] ks/generation``, ``[principal_part] per_octave``,
``[carleson_embed] n_samples/generations``, ``[tb] eps/max_cubes``,
``[carleson_main] eps/mode/per_octave/max_cubes/probe_cubes/max_directions``,
``[kato] n_samples/calderon_probes/calderon_per_octave``.

All randomness flows from the single top-level seed through per-experiment
counter-based streams, so identical scenarios produce byte-identical
``summary.json`` files regardless of ``--threads``.

CSV tables (one per experiment, fixed columns)
----------------------------------------------
- coercivity.csv:        sigma, sample, lhs, rhs, delta
- resolvents.csv:        lambda, quantity, max_ratio
- offdiag.csv:           distance, lambda, ratio
- lp.csv:                probe, constant, value
- poincare.csv:          k, ratio, lhs, rhs, clamped
- principal_part.csv:    cube, generation, mass, mu, ratio
- carleson_embed.csv:    sample, direct, layercake, gap, constant
- tb.csv:                generation, cube, direction, eps, laa_i, laa_ii,
                         laa_iii, measure_ratio, est1
- carleson_main.csv:     cone, gamma_mass
- kato.csv:              probe, ratio
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:  # 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

from . import calculus, lp, tb
from .dyadic import carleson_embedding_check, cube_shape
from .grid import GridFunction, GridSpec, inner
from .operator import (
    DENSE_LIMIT,
    ParabolicOperator,
    hidden_coercivity_check,
    make_coefficients,
    offdiag_decay_fit,
    resolvent_uniform_suite,
)
from .weights import a2_constant, doubling_constant, make_weight

EXPERIMENTS = (
    "ellipticity",
    "coercivity",
    "resolvents",
    "offdiag",
    "lp",
    "poincare",
    "principal_part",
    "carleson_embed",
    "tb",
    "carleson_main",
    "kato",
)

# stable per-experiment stream offsets for the counter-based generators
_STREAM = {name: i + 1 for i, name in enumerate(EXPERIMENTS)}
_WEIGHT_STREAM, _COEFF_STREAM = 97, 98

TOLERANCES = {
    "sigma_bound_slack": 1e-10,      # accretive resolvent contraction
    "coercivity_slack": 1e-12,       # relative slack on Re B >= delta ||u||_E^2
    "offdiag_c_min": 0.0,            # fitted decay rate must be positive
    "offdiag_r2_min": 0.9,
    "lp_constant_max": 50.0,         # regression guard, constants are O(1)
    "poincare_ratio_max": 10.0,
    "principal_sup_max": 100.0,
    "embed_gap_max": 1e-10,          # direct vs layer-cake agreement
    "embed_slack_max": 1e-9,         # maximal-cube domination slack
    "laa_i_max": 2.0,
    "laa_ii_max": 3.0,
    "laa_iii_max": 6.0,
    "measure_ratio_max": 0.95,       # stopped region at the calibrated eps
    "est9_violations_max": 0,        # phase-resolved cones must be clean
    "partition_gap_max": 1e-10,
    "splitting_gap_max": 1e-9,
    "ff1_bound_slack": 1e-9,
    "kato_anchor_slack": 1e-6,       # unit-operator symbol anchor
    "kato_spread_max": 1e6,          # finiteness guard; anchors are tighter
    "calderon_rel_max": 1e-3,
}


# ---------------------------------------------------------------- scenario


class ScenarioError(Exception):
    """Invalid scenario: reported as a usage error (exit 2)."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ScenarioError(msg)


def load_scenario(path) -> dict:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return normalize_scenario(raw)


def normalize_scenario(raw: dict) -> dict:
    """Fill defaults, validate, and return the canonical scenario dict."""
    sc = dict(raw)
    sc.setdefault("seed", 0)
    _require(isinstance(sc["seed"], int) and sc["seed"] >= 0, "seed must be a nonnegative integer")
    exps = sc.get("experiments", [])
    _require(isinstance(exps, list), "experiments must be a list")
    unknown = [e for e in exps if e not in EXPERIMENTS]
    _require(not unknown, f"unknown experiments {unknown}; valid: {list(EXPERIMENTS)}")
    # canonical dependency order, duplicates dropped
    sc["experiments"] = [e for e in EXPERIMENTS if e in exps]

    grid = dict(sc.get("grid", {}))
    grid.setdefault("n", 1)
    grid.setdefault("nx", 16)
    grid.setdefault("nt", 64)
    sc["grid"] = grid
    weight = dict(sc.get("weight", {}))
    weight.setdefault("kind", "unit")
    sc["weight"] = weight
    coeff = dict(sc.get("coefficients", {}))
    coeff.setdefault("kappa", 0.0)
    coeff.setdefault("time_dependent", True)
    sc["coefficients"] = coeff
    tol = dict(TOLERANCES)
    extra = dict(sc.get("tolerances", {}))
    unknown = [k for k in extra if k not in TOLERANCES]
    _require(not unknown, f"unknown tolerance keys {unknown}")
    tol.update(extra)
    sc["tolerances"] = tol
    out = dict(sc.get("output", {}))
    out.setdefault("dir", "out")
    sc["output"] = out
    try:
        spec = scenario_grid(sc)
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"invalid grid: {exc}") from exc
    if "kato" in sc["experiments"]:
        _require(
            spec.size <= DENSE_LIMIT,
            f"kato needs a dense factorization: {spec.size} nodes > {DENSE_LIMIT}",
        )
    _require(sc["weight"]["kind"] in ("unit", "power", "dyadic_random"),
             f"unknown weight kind {sc['weight']['kind']!r}")
    return sc


def scenario_grid(sc: dict) -> GridSpec:
    g = sc["grid"]
    kw = {k: g[k] for k in ("lx", "lt") if k in g}
    return GridSpec(n=g["n"], nx=g["nx"], nt=g["nt"], **kw)


def build_operator(sc: dict) -> ParabolicOperator:
    spec = scenario_grid(sc)
    wcfg = dict(sc["weight"])
    kind = wcfg.pop("kind")
    if kind == "dyadic_random":
        wcfg.setdefault("seed", _stream_seed(sc, _WEIGHT_STREAM))
    try:
        weight = make_weight(kind, spec, **wcfg)
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"invalid weight: {exc}") from exc
    ccfg = sc["coefficients"]
    coeff = make_coefficients(
        spec,
        weight,
        kappa=float(ccfg["kappa"]),
        seed=int(ccfg.get("seed", _stream_seed(sc, _COEFF_STREAM))),
        time_dependent=bool(ccfg["time_dependent"]),
    )
    return ParabolicOperator(spec, weight, coeff)


def _stream_seed(sc: dict, stream: int) -> int:
    return int(sc["seed"]) * 1009 + stream


def _rng(sc: dict, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.Philox(key=_stream_seed(sc, _STREAM[name])))


def scenario_hash(sc: dict) -> str:
    blob = json.dumps(_jsonable(sc), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


def _check(value, bound, kind="<="):
    value, bound = float(value), float(bound)
    passed = value <= bound if kind == "<=" else value >= bound
    return {"value": value, "bound": bound, "kind": kind, "passed": bool(passed)}


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


# ---------------------------------------------------------------- experiments


def _exp_ellipticity(op, sc, out):
    c1, c2 = op.coeff.ellipticity_constants()
    kappa = float(sc["coefficients"]["kappa"])
    a2 = a2_constant(op.weight)
    result = {
        "tag": "ellipticity_bounds",
        "constants": {
            "c1": c1,
            "c2": c2,
            "a2": a2,
            "doubling": doubling_constant(op.weight),
        },
        "checks": {
            # the construction certifies (1 - kappa, 1 + kappa)
            "c1_floor": _check(c1, 1.0 - kappa - 1e-9, ">="),
            "c2_ceiling": _check(c2, 1.0 + kappa + 1e-9),
            "a2_finite": _check(a2, 1e6),
        },
    }
    return result


def _exp_coercivity(op, sc, out):
    cfg = sc.get("coercivity", {})
    n_samples = int(cfg.get("n_samples", 25))
    sigmas = [complex(s) for s in cfg.get("sigmas", ["1", "0.01", "1+10j"])]
    rng = _rng(sc, "coercivity")
    rows, worst = [], np.inf
    violations = 0
    for sigma in sigmas:
        for i in range(n_samples):
            u = GridFunction(
                op.spec,
                rng.standard_normal(op.spec.shape) + 1j * rng.standard_normal(op.spec.shape),
            )
            lhs, rhs, delta = hidden_coercivity_check(op, u, sigma)
            rows.append((str(sigma), i, lhs, rhs, delta))
            if lhs < rhs * (1.0 - sc["tolerances"]["coercivity_slack"]):
                violations += 1
            worst = min(worst, lhs / rhs if rhs > 0 else np.inf)
    _write_csv(out / "coercivity.csv", ["sigma", "sample", "lhs", "rhs", "delta"], rows)
    return {
        "tag": "hidden_coercivity",
        "constants": {"min_margin": worst, "samples": len(rows)},
        "checks": {"violations": _check(violations, 0)},
    }


def _exp_resolvents(op, sc, out):
    cfg = sc.get("resolvents", {})
    sigmas = [complex(s) for s in cfg.get("sigmas", ["0.01", "1", "1+10j"])]
    n_samples = int(cfg.get("n_samples", 10))
    rng = _rng(sc, "resolvents")
    spec, w = op.spec, op.weight.values
    slack = sc["tolerances"]["sigma_bound_slack"]
    worst_excess, violations = 0.0, 0
    for sigma in sigmas:
        bound = 1.0 / sigma.real
        for _ in range(n_samples):
            f = GridFunction(
                spec, rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
            )
            sol = op.resolvent_sigma(sigma, f)
            nf = np.sqrt(inner(f.values, f.values, weight=w, spec=spec).real)
            ns = np.sqrt(inner(sol.values, sol.values, weight=w, spec=spec).real)
            excess = ns / (bound * nf) - 1.0
            worst_excess = max(worst_excess, excess)
            if excess > slack:
                violations += 1
    lams = np.asarray(cfg.get("lambdas", [0.05, 0.1, 0.2, 0.4, 0.8]), dtype=float)
    suite = resolvent_uniform_suite(op, lams, n_samples=max(4, n_samples // 2),
                                    seed=_stream_seed(sc, _STREAM["resolvents"]))
    rows = [
        (float(lam), q, float(suite["ratios"][q][i]))
        for q in sorted(suite["ratios"])
        for i, lam in enumerate(lams)
    ]
    _write_csv(out / "resolvents.csv", ["lambda", "quantity", "max_ratio"], rows)
    checks = {
        "sigma_contraction_violations": _check(violations, 0),
        "plain_resolvent_contraction": _check(suite["max_ratio"]["E_f"], 1.0 + 1e-10),
    }
    for q, flagged in suite["nonuniform_flag"].items():
        checks[f"uniform_{q}"] = _check(int(flagged), 0)
    return {
        "tag": ["resolvent_sigma_bound", "resolvent_uniform"],
        "constants": {"worst_sigma_excess": worst_excess, **{
            f"max_{q}": v for q, v in suite["max_ratio"].items()
        }},
        "checks": checks,
    }


def _exp_offdiag(op, sc, out):
    cfg = sc.get("offdiag", {})
    nx = op.spec.nx
    default = sorted({max(2, round(c * nx / 64)) for c in (10, 13, 16)})
    distances = tuple(cfg.get("distances_cells", default))
    ratios = tuple(cfg.get("ratios", (2, 3, 4.5, 7, 10, 14, 20)))
    fit = offdiag_decay_fit(
        op,
        distances_cells=distances,
        ratios_d_over_lam=ratios,
        variant=cfg.get("variant", "E_f"),
        seed=_stream_seed(sc, _STREAM["offdiag"]),
    )
    _write_csv(out / "offdiag.csv", ["distance", "lambda", "ratio"], fit["points"])
    tol = sc["tolerances"]
    return {
        "tag": "offdiag_decay",
        "constants": {"c": fit["c"], "r2": fit["r2"], "slope": fit["slope"]},
        "checks": {
            "decay_rate_positive": _check(fit["c"], tol["offdiag_c_min"], ">="),
            "fit_r2": _check(fit["r2"], tol["offdiag_r2_min"], ">="),
        },
    }


def _exp_lp(op, sc, out):
    cfg = sc.get("lp", {})
    per_octave = int(cfg.get("per_octave", 6))
    profile = cfg.get("profile", "bump")
    n_probes = int(cfg.get("probes", 2))
    rng = _rng(sc, "lp")
    spec = op.spec
    rows, agg = [], {"smoothing": 0.0, "inverse": 0.0, "average_gap": 0.0}
    for i in range(n_probes):
        f = rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
        suite = lp.lp_suite(f, spec, weight=op.weight, per_octave=per_octave, profile=profile)
        for key in agg:
            agg[key] = max(agg[key], float(suite[key]))
            rows.append((i, key, float(suite[key])))
    _write_csv(out / "lp.csv", ["probe", "constant", "value"], rows)
    bound = sc["tolerances"]["lp_constant_max"]
    return {
        "tag": ["lp_smoothing", "lp_approximation", "lp_average_vs_mollifier"],
        "constants": agg,
        "checks": {f"{k}_bounded": _check(v, bound) for k, v in agg.items()},
    }


def _exp_poincare(op, sc, out):
    cfg = sc.get("poincare", {})
    ks = [int(k) for k in cfg.get("ks", [0, 1, 2])]
    gens = tb.admissible_generations(op.spec)
    j = int(cfg.get("generation", gens[-1]))
    shape = cube_shape(op.spec, j)
    cube = (j, tuple(s // 2 for s in shape))
    zeta = np.zeros(op.spec.n, dtype=np.complex128)
    zeta[0] = 1.0
    tf = tb.build_test_function(op, cube, zeta, 0.125)
    rows, worst = [], 0.0
    for k in ks:
        res = tb.poincare_ratio(tf.f, cube, k, weight=op.weight, spec=op.spec)
        rows.append((k, res.ratio, res.lhs, res.rhs, int(res.clamped)))
        worst = max(worst, res.ratio)
    _write_csv(out / "poincare.csv", ["k", "ratio", "lhs", "rhs", "clamped"], rows)
    return {
        "tag": "poincare",
        "constants": {"max_ratio": worst, "generation": j},
        "checks": {"ratio_bounded": _check(worst, sc["tolerances"]["poincare_ratio_max"])},
    }


def _exp_principal_part(op, sc, out):
    cfg = sc.get("principal_part", {})
    per_octave = int(cfg.get("per_octave", 2))
    sup, _data = tb.principal_carleson(op, per_octave=per_octave,
                                       csv_path=out / "principal_part.csv")
    # the approximation error must vanish on constants
    const = np.ones((op.spec.n,) + op.spec.shape, dtype=np.complex128)
    lam = float(cfg.get("lambda", 4 * op.spec.hx))
    ppf = tb.principal_part_field(op, lam)
    resid = float(np.max(np.abs(tb.r_lambda(op, lam, const, ppf=ppf))))
    scale = float(np.max(np.abs(ppf.values))) + 1e-300
    return {
        "tag": "principal_part_bound",
        "constants": {"carleson_sup": sup, "constant_residual": resid},
        "checks": {
            "sup_bounded": _check(sup, sc["tolerances"]["principal_sup_max"]),
            "annihilates_constants": _check(resid / scale, 1e-10),
        },
    }


def _exp_carleson_embed(op, sc, out):
    cfg = sc.get("carleson_embed", {})
    n_samples = int(cfg.get("n_samples", 8))
    gens = cfg.get("generations", tb.admissible_generations(op.spec))
    rng = _rng(sc, "carleson_embed")
    spec = op.spec
    tol = sc["tolerances"]
    rows, worst_gap, worst_slack, consts = [], 0.0, -np.inf, []
    for i in range(n_samples):
        data = {int(j): rng.random(cube_shape(spec, int(j))) for j in gens}
        f = rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
        rep = carleson_embedding_check(f, data, spec, weight=op.weight)
        rows.append((i, rep["direct"], rep["layercake"], rep["gap"], rep["constant"]))
        worst_gap = max(worst_gap, rep["gap"])
        worst_slack = max(worst_slack, rep["majorant_slack"])
        consts.append(rep["constant"])
    _write_csv(out / "carleson_embed.csv",
               ["sample", "direct", "layercake", "gap", "constant"], rows)
    return {
        "tag": "carleson_embedding",
        "constants": {
            "max_constant": float(np.max(consts)),
            "mean_constant": float(np.mean(consts)),
            "max_gap": worst_gap,
        },
        "checks": {
            "route_agreement": _check(worst_gap, tol["embed_gap_max"]),
            "majorant_domination": _check(worst_slack, tol["embed_slack_max"]),
        },
    }


def _probe_directions(n: int) -> list[np.ndarray]:
    if n == 1:
        return [np.ones(1, dtype=np.complex128)]
    r = 2.0**-0.5
    return [np.array(v, dtype=np.complex128) for v in ([1, 0], [0, 1], [r, r], [r, 1j * r])]


def _exp_tb(op, sc, out):
    cfg = sc.get("tb", {})
    eps = cfg.get("eps", 0.125)
    cal = None
    if eps == "auto":
        cal = tb.calibrate_aperture([op], max_cubes=int(cfg.get("max_cubes", 2)))
        eps = cal["eps"]
    eps = float(eps)
    max_cubes = int(cfg.get("max_cubes", 2))
    tol = sc["tolerances"]
    spec = op.spec
    rows = []
    worst = {"i": 0.0, "ii": 0.0, "iii": 0.0, "ratio": 0.0, "est1": 0.0}
    for j in tb.admissible_generations(spec):
        shape = cube_shape(spec, j)
        n_cubes = int(np.prod(shape))
        picks = sorted({0, n_cubes // 2})[:max_cubes]
        for flat in picks:
            idx = tuple(int(v) for v in np.unravel_index(flat, shape))
            for d, zeta in enumerate(_probe_directions(spec.n)):
                tf = tb.build_test_function(op, (j, idx), zeta, eps)
                sd = tb.stopping_time(spec, (j, idx), tf.grad_f, tf.zeta, eps,
                                      weight=op.weight)
                rep = tb.step1_report(op, tf)
                rows.append((j, flat, d, eps, tf.laa["i"], tf.laa["ii"], tf.laa["iii"],
                             sd.measure_ratio, rep["est1"]))
                for key in ("i", "ii", "iii"):
                    worst[key] = max(worst[key], tf.laa[key])
                worst["ratio"] = max(worst["ratio"], sd.measure_ratio)
                worst["est1"] = max(worst["est1"], rep["est1"] / rep["est1_bound"])
    _write_csv(out / "tb.csv",
               ["generation", "cube", "direction", "eps", "laa_i", "laa_ii", "laa_iii",
                "measure_ratio", "est1"], rows)
    result = {
        "tag": ["test_function_quality", "stopping_time"],
        "constants": {"eps": eps, **{f"laa_{k}": worst[k] for k in ("i", "ii", "iii")},
                      "max_measure_ratio": worst["ratio"]},
        "checks": {
            "laa_i": _check(worst["i"], tol["laa_i_max"]),
            "laa_ii": _check(worst["ii"], tol["laa_ii_max"]),
            "laa_iii": _check(worst["iii"], tol["laa_iii_max"]),
            "measure_ratio": _check(worst["ratio"], tol["measure_ratio_max"]),
            "step1_deficit": _check(worst["est1"], 1.0),
        },
    }
    if cal is not None:
        result["constants"]["calibration_fallback"] = bool(cal["fallback"])
    return result


def _exp_carleson_main(op, sc, out):
    cfg = sc.get("carleson_main", {})
    kw = dict(
        eps=float(cfg.get("eps", 0.125)),
        mode=cfg.get("mode", "phase"),
        per_octave=int(cfg.get("per_octave", 2)),
        max_cubes=int(cfg.get("max_cubes", 2)),
        probe_cubes=int(cfg.get("probe_cubes", 1)),
    )
    if cfg.get("max_directions") is not None:
        kw["max_directions"] = int(cfg["max_directions"])
    rep = tb.carleson_main(op, csv_path=out / "carleson_main_profile.csv", **kw)
    _write_csv(out / "carleson_main.csv", ["cone", "gamma_mass"],
               list(enumerate(rep["gamma_masses"])))
    tol = sc["tolerances"]
    split = rep["splitting"]
    checks = {
        "gamma_partition": _check(rep["gamma_partition_gap"], tol["partition_gap_max"]),
        "est9_violations": _check(rep["est9"]["violations"], tol["est9_violations_max"]),
        "measure_ratio": _check(rep["stopping"]["max_measure_ratio"],
                                tol["measure_ratio_max"]),
        "step1_deficit": _check(rep["step1"]["max_est1"], rep["step1"]["est1_bound"]),
        "recombination": _check(split["max_recombination_gap"], tol["splitting_gap_max"]),
        "smoothing_identity": _check(split["max_hf_identity_gap"], tol["splitting_gap_max"]),
        "triangle_bound": _check(split["max_ff1_bound_ratio"],
                                 1.0 + tol["ff1_bound_slack"]),
    }
    findings = {
        "literal_est9": rep["est9_literal"],
        "phase_literal_disagreement": rep["phase_literal_disagreement"],
        "literal_partition_gap": rep["literal_partition_gap"],
    }
    constants = {
        "carleson_sup": rep["carleson_sup"],
        "gamma_total": rep["gamma_total"],
        "eps": rep["eps"],
        "n_cones": rep["n_cones"],
        "n_test_cubes": rep["n_test_cubes"],
        "max_measure_ratio": rep["stopping"]["max_measure_ratio"],
        "est9_max_ratio": rep["est9"]["max_ratio"],
    }
    return {
        "tag": ["carleson_main", "est9_check", "stopping_time"],
        "constants": constants,
        "checks": checks,
        "findings": findings,
    }


def _exp_kato(op, sc, out):
    cfg = sc.get("kato", {})
    n_samples = int(cfg.get("n_samples", 20))
    seed = _stream_seed(sc, _STREAM["kato"])
    ratios = calculus.kato_ratios(op, n_samples=n_samples, seed=seed)
    _write_csv(out / "kato.csv", ["probe", "ratio"],
               list(enumerate(ratios["ratios"])))
    tol = sc["tolerances"]
    checks = {"spread_finite": _check(ratios["spread"], tol["kato_spread_max"])}
    anchored = (sc["weight"]["kind"] == "unit"
                and float(sc["coefficients"]["kappa"]) == 0.0)
    if anchored:
        # flat symbol: every modewise ratio lies in [2^-1/4, 1]
        slack = tol["kato_anchor_slack"]
        checks["r_min_anchor"] = _check(ratios["r_min"], 2.0**-0.25 - slack, ">=")
        checks["r_max_anchor"] = _check(ratios["r_max"], 1.0 + slack)
    constants = {
        "r_min": ratios["r_min"],
        "r_max": ratios["r_max"],
        "spread": ratios["spread"],
    }
    tags = ["kato_equivalence"]
    probes = int(cfg.get("calderon_probes", 0))
    if probes > 0:
        rng = np.random.default_rng(np.random.Philox(key=seed + 1))
        spec = op.spec
        fs = rng.standard_normal((probes,) + spec.shape) + 1j * rng.standard_normal(
            (probes,) + spec.shape
        )
        mat = calculus.sqrt_schur(op)
        exact = (mat @ fs.reshape(probes, -1).T).T.reshape(fs.shape)
        approx, info = calculus.sqrt_calderon(
            op, fs, per_octave=int(cfg.get("calderon_per_octave", 8))
        )
        num = np.sqrt(np.sum(np.abs(approx - exact) ** 2, axis=tuple(range(1, fs.ndim))))
        den = np.sqrt(np.sum(np.abs(exact) ** 2, axis=tuple(range(1, fs.ndim))))
        rel = float(np.max(num / den))
        constants["calderon_rel_err"] = rel
        constants["calderon_nodes"] = int(info["n_nodes"])
        checks["calderon_agreement"] = _check(rel, tol["calderon_rel_max"])
        tags.append("sqrt_calderon")
    return {"tag": tags, "constants": constants, "checks": checks}


_RUNNERS = {
    "ellipticity": _exp_ellipticity,
    "coercivity": _exp_coercivity,
    "resolvents": _exp_resolvents,
    "offdiag": _exp_offdiag,
    "lp": _exp_lp,
    "poincare": _exp_poincare,
    "principal_part": _exp_principal_part,
    "carleson_embed": _exp_carleson_embed,
    "tb": _exp_tb,
    "carleson_main": _exp_carleson_main,
    "kato": _exp_kato,
}


# ---------------------------------------------------------------- run


def run_scenario(sc: dict, out_dir, threads: int = 1) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    op = build_operator(sc)
    names = sc["experiments"]
    results: dict[str, dict] = {}
    timings: dict[str, float] = {}

    def _one(name):
        t0 = time.perf_counter()
        res = _RUNNERS[name](op, sc, out)
        return name, res, time.perf_counter() - t0

    if threads > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for name, res, dt in pool.map(_one, names):
                results[name] = res
                timings[name] = dt
    else:
        for name in names:
            name, res, dt = _one(name)
            results[name] = res
            timings[name] = dt

    failed = []
    for name in names:  # canonical order, independent of completion order
        res = results[name]
        for cname, chk in sorted(res["checks"].items()):
            if not chk["passed"]:
                tags = res["tag"] if isinstance(res["tag"], list) else [res["tag"]]
                failed.append({"experiment": name, "check": cname, "tags": tags,
                               "value": chk["value"], "bound": chk["bound"]})
    summary = {
        "scenario": _jsonable(sc),
        "scenario_hash": scenario_hash(sc),
        "operator_fingerprint": op.fingerprint,
        "experiments": {n: _jsonable(results[n]) for n in names},
        "all_passed": not failed,
        "failed": _jsonable(failed),
    }
    blob = json.dumps(summary, sort_keys=True, indent=2) + "\n"
    (out / "summary.json").write_text(blob)
    (out / "timings.json").write_text(
        json.dumps({"experiments": timings, "total": sum(timings.values())},
                   sort_keys=True, indent=2) + "\n"
    )
    return summary


def _print_failures(summary, stream=None):
    stream = sys.stderr if stream is None else stream
    for f in summary["failed"]:
        print(
            f"FAIL [{','.join(f['tags'])}] {f['experiment']}.{f['check']}: "
            f"value={f['value']:.6g} bound={f['bound']:.6g}",
            file=stream,
        )


# ---------------------------------------------------------------- sweep


def _set_path(sc: dict, dotted: str, value):
    keys = dotted.split(".")
    node = sc
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def run_sweep(sc: dict, param: str, values: list, out_dir, threads: int = 1) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for i, value in enumerate(values):
        variant = json.loads(json.dumps(_jsonable(sc)))  # deep copy
        _set_path(variant, param, value)
        variant = normalize_scenario(variant)
        sub = out / f"sweep_{i:02d}"
        summary = run_scenario(variant, sub, threads=threads)
        constants = {
            name: res["constants"] for name, res in summary["experiments"].items()
        }
        runs.append({
            "value": _jsonable(value),
            "dir": sub.name,
            "scenario_hash": summary["scenario_hash"],
            "all_passed": summary["all_passed"],
            "constants": constants,
        })
    sweep = {"param": param, "values": _jsonable(values), "runs": runs,
             "all_passed": all(r["all_passed"] for r in runs)}
    (out / "sweep_summary.json").write_text(
        json.dumps(sweep, sort_keys=True, indent=2) + "\n"
    )
    return sweep


# ---------------------------------------------------------------- report


def _flatten_constants(summary) -> list[tuple[str, float]]:
    rows = []
    for name in sorted(summary["experiments"]):
        for key, value in sorted(summary["experiments"][name]["constants"].items()):
            if isinstance(value, (int, float)):
                rows.append((f"{name}.{key}", value))
    return rows


def print_report(path, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    path = Path(path)
    if path.is_file():
        path = path.parent
    sweep_file = path / "sweep_summary.json"
    if sweep_file.exists():
        sweep = json.loads(sweep_file.read_text())
        print(f"sweep over {sweep['param']}: {sweep['values']}", file=stream)
        for run in sweep["runs"]:
            state = "pass" if run["all_passed"] else "FAIL"
            print(f"  {sweep['param']}={run['value']}  [{state}]  {run['dir']}",
                  file=stream)
        return 0 if sweep["all_passed"] else 1
    summary_file = path / "summary.json"
    if not summary_file.exists():
        print(f"no summary.json or sweep_summary.json under {path}", file=sys.stderr)
        return 2
    summary = json.loads(summary_file.read_text())
    print(f"scenario {summary['scenario_hash']}  "
          f"operator {summary['operator_fingerprint']}", file=stream)
    for name in summary["scenario"]["experiments"]:
        res = summary["experiments"][name]
        tags = res["tag"] if isinstance(res["tag"], list) else [res["tag"]]
        n_pass = sum(1 for c in res["checks"].values() if c["passed"])
        print(f"  {name:<16} [{','.join(tags)}] {n_pass}/{len(res['checks'])} checks",
              file=stream)
        for cname, chk in sorted(res["checks"].items()):
            mark = "pass" if chk["passed"] else "FAIL"
            print(f"    {mark}  {cname}: value={chk['value']:.6g} "
                  f"{chk['kind']} bound={chk['bound']:.6g}", file=stream)
    print("constants:", file=stream)
    for key, value in _flatten_constants(summary):
        print(f"  {key} = {value:.10g}", file=stream)
    return 0 if summary["all_passed"] else 1


# ---------------------------------------------------------------- entry


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parabolab",
        description="Reproducible estimate measurements for weighted parabolic operators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one scenario")
    p_run.add_argument("scenario", help="TOML scenario file")
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--out", default=None, help="override the output directory")

    p_sweep = sub.add_parser("sweep", help="rerun a scenario over parameter values")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("--param", required=True, help="dotted path, e.g. grid.nx")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--threads", type=int, default=1)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default=None)

    p_rep = sub.add_parser("report", help="print a written summary")
    p_rep.add_argument("dir", help="run directory (or its summary.json)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "report":
        return print_report(args.dir)
    try:
        sc = load_scenario(args.scenario)
        if args.seed is not None:
            sc["seed"] = args.seed
            sc = normalize_scenario(sc)
        out_dir = args.out if args.out is not None else sc["output"]["dir"]
        if args.command == "run":
            summary = run_scenario(sc, out_dir, threads=args.threads)
            if not summary["all_passed"]:
                _print_failures(summary)
                return 1
            return 0
        values = [_parse_value(v) for v in args.values.split(",")]
        sweep = run_sweep(sc, args.param, values, out_dir, threads=args.threads)
        return 0 if sweep["all_passed"] else 1
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return 2
    except tomllib.TOMLDecodeError as exc:
        print(f"scenario parse error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
