"""Weight constants: exact A2/doubling suprema, A-infinity sandwich fit."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parabolab.grid import GridSpec
from parabolab.weights import (
    Weight,
    a2_constant,
    ainf_parameters,
    doubling_constant,
    make_weight,
)

SPEC1 = GridSpec(n=1, nx=64, nt=16)
SPEC1_SMALL = GridSpec(n=1, nx=32, nt=16)
SPEC2 = GridSpec(n=2, nx=16, nt=16)


def _brute_force_a2_1d(w):
    """Plain double loop over every periodic interval."""
    nx = len(w)
    winv = 1.0 / w
    ww = np.concatenate([w, w])
    wwinv = np.concatenate([winv, winv])
    best = 0.0
    for start in range(nx):
        for s in range(1, nx + 1):
            seg = slice(start, start + s)
            best = max(best, ww[seg].mean() * wwinv[seg].mean())
    return best


def _brute_force_doubling_1d(w):
    nx = len(w)
    ww = np.concatenate([w, w, w])  # generous tiling for negative corners
    best = 0.0
    for start in range(nx):
        for s in range(1, nx + 1):
            s2 = min(2 * s, nx)
            c2 = start - s // 2
            mass = ww[nx + start : nx + start + s].sum()
            mass2 = ww[nx + c2 : nx + c2 + s2].sum()
            best = max(best, mass2 / mass)
    return best


# ---------------------------------------------------------------- exact constants


@pytest.mark.parametrize("spec", [SPEC1_SMALL, SPEC2])
def test_unit_weight_constants(spec):
    w = make_weight("unit", spec)
    assert w.a2 == pytest.approx(1.0, abs=1e-14)
    assert w.doubling == pytest.approx(2.0**spec.n, rel=1e-14)
    assert w.parabolic_doubling == pytest.approx(4.0 * 2.0**spec.n, rel=1e-14)


def test_power_weight_a2_matches_brute_force():
    w = make_weight("power", SPEC1, exponent=0.5)
    assert a2_constant(w) == pytest.approx(_brute_force_a2_1d(w.values), rel=1e-12)


def test_a2_increases_with_power_exponent():
    values = []
    for a in (0.2, 0.5, 0.8):
        w = make_weight("power", SPEC1_SMALL, exponent=a)
        got = a2_constant(w)
        assert got == pytest.approx(_brute_force_a2_1d(w.values), rel=1e-12)
        values.append(got)
    assert values[0] < values[1] < values[2]


def test_doubling_matches_brute_force():
    w = make_weight("dyadic_random", SPEC1_SMALL, amplitude=0.8, seed=11)
    assert doubling_constant(w) == pytest.approx(
        _brute_force_doubling_1d(w.values), rel=1e-12
    )


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_a2_at_least_one(seed):
    # Cauchy-Schwarz: avg(w) avg(1/w) >= 1 on every cube
    rng = np.random.default_rng(seed)
    w = np.exp(rng.uniform(-1, 1, SPEC1_SMALL.nx))
    assert a2_constant(w) >= 1.0 - 1e-12


def test_power_weight_range_checks():
    make_weight("power", SPEC1_SMALL, exponent=0.9)
    with pytest.raises(ValueError):
        make_weight("power", SPEC1_SMALL, exponent=0.96)
    make_weight("power", SPEC2, exponent=1.5)
    with pytest.raises(ValueError):
        make_weight("power", SPEC2, exponent=-1.96)
    with pytest.raises(ValueError):
        make_weight("dyadic_random", SPEC1_SMALL, amplitude=1.6, seed=0)
    with pytest.raises(ValueError):
        make_weight("nonsense", SPEC1_SMALL)


def test_weight_must_be_positive():
    vals = np.ones(SPEC1_SMALL.nx)
    vals[3] = 0.0
    with pytest.raises(ValueError):
        Weight(SPEC1_SMALL, vals)


# ---------------------------------------------------------------- dyadic martingale


def test_dyadic_random_reproducible_and_bounded():
    spec = SPEC1
    w1 = make_weight("dyadic_random", spec, amplitude=0.7, seed=42)
    w2 = make_weight("dyadic_random", spec, amplitude=0.7, seed=42)
    np.testing.assert_array_equal(w1.values, w2.values)
    w3 = make_weight("dyadic_random", spec, amplitude=0.7, seed=43)
    assert not np.array_equal(w1.values, w3.values)
    log_w = np.log(w1.values)
    # increments cancel within every parent: exact zero total mass in log space
    assert abs(log_w.sum()) <= 1e-10
    # per-scale increments bounded by the amplitude
    assert np.max(np.abs(log_w)) <= 0.7 * spec.p + 1e-12


def test_dyadic_random_martingale_block_means():
    """Block means of log w at generation g only see the coarser increments."""
    spec = SPEC1
    amp = 0.9
    log_w = np.log(make_weight("dyadic_random", spec, amplitude=amp, seed=5).values)
    p = spec.p
    for g in range(1, p + 1):
        side = 2**g
        means = log_w.reshape(spec.nx // side, side).mean(axis=1)
        assert np.max(np.abs(means)) <= (p - g) * amp + 1e-12


def test_dyadic_random_amplitude_zero_is_unit():
    w = make_weight("dyadic_random", SPEC1_SMALL, amplitude=0.0, seed=1)
    np.testing.assert_allclose(w.values, 1.0, atol=1e-15)


# ---------------------------------------------------------------- A-infinity sandwich


def _check_sandwich(w, eta, beta, rng, pairs=200):
    vals = w.values
    n, nx = vals.ndim, vals.shape[0]
    tiled = vals
    for ax in range(n):
        tiled = np.concatenate([tiled, tiled], axis=ax)
    for _ in range(pairs):
        s = int(rng.integers(1, nx + 1))
        corner = tuple(int(c) for c in rng.integers(0, nx, size=n))
        sl = tuple(slice(c, c + s) for c in corner)
        cells = tiled[sl].ravel()
        m = cells.size
        k = int(rng.integers(1, m + 1))
        subset = rng.choice(m, size=k, replace=False)
        r = k / m
        v = cells[subset].sum() / cells.sum()
        assert v <= beta * r ** (2 * eta) * (1 + 1e-12)
        assert v >= r ** (1 / (2 * eta)) / beta * (1 - 1e-12)


@pytest.mark.parametrize(
    "kind,params,spec",
    [
        ("power", {"exponent": 0.5}, SPEC1),
        ("dyadic_random", {"amplitude": 1.0, "seed": 9}, SPEC1),
        ("dyadic_random", {"amplitude": 0.8, "seed": 3}, SPEC2),
    ],
)
def test_ainf_sandwich_holds_on_random_pairs(kind, params, spec):
    w = make_weight(kind, spec, **params)
    eta, beta = w.ainf
    assert 0 < eta < 1 and beta >= 1
    _check_sandwich(w, eta, beta, np.random.default_rng(17))


def test_unit_weight_ainf_trivial():
    eta, beta = make_weight("unit", SPEC1_SMALL).ainf
    # v = r exactly: eta = 1/2 is feasible with beta = 1 (up to the margin)
    assert eta == pytest.approx(0.5, abs=0.01)
    assert beta <= 1.3


def test_doubling_consistent_with_ainf():
    """Q inside 2Q in the lower sandwich forces D <= beta 2^(n/(2 eta))."""
    for kind, params, spec in [
        ("power", {"exponent": 0.6}, SPEC1_SMALL),
        ("dyadic_random", {"amplitude": 1.2, "seed": 21}, SPEC1_SMALL),
    ]:
        w = make_weight(kind, spec, **params)
        eta, beta = w.ainf
        assert w.doubling <= beta * 2 ** (spec.n / (2 * eta)) + 1e-9


# ---------------------------------------------------------------- serialization


def test_csv_round_trip(tmp_path):
    w = make_weight("dyadic_random", SPEC1_SMALL, amplitude=0.9, seed=2)
    path = tmp_path / "w.csv"
    w.save_csv(path)
    back = Weight.load_csv(SPEC1_SMALL, path)
    np.testing.assert_array_equal(back.values, w.values)


def test_csv_header_and_length_validation(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("idx,val\n0,1.0\n")
    with pytest.raises(ValueError):
        Weight.load_csv(SPEC1_SMALL, path)
    path.write_text("index,value\n0,1.0\n1,2.0\n")
    with pytest.raises(ValueError):
        Weight.load_csv(SPEC1_SMALL, path)
