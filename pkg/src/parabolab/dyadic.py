"""Parabolic dyadic cubes, averaging/maximal operators and Carleson sums.

A generation-j cube is 2^j cells wide per spatial axis and 4^j cells long
in time, anchored at the origin, so generations 0..min(p, r) tile the grid
exactly and a parent splits into 2^(n+2) children.  Cube data lives in
per-generation arrays indexed by the cube corner.

Carleson machinery: given nonnegative data a_D per cube, the Carleson norm
is sup_D (1/mu(D)) sum_{D' <= D} a_{D'}, computed bottom-up in one sweep.
The embedding sum  sum_D a_D |avg_D u|^2  is evaluated twice, directly and
through the layer-cake representation int_0^inf 2 r S(r) dr with
S(r) = sum_{|avg|>r} a_D; the two must agree to roundoff, and S(r) is
dominated by the Carleson norm times the measure of the maximal cubes
where the average exceeds r (a tree walk).
"""

from __future__ import annotations

import csv
import warnings

import numpy as np
from scipy import ndimage

from .grid import GridSpec, inner
from .weights import Weight

__all__ = [
    "cube_length",
    "cube_shape",
    "cube_slices",
    "cube_average_values",
    "cube_measures",
    "block_sum",
    "generation_for_scale",
    "average",
    "maximal",
    "carleson_norm",
    "carleson_embedding_check",
    "save_carleson_csv",
    "box_window",
    "box_average",
    "maximal_function",
    "stopping_partition",
    "validate_partition",
    "whitney_partition",
]


def cube_length(spec: GridSpec, j: int) -> float:
    """Parabolic side length of a generation-j cube (spatial width)."""
    return 2.0**j * spec.hx


def cube_shape(spec: GridSpec, j: int) -> tuple[int, ...]:
    """Index grid of generation-j cubes."""
    if not 0 <= j <= spec.max_generation:
        raise ValueError(f"generation {j} outside 0..{spec.max_generation}")
    return (spec.nx >> j,) * spec.n + (spec.nt >> (2 * j),)


def cube_slices(spec: GridSpec, j: int, idx: tuple[int, ...]) -> tuple[slice, ...]:
    """Cell slices of the cube with corner index ``idx`` at generation j."""
    sx, st = 1 << j, 1 << (2 * j)
    out = tuple(slice(i * sx, (i + 1) * sx) for i in idx[: spec.n])
    return out + (slice(idx[-1] * st, (idx[-1] + 1) * st),)


def block_sum(arr: np.ndarray, n: int, fx: int, ft: int) -> np.ndarray:
    """Sum over blocks of fx cells per spatial axis and ft in time."""
    shape = []
    for s in arr.shape[:n]:
        shape.extend([s // fx, fx])
    shape.extend([arr.shape[-1] // ft, ft])
    blocked = arr.reshape(shape)
    # the block axes sit at odd positions; collapse from the back
    for ax in range(2 * (n + 1) - 1, 0, -2):
        blocked = blocked.sum(axis=ax)
    return blocked


_block_sum = block_sum


def _mu_density(spec: GridSpec, weight: Weight | np.ndarray | None) -> np.ndarray:
    if weight is None:
        w = np.ones((spec.nx,) * spec.n)
    else:
        w = weight.values if isinstance(weight, Weight) else np.asarray(weight)
    return np.broadcast_to(w[..., None], spec.shape) * spec.cell_volume


def cube_measures(spec: GridSpec, weight, j: int) -> np.ndarray:
    """mu-measure of every generation-j cube."""
    cube_shape(spec, j)
    return _block_sum(_mu_density(spec, weight), spec.n, 1 << j, 1 << (2 * j))


def cube_average_values(
    values: np.ndarray, spec: GridSpec, j: int, weight=None
) -> np.ndarray:
    """mu-weighted average of a field over every generation-j cube."""
    cube_shape(spec, j)
    dens = _mu_density(spec, weight)
    num = _block_sum(np.asarray(values) * dens, spec.n, 1 << j, 1 << (2 * j))
    den = _block_sum(dens, spec.n, 1 << j, 1 << (2 * j))
    return num / den


def generation_for_scale(spec: GridSpec, lam: float) -> int:
    """Generation j whose cube length l satisfies l/2 < lam <= l.

    Scales below one cell snap to generation 0; scales above the largest
    cube are clamped with a warning.
    """
    if lam <= 0:
        raise ValueError("scale must be positive")
    j = int(np.ceil(np.log2(lam / spec.hx) - 1e-12))
    if j > spec.max_generation:
        warnings.warn(
            f"scale {lam:g} exceeds the largest dyadic cube "
            f"(length {cube_length(spec, spec.max_generation):g}); clamped",
            RuntimeWarning,
            stacklevel=2,
        )
        j = spec.max_generation
    return max(j, 0)


def _block_mean_axes(values: np.ndarray, blocks) -> np.ndarray:
    """Mean over cell blocks along given (axis, size) pairs, tiled back.

    Axes are reduced in the order given; block sizes are powers of two, so
    every division is exact and chaining calls over disjoint axis sets
    reproduces the joint mean bit for bit when the orders line up.
    """
    out = np.asarray(values)
    for ax, b in blocks:
        if b == 1:
            continue
        sh = out.shape
        out = out.reshape(sh[:ax] + (sh[ax] // b, b) + sh[ax + 1 :]).mean(axis=ax + 1)
        out = np.repeat(out, b, axis=ax)
    return out


def average(values: np.ndarray, spec: GridSpec, lam: float, axis: str = "both") -> np.ndarray:
    """Dyadic averaging at parabolic scale lam, unweighted (plain cell mean).

    ``axis`` picks the spatial factor, the time factor, or the full cube of
    the generation snapped by `generation_for_scale`.  The result is
    piecewise constant on that decomposition, hence idempotent, and the
    full average factors exactly through the two partial ones.
    """
    j = generation_for_scale(spec, lam)
    vals = np.asarray(values)
    fx, ft = 1 << j, 1 << (2 * j)
    if axis == "x":
        return _block_mean_axes(vals, [(ax, fx) for ax in range(spec.n - 1, -1, -1)])
    if axis == "t":
        return _block_mean_axes(vals, [(spec.n, ft)])
    if axis == "both":
        total = block_sum(vals, spec.n, fx, ft) / (fx**spec.n * ft)
        for ax in range(spec.n):
            total = np.repeat(total, fx, axis=ax)
        return np.repeat(total, ft, axis=-1)
    raise ValueError("axis must be 'x', 't' or 'both'")


def maximal(values: np.ndarray, spec: GridSpec, axis: str) -> np.ndarray:
    """Variable-wise maximal function: sup of centered unweighted averages.

    Windows run over every odd cell count along the chosen variable plus
    the full axis; spatial windows are cubes, the other variable is frozen.
    """
    if axis == "x":
        nax, size = spec.nx, lambda k: (k,) * spec.n + (1,)
    elif axis == "t":
        nax, size = spec.nt, lambda k: (1,) * spec.n + (k,)
    else:
        raise ValueError("axis must be 'x' or 't'")
    absf = np.abs(np.asarray(values)).astype(float)
    out = absf.copy()
    for k in list(range(3, nax, 2)) + [nax]:
        np.maximum(out, ndimage.uniform_filter(absf, size=size(k), mode="wrap"), out=out)
    return out


# ---------------------------------------------------------------- Carleson


def _normalize_data(data: dict[int, np.ndarray], spec: GridSpec) -> dict[int, np.ndarray]:
    out = {}
    for j, arr in data.items():
        arr = np.asarray(arr, dtype=float)
        if arr.shape != cube_shape(spec, j):
            raise ValueError(f"generation {j} data has shape {arr.shape} != {cube_shape(spec, j)}")
        if np.any(arr < 0):
            raise ValueError("Carleson data must be nonnegative")
        out[int(j)] = arr
    return out


def _box_masses(data: dict[int, np.ndarray], spec: GridSpec):
    """Yield (generation, cumulative box mass per cube) bottom-up."""
    top = max(data)
    acc = None
    for j in range(top + 1):
        layer = data.get(j)
        if acc is None:
            acc = None if layer is None else layer
        else:
            acc = _block_sum(acc, spec.n, 2, 4)
            if layer is not None:
                acc = acc + layer
        if acc is not None:
            yield j, acc


def carleson_norm(data: dict[int, np.ndarray], spec: GridSpec, weight=None) -> float:
    """sup over cubes of (sum of data over subcubes) / mu(cube)."""
    data = _normalize_data(data, spec)
    if not data:
        return 0.0
    best = 0.0
    for j, acc in _box_masses(data, spec):
        mu = cube_measures(spec, weight, j)
        best = max(best, float(np.max(acc / mu)))
    return best


def save_carleson_csv(path, data: dict[int, np.ndarray], spec: GridSpec, weight=None) -> None:
    """Write the per-cube Carleson profile: cumulative box mass, mu, ratio."""
    data = _normalize_data(data, spec)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cube", "generation", "mass", "mu", "ratio"])
        if not data:
            return
        for j, acc in _box_masses(data, spec):
            mu = cube_measures(spec, weight, j)
            for i, (mass, m) in enumerate(zip(acc.ravel(), mu.ravel())):
                writer.writerow([i, j, repr(float(mass)), repr(float(m)), repr(float(mass / m))])


def _maximal_cube_measure(
    flags: dict[int, np.ndarray], spec: GridSpec, weight
) -> float:
    """Total mu-measure of the maximal flagged cubes (top-down tree walk)."""
    gens = sorted(flags)
    jmin, jmax = gens[0], gens[-1]
    covered = np.zeros(cube_shape(spec, jmax), dtype=bool)
    total = 0.0
    for j in range(jmax, jmin - 1, -1):
        if j in flags:
            sel = flags[j] & ~covered
            total += float(np.sum(cube_measures(spec, weight, j)[sel]))
            covered = covered | sel
        if j > jmin:
            for ax in range(spec.n):
                covered = np.repeat(covered, 2, axis=ax)
            covered = np.repeat(covered, 4, axis=-1)
    return total


def carleson_embedding_check(
    values: np.ndarray,
    data: dict[int, np.ndarray],
    spec: GridSpec,
    weight=None,
    n_thresholds: int = 12,
) -> dict:
    """Embedding sum by two routes plus the maximal-cube domination.

    Returns the direct sum, the layer-cake value (must agree to roundoff),
    the measured embedding constant  sum / (carleson_norm * ||u||^2_mu),
    and the worst slack of S(r) <= norm * mu(maximal cubes with avg > r).
    """
    data = _normalize_data(data, spec)
    w = weight.values if isinstance(weight, Weight) else weight
    avgs = {j: cube_average_values(values, spec, j, weight=w) for j in data}
    direct = 0.0
    pairs_v, pairs_a = [], []
    for j in sorted(data):
        a, v = data[j], np.abs(avgs[j])
        direct += float(np.sum(a * v**2))
        pairs_v.append(v.ravel())
        pairs_a.append(a.ravel())
    v = np.concatenate(pairs_v)
    a = np.concatenate(pairs_a)
    order = np.argsort(v)[::-1]
    v_sorted, a_sorted = v[order], a[order]
    # int_0^inf 2 r S(r) dr with S piecewise constant between sorted levels:
    # sum_i cumA_i (v_i^2 - v_{i+1}^2), v_{K+1} = 0
    cum = np.cumsum(a_sorted)
    v_next = np.concatenate([v_sorted[1:], [0.0]])
    layercake = float(np.sum(cum * (v_sorted**2 - v_next**2)))
    norm_a = carleson_norm(data, spec, weight)
    unorm2 = float(inner(values, values, weight=w, spec=spec).real)
    constant = direct / (norm_a * unorm2) if norm_a > 0 and unorm2 > 0 else 0.0
    # maximal-cube domination of the survival function at sampled levels
    worst_slack = -np.inf
    positive = v_sorted[v_sorted > 0]
    if positive.size and norm_a > 0:
        qs = np.linspace(0.05, 0.95, n_thresholds)
        for r in np.quantile(positive, qs):
            s_r = float(np.sum(a[v > r]))
            flags = {j: np.abs(avgs[j]) > r for j in data}
            dominated = norm_a * _maximal_cube_measure(flags, spec, weight)
            worst_slack = max(worst_slack, s_r - dominated)
    gap = abs(direct - layercake) / max(abs(direct), 1e-300)
    return {
        "direct": direct,
        "layercake": layercake,
        "gap": gap,
        "carleson_norm": norm_a,
        "constant": constant,
        "majorant_slack": worst_slack,
    }


# ---------------------------------------------------------------- averaging


def box_window(spec: GridSpec, lam: float) -> tuple[tuple[int, ...], bool]:
    """Odd cell window of the parabolic box of scale lam; clamps to the torus."""
    if lam <= 0:
        raise ValueError("scale must be positive")
    rx = int(np.floor(lam / spec.hx))
    rt = int(np.floor(lam**2 / spec.ht))
    size_x = min(2 * rx + 1, spec.nx)
    size_t = min(2 * rt + 1, spec.nt)
    clamped = (2 * rx + 1 > spec.nx) or (2 * rt + 1 > spec.nt)
    return (size_x,) * spec.n + (size_t,), clamped


def box_average(values: np.ndarray, spec: GridSpec, lam: float, weight=None) -> np.ndarray:
    """mu-weighted moving average over the parabolic box of scale lam."""
    size, _ = box_window(spec, lam)
    dens = _mu_density(spec, weight)
    vals = np.asarray(values)

    def filt(arr):
        return ndimage.uniform_filter(arr, size=size, mode="wrap")

    if np.iscomplexobj(vals):
        num = filt((vals * dens).real) + 1j * filt((vals * dens).imag)
    else:
        num = filt(vals * dens)
    return num / filt(dens)


def maximal_function(
    values: np.ndarray, spec: GridSpec, weight=None, scales=None
) -> np.ndarray:
    """Dyadic-scale maximal function sup_lam avg_box(|f|)."""
    if scales is None:
        scales = [cube_length(spec, j) for j in range(spec.max_generation + 1)]
    absf = np.abs(np.asarray(values))
    out = np.zeros(spec.shape)
    for lam in scales:
        np.maximum(out, box_average(absf, spec, lam, weight=weight), out=out)
    return out


# ---------------------------------------------------------------- stopping


def _children(j: int, idx: tuple[int, ...], n: int):
    base = tuple(2 * i for i in idx[:n])
    tbase = 4 * idx[-1]
    for off in range(2**n):
        sp = tuple(base[i] + ((off >> i) & 1) for i in range(n))
        for dt in range(4):
            yield j - 1, sp + (tbase + dt,)


def stopping_partition(spec: GridSpec, top: tuple[int, tuple[int, ...]], should_stop) -> tuple[list, int]:
    """Maximal subcubes where ``should_stop(j, idx)`` first becomes true.

    Descends from the top cube; cubes reaching generation 0 without a stop
    are included anyway and counted in ``forced``.  The result partitions
    the top cube exactly.
    """
    j_top, idx_top = top
    cube_shape(spec, j_top)
    out: list[tuple[int, tuple[int, ...]]] = []
    forced = 0
    stack = [(j_top, tuple(idx_top))]
    while stack:
        j, idx = stack.pop()
        if should_stop(j, idx):
            out.append((j, idx))
        elif j == 0:
            out.append((j, idx))
            forced += 1
        else:
            stack.extend(_children(j, idx, spec.n))
    return out, forced


def validate_partition(spec: GridSpec, top: tuple[int, tuple[int, ...]], cubes) -> None:
    """Check that the cubes tile the top cube exactly (disjoint, covering)."""
    j_top, idx_top = top
    paint = np.zeros(spec.shape, dtype=np.int64)
    for j, idx in cubes:
        paint[cube_slices(spec, j, idx)] += 1
    inside = np.zeros(spec.shape, dtype=bool)
    inside[cube_slices(spec, j_top, tuple(idx_top))] = True
    if np.any(paint[inside] != 1):
        raise ValueError("cubes overlap or miss cells inside the top cube")
    if np.any(paint[~inside] != 0):
        raise ValueError("cubes leak outside the top cube")


def _ancestor(j: int, idx: tuple[int, ...], up: int, n: int) -> tuple[int, ...]:
    return tuple(i >> up for i in idx[:n]) + (idx[-1] >> (2 * up),)


def whitney_partition(spec: GridSpec, top, stopped) -> tuple[list, list]:
    """Split a Carleson box along a stopping antichain.

    The box of the top cube, all scales up to its length, decomposes into
    the whole boxes of the stopped cubes plus one Whitney shell (l/2, l]
    for every subcube not below a stopped one.  Returns the two cube lists
    (carleson, whitney).
    """
    j_top, idx_top = int(top[0]), tuple(top[1])
    cube_shape(spec, j_top)
    stopped_set = set()
    for j, idx in stopped:
        j, idx = int(j), tuple(idx)
        if not 0 <= j <= j_top or _ancestor(j, idx, j_top - j, spec.n) != idx_top:
            raise ValueError(f"stopped cube {(j, idx)} is not a subcube of the top cube")
        stopped_set.add((j, idx))
    for j, idx in stopped_set:
        for up in range(1, j_top - j + 1):
            if (j + up, _ancestor(j, idx, up, spec.n)) in stopped_set:
                raise ValueError("stopped cubes must form an antichain")
    whitney = []
    stack = [(j_top, idx_top)]
    while stack:
        j, idx = stack.pop()
        if (j, idx) in stopped_set:
            continue
        whitney.append((j, idx))
        if j > 0:
            stack.extend(_children(j, idx, spec.n))
    return sorted(stopped_set), whitney
