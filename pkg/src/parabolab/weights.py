"""Spatial Muckenhoupt weights and their measured constants.

A weight is a positive function of space alone; the space-time measure is
mu = w(x) dx dt.  Everything here is measured, not assumed: the A2 constant
is an exact supremum over all discrete periodic cubes, the doubling constant
an exact supremum of w(2Q)/w(Q), and the A-infinity sandwich parameters
(eta, beta) are fitted from extremal subsets so that

    beta^-1 (|E|/|Q|)^(1/(2 eta)) <= w(E)/w(Q) <= beta (|E|/|Q|)^(2 eta)

holds for every sampled pair E subset of Q.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec

__all__ = ["Weight", "a2_constant", "doubling_constant", "make_weight"]


# ---------------------------------------------------------------- box sums


class _BoxSums:
    """O(1) sums of a spatial array over periodic boxes via a tiled integral image."""

    def __init__(self, values: np.ndarray):
        self.n = values.ndim
        self.nx = values.shape[0]
        tiled = values
        for ax in range(self.n):
            tiled = np.concatenate([tiled, tiled], axis=ax)
        img = tiled
        for ax in range(self.n):
            img = np.cumsum(img, axis=ax)
        pad = np.zeros(tuple(s + 1 for s in img.shape))
        pad[(slice(1, None),) * self.n] = img
        self._img = pad

    def side_sums(self, s: int) -> np.ndarray:
        """Sums over all cubes of side s cells, indexed by corner."""
        if not 1 <= s <= self.nx:
            raise ValueError(f"side {s} out of range")
        img = self._img
        nx = self.nx
        if self.n == 1:
            return img[s : s + nx] - img[0:nx]
        a = img[s : s + nx, s : s + nx]
        b = img[s : s + nx, 0:nx]
        c = img[0:nx, s : s + nx]
        d = img[0:nx, 0:nx]
        return a - b - c + d


def _cube_corner_iter(nx: int, n: int):
    if n == 1:
        for i in range(nx):
            yield (i,)
    else:
        for i in range(nx):
            for j in range(nx):
                yield (i, j)


# ---------------------------------------------------------------- constants


def a2_constant(weight) -> float:
    """Exact sup over all discrete periodic cubes of avg(w) * avg(1/w)."""
    w = np.asarray(_weight_values(weight), dtype=float)
    n, nx = w.ndim, w.shape[0]
    sums_w = _BoxSums(w)
    sums_inv = _BoxSums(1.0 / w)
    best = 0.0
    for s in range(1, nx + 1):
        count = float(s**n)
        prod = (sums_w.side_sums(s) / count) * (sums_inv.side_sums(s) / count)
        best = max(best, float(prod.max()))
    return best


def doubling_constant(weight) -> float:
    """Exact sup of w(2Q)/w(Q); 2Q shares Q's center, side clamped to the torus."""
    w = np.asarray(_weight_values(weight), dtype=float)
    n, nx = w.ndim, w.shape[0]
    sums = _BoxSums(w)
    best = 0.0
    for s in range(1, nx + 1):
        s2 = min(2 * s, nx)
        shift = s // 2
        big = sums.side_sums(s2)
        # re-index the doubled cube by the original corner c: corner of 2Q is c - shift
        big = np.roll(big, shift, axis=tuple(range(n)))
        ratio = big / sums.side_sums(s)
        best = max(best, float(ratio.max()))
    return best


def _extremal_constraints(w: np.ndarray, cubes: list[tuple[tuple[int, ...], int]]):
    """For each cube and subset size k, extreme values of w(E)/w(Q).

    The k cells of largest (smallest) weight maximize (minimize) w(E) over
    all subsets E of size k, so any random subset obeys the fitted sandwich
    on these cubes automatically.  Returns arrays (log r, log v_min, log v_max).
    """
    n, nx = w.ndim, w.shape[0]
    tiled = w
    for ax in range(n):
        tiled = np.concatenate([tiled, tiled], axis=ax)
    log_r, log_vmin, log_vmax = [], [], []
    for corner, s in cubes:
        sl = tuple(slice(c, c + s) for c in corner)
        cells = np.sort(tiled[sl].ravel())
        total = cells.sum()
        pref = np.cumsum(cells)
        m = cells.size
        if m == 1:
            continue
        ks = np.arange(1, m)
        vmin = pref[:-1] / total
        # sum of the k largest cells = total - sum of the (m-k) smallest
        vmax = (total - pref[m - 1 - ks]) / total
        log_r.append(np.log(ks / m))
        log_vmin.append(np.log(vmin))
        log_vmax.append(np.log(vmax))
    return (np.concatenate(log_r), np.concatenate(log_vmin), np.concatenate(log_vmax))


def ainf_parameters(weight, rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Fit (eta, beta) for the A-infinity sandwich from extremal subsets.

    All cubes are used in dimension one; in dimension two, all dyadic cubes
    plus 1000 random cubes.  beta carries a 1.25x margin on top of the
    minimal feasible value at the best eta.
    """
    w = np.asarray(_weight_values(weight), dtype=float)
    n, nx = w.ndim, w.shape[0]
    cubes: list[tuple[tuple[int, ...], int]] = []
    if n == 1:
        for s in range(1, nx + 1):
            for c in range(nx):
                cubes.append(((c,), s))
    else:
        s = 1
        while s <= nx:
            for corner in _cube_corner_iter(nx // s, 2):
                cubes.append(((corner[0] * s, corner[1] * s), s))
            s *= 2
        rng = rng or np.random.default_rng(0)
        for _ in range(1000):
            s = int(rng.integers(1, nx + 1))
            corner = tuple(int(c) for c in rng.integers(0, nx, size=2))
            cubes.append((corner, s))
    log_r, log_vmin, log_vmax = _extremal_constraints(w, cubes)
    etas = np.linspace(0.05, 0.95, 181)
    # beta feasibility: log vmax <= log beta + 2 eta log r  and
    #                   log vmin >= -log beta + log r / (2 eta)
    needs = np.array(
        [
            max(
                0.0,
                float(np.max(log_vmax - 2.0 * eta * log_r)),
                float(np.max(log_r / (2.0 * eta) - log_vmin)),
            )
            for eta in etas
        ]
    )
    best_logb = float(needs.min())
    # ties broken toward the largest feasible eta (unit weight fits eta = 1/2)
    best_eta = float(etas[needs <= best_logb + 1e-9][-1])
    return best_eta, float(np.exp(best_logb) * 1.25)


# ---------------------------------------------------------------- weight type


@dataclass
class Weight:
    """Positive spatial weight with lazily measured constants."""

    spec: GridSpec
    values: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.spec.nx,) * self.spec.n
        if self.values.shape != expected:
            raise ValueError(f"weight shape {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ValueError("weight must be positive and finite")

    @property
    def a2(self) -> float:
        if "a2" not in self._cache:
            self._cache["a2"] = a2_constant(self.values)
        return self._cache["a2"]

    @property
    def doubling(self) -> float:
        if "doubling" not in self._cache:
            self._cache["doubling"] = doubling_constant(self.values)
        return self._cache["doubling"]

    @property
    def parabolic_doubling(self) -> float:
        # doubling a parabolic cube doubles the spatial side and quadruples time
        return 4.0 * self.doubling

    @property
    def ainf(self) -> tuple[float, float]:
        if "ainf" not in self._cache:
            self._cache["ainf"] = ainf_parameters(self.values)
        return self._cache["ainf"]

    def mass(self) -> float:
        """Total mu mass of the space-time torus."""
        return float(self.values.sum() * self.spec.cell_volume * self.spec.nt)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "value"])
            for i, v in enumerate(self.values.ravel()):
                writer.writerow([i, repr(float(v))])

    @classmethod
    def load_csv(cls, spec: GridSpec, path) -> "Weight":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if [h.strip() for h in header] != ["index", "value"]:
                raise ValueError(f"unexpected weight CSV header: {header}")
            rows = [(int(i), float(v)) for i, v in reader]
        rows.sort()
        expected = spec.nx**spec.n
        if [i for i, _ in rows] != list(range(expected)):
            raise ValueError("weight CSV indices do not enumerate the grid")
        vals = np.array([v for _, v in rows]).reshape((spec.nx,) * spec.n)
        return cls(spec, vals)


# ---------------------------------------------------------------- constructors


def _periodic_radius(spec: GridSpec) -> np.ndarray:
    axes = []
    for _ in range(spec.n):
        x = spec.x_nodes()
        axes.append(np.minimum(x, spec.lx - x))
    if spec.n == 1:
        return axes[0]
    return np.sqrt(axes[0][:, None] ** 2 + axes[1][None, :] ** 2)


def _dyadic_random_values(spec: GridSpec, amplitude: float, seed: int) -> np.ndarray:
    """exp of a dyadic martingale: per-parent +/-delta sign patterns, delta <= amplitude."""
    rng = np.random.default_rng(np.random.Philox(key=seed))
    n, nx = spec.n, spec.nx
    log_w = np.zeros((nx,) * n)
    children = 2**n
    half = children // 2
    side = nx
    while side > 1:
        parent_side = side
        side //= 2
        blocks = nx // parent_side
        for corner in _cube_corner_iter(blocks, n):
            delta = amplitude * rng.uniform()
            signs = np.array([delta] * half + [-delta] * half)
            rng.shuffle(signs)
            base = tuple(c * parent_side for c in corner)
            for idx in range(children):
                offs = [(idx >> b) & 1 for b in range(n)]
                sl = tuple(
                    slice(base[d] + offs[d] * side, base[d] + offs[d] * side + side)
                    for d in range(n)
                )
                log_w[sl] += signs[idx]
    return np.exp(log_w)


def make_weight(kind: str, spec: GridSpec, **params) -> Weight:
    """Construct a named weight: ``unit``, ``power`` or ``dyadic_random``.

    power: w(x) = max(dist(x, 0), hx)^a with the periodic distance, where a
    must stay strictly inside the A2 range (-n, n) with a 0.05 margin.
    dyadic_random: exp of a random dyadic martingale with per-scale
    increments bounded by ``amplitude`` in [0, 1.5].
    """
    if kind == "unit":
        return Weight(spec, np.ones((spec.nx,) * spec.n))
    if kind == "power":
        a = float(params["exponent"])
        limit = spec.n - 0.05
        if not -limit <= a <= limit:
            raise ValueError(f"power exponent {a} outside A2 range (+-{limit})")
        r = np.maximum(_periodic_radius(spec), spec.hx)
        return Weight(spec, r**a)
    if kind == "dyadic_random":
        amplitude = float(params["amplitude"])
        if not 0.0 <= amplitude <= 1.5:
            raise ValueError(f"amplitude {amplitude} outside [0, 1.5]")
        seed = int(params["seed"])
        return Weight(spec, _dyadic_random_values(spec, amplitude, seed))
    raise ValueError(f"unknown weight kind {kind!r}")


def _weight_values(weight) -> np.ndarray:
    return weight.values if hasattr(weight, "values") else np.asarray(weight)
