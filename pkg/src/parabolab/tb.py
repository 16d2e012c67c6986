"""Principal part field, adapted test functions and the stopping-time argument.

The square-root estimate reduces to a Carleson bound for the measure
|gamma_lam|^2 dmu dlam/lam, where gamma_lam collects the action of
U_lam = lam E_lam w^-1 div_x(w .) on the renormalized coefficient columns
and E_lam = (1 + lam^2 H)^-1 is the resolvent.  This module builds that
field, decomposes its values over a finite family of cones in C^n,
constructs for every dyadic cube and unit direction zeta a test function
f = E_{eps l} L whose spatial gradient equals conj(zeta) exactly on the
cube, runs the stopping-time decomposition that isolates the region where
the field pairs well with that gradient, and assembles the square-function
bound piece by piece.  Everything is measured and reported as a ratio
against the quantity that is supposed to dominate it; the tests pin the
tolerances.

Supporting estimates that feed the main bound live here too: the error of
replacing the coefficient action by the principal part times a dyadic
average (`r_lambda`), the weighted annulus Poincare inequality behind it
(`poincare_ratio`), and the L^2 bound for the principal part against a
bounded vector field (`principal_average_ratio`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calculus import LambdaQuadrature
from .dyadic import (
    _children,
    _mu_density,
    average,
    block_sum,
    carleson_norm,
    cube_length,
    cube_measures,
    cube_shape,
    cube_slices,
    generation_for_scale,
    save_carleson_csv,
    whitney_partition,
)
from .grid import (
    GridFunction,
    GridSpec,
    VectorField,
    _dhalf_symbol,
    _dt_symbol,
    _grad_values,
    _hilbert_symbol,
    _time_multiplier_values,
    _wdiv_values,
)
from .lp import conv_p
from .weights import Weight, ainf_parameters

__all__ = [
    "u_lambda",
    "PrincipalPartField",
    "principal_part_field",
    "r_lambda",
    "principal_average_ratio",
    "dilate_mask",
    "PoincareResult",
    "poincare_ratio",
    "quantize_direction",
    "Cone",
    "ConeSet",
    "TestFunction",
    "build_test_function",
    "STOP_RE_THRESHOLD",
    "stop_size_threshold",
    "StoppingResult",
    "stopping_time",
    "step1_report",
    "admissible_generations",
    "tb_quadrature",
    "calibrate_aperture",
    "principal_carleson",
    "carleson_main",
]


# ---------------------------------------------------------------- U_lambda


def _field_values(f, spec: GridSpec) -> np.ndarray:
    vals = f.values if hasattr(f, "values") else np.asarray(f, dtype=np.complex128)
    vals = np.asarray(vals, dtype=np.complex128)
    if vals.ndim == 0:
        vals = np.broadcast_to(vals, (spec.n,) + spec.shape).copy()
    if vals.shape[0] != spec.n or vals.shape[-(spec.n + 1):] != spec.shape:
        raise ValueError(f"expected a vector field (n, ..., {spec.shape}), got {vals.shape}")
    return vals


def _u_values(op, lam: float, values: np.ndarray) -> np.ndarray:
    div = _wdiv_values(values, op.weight.values, op.spec)
    return lam * op.solver(lam).solve(div)


def u_lambda(op, lam: float, field):
    """Apply U_lam = lam E_lam w^-1 div_x(w .) to a vector field.

    On the torus the expanding-cube truncations of the field stabilize as
    soon as the cube covers the domain, so U_lam acts directly.  Accepts a
    VectorField or an (n, ..., *shape) array with extra batch axes between
    the component axis and the grid; returns a GridFunction for a single
    field and a raw array otherwise.
    """
    if lam <= 0:
        raise ValueError("scale must be positive")
    vals = _field_values(field, op.spec)
    out = _u_values(op, lam, vals)
    if out.shape == op.spec.shape:
        return GridFunction(op.spec, out)
    return out


def _winv_a_columns(op) -> np.ndarray:
    """cols[i, j] = (w^-1 A)_ij over the grid, component axis first."""
    a = np.moveaxis(op.coeff.values, (-2, -1), (0, 1))
    return np.ascontiguousarray(a / op.weight.values[..., None])


@dataclass(frozen=True)
class PrincipalPartField:
    """(U_lam w^-1 A) columnwise: component j is U_lam of the j-th column."""

    spec: GridSpec
    lam: float
    values: np.ndarray  # (n, *shape), complex

    def dot_average(self, field_values: np.ndarray, spec: GridSpec) -> np.ndarray:
        """(U_lam w^-1 A) . A_lam f for a vector field f: sum_j U_j avg(f_j)."""
        acc = self.values[0] * average(field_values[0], spec, self.lam)
        for j in range(1, spec.n):
            acc = acc + self.values[j] * average(field_values[j], spec, self.lam)
        return acc


def principal_part_field(op, lam: float) -> PrincipalPartField:
    """Build (U_lam w^-1 A): one batched divergence + resolvent solve."""
    if lam <= 0:
        raise ValueError("scale must be positive")
    cols = _winv_a_columns(op)
    return PrincipalPartField(op.spec, float(lam), _u_values(op, lam, cols))


def _ppf_values(op, lam, ppf) -> np.ndarray:
    if ppf is None:
        return principal_part_field(op, lam).values
    return ppf.values if isinstance(ppf, PrincipalPartField) else np.asarray(ppf)


def r_lambda(op, lam: float, f, ppf=None):
    """R_lam f = U_lam(w^-1 A f) - (U_lam w^-1 A) . A_lam f.

    Constants are annihilated: dyadic averaging reproduces them and the two
    routes coincide (bitwise for n = 1, where both flow through identical
    arrays).  ``ppf`` may carry a precomputed principal part field.  Scalar
    input is broadcast to a constant vector field.
    """
    spec = op.spec
    vals = _field_values(f, spec)
    if vals.shape != (spec.n,) + spec.shape:
        raise ValueError("r_lambda takes a single vector field, not a batch")
    cols = _winv_a_columns(op)
    af = np.empty_like(vals)
    for i in range(spec.n):
        acc = cols[i, 0] * vals[0]
        for j in range(1, spec.n):
            acc = acc + cols[i, j] * vals[j]
        af[i] = acc
    out = _u_values(op, lam, af)
    pv = _ppf_values(op, lam, ppf)
    for j in range(spec.n):
        out = out - pv[j] * average(vals[j], spec, lam)
    if isinstance(f, VectorField):
        return GridFunction(spec, out)
    return out


def principal_average_ratio(op, lam: float, b, f) -> float:
    """Measured constant in ||(U_lam b) A_lam f||_mu <= c ||b||_inf ||f||_mu.

    ``b`` is a bounded vector field, ``f`` a scalar field; ||b||_inf is the
    sup of the pointwise Euclidean norm.
    """
    spec = op.spec
    bv = _field_values(b, spec)
    fv = f.values if hasattr(f, "values") else np.asarray(f, dtype=np.complex128)
    dens = _mu_density(spec, op.weight.values)
    ub = _u_values(op, lam, bv)
    prod = ub * average(fv, spec, lam)
    num = np.sqrt(float(np.sum(np.abs(prod) ** 2 * dens)))
    binf = float(np.max(np.sqrt(np.sum(np.abs(bv) ** 2, axis=0))))
    fn = np.sqrt(float(np.sum(np.abs(fv) ** 2 * dens)))
    if binf == 0.0 or fn == 0.0:
        return 0.0
    return num / (binf * fn)


# ---------------------------------------------------------------- Poincare


def dilate_mask(spec: GridSpec, cube, factor: int):
    """Cell mask of the parabolic dilate cQ x c^2 I of a dyadic cube.

    Dilates are clamped to the torus (no wrap) and the clamping is flagged;
    the corner convention matches the doubled-cube one (shift by half the
    added width, floored).
    """
    j, idx = int(cube[0]), tuple(cube[1])
    factor = int(factor)
    if factor < 1:
        raise ValueError("dilation factor must be >= 1")
    sx, st = 1 << j, 1 << (2 * j)
    mask = np.ones(spec.shape, dtype=bool)
    clamped = False

    def _axis(npts, start, size, fac):
        want = fac * size
        lo = start - ((fac - 1) * size) // 2
        hi = lo + want
        cl = lo < 0 or hi > npts
        lo, hi = max(lo, 0), min(hi, npts)
        sel = np.zeros(npts, dtype=bool)
        sel[lo:hi] = True
        return sel, cl

    for ax in range(spec.n):
        sel, cl = _axis(spec.nx, idx[ax] * sx, sx, factor)
        clamped |= cl
        shape = [1] * (spec.n + 1)
        shape[ax] = spec.nx
        mask &= sel.reshape(shape)
    sel, cl = _axis(spec.nt, idx[-1] * st, st, factor * factor)
    clamped |= cl
    mask &= sel.reshape((1,) * spec.n + (spec.nt,))
    return mask, clamped


@dataclass(frozen=True)
class PoincareResult:
    ratio: float
    lhs: float
    rhs: float
    clamped: bool


def poincare_ratio(f, cube, k: int, weight=None, spec: GridSpec | None = None) -> PoincareResult:
    """Measured constant of the annulus Poincare inequality.

    lhs = int_{C_k} |f - (f)_D|^2 dmu with (f)_D the unweighted cell mean
    over the cube; C_0 is the double 2D and C_k = 2^{k+1}D minus 2^k D for
    k >= 1.  rhs = (k+1) int_{2^{k+1}D} (4^k l^2 |grad f|^2
    + 16^k l^4 |d_t f|^2) dmu.  Annuli that overflow the torus are clamped
    and the result is flagged.
    """
    if spec is None:
        spec = f.spec
    vals = f.values if hasattr(f, "values") else np.asarray(f, dtype=np.complex128)
    if k < 0:
        raise ValueError("annulus index must be >= 0")
    j, idx = int(cube[0]), tuple(cube[1])
    ell = cube_length(spec, j)
    wv = weight.values if isinstance(weight, Weight) else weight
    dens = _mu_density(spec, wv)
    outer, cl_out = dilate_mask(spec, cube, 1 << (k + 1))
    if k == 0:
        ann, clamped = outer, cl_out
    else:
        inner_m, cl_in = dilate_mask(spec, cube, 1 << k)
        ann, clamped = outer & ~inner_m, cl_out or cl_in
    fbar = vals[cube_slices(spec, j, idx)].mean()
    lhs = float(np.sum(np.abs(vals - fbar)[ann] ** 2 * dens[ann]))
    g = _grad_values(vals, spec)
    e2 = np.sum(np.abs(g) ** 2, axis=0)
    dt = _time_multiplier_values(vals, _dt_symbol(spec))
    integrand = 4.0**k * ell**2 * e2 + 16.0**k * ell**4 * np.abs(dt) ** 2
    rhs = (k + 1) * float(np.sum(integrand[outer] * dens[outer]))
    ratio = lhs / rhs if rhs > 0 else 0.0
    return PoincareResult(ratio, lhs, rhs, clamped)


# ---------------------------------------------------------------- cones

_DIRECTION_BITS = 36


def quantize_direction(z) -> np.ndarray:
    """Snap Re/Im of a direction to the 2^-36 lattice.

    Test functions multiply integer half-cell displacements by the
    direction components; on this lattice those products and their n-term
    sums are exact floats (power-of-two periods), so forward differences on
    the cube recover conj(zeta) bit for bit.  The snap moves a unit vector
    by less than 2^-35, far below every aperture in use, and is idempotent.
    """
    z = np.asarray(z, dtype=np.complex128)
    s = 2.0**_DIRECTION_BITS
    return (np.round(z.real * s) + 1j * np.round(z.imag * s)) / s


@dataclass(frozen=True)
class Cone:
    """{u : |u - (u.conj(zeta)) zeta| <= eps |u.conj(zeta)|}."""

    zeta: np.ndarray  # (n,) complex unit direction (quantized)
    eps: float

    def contains(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.complex128)
        z = self.zeta.reshape((-1,) + (1,) * (u.ndim - 1))
        p = np.sum(np.conj(z) * u, axis=0)
        res = np.sqrt(np.sum(np.abs(u - z * p) ** 2, axis=0))
        return res <= self.eps * np.abs(p)


def _projective_directions(n: int, eps: float) -> np.ndarray:
    """Directions sampling the complex projective line within cap radius.

    A cone of aperture eps covers the cap of angular radius 2 arctan(eps)
    around its direction on the Bloch sphere; a ring grid with spacing
    R/sqrt(2) then covers the whole sphere.  Real-direction grids cannot
    cover C^2 (the membership test only sees the complex line of zeta), so
    the grid lives on the sphere of complex lines.  n = 1 has a single line.
    """
    if n == 1:
        return np.ones((1, 1), dtype=np.complex128)
    if n != 2:
        raise ValueError("direction grids are implemented for n in {1, 2}")
    cap = 2.0 * np.arctan(eps)
    h = cap / np.sqrt(2.0)
    rings = max(1, int(np.ceil(np.pi / h)))
    dirs = []
    for i in range(rings):
        theta = (i + 0.5) * np.pi / rings
        m = max(1, int(np.ceil(2.0 * np.pi * np.sin(theta) / h)))
        for kk in range(m):
            phi = 2.0 * np.pi * kk / m
            dirs.append([np.cos(theta / 2.0), np.exp(1j * phi) * np.sin(theta / 2.0)])
    return quantize_direction(np.asarray(dirs, dtype=np.complex128))


class ConeSet:
    """A finite covering family of cones: direction grid x phase sectors.

    Cone d * phases + k points along exp(2 pi i k / phases) * direction_d.
    ``assign`` labels every vector with one cone: by best-aligned direction
    and the phase sector of the pairing (mode "phase"), or by the first
    cone whose membership test accepts it, falling back to the best-aligned
    direction so no mass is dropped (mode "literal").  Zero vectors get -1.
    """

    def __init__(self, directions, eps: float, phases: int = 8, mode: str = "phase"):
        if mode not in ("phase", "literal"):
            raise ValueError("mode must be 'phase' or 'literal'")
        self.directions = quantize_direction(np.atleast_2d(np.asarray(directions, np.complex128)))
        self.eps = float(eps)
        self.phases = int(phases)
        self.mode = mode
        turns = np.exp(2j * np.pi * np.arange(self.phases) / self.phases)
        self.cones = [
            Cone(quantize_direction(t * v), self.eps) for v in self.directions for t in turns
        ]

    @classmethod
    def build(cls, n: int, eps: float, phases: int = 8, mode: str = "phase") -> "ConeSet":
        return cls(_projective_directions(n, eps), eps, phases=phases, mode=mode)

    @property
    def n_directions(self) -> int:
        return len(self.directions)

    def __len__(self) -> int:
        return len(self.cones)

    def assign(self, u, mode: str | None = None) -> np.ndarray:
        """Cone index per grid point for a vector field u (n, ...)."""
        mode = self.mode if mode is None else mode
        u = np.asarray(u, dtype=np.complex128)
        dots = np.tensordot(np.conj(self.directions), u, axes=(1, 0))  # (M, ...)
        best = np.argmax(np.abs(dots), axis=0)
        p = np.take_along_axis(dots, best[None], axis=0)[0]
        width = 2.0 * np.pi / self.phases
        sector = np.floor((np.angle(p) + width / 2.0) / width).astype(np.int64) % self.phases
        nearest = best * self.phases + sector
        absu = np.sqrt(np.sum(np.abs(u) ** 2, axis=0))
        out = np.where(absu > 0, nearest, -1)
        if mode == "phase":
            return out
        taken = absu <= 0
        lit = np.full(out.shape, -1, dtype=np.int64)
        for ci, cone in enumerate(self.cones):
            hit = ~taken & cone.contains(u)
            lit[hit] = ci
            taken |= hit
        lit[~taken] = nearest[~taken]
        return lit

    def coverage(self, rng: np.random.Generator, samples: int = 4096) -> dict:
        """Covering check on random unit vectors.

        A vector lies in some cone iff its best alignment with the
        direction grid is >= 1/sqrt(1+eps^2); the worst alignment over the
        sample certifies the covering margin.
        """
        n = self.directions.shape[1]
        u = rng.standard_normal((n, samples)) + 1j * rng.standard_normal((n, samples))
        u /= np.sqrt(np.sum(np.abs(u) ** 2, axis=0))
        dots = np.abs(np.tensordot(np.conj(self.directions), u, axes=(1, 0)))
        align = dots.max(axis=0)
        need = 1.0 / np.sqrt(1.0 + self.eps**2)
        return {
            "samples": samples,
            "worst_alignment": float(align.min()),
            "required_alignment": float(need),
            "covered_fraction": float(np.mean(align >= need - 1e-12)),
        }


# ---------------------------------------------------------------- test functions


def _axis_numerators(npts: int, start: int, size: int) -> np.ndarray:
    """Integer numerators m with node coordinate (x - x_center) = m * h/2.

    Wrapped to [-npts, npts) half-cells, so the cutoff is periodic and the
    cube center sits at m = 0.
    """
    m = 2 * (np.arange(npts, dtype=np.int64) - start) - size
    return (m + npts) % (2 * npts) - npts


def _plateau_ramp(m: np.ndarray, size: int) -> np.ndarray:
    """1 on |m| <= size (the cube, closed), 0 at |m| >= 2 size, cos^2 between."""
    a = np.abs(m)
    u = a / (2.0 * size)
    ramp = np.cos(np.pi * (u - 0.5)) ** 2
    return np.where(a <= size, 1.0, np.where(a >= 2 * size, 0.0, ramp))


def _axis_shape(spec: GridSpec, ax: int) -> tuple[int, ...]:
    shape = [1] * (spec.n + 1)
    shape[ax] = spec.nx if ax < spec.n else spec.nt
    return tuple(shape)


@dataclass(frozen=True)
class TestFunction:
    """f = (1 + (eps l)^2 H)^-1 L for L = chi * (displacement . conj(zeta)).

    ``chi`` is 1 on the cube (closed, one node of margin) and supported in
    the parabolic double; on the cube L is exactly linear, so grad_x L =
    conj(zeta) there.  ``laa`` holds the three measured smallness ratios:
    i  : ||f - L||^2 / ((eps l)^2 mu(D)),
    ii : ||D(f - L)||^2 / mu(D),
    iii: ||D f||^2 / mu(D),
    with D the parabolic energy (gradient + half-order time derivative).
    """

    spec: GridSpec
    cube: tuple[int, tuple[int, ...]]
    zeta: np.ndarray
    eps: float
    ell: float
    chi: np.ndarray
    L: np.ndarray
    f: np.ndarray
    grad_f: np.ndarray
    mu_delta: float
    laa: dict


def _dnorm2(values: np.ndarray, spec: GridSpec, dens: np.ndarray) -> float:
    g = _grad_values(values, spec)
    d = _time_multiplier_values(values, _dhalf_symbol(spec))
    return float(np.sum(np.sum(np.abs(g) ** 2, axis=0) * dens) + np.sum(np.abs(d) ** 2 * dens))


def build_test_function(op, cube, zeta, eps: float) -> TestFunction:
    """Adapted test function of a dyadic cube and direction.

    Requires generation >= 1 and the cutoff's double to fit the torus
    (2*2^j <= nx, 2*4^j <= nt), and eps in (0, 1/4].  The direction is
    snapped to the quantization lattice; the returned ``zeta`` is the one
    actually used.
    """
    spec = op.spec
    j, idx = int(cube[0]), tuple(cube[1])
    if not 1 <= j <= spec.max_generation:
        raise ValueError(f"generation must be in [1, {spec.max_generation}], got {j}")
    if 2 * (1 << j) > spec.nx or 2 * (1 << (2 * j)) > spec.nt:
        raise ValueError("cutoff support (the parabolic double) does not fit the torus")
    if not 0.0 < eps <= 0.25:
        raise ValueError(f"eps must lie in (0, 1/4], got {eps}")
    z = quantize_direction(np.asarray(zeta, dtype=np.complex128).ravel())
    if z.size != spec.n or not np.any(z != 0):
        raise ValueError("zeta must be a nonzero direction with n components")
    sx, st = 1 << j, 1 << (2 * j)
    chi = np.ones(spec.shape)
    disp = np.zeros(spec.shape, dtype=np.complex128)
    for ax in range(spec.n):
        m = _axis_numerators(spec.nx, idx[ax] * sx, sx)
        chi = chi * _plateau_ramp(m, sx).reshape(_axis_shape(spec, ax))
        # m * hx/2 is exact for power-of-two periods; so is the product
        # with a quantized component and the n-term sum (mantissas fit)
        dx = m * (spec.hx / 2.0)
        disp = disp + np.conj(z[ax]) * dx.reshape(_axis_shape(spec, ax))
    mt = _axis_numerators(spec.nt, idx[-1] * st, st)
    chi = chi * _plateau_ramp(mt, st).reshape(_axis_shape(spec, spec.n))
    L = chi * disp
    ell = cube_length(spec, j)
    f = op.solver(eps * ell).solve(L)
    grad_f = _grad_values(f, spec)
    dens = _mu_density(spec, op.weight.values)
    sl = cube_slices(spec, j, idx)
    mu_delta = float(np.sum(dens[sl]))
    diff = f - L
    laa = {
        "i": float(np.sum(np.abs(diff) ** 2 * dens)) / ((eps * ell) ** 2 * mu_delta),
        "ii": _dnorm2(diff, spec, dens) / mu_delta,
        "iii": _dnorm2(f, spec, dens) / mu_delta,
    }
    return TestFunction(spec, (j, idx), z, float(eps), ell, chi, L, f, grad_f, mu_delta, laa)


# ---------------------------------------------------------------- stopping time

STOP_RE_THRESHOLD = 0.75


def stop_size_threshold(eps: float) -> float:
    """Gradient-size stopping level (4 eps)^-2."""
    return 1.0 / (16.0 * eps * eps)


def _gen_means(arr: np.ndarray, spec: GridSpec, j: int) -> np.ndarray:
    cells = (1 << j) ** spec.n * (1 << (2 * j))
    return block_sum(arr, spec.n, 1 << j, 1 << (2 * j)) / cells


@dataclass(frozen=True)
class StoppingResult:
    stopped: list  # maximal bad subcubes (the Carleson boxes)
    remainder: list  # every subcube not below a stopped one (Whitney shells)
    measure_ratio: float  # Lebesgue fraction of the cube covered by stopped
    mu_ratio: float
    top_re: float
    top_abs: float


def stopping_time(spec: GridSpec, cube, grad, zeta, eps: float, weight=None) -> StoppingResult:
    """Maximal subcubes where the gradient stops paying.

    A subcube stops when the unweighted cell average of Re(grad f . zeta)
    drops to <= 3/4 or the average of |grad f| climbs to >= (4 eps)^-2;
    both are closed inequalities (at-threshold stops).  The top cube itself
    is a candidate.  The remainder list collects every subcube not inside
    a stopped one; on each its averages obey the reversed strict bounds.
    """
    vals = grad.values if hasattr(grad, "values") else np.asarray(grad, np.complex128)
    z = np.asarray(zeta, dtype=np.complex128).ravel()
    jtop, idxtop = int(cube[0]), tuple(cube[1])
    gz = vals[0] * z[0]
    for i in range(1, spec.n):
        gz = gz + vals[i] * z[i]
    re = np.real(gz)
    ab = np.sqrt(np.sum(np.abs(vals) ** 2, axis=0))
    re_m = {g: _gen_means(re, spec, g) for g in range(jtop + 1)}
    ab_m = {g: _gen_means(ab, spec, g) for g in range(jtop + 1)}
    thr = stop_size_threshold(eps)
    stopped = []
    stack = [(jtop, idxtop)]
    while stack:
        g, gi = stack.pop()
        if re_m[g][gi] <= STOP_RE_THRESHOLD or ab_m[g][gi] >= thr:
            stopped.append((g, gi))
        elif g > 0:
            stack.extend(_children(g, gi, spec.n))
    stopped, remainder = whitney_partition(spec, (jtop, idxtop), stopped)
    cells_top = float((1 << jtop) ** spec.n * (1 << (2 * jtop)))
    measure_ratio = sum((1 << g) ** spec.n * (1 << (2 * g)) for g, _ in stopped) / cells_top
    mu_top = float(cube_measures(spec, weight, jtop)[idxtop])
    mu_stopped = sum(float(cube_measures(spec, weight, g)[gi]) for g, gi in stopped)
    return StoppingResult(
        stopped,
        remainder,
        float(measure_ratio),
        mu_stopped / mu_top,
        float(re_m[jtop][idxtop]),
        float(ab_m[jtop][idxtop]),
    )


# ---------------------------------------------------------------- step 1


def _shrunk_cutoff(spec: GridSpec, cube, shrink: float) -> np.ndarray:
    """Cutoff = 1 on the (1-s)Q x (1-s^2)I core, vanishing at the cube edge."""
    j, idx = int(cube[0]), tuple(cube[1])
    sx, st = 1 << j, 1 << (2 * j)

    def prof(npts, start, size, s):
        m = _axis_numerators(npts, start, size)
        v = np.abs(m) / size  # cube edge at v = 1
        inner = 1.0 - s
        ramp = np.cos(0.5 * np.pi * (v - inner) / s) ** 2
        return np.where(v <= inner, 1.0, np.where(v >= 1.0, 0.0, ramp))

    phi = np.ones(spec.shape)
    for ax in range(spec.n):
        phi = phi * prof(spec.nx, idx[ax] * sx, sx, shrink).reshape(_axis_shape(spec, ax))
    phi = phi * prof(spec.nt, idx[-1] * st, st, shrink * shrink).reshape(
        _axis_shape(spec, spec.n)
    )
    return phi


def step1_report(op, tf: TestFunction, eta: float | None = None) -> dict:
    """Average of 1 - grad f . zeta over the cube against eps^(eta/(eta+1)).

    The deficit splits along a cutoff vanishing at the cube edge with core
    (1-s)Q x (1-s^2)I, s = eps^(1/(eta+1)): a boundary-layer piece and an
    interior piece that sums by parts onto the cutoff's gradient.  The
    summation-by-parts identity is exact on the torus; its gap is reported.
    """
    spec = tf.spec
    if eta is None:
        eta, _ = ainf_parameters(op.weight)
    s = tf.eps ** (1.0 / (1.0 + eta))
    j, idx = tf.cube
    sl = cube_slices(spec, j, idx)
    z = tf.zeta
    gzf = tf.grad_f[0] * z[0]
    for i in range(1, spec.n):
        gzf = gzf + tf.grad_f[i] * z[i]
    est1 = abs(complex(np.mean(1.0 - gzf[sl])))
    re_avg = float(np.mean(gzf[sl].real))
    grad_avg = float(np.mean(np.sqrt(np.sum(np.abs(tf.grad_f) ** 2, axis=0))[sl]))
    phi = _shrunk_cutoff(spec, tf.cube, s)
    g = tf.L - tf.f
    gg = _grad_values(g, spec)
    ggz = gg[0] * z[0]
    for i in range(1, spec.n):
        ggz = ggz + gg[i] * z[i]
    ncells = gzf[sl].size
    interior = complex(np.sum((phi * ggz)[sl])) / ncells
    boundary = complex(np.sum(((1.0 - phi) * ggz)[sl])) / ncells
    parts = 0.0 + 0.0j
    for i in range(spec.n):
        ax = i - (spec.n + 1)
        dminus = (phi - np.roll(phi, 1, axis=ax)) / spec.hx
        parts = parts + z[i] * complex(np.sum(g * dminus))
    interior_parts = -parts / ncells
    return {
        "est1": est1,
        "est1_bound": float(s**eta),
        "eta": float(eta),
        "cutoff_shrink": float(s),
        "re_avg": re_avg,
        "grad_avg": grad_avg,
        "piece_interior": abs(interior),
        "piece_boundary": abs(boundary),
        "parts_gap": abs(interior - interior_parts),
        "quantization_residue": abs(1.0 - float(np.sum(np.abs(z) ** 2))),
    }


# ---------------------------------------------------------------- assembly


def admissible_generations(spec: GridSpec) -> list[int]:
    """Generations whose test-function support fits: 2*2^j <= nx, 2*4^j <= nt."""
    return [
        j
        for j in range(1, spec.max_generation + 1)
        if 2 * (1 << j) <= spec.nx and 2 * (1 << (2 * j)) <= spec.nt
    ]


def tb_quadrature(spec: GridSpec, per_octave: int = 4) -> LambdaQuadrature:
    """Log-uniform nodes hx 2^(k/q - 1/2): q nodes per dyadic shell (l/2, l]."""
    lam_min = spec.hx * 2.0**-0.5
    lam_max = cube_length(spec, spec.max_generation) * 2.0**-0.5
    return LambdaQuadrature.from_range(lam_min, lam_max, per_octave=per_octave)


def principal_carleson(op, quad: LambdaQuadrature | None = None, per_octave: int = 4,
                       csv_path=None, fields=None):
    """Carleson functional of |U_lam w^-1 A|^2 dmu dlam/lam over dyadic boxes.

    Returns (sup ratio, per-generation box data); the data assigns to every
    cube the quadrature mass of its Whitney shell, so cumulative box sums
    divided by mu realize the Carleson ratios.
    """
    spec = op.spec
    if quad is None:
        quad = tb_quadrature(spec, per_octave=per_octave)
    if fields is None:
        fields = [principal_part_field(op, lam) for lam in quad.nodes]
    dens = _mu_density(spec, op.weight.values)
    acc: dict[int, np.ndarray] = {}
    for lam, wq, ppf in zip(quad.nodes, quad.weights, fields):
        g = generation_for_scale(spec, lam)
        a2 = np.sum(np.abs(ppf.values) ** 2, axis=0)
        acc[g] = acc.get(g, 0.0) + wq * a2
    data = {
        g: block_sum(layer * dens, spec.n, 1 << g, 1 << (2 * g)) for g, layer in acc.items()
    }
    sup = carleson_norm(data, spec, op.weight)
    if csv_path is not None:
        save_carleson_csv(csv_path, data, spec, op.weight)
    return sup, data


def calibrate_aperture(ops, candidates=(0.25, 0.125, 0.0625, 0.03125), threshold: float = 0.95,
                       max_cubes: int = 2, generations=None, directions=None) -> dict:
    """Largest aperture whose stopped region stays below the threshold.

    Sweeps the candidates (descending) over every operator, admissible
    generation, a few cubes and probe directions, recording the worst
    Lebesgue measure ratio of the stopped region.  If no candidate passes,
    the smallest is returned with ``fallback`` set.
    """
    rows = []
    for eps in candidates:
        worst, total, count = 0.0, 0.0, 0
        for op in ops:
            spec = op.spec
            gens = admissible_generations(spec) if generations is None else generations
            if directions is None:
                if spec.n == 1:
                    zetas = [np.ones(1, dtype=np.complex128)]
                else:
                    r = 2.0**-0.5
                    zetas = [
                        np.array(v, dtype=np.complex128)
                        for v in ([1, 0], [0, 1], [r, r], [r, 1j * r])
                    ]
            else:
                zetas = directions
            for j in gens:
                n_cubes = int(np.prod(cube_shape(spec, j)))
                picks = sorted({0, n_cubes // 2})[: max(1, max_cubes)]
                for flat in picks:
                    idx = np.unravel_index(flat, cube_shape(spec, j))
                    for z in zetas:
                        tf = build_test_function(op, (j, idx), z, eps)
                        sd = stopping_time(spec, (j, idx), tf.grad_f, tf.zeta, eps,
                                           weight=op.weight)
                        worst = max(worst, sd.measure_ratio)
                        total += sd.measure_ratio
                        count += 1
        rows.append({
            "eps": float(eps),
            "max_measure_ratio": worst,
            "mean_measure_ratio": total / max(count, 1),
            "passes": worst <= threshold,
        })
    chosen = None
    for row in rows:
        if row["passes"] and (chosen is None or row["eps"] > chosen):
            chosen = row["eps"]
    fallback = chosen is None
    if fallback:
        chosen = min(candidates)
    return {"eps": float(chosen), "rows": rows, "fallback": fallback, "threshold": threshold}


def _splitting_probe(op, tf: TestFunction, quad: LambdaQuadrature, fields, gens,
                     lp_profile: str, dens: np.ndarray) -> dict:
    """Square-function pieces and the resolvent splitting on one test function.

    Checks, node by node, that lam E H f + (U w^-1 A) . A grad f recombines
    from its four-term decomposition through the mollifier P: the imaginary
    part lam E H (1-P) f collapses to lam^-1 (1-E)(1-P) f, the mollified
    part trades its spatial piece for U against grad P f, and the
    coefficient error is R_lam(P grad f) plus the averaged mollifier gap.
    Also accumulates the local square function of (U w^-1 A) . A grad f
    over the cube's box together with its two dominating pieces.
    """
    spec = op.spec
    n = spec.n
    j, idx = tf.cube
    sl = cube_slices(spec, j, idx)
    scale2 = (tf.eps * tf.ell) ** 2
    hf = (tf.L - tf.f) / scale2
    app = op.apply_values(tf.f)
    hf_n = np.sqrt(float(np.sum(np.abs(hf) ** 2 * dens)))
    hf_gap = np.sqrt(float(np.sum(np.abs(app - hf) ** 2 * dens))) / max(hf_n, 1e-300)
    tsym = _dhalf_symbol(spec) * _hilbert_symbol(spec) * _dhalf_symbol(spec)
    dnorm2 = _dnorm2(tf.f, spec, dens)
    i_glob, ff1, ii_local = 0.0, 0.0, 0.0
    gaps = []
    for lam, wq, g, ppf in zip(quad.nodes, quad.weights, gens, fields):
        ehf = op.solver(lam).solve(hf)
        udot = ppf.dot_average(tf.grad_f, spec)
        lhs = lam * ehf + udot
        i_glob += wq * float(np.sum(np.abs(lhs) ** 2 * dens))
        if g <= j:
            ff1 += wq * float(np.sum(np.abs(udot[sl]) ** 2 * dens[sl]))
            ii_local += wq * lam**2 * float(np.sum(np.abs(ehf[sl]) ** 2 * dens[sl]))
        pf = conv_p(tf.f, spec, lam, which="both", profile=lp_profile)
        imp = tf.f - pf
        term_a = (imp - op.solver(lam).solve(imp)) / lam
        term_b = lam * op.solver(lam).solve(_time_multiplier_values(pf, tsym))
        gpf = _grad_values(pf, spec)
        term_r = r_lambda(op, lam, gpf, ppf=ppf)
        term_d = ppf.values[0] * (average(gpf[0], spec, lam) - average(tf.grad_f[0], spec, lam))
        for c in range(1, n):
            term_d = term_d + ppf.values[c] * (
                average(gpf[c], spec, lam) - average(tf.grad_f[c], spec, lam)
            )
        rhs = term_a + term_b - term_r - term_d
        lhs_n = np.sqrt(float(np.sum(np.abs(lhs) ** 2 * dens)))
        gap = np.sqrt(float(np.sum(np.abs(lhs - rhs) ** 2 * dens)))
        gaps.append(gap / max(lhs_n, 1e-300))
    return {
        "recombination_gap": max(gaps),
        "hf_identity_gap": hf_gap,
        "prop_ratio": i_glob / max(dnorm2, 1e-300),
        "ff1_ratio": ff1 / tf.mu_delta,
        "i_ratio": i_glob / tf.mu_delta,
        "ii_ratio": ii_local / tf.mu_delta,
        "ff1_bound_ratio": ff1 / max(2.0 * (i_glob + ii_local), 1e-300),
    }


def carleson_main(op, quad: LambdaQuadrature | None = None, cones: ConeSet | None = None,
                  eps: float = 0.25, *, mode: str = "phase", per_octave: int = 4,
                  max_cubes: int | None = 4, probe_cubes: int = 1,
                  max_directions: int | None = None, generations=None,
                  lp_profile: str = "bump", csv_path=None) -> dict:
    """Measure every piece of the local square-function argument at once.

    Reports the Carleson functional of the principal part field, the cone
    decomposition of its mass (a partition: the per-cone masses sum to the
    total), the stopping-time measure ratios across test cubes, the pairing
    inequality |u| <= 4 |u . v| on the Whitney remainder for vectors
    assigned to the matching cone (violations are counted, not raised, and
    the literal-cone assignment is tallied alongside for comparison), the
    resolvent-splitting consistency, the boxed square function against its
    two dominating pieces, and the cube-average deficit of step 1.
    """
    spec = op.spec
    w = op.weight
    dens = _mu_density(spec, w.values)
    if quad is None:
        quad = tb_quadrature(spec, per_octave=per_octave)
    if cones is None:
        cones = ConeSet.build(spec.n, eps, mode=mode)
    mode = cones.mode
    pp = cones.phases
    nodes = list(quad.nodes)
    gens = [generation_for_scale(spec, lam) for lam in nodes]
    fields = [principal_part_field(op, lam) for lam in nodes]
    sup, _data = principal_carleson(op, quad, csv_path=csv_path, fields=fields)

    n_cones = len(cones)
    masses = np.zeros(n_cones)
    lit_masses = np.zeros(n_cones)
    total = 0.0
    disagree = 0.0
    assigns, lit_assigns = [], []
    do_literal = n_cones <= 2000
    for wq, ppf in zip(quad.weights, fields):
        cellmass = np.sum(np.abs(ppf.values) ** 2, axis=0) * dens
        total += wq * float(np.sum(cellmass))
        asg = cones.assign(ppf.values, mode="phase")
        assigns.append(asg)
        sel = asg >= 0
        masses += wq * np.bincount(asg[sel], weights=cellmass[sel], minlength=n_cones)
        if do_literal:
            lasg = cones.assign(ppf.values, mode="literal")
            lit_assigns.append(lasg)
            lsel = lasg >= 0
            lit_masses += wq * np.bincount(
                lasg[lsel], weights=cellmass[lsel], minlength=n_cones
            )
            disagree += wq * float(np.sum(cellmass[sel & (asg != lasg)]))
        else:
            lit_assigns.append(None)
    scale = max(total, 1e-300)
    partition_gap = abs(float(np.sum(masses)) - total) / scale
    lit_partition_gap = abs(float(np.sum(lit_masses)) - total) / scale if do_literal else None

    gens_ok = admissible_generations(spec) if generations is None else list(generations)
    skipped = sorted(set(range(spec.max_generation + 1)) - set(gens_ok))
    node_by_gen: dict[int, list[int]] = {}
    for i, g in enumerate(gens):
        node_by_gen.setdefault(g, []).append(i)
    ndir = cones.n_directions if max_directions is None else min(cones.n_directions,
                                                                 max_directions)
    eta, _beta = ainf_parameters(w)
    est9 = {"phase": {"checked": 0, "violations": 0, "max_ratio": 0.0},
            "literal": {"checked": 0, "violations": 0, "max_ratio": 0.0}}
    ratios, mu_ratios, top_res, top_abss = [], [], [], []
    probes, step1s = [], []
    n_tested = 0
    for d in range(ndir):
        zeta = cones.directions[d]
        for j in gens_ok:
            shape_j = cube_shape(spec, j)
            n_cubes = int(np.prod(shape_j))
            picks = range(n_cubes) if max_cubes is None else range(min(n_cubes, max_cubes))
            for rank, flat in enumerate(picks):
                idx = tuple(int(v) for v in np.unravel_index(flat, shape_j))
                tf = build_test_function(op, (j, idx), zeta, eps)
                sd = stopping_time(spec, (j, idx), tf.grad_f, tf.zeta, eps, weight=w)
                n_tested += 1
                ratios.append(sd.measure_ratio)
                mu_ratios.append(sd.mu_ratio)
                top_res.append(sd.top_re)
                top_abss.append(sd.top_abs)
                shell: dict[int, list] = {}
                for g, gi in sd.remainder:
                    shell.setdefault(g, []).append(gi)
                for g, lst in shell.items():
                    if g not in node_by_gen:
                        continue
                    mask = np.zeros(spec.shape, dtype=bool)
                    for gi in lst:
                        mask[cube_slices(spec, g, gi)] = True
                    ell_g = cube_length(spec, g)
                    vavg = np.stack(
                        [average(tf.grad_f[c], spec, ell_g) for c in range(spec.n)]
                    )
                    vm = vavg[:, mask]
                    for i in node_by_gen[g]:
                        uvals = fields[i].values
                        for which, alist in (("phase", assigns), ("literal", lit_assigns)):
                            a = alist[i]
                            if a is None:
                                continue
                            cand = (a[mask] >= 0) & (a[mask] // pp == d)
                            if not np.any(cand):
                                continue
                            u = uvals[:, mask][:, cand]
                            v = vm[:, cand]
                            dots = np.abs(np.sum(u * v, axis=0))
                            au = np.sqrt(np.sum(np.abs(u) ** 2, axis=0))
                            bad = au > 4.0 * dots + 1e-12 * (1.0 + au)
                            rec = est9[which]
                            rec["checked"] += int(au.size)
                            rec["violations"] += int(np.sum(bad))
                            rec["max_ratio"] = max(
                                rec["max_ratio"],
                                float(np.max(au / np.maximum(4.0 * dots, 1e-300))),
                            )
                if rank < probe_cubes and d < 2:
                    probes.append(_splitting_probe(op, tf, quad, fields, gens,
                                                   lp_profile, dens))
                    step1s.append(step1_report(op, tf, eta=eta))

    def _agg(key, rows, red=max):
        return float(red(r[key] for r in rows)) if rows else None

    report = {
        "eps": float(eps),
        "mode": mode,
        "n_directions": int(cones.n_directions),
        "n_cones": int(n_cones),
        "phases": int(pp),
        "n_nodes": len(nodes),
        "lam_min": float(nodes[0]),
        "lam_max": float(nodes[-1]),
        "carleson_sup": float(sup),
        "gamma_total": float(total),
        "gamma_masses": [float(v) for v in masses],
        "gamma_partition_gap": float(partition_gap),
        "literal_gamma_masses": [float(v) for v in lit_masses] if do_literal else None,
        "literal_partition_gap": lit_partition_gap,
        "phase_literal_disagreement": float(disagree / scale) if do_literal else None,
        "generations_tested": [int(g) for g in gens_ok],
        "generations_skipped": [int(g) for g in skipped],
        "n_test_cubes": int(n_tested),
        "stopping": {
            "max_measure_ratio": max(ratios) if ratios else None,
            "mean_measure_ratio": float(np.mean(ratios)) if ratios else None,
            "max_mu_ratio": max(mu_ratios) if mu_ratios else None,
            "min_top_re": min(top_res) if top_res else None,
            "max_top_abs": max(top_abss) if top_abss else None,
        },
        "est9": est9["phase"],
        "est9_literal": est9["literal"],
        "splitting": {
            "max_recombination_gap": _agg("recombination_gap", probes),
            "max_hf_identity_gap": _agg("hf_identity_gap", probes),
            "max_prop_ratio": _agg("prop_ratio", probes),
            "max_ff1_ratio": _agg("ff1_ratio", probes),
            "max_i_ratio": _agg("i_ratio", probes),
            "max_ii_ratio": _agg("ii_ratio", probes),
            "max_ff1_bound_ratio": _agg("ff1_bound_ratio", probes),
            "probes": len(probes),
        },
        "step1": {
            "max_est1": _agg("est1", step1s),
            "est1_bound": step1s[0]["est1_bound"] if step1s else None,
            "eta": float(eta),
            "max_grad_avg": _agg("grad_avg", step1s),
            "min_re_avg": _agg("re_avg", step1s, red=min),
            "max_parts_gap": _agg("parts_gap", step1s),
        },
    }
    return report
