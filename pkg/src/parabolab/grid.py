"""Periodic space-time grids and the discrete calculus on them.

Fields live on the torus [0, Lx)^n x [0, Lt) sampled on a uniform grid with
``nx`` points per spatial axis (power of two) and ``nt`` time points (power
of four).  Spatial derivatives are forward differences, the divergence is the
exact negative adjoint of the gradient in the weighted inner product, and
time operators are Fourier multipliers.  Array layout: spatial axes first,
time axis last; extra leading axes are treated as batch dimensions by every
operation here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "MeasureKind",
    "GridSpec",
    "GridFunction",
    "VectorField",
    "inner",
    "norm",
    "grad_x",
    "wdiv",
    "time_multiplier",
    "d_half",
    "hilbert_t",
    "d_t",
    "energy_norm",
    "random_field",
    "parabolic_distance",
]


class MeasureKind(Enum):
    """Reference measure for inner products: w dx dt, w^-1 dx dt, or dx dt."""

    MU = "mu"
    MU_INVERSE = "mu_inverse"
    LEBESGUE = "lebesgue"


def _is_power_of(value: int, base: int) -> bool:
    if value < base:
        return False
    while value % base == 0:
        value //= base
    return value == 1


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the periodic space-time grid.

    Parameters
    ----------
    n : spatial dimension, 1 or 2.
    nx : points per spatial axis, a power of two >= 8.
    nt : time points, a power of four >= 4.
    lx, lt : spatial and temporal periods.  Time carries length^2 units;
        the aspect ht/hx^2 is a fixed constant of the scenario and is
        preserved by the parabolic refinement (nx, nt) -> (2 nx, 4 nt).
    """

    n: int
    nx: int
    nt: int
    lx: float = 1.0
    lt: float = 1.0

    def __post_init__(self) -> None:
        if self.n not in (1, 2):
            raise ValueError(f"spatial dimension must be 1 or 2, got {self.n}")
        if not _is_power_of(self.nx, 2) or self.nx < 8:
            raise ValueError(f"nx must be a power of two >= 8, got {self.nx}")
        if not _is_power_of(self.nt, 4):
            raise ValueError(f"nt must be a power of four >= 4, got {self.nt}")
        if self.lx <= 0 or self.lt <= 0:
            raise ValueError("periods must be positive")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def ht(self) -> float:
        return self.lt / self.nt

    @property
    def p(self) -> int:
        return int(round(np.log2(self.nx)))

    @property
    def r(self) -> int:
        return int(round(np.log2(self.nt) / 2))

    @property
    def max_generation(self) -> int:
        # generations j = 0..min(p, r) tile the grid exactly
        return min(self.p, self.r)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nx,) * self.n + (self.nt,)

    @property
    def size(self) -> int:
        return self.nx**self.n * self.nt

    @property
    def cell_volume(self) -> float:
        return self.hx**self.n * self.ht

    @property
    def aspect(self) -> float:
        return self.ht / self.hx**2

    def spatial_axis(self, i: int) -> int:
        """Axis index (negative, batch-safe) of spatial coordinate i."""
        if not 0 <= i < self.n:
            raise ValueError(f"spatial axis {i} out of range for n={self.n}")
        return i - (self.n + 1)

    def x_nodes(self) -> np.ndarray:
        return np.arange(self.nx) * self.hx

    def t_nodes(self) -> np.ndarray:
        return np.arange(self.nt) * self.ht

    def tau(self) -> np.ndarray:
        """Discrete time frequencies tau_k = 2 pi k / lt (numpy fft order)."""
        return 2.0 * np.pi * np.fft.fftfreq(self.nt, d=self.ht)

    def tau_banded(self) -> np.ndarray:
        """tau with the unpaired Nyquist bin zeroed.

        The time-reversal map fixes the Nyquist mode, so no odd multiplier
        can act faithfully there; the named time operators are band-limited
        to |k| < nt/2, which keeps the factorization d_t = D H D, the hidden
        coercivity identity and time-reversal adjoints exact.
        """
        tau = self.tau()
        tau[self.nt // 2] = 0.0
        return tau

    def forward_symbol(self, k: np.ndarray | int) -> np.ndarray:
        """Fourier symbol of the forward difference at integer frequency k."""
        theta = 2.0 * np.pi * np.asarray(k) * self.hx / self.lx
        return (np.exp(1j * theta) - 1.0) / self.hx

    def laplace_symbol(self, k: np.ndarray | int) -> np.ndarray:
        """Symbol of -wdiv(grad .) for unit weight: (4/hx^2) sin^2(pi k hx/lx)."""
        return (4.0 / self.hx**2) * np.sin(np.pi * np.asarray(k) * self.hx / self.lx) ** 2


def _as_values(f) -> np.ndarray:
    return f.values if hasattr(f, "values") else np.asarray(f)


@dataclass
class GridFunction:
    """A complex scalar field sampled on the space-time grid."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != self.spec.shape:
            raise ValueError(
                f"values shape {self.values.shape} does not match grid {self.spec.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function contains non-finite entries")

    @classmethod
    def zeros(cls, spec: GridSpec) -> "GridFunction":
        return cls(spec, np.zeros(spec.shape, dtype=np.complex128))

    @classmethod
    def constant(cls, spec: GridSpec, value: complex) -> "GridFunction":
        return cls(spec, np.full(spec.shape, value, dtype=np.complex128))

    @classmethod
    def fourier_mode(cls, spec: GridSpec, k, m: int) -> "GridFunction":
        """exp(2 pi i (k.x/lx + m t/lt)) sampled on the nodes."""
        ks = np.atleast_1d(np.asarray(k, dtype=float))
        if ks.size != spec.n:
            raise ValueError(f"need {spec.n} spatial frequencies, got {ks.size}")
        phase = np.zeros(spec.shape)
        for i in range(spec.n):
            x = spec.x_nodes() * ks[i] / spec.lx
            shape = [1] * (spec.n + 1)
            shape[i] = spec.nx
            phase = phase + x.reshape(shape)
        phase = phase + (spec.t_nodes() * m / spec.lt).reshape((1,) * spec.n + (spec.nt,))
        return cls(spec, np.exp(2j * np.pi * phase))

    def copy(self) -> "GridFunction":
        return GridFunction(self.spec, self.values.copy())

    def __add__(self, other) -> "GridFunction":
        return GridFunction(self.spec, self.values + _as_values(other))

    def __sub__(self, other) -> "GridFunction":
        return GridFunction(self.spec, self.values - _as_values(other))

    def __mul__(self, scalar) -> "GridFunction":
        return GridFunction(self.spec, self.values * scalar)

    __rmul__ = __mul__


@dataclass
class VectorField:
    """An n-component field; component axis first, then the grid axes."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.complex128)
        expected = (self.spec.n,) + self.spec.shape
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")

    @classmethod
    def zeros(cls, spec: GridSpec) -> "VectorField":
        return cls(spec, np.zeros((spec.n,) + spec.shape, dtype=np.complex128))

    def component(self, i: int) -> GridFunction:
        return GridFunction(self.spec, self.values[i])


def _measure_weights(spec: GridSpec, weight, measure: MeasureKind) -> np.ndarray:
    """Spatial quadrature density (w, 1/w or 1) times the cell volume."""
    if measure is MeasureKind.LEBESGUE or weight is None:
        w = np.ones((spec.nx,) * spec.n)
    else:
        w = np.asarray(_as_values(weight), dtype=float)
        if w.shape != (spec.nx,) * spec.n:
            raise ValueError(f"weight shape {w.shape} != {(spec.nx,) * spec.n}")
        if measure is MeasureKind.MU_INVERSE:
            w = 1.0 / w
    return w * spec.cell_volume


def inner(f, g, weight=None, measure: MeasureKind = MeasureKind.MU, spec: GridSpec | None = None):
    """Discrete weighted inner product <f, g> = sum f conj(g) dmeasure.

    Scalar fields contract over the grid axes; vector fields additionally
    over the leading component axis.  Summation order is fixed (numpy
    pairwise over the flattened array), so results are run-to-run stable.
    """
    fv, gv = _as_values(f), _as_values(g)
    if spec is None:
        spec = f.spec if hasattr(f, "spec") else g.spec
    dens = _measure_weights(spec, weight, measure)[..., None]
    prod = fv * np.conj(gv)
    grid_ndim = spec.n + 1
    if prod.ndim == grid_ndim:
        return np.sum(prod * dens)
    if prod.ndim == grid_ndim + 1 and prod.shape[0] == spec.n:
        # vector fields: contract the component axis as well
        return np.sum(prod * dens)
    # leading axes are batch axes: contract only the trailing grid axes
    axes = tuple(range(prod.ndim - grid_ndim, prod.ndim))
    return np.sum(prod * dens, axis=axes)


def norm(f, weight=None, measure: MeasureKind = MeasureKind.MU, spec: GridSpec | None = None) -> float:
    val = inner(f, f, weight=weight, measure=measure, spec=spec)
    return float(np.sqrt(np.real(val)))


def _grad_values(values: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Forward-difference gradient; returns component axis prepended."""
    comps = [
        (np.roll(values, -1, axis=spec.spatial_axis(i)) - values) / spec.hx
        for i in range(spec.n)
    ]
    return np.stack(comps, axis=0)


def grad_x(f) -> VectorField:
    """Periodic forward-difference gradient (f(x + hx e_i) - f(x))/hx."""
    spec = f.spec
    return VectorField(spec, _grad_values(_as_values(f), spec))


def _wdiv_values(values: np.ndarray, weight, spec: GridSpec) -> np.ndarray:
    """w^-1 sum_i backward difference of (w F_i); exact -adjoint of the gradient."""
    if weight is None:
        w = np.ones((spec.nx,) * spec.n)
    else:
        w = np.asarray(_as_values(weight), dtype=float)
    wb = w[..., None]
    out = np.zeros(values.shape[1:], dtype=np.complex128)
    for i in range(spec.n):
        wf = wb * values[i]
        out += (wf - np.roll(wf, 1, axis=spec.spatial_axis(i))) / spec.hx
    return out / wb


def wdiv(F, weight) -> GridFunction:
    """Weighted divergence, the exact negative mu-adjoint of ``grad_x``."""
    spec = F.spec
    return GridFunction(spec, _wdiv_values(_as_values(F), weight, spec))


def _time_multiplier_values(values: np.ndarray, symbol: np.ndarray) -> np.ndarray:
    spectrum = np.fft.fft(values, axis=-1)
    spectrum *= symbol
    return np.fft.ifft(spectrum, axis=-1)


def time_multiplier(f, symbol) -> GridFunction:
    """Apply a Fourier multiplier in time: F^-1(symbol(tau_k) F f).

    ``symbol`` is an array over the nt discrete frequencies (fft order) or a
    callable evaluated on ``spec.tau()``.
    """
    spec = f.spec
    sym = np.asarray(symbol(spec.tau()) if callable(symbol) else symbol, dtype=np.complex128)
    if sym.shape != (spec.nt,):
        raise ValueError(f"symbol shape {sym.shape} != ({spec.nt},)")
    return GridFunction(spec, _time_multiplier_values(_as_values(f), sym))


def _dhalf_symbol(spec: GridSpec) -> np.ndarray:
    return np.sqrt(np.abs(spec.tau_banded())).astype(np.complex128)


def _hilbert_symbol(spec: GridSpec) -> np.ndarray:
    return 1j * np.sign(spec.tau_banded())


def _dt_symbol(spec: GridSpec) -> np.ndarray:
    return 1j * spec.tau_banded()


def d_half(f) -> GridFunction:
    """Half-order time derivative, multiplier |tau|^(1/2)."""
    return time_multiplier(f, _dhalf_symbol(f.spec))


def hilbert_t(f) -> GridFunction:
    """Hilbert transform in time, multiplier i sgn(tau); sgn(0) = 0."""
    return time_multiplier(f, _hilbert_symbol(f.spec))


def d_t(f) -> GridFunction:
    """Spectral time derivative, multiplier i tau."""
    return time_multiplier(f, _dt_symbol(f.spec))


def energy_norm(f, weight=None) -> float:
    """Parabolic energy seminorm: (||grad f||^2 + ||D_half f||^2)^(1/2) in mu."""
    g = grad_x(f)
    d = d_half(f)
    val = inner(g, g, weight=weight) + inner(d, d, weight=weight)
    return float(np.sqrt(np.real(val)))


def random_field(spec: GridSpec, rng: np.random.Generator, mean_free: bool = False) -> GridFunction:
    """Complex Gaussian field; optionally projected off constants."""
    v = rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
    if mean_free:
        v -= v.mean()
    return GridFunction(spec, v)


def _periodic_delta(a: np.ndarray, b: np.ndarray, period: float) -> np.ndarray:
    d = np.abs(a[:, None] - b[None, :])
    return np.minimum(d, period - d)


def parabolic_distance(spec: GridSpec, mask_e: np.ndarray, mask_f: np.ndarray) -> float:
    """Periodic parabolic distance max(|dx|, |dt|^(1/2)) between two node sets."""
    if not (mask_e.any() and mask_f.any()):
        raise ValueError("empty node set")
    idx_e = np.argwhere(mask_e)
    idx_f = np.argwhere(mask_f)
    dist = np.zeros((idx_e.shape[0], idx_f.shape[0]))
    for i in range(spec.n):
        dx = _periodic_delta(idx_e[:, i] * spec.hx, idx_f[:, i] * spec.hx, spec.lx)
        dist = np.maximum(dist, dx)
    dt = _periodic_delta(idx_e[:, -1] * spec.ht, idx_f[:, -1] * spec.ht, spec.lt)
    dist = np.maximum(dist, np.sqrt(dt))
    return float(dist.min())
