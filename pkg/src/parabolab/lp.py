"""Product-form mollifiers and the square-function estimates they satisfy.

The mollifier P(x,t) = P1(x) P2(t) is built from a radial nonnegative
profile of integral 1; the scaled kernels follow the parabolic scaling
P1_lam(x) = lam^-n P1(x/lam), P2_lam(t) = lam^-2 P2(t/lam^2).  On the
torus the kernels are wrap-added over periodic images and renormalized to
unit discrete mass, so convolution preserves constants to roundoff.

square_norm integrates ||g_lam||^2_mu over log lambda; lp_suite measures
the three comparison constants

    smoothing:   |||lam grad P f||| + |||lam^2 dt P f||| + |||lam Dh P f|||
                 against ||f||,
    inverse:     |||lam^-1 (I - P) f||| against the energy norm of f,
    average gap: |||(A_lam - P_lam) f||| against ||f||,

with lambda capped at half the spatial period so kernels stay injectively
supported.
"""

from __future__ import annotations

import itertools

import numpy as np

from .calculus import LambdaQuadrature
from .dyadic import average
from .grid import (
    GridSpec,
    _dhalf_symbol,
    _dt_symbol,
    _grad_values,
    _time_multiplier_values,
    inner,
)
from .weights import Weight

__all__ = [
    "PROFILES",
    "Mollifier",
    "conv_p",
    "square_norm",
    "lp_suite",
    "refinement_drift",
]


def _bump(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    mask = np.abs(s) < 1.0
    with np.errstate(divide="ignore"):
        out[mask] = np.exp(-1.0 / (1.0 - s[mask] ** 2))
    return out


def _hat(s: np.ndarray) -> np.ndarray:
    return np.maximum(1.0 - np.abs(np.asarray(s, dtype=float)), 0.0)


PROFILES = {"bump": _bump, "hat": _hat}


def _signed_offsets(count: int, step: float) -> np.ndarray:
    """Representative coordinates in [-L/2, L/2) for a periodic axis."""
    idx = (np.arange(count) + count // 2) % count - count // 2
    return idx * step


class Mollifier:
    """Discrete product-form mollifier on one grid, kernels cached per scale."""

    def __init__(self, spec: GridSpec, profile: str = "bump"):
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        self.spec = spec
        self.profile = profile
        self._fn = PROFILES[profile]
        self._hats: dict = {}

    def spatial_kernel(self, lam: float) -> np.ndarray:
        """Radial kernel on the spatial torus, wrap-added and normalized."""
        spec = self.spec
        offs = _signed_offsets(spec.nx, spec.hx)
        mesh = np.meshgrid(*([offs] * spec.n), indexing="ij")
        m = int(np.ceil(lam / spec.lx)) + 1
        total = np.zeros((spec.nx,) * spec.n)
        for combo in itertools.product(range(-m, m + 1), repeat=spec.n):
            r2 = sum((g + c * spec.lx) ** 2 for g, c in zip(mesh, combo))
            total += self._fn(np.sqrt(r2) / lam)
        return total / total.sum()

    def time_kernel(self, lam: float) -> np.ndarray:
        """Kernel on the time circle at scale lam^2, wrap-added and normalized."""
        spec = self.spec
        offs = _signed_offsets(spec.nt, spec.ht)
        m = int(np.ceil(lam**2 / spec.lt)) + 1
        total = np.zeros(spec.nt)
        for c in range(-m, m + 1):
            total += self._fn(np.abs(offs + c * spec.lt) / lam**2)
        return total / total.sum()

    def kernel(self, lam: float) -> np.ndarray:
        """Full product kernel P1 otimes P2 on the grid."""
        return self.spatial_kernel(lam)[..., None] * self.time_kernel(lam)

    def _hat_for(self, lam: float, which: str) -> np.ndarray:
        key = (which, float(lam))
        if key not in self._hats:
            if which == "space":
                arr = np.fft.fftn(self.spatial_kernel(lam))[..., None]
            elif which == "time":
                arr = np.fft.fft(self.time_kernel(lam))
            else:
                arr = np.fft.fftn(self.kernel(lam))
            self._hats[key] = arr
        return self._hats[key]

    def convolve(self, values: np.ndarray, lam: float, which: str = "both") -> np.ndarray:
        """Periodic convolution along the selected variables (batch safe)."""
        if lam <= 0:
            raise ValueError("scale must be positive")
        if which not in ("space", "time", "both"):
            raise ValueError("which must be 'space', 'time' or 'both'")
        vals = np.asarray(values)
        n = self.spec.n
        if which == "space":
            axes = tuple(range(vals.ndim - n - 1, vals.ndim - 1))
        elif which == "time":
            axes = (vals.ndim - 1,)
        else:
            axes = tuple(range(vals.ndim - n - 1, vals.ndim))
        hat = self._hat_for(lam, which)
        out = np.fft.ifftn(np.fft.fftn(vals, axes=axes) * hat, axes=axes)
        return out if np.iscomplexobj(vals) else out.real


def conv_p(
    values: np.ndarray, spec: GridSpec, lam: float, which: str = "both", profile: str = "bump"
) -> np.ndarray:
    """One-shot mollification; see Mollifier.convolve."""
    return Mollifier(spec, profile).convolve(values, lam, which)


def _weight_values(weight):
    return weight.values if isinstance(weight, Weight) else weight


def square_norm(family, quad: LambdaQuadrature, spec: GridSpec, weight=None) -> float:
    """Quadrature of the squared mu-norm of family(lam) over d(lambda)/lambda."""
    w = _weight_values(weight)
    total = 0.0
    for lam, wq in zip(quad.nodes, quad.weights):
        g = np.asarray(family(lam))
        total += wq * float(inner(g, g, weight=w, spec=spec).real)
    return total


def lp_suite(
    values: np.ndarray,
    spec: GridSpec,
    weight=None,
    quad: LambdaQuadrature | None = None,
    per_octave: int = 8,
    profile: str = "bump",
) -> dict:
    """Measure the three mollifier comparison constants on one field.

    Returns the constants together with the underlying norms and the
    quadrature footprint.  The inverse item divides by the energy norm of
    the field and reports 0 for fields with vanishing energy (constants).
    """
    vals = np.asarray(values, dtype=complex)
    if quad is None:
        quad = LambdaQuadrature.from_range(spec.hx / 4.0, spec.lx / 2.0, per_octave)
    mol = Mollifier(spec, profile)
    w = _weight_values(weight)
    dt_sym = _dt_symbol(spec)
    dh_sym = _dhalf_symbol(spec)
    f_norm2 = float(inner(vals, vals, weight=w, spec=spec).real)
    g = _grad_values(vals, spec)
    dh = _time_multiplier_values(vals, dh_sym)
    d_norm2 = float(inner(g, g, weight=w, spec=spec).real) + float(
        inner(dh, dh, weight=w, spec=spec).real
    )
    s_grad = s_dt = s_dh = s_inv = s_gap = 0.0
    for lam, wq in zip(quad.nodes, quad.weights):
        p = mol.convolve(vals, lam, "both")
        gp = _grad_values(p, spec)
        s_grad += wq * lam**2 * float(inner(gp, gp, weight=w, spec=spec).real)
        dtp = _time_multiplier_values(p, dt_sym)
        s_dt += wq * lam**4 * float(inner(dtp, dtp, weight=w, spec=spec).real)
        dhp = _time_multiplier_values(p, dh_sym)
        s_dh += wq * lam**2 * float(inner(dhp, dhp, weight=w, spec=spec).real)
        r = (vals - p) / lam
        s_inv += wq * float(inner(r, r, weight=w, spec=spec).real)
        gap = average(vals, spec, lam, axis="both") - p
        s_gap += wq * float(inner(gap, gap, weight=w, spec=spec).real)
    f_norm = np.sqrt(f_norm2)
    d_norm = np.sqrt(d_norm2)
    return {
        "smoothing": (np.sqrt(s_grad) + np.sqrt(s_dt) + np.sqrt(s_dh)) / f_norm,
        "inverse": np.sqrt(s_inv) / d_norm if d_norm > 0 else 0.0,
        "average_gap": np.sqrt(s_gap) / f_norm,
        "f_norm": f_norm,
        "energy_norm": d_norm,
        "square_norms": {
            "lam_grad": s_grad,
            "lam2_dt": s_dt,
            "lam_dhalf": s_dh,
            "inv_lam_residual": s_inv,
            "average_gap": s_gap,
        },
        "lam_min": float(quad.nodes[0]),
        "lam_max": float(quad.nodes[-1]),
        "n_nodes": int(quad.nodes.size),
        "profile": profile,
    }


def refinement_drift(coarse: dict, fine: dict) -> dict:
    """Relative change of the three suite constants under grid refinement."""
    out = {}
    for key in ("smoothing", "inverse", "average_gap"):
        c, f = coarse[key], fine[key]
        out[key] = abs(f - c) / abs(c) if c != 0 else (0.0 if f == 0 else np.inf)
    return out
