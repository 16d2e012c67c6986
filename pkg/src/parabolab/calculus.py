"""Square roots of the parabolic operator and the functional calculus.

Two independent routes to sqrt(H):

* ``sqrt_schur``: principal matrix square root of the dense realization,
  computed in the symmetrized basis W^(1/2) H W^(-1/2) so the mu geometry
  is the plain one.  Reference route; cost O(N^3).
* ``sqrt_calderon``: matrix-free reproducing integral

      sqrt(H) f = (16/pi) int_0^inf (lam^2 H E_lam)^2 E_lam f  dlam/lam^2,
      E_lam = (1 + lam^2 H)^-1,

  discretized by the trapezoid rule in log lam (spectrally accurate for
  these kernels).  Each node costs three triangular solves against one LU
  factorization; the scalar identity int_0^inf s^2/(1+s^2)^3 ds = pi/16
  fixes the prefactor.

The Kato ratios ||sqrt(H) u|| / (||grad u||^2 + ||D_half u||^2)^(1/2) and
the adjoint-route comparison (time reversal of the reversed-coefficient
member vs the mu-transpose) sit on top of these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import schur, sqrtm

from .grid import (
    GridSpec,
    _dhalf_symbol,
    _grad_values,
    _time_multiplier_values,
    inner,
)
from .operator import ParabolicOperator

__all__ = [
    "LambdaQuadrature",
    "sqrt_schur",
    "sqrt_calderon",
    "quadratic_functional",
    "kato_ratios",
    "sqrt_adjoint_dense",
    "adjoint_route_gap",
    "sqrt_pairing_gap",
]

CALDERON_PREFACTOR = 16.0 / np.pi


@dataclass(frozen=True)
class LambdaQuadrature:
    """Trapezoid rule on a geometric grid of resolvent scales.

    Nodes are lam_min * 2^(k/q) with q nodes per octave; weights discretize
    dlam/lam, so they sum to log2(lam_max/lam_min) * ln 2 exactly.
    """

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_range(
        cls, lam_min: float, lam_max: float, per_octave: int = 8
    ) -> "LambdaQuadrature":
        if not 0 < lam_min < lam_max:
            raise ValueError(f"need 0 < lam_min < lam_max, got ({lam_min}, {lam_max})")
        if per_octave < 1:
            raise ValueError("per_octave must be at least 1")
        step = np.log(2.0) / per_octave
        count = max(2, int(np.ceil(np.log(lam_max / lam_min) / step)) + 1)
        lognodes = np.log(lam_min) + step * np.arange(count)
        weights = np.full(count, step)
        weights[0] = weights[-1] = step / 2.0
        return cls(np.exp(lognodes), weights)

    @property
    def step(self) -> float:
        return float(np.log(self.nodes[1] / self.nodes[0]))

    def widened(self, octaves_left: int = 0, octaves_right: int = 0) -> "LambdaQuadrature":
        """Extend the grid by whole octaves at the same step, keeping old nodes."""
        step = self.step
        per_octave = max(1, int(round(np.log(2.0) / step)))
        left = octaves_left * per_octave
        right = octaves_right * per_octave
        logs = np.log(self.nodes)
        new_logs = np.concatenate(
            [logs[0] - step * np.arange(left, 0, -1), logs, logs[-1] + step * np.arange(1, right + 1)]
        )
        weights = np.full(new_logs.size, step)
        weights[0] = weights[-1] = step / 2.0
        return LambdaQuadrature(np.exp(new_logs), weights)


def _mu_norm(values: np.ndarray, op: ParabolicOperator) -> float:
    v = inner(values, values, weight=op.weight.values, spec=op.spec)
    return float(np.sqrt(np.max(np.real(v))))


def sqrt_schur(op: ParabolicOperator, adjoint: bool = False) -> np.ndarray:
    """Principal square root of the dense operator via Schur triangularization.

    Raises if the (symmetrized) spectrum touches the negative real axis,
    where the principal branch is undefined; accretivity keeps the measured
    operators clear of it.
    """
    d = np.sqrt(op.mu_diagonal())
    mat = op.dense(adjoint=adjoint) * (d[:, None] / d[None, :])
    t, _ = schur(mat, output="complex")
    eigs = np.diag(t)
    scale = np.max(np.abs(eigs))
    bad = (eigs.real < -1e-12 * scale) & (np.abs(eigs.imag) <= 1e-12 * scale)
    if np.any(bad):
        raise ValueError(
            f"spectrum touches the negative real axis ({eigs[bad][0]}); principal root undefined"
        )
    root, _ = sqrtm(mat, disp=False)
    return root * (d[None, :] / d[:, None])


def sqrt_calderon(
    op: ParabolicOperator,
    values: np.ndarray,
    quad: LambdaQuadrature | None = None,
    per_octave: int = 8,
    tail_tol: float = 1e-4,
    max_widen: int = 6,
    prefactor: float = CALDERON_PREFACTOR,
    adjoint: bool = False,
) -> tuple[np.ndarray, dict]:
    """Apply sqrt(H) through the resolvent integral; widens the range on demand.

    The integrand at scale lam is prefactor * (f - 2 E f + E^2 f) E f / lam
    rewritten with lam^2 H E = 1 - E, so each node is three solves.  End
    contributions estimate the truncated tails (the integrand decays like
    lam^3 at 0 and lam^-3 at infinity, so each tail is about a third of the
    endpoint value); the grid grows a decade at a time until both fall
    below ``tail_tol`` relative to the accumulated result.
    """
    spec = op.spec
    if quad is None:
        quad = LambdaQuadrature.from_range(spec.hx / 8.0, 8.0 * spec.lx, per_octave)
    vals = np.asarray(values, dtype=np.complex128)

    def node_term(lam: float) -> np.ndarray:
        solver = op.solver(lam, adjoint=adjoint)
        e1 = solver.solve(vals)
        e2 = solver.solve(e1)
        e3 = solver.solve(e2)
        return (e1 - 2.0 * e2 + e3) / lam

    terms: dict[float, np.ndarray] = {}
    widened = 0
    for _ in range(max_widen + 1):
        for lam in quad.nodes:
            key = float(lam)
            if key not in terms:
                terms[key] = node_term(key)
        total = prefactor * sum(
            w * terms[float(lam)] for lam, w in zip(quad.nodes, quad.weights)
        )
        result_norm = _mu_norm(total, op)
        tail_left = prefactor * _mu_norm(terms[float(quad.nodes[0])], op) / 3.0
        tail_right = prefactor * _mu_norm(terms[float(quad.nodes[-1])], op) / 3.0
        ref = max(result_norm, 1e-300)
        grow_l = tail_left > tail_tol * ref
        grow_r = tail_right > tail_tol * ref
        if not (grow_l or grow_r) or widened >= max_widen:
            break
        quad = quad.widened(octaves_left=2 * int(grow_l), octaves_right=2 * int(grow_r))
        widened += 1
    info = {
        "lam_min": float(quad.nodes[0]),
        "lam_max": float(quad.nodes[-1]),
        "n_nodes": int(quad.nodes.size),
        "tail_left": float(tail_left),
        "tail_right": float(tail_right),
        "widened": widened,
    }
    return total, info


def quadratic_functional(
    op: ParabolicOperator,
    values: np.ndarray,
    quad: LambdaQuadrature,
    adjoint: bool = False,
) -> float:
    """Square-function integral int ||lam H E_lam u||^2_mu dlam/lam (trapezoid)."""
    vals = np.asarray(values, dtype=np.complex128)
    total = 0.0
    for lam, w in zip(quad.nodes, quad.weights):
        e = op.solver(float(lam), adjoint=adjoint).solve(vals)
        g = (vals - e) / lam
        total += w * inner(g, g, weight=op.weight.values, spec=op.spec).real
    return float(total)


def energy_seminorm(op: ParabolicOperator, values: np.ndarray) -> float:
    """(||grad u||^2 + ||D_half u||^2)^(1/2) in the mu geometry."""
    spec, w = op.spec, op.weight.values
    g = _grad_values(values, spec)
    d = _time_multiplier_values(values, _dhalf_symbol(spec))
    val = inner(g, g, weight=w, spec=spec).real + inner(d, d, weight=w, spec=spec).real
    return float(np.sqrt(val))


def kato_ratios(
    op: ParabolicOperator,
    n_samples: int = 20,
    seed: int = 0,
    method: str = "schur",
    sqrt_mat: np.ndarray | None = None,
    **calderon_kw,
) -> dict:
    """Measured two-sided comparison of ||sqrt(H) u|| with the energy seminorm.

    Random probes (constants carry no information: both sides kill them).
    Returns the ratio table and its extremes; the square-root equivalence
    is the statement that r_max/r_min stays bounded under refinement.
    """
    rng = np.random.default_rng(np.random.Philox(key=seed))
    spec = op.spec
    probes = rng.standard_normal((n_samples,) + spec.shape) + 1j * rng.standard_normal(
        (n_samples,) + spec.shape
    )
    if method == "schur":
        if sqrt_mat is None:
            sqrt_mat = sqrt_schur(op)
        flat = probes.reshape(n_samples, -1)
        roots = (sqrt_mat @ flat.T).T.reshape(probes.shape)
    elif method == "calderon":
        roots, _ = sqrt_calderon(op, probes, **calderon_kw)
    else:
        raise ValueError(f"unknown method {method!r}")
    ratios = np.empty(n_samples)
    for i in range(n_samples):
        num = _mu_norm(roots[i], op)
        den = energy_seminorm(op, probes[i])
        ratios[i] = num / den
    return {
        "ratios": ratios,
        "r_min": float(ratios.min()),
        "r_max": float(ratios.max()),
        "spread": float(ratios.max() / ratios.min()),
    }


def sqrt_adjoint_dense(op: ParabolicOperator, route: str = "reversal") -> np.ndarray:
    """Dense sqrt(H*) by either of two routes that must agree.

    ``reversal``: sqrt(H*) = R sqrt(H~) R with H~ the reversed-coefficient
    member of the class and R the time reflection; stays inside the
    operator class.  ``transpose``: conjugate sqrt(H) by the mu pairing,
    W^-1 sqrt(H)^H W.
    """
    spec = op.spec
    if route == "transpose":
        mu = op.mu_diagonal()
        root = sqrt_schur(op)
        return np.conj(root).T * (mu[None, :] / mu[:, None])
    if route == "reversal":
        tilde = op.time_reversed_adjoint()
        root = sqrt_schur(tilde)
        idx = np.arange(spec.size).reshape(spec.shape)
        rev = (-np.arange(spec.nt)) % spec.nt
        perm = np.take(idx, rev, axis=-1).ravel()
        return root[np.ix_(perm, perm)]
    raise ValueError(f"unknown route {route!r}")


def adjoint_route_gap(op: ParabolicOperator) -> float:
    """Max elementwise gap between the two sqrt(H*) routes, relative."""
    a = sqrt_adjoint_dense(op, "reversal")
    b = sqrt_adjoint_dense(op, "transpose")
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def sqrt_pairing_gap(op: ParabolicOperator, n_samples: int = 5, seed: int = 0) -> float:
    """Relative defect of <sqrt(H) u, v> = <u, sqrt(H*) v> on random pairs."""
    rng = np.random.default_rng(np.random.Philox(key=seed))
    spec, w = op.spec, op.weight.values
    root = sqrt_schur(op)
    root_star = sqrt_adjoint_dense(op, "transpose")
    worst = 0.0
    for _ in range(n_samples):
        u = rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
        v = rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
        ru = (root @ u.ravel()).reshape(spec.shape)
        rv = (root_star @ v.ravel()).reshape(spec.shape)
        lhs = inner(ru, v, weight=w, spec=spec)
        rhs = inner(u, rv, weight=w, spec=spec)
        norm_u = np.sqrt(inner(u, u, weight=w, spec=spec).real)
        norm_v = np.sqrt(inner(v, v, weight=w, spec=spec).real)
        worst = max(worst, abs(lhs - rhs) / (norm_u * norm_v))
    return worst
