"""Numerical laboratory for weighted degenerate parabolic operators.

Discretizes H = d_t - w^-1 div_x(A grad_x) on a periodic space-time grid and
measures the quantitative estimates behind the square-root equivalence
||sqrt(H) u|| ~ ||grad_x u|| + ||D_t^(1/2) u||: resolvent bounds, off-diagonal
decay, Littlewood-Paley inequalities, Carleson embeddings and the local
test-function (Tb) argument.
"""

from .grid import (
    GridFunction,
    GridSpec,
    MeasureKind,
    VectorField,
    d_half,
    d_t,
    energy_norm,
    grad_x,
    hilbert_t,
    inner,
    norm,
    time_multiplier,
    wdiv,
)
from .weights import Weight, a2_constant, doubling_constant, make_weight

__all__ = [
    "GridSpec",
    "GridFunction",
    "VectorField",
    "MeasureKind",
    "inner",
    "norm",
    "grad_x",
    "wdiv",
    "time_multiplier",
    "d_half",
    "hilbert_t",
    "d_t",
    "energy_norm",
    "Weight",
    "make_weight",
    "a2_constant",
    "doubling_constant",
]
