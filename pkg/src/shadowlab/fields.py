"""Constructors for concrete vector fields and the C^1 field-metric estimate."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .flow import VectorFieldDef, field_from_callable, jacobian
from .spaces import ChartError, ManifoldPoint
from .xstar import (  # noqa: F401  (re-exported build surface)
    FStar,
    XStarParams,
    XStarSystem,
    build_fstar,
    build_x1,
    build_x2,
    build_xstar,
)


def linear_field(A, name="") -> VectorFieldDef:
    """The field x -> A x on R^n."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix must be finite")
    n = A.shape[0]
    return field_from_callable(
        f"R{n}", lambda x: x @ A.T, name=name or "linear",
        smoothness_note="linear, C^inf",
        params={"matrix": A.tolist()},
    )


@dataclass(frozen=True)
class FieldPair:
    """Two fields on one space plus the sampling grid for rho_1 estimation."""

    field_a: VectorFieldDef
    field_b: VectorFieldDef
    grid: tuple
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.field_a.space_id != self.field_b.space_id:
            raise ChartError("fields live on different spaces")
        if len(self.grid) == 0:
            raise ValueError("sampling grid must be nonempty")


def rho1_estimate(pair: FieldPair) -> float:
    """Grid maximum of |X - Y| + ||DX - DY||; a lower bound on the C^1 metric."""
    worst = 0.0
    for p in pair.grid:
        dv = np.linalg.norm(pair.field_a(p) - pair.field_b(p))
        ja = jacobian(pair.field_a, p, pair.fd_step).matrix
        jb = jacobian(pair.field_b, p, pair.fd_step).matrix
        worst = max(worst, float(dv + np.linalg.norm(ja - jb, 2)))
    return worst


# -- named fields (CLI and pseudotrajectory files refer to fields by name) ----


def get_named_field(name: str, params: dict | None = None) -> VectorFieldDef:
    """Resolve a field by name.

    Known names: ``xstar``, ``x1``, ``x2``, ``saddle2d`` (diag(-1, 1)),
    ``rest-nonhyp`` (diag(0, -1)), ``orbit-nonhyp`` (unit-circle closed
    orbit with a neutral radial direction), ``spiral2d``
    ([[1, -1], [1, 1]]), ``b1-saddle`` (diag(-1, 1, 2)), and
    ``linear`` (requires ``params["matrix"]``).
    """
    params = params or {}
    if name == "xstar":
        return build_xstar().field
    if name == "x1":
        return build_x1()
    if name == "x2":
        return build_x2()
    if name == "saddle2d":
        return linear_field(np.diag([-1.0, 1.0]), name="saddle2d")
    if name == "rest-nonhyp":
        return linear_field(np.diag([0.0, -1.0]), name="rest-nonhyp")
    if name == "spiral2d":
        return linear_field([[1.0, -1.0], [1.0, 1.0]], name="spiral2d")
    if name == "b1-saddle":
        return linear_field(np.diag([-1.0, 1.0, 2.0]), name="b1-saddle")
    if name == "orbit-nonhyp":
        return linear_field([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]],
                            name="orbit-nonhyp")
    if name == "linear":
        if "matrix" not in params:
            raise ValueError("field 'linear' requires params['matrix']")
        return linear_field(np.asarray(params["matrix"], dtype=float), name="linear")
    raise ValueError(f"unknown field {name!r}")
