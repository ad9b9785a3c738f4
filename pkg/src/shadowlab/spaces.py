"""Charted phase spaces, manifold points, and the chordal product metric.

Spheres carry three charts:

* ``band``: coordinates ``(r, phi)`` with ``r in [-1, 1]`` and ``phi`` an
  angle.  All points ``(1, .)`` are one point (north pole), likewise
  ``(-1, .)`` (south pole).  Integrators use the band only for
  ``|r| <= 0.9``.
* ``n`` / ``s``: Cartesian pole charts with coordinates
  ``(a, b) = ((1 -+ r) cos phi, (1 -+ r) sin phi)``, valid for
  ``|r| >= 0.8``.

Distances are chordal in the embedding
``e(r, phi) = (sqrt(1-r^2) cos phi, sqrt(1-r^2) sin phi, r)``; product
spaces use the l2 combination of factor distances, which equals the
Euclidean distance between concatenated embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi

BAND_CORE = 0.9        # |r| bound of the working band region
POLE_CORE = 0.2        # pole-chart radius bound (|r| >= 0.8)
SWITCH_TO_POLE = 0.87  # band -> pole handoff on |r|
SWITCH_TO_BAND = 0.17  # pole -> band handoff on pole radius
PREFERRED_SPLIT = 0.85  # chart choice when constructing points


class ChartError(ValueError):
    """Unknown chart or coordinates outside every chart domain."""


def wrap_angle(phi):
    """Wrap an angle (array or scalar) into [0, 2*pi)."""
    return np.mod(phi, TWO_PI)


def wrap_pi(phi):
    """Wrap an angle into [-pi, pi)."""
    return np.mod(np.asarray(phi) + np.pi, TWO_PI) - np.pi


def smoothstep(u):
    """C^2 quintic step: 0 for u <= 0, 1 for u >= 1."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (u * (6.0 * u - 15.0) + 10.0)


def smoothstep_d(u):
    """Derivative of :func:`smoothstep` with respect to u."""
    uc = np.clip(u, 0.0, 1.0)
    d = 30.0 * uc * uc * (uc - 1.0) * (uc - 1.0)
    return np.where((u <= 0.0) | (u >= 1.0), 0.0, d)


class EuclideanSpace:
    """R^n with the single chart ``e``."""

    def __init__(self, space_id: str, dim: int):
        self.space_id = space_id
        self.dim = dim
        self.emb_dim = dim
        self.charts = ("e",)

    def chart_valid(self, chart, coords):
        if chart != "e":
            raise ChartError(f"unknown chart {chart!r} on {self.space_id}")
        coords = np.asarray(coords, dtype=float)
        return np.all(np.isfinite(coords), axis=-1)

    def to_embedding(self, chart, coords):
        if chart != "e":
            raise ChartError(f"unknown chart {chart!r} on {self.space_id}")
        return np.asarray(coords, dtype=float)

    def from_embedding(self, emb):
        return "e", np.asarray(emb, dtype=float)

    def transition(self, chart_from, coords, chart_to):
        if chart_from != "e" or chart_to != "e":
            raise ChartError("Euclidean space has a single chart 'e'")
        return np.asarray(coords, dtype=float)

    def preferred_chart(self, chart, coords):
        return "e", np.asarray(coords, dtype=float)

    def velocity_transition(self, chart_from, coords, vel, chart_to):
        if chart_from != chart_to:
            raise ChartError("Euclidean space has a single chart 'e'")
        return np.asarray(vel, dtype=float)


class SphereSpace:
    """S^2 with a band chart and two Cartesian pole charts."""

    def __init__(self, space_id: str = "S2"):
        self.space_id = space_id
        self.dim = 2
        self.emb_dim = 3
        self.charts = ("band", "n", "s")

    # -- domains ----------------------------------------------------------

    def chart_valid(self, chart, coords):
        coords = np.asarray(coords, dtype=float)
        finite = np.all(np.isfinite(coords), axis=-1)
        if chart == "band":
            r = coords[..., 0]
            return finite & (np.abs(r) <= 1.0 + 1e-12)
        if chart in ("n", "s"):
            rho = np.hypot(coords[..., 0], coords[..., 1])
            return finite & (rho <= POLE_CORE + 1e-9)
        raise ChartError(f"unknown chart {chart!r} on {self.space_id}")

    # -- embeddings -------------------------------------------------------

    def to_embedding(self, chart, coords):
        coords = np.asarray(coords, dtype=float)
        if chart == "band":
            r = coords[..., 0]
            phi = coords[..., 1]
            c = np.sqrt(np.clip(1.0 - r * r, 0.0, None))
            return np.stack([c * np.cos(phi), c * np.sin(phi), r], axis=-1)
        if chart in ("n", "s"):
            a = coords[..., 0]
            b = coords[..., 1]
            rho = np.hypot(a, b)
            r = 1.0 - rho if chart == "n" else rho - 1.0
            c = np.sqrt(np.clip(rho * (2.0 - rho), 0.0, None))
            safe = np.where(rho > 0.0, rho, 1.0)
            return np.stack([c * a / safe, c * b / safe, r], axis=-1)
        raise ChartError(f"unknown chart {chart!r} on {self.space_id}")

    def from_embedding(self, emb):
        emb = np.asarray(emb, dtype=float)
        r = float(np.clip(emb[2], -1.0, 1.0))
        phi = float(np.arctan2(emb[1], emb[0])) if np.hypot(emb[0], emb[1]) > 0 else 0.0
        if abs(r) <= PREFERRED_SPLIT:
            return "band", np.array([r, wrap_angle(phi)])
        rho = 1.0 - abs(r)
        chart = "n" if r > 0 else "s"
        return chart, np.array([rho * np.cos(phi), rho * np.sin(phi)])

    # -- transitions ------------------------------------------------------

    def transition(self, chart_from, coords, chart_to):
        coords = np.asarray(coords, dtype=float)
        if chart_from == chart_to:
            return coords.copy()
        if chart_from == "band" and chart_to in ("n", "s"):
            r = coords[..., 0]
            phi = coords[..., 1]
            rho = 1.0 - r if chart_to == "n" else 1.0 + r
            return np.stack([rho * np.cos(phi), rho * np.sin(phi)], axis=-1)
        if chart_from in ("n", "s") and chart_to == "band":
            a = coords[..., 0]
            b = coords[..., 1]
            rho = np.hypot(a, b)
            r = 1.0 - rho if chart_from == "n" else rho - 1.0
            phi = np.arctan2(b, a)
            phi = np.where(rho > 0.0, phi, 0.0)
            return np.stack([r, wrap_angle(phi)], axis=-1)
        raise ChartError(f"no transition {chart_from!r} -> {chart_to!r}")

    def velocity_transition(self, chart_from, coords, vel, chart_to):
        """Push a chart velocity at ``coords`` into another chart."""
        coords = np.asarray(coords, dtype=float)
        vel = np.asarray(vel, dtype=float)
        if chart_from == chart_to:
            return vel.copy()
        if chart_from == "band" and chart_to in ("n", "s"):
            r, phi = coords[..., 0], coords[..., 1]
            vr, vphi = vel[..., 0], vel[..., 1]
            rho = 1.0 - r if chart_to == "n" else 1.0 + r
            drho = -vr if chart_to == "n" else vr
            cp, sp = np.cos(phi), np.sin(phi)
            va = drho * cp - rho * sp * vphi
            vb = drho * sp + rho * cp * vphi
            return np.stack([va, vb], axis=-1)
        if chart_from in ("n", "s") and chart_to == "band":
            a, b = coords[..., 0], coords[..., 1]
            va, vb = vel[..., 0], vel[..., 1]
            rho = np.hypot(a, b)
            if np.any(rho == 0.0):
                if vel.ndim == 1 and np.allclose(vel, 0.0):
                    return np.zeros(2)
                raise ChartError("velocity at a pole is not representable in the band chart")
            ua, ub = a / rho, b / rho
            drho = ua * va + ub * vb
            vphi = (-ub * va + ua * vb) / rho
            vr = -drho if chart_from == "n" else drho
            return np.stack([vr, vphi], axis=-1)
        raise ChartError(f"no velocity transition {chart_from!r} -> {chart_to!r}")

    def preferred_chart(self, chart, coords):
        """Re-chart into the integrator's working atlas (no hysteresis)."""
        coords = np.asarray(coords, dtype=float)
        if chart == "band":
            r = coords[0]
            if abs(r) <= PREFERRED_SPLIT:
                return "band", coords.copy()
            target = "n" if r > 0 else "s"
            return target, self.transition("band", coords, target)
        rho = np.hypot(coords[0], coords[1])
        if rho <= PREFERRED_SPLIT:  # pole radius below 0.85 is always fine
            if rho < 1.0 - PREFERRED_SPLIT:
                return chart, coords.copy()
            return "band", self.transition(chart, coords, "band")
        raise ChartError("pole-chart radius out of range")


class ProductSpace:
    """Cartesian product of factor spaces; charts join with '|'."""

    def __init__(self, space_id: str, factors):
        self.space_id = space_id
        self.factors = list(factors)
        self.dims = [f.dim for f in self.factors]
        self.dim = sum(self.dims)
        self.emb_dims = [f.emb_dim for f in self.factors]
        self.emb_dim = sum(self.emb_dims)
        self.charts = tuple(
            "|".join(combo) for combo in _chart_combos([f.charts for f in self.factors])
        )

    def split_chart(self, chart):
        parts = chart.split("|")
        if len(parts) != len(self.factors):
            raise ChartError(f"chart {chart!r} does not match {self.space_id}")
        return parts

    def split_coords(self, coords):
        coords = np.asarray(coords, dtype=float)
        out = []
        k = 0
        for d in self.dims:
            out.append(coords[..., k:k + d])
            k += d
        return out

    def chart_valid(self, chart, coords):
        parts = self.split_chart(chart)
        pieces = self.split_coords(coords)
        ok = True
        for f, c, p in zip(self.factors, parts, pieces):
            ok = ok & f.chart_valid(c, p)
        return ok

    def to_embedding(self, chart, coords):
        parts = self.split_chart(chart)
        pieces = self.split_coords(coords)
        embs = [f.to_embedding(c, p) for f, c, p in zip(self.factors, parts, pieces)]
        return np.concatenate(embs, axis=-1)

    def from_embedding(self, emb):
        emb = np.asarray(emb, dtype=float)
        charts, coords = [], []
        k = 0
        for f, d in zip(self.factors, self.emb_dims):
            c, x = f.from_embedding(emb[k:k + d])
            charts.append(c)
            coords.append(x)
            k += d
        return "|".join(charts), np.concatenate(coords)

    def transition(self, chart_from, coords, chart_to):
        pf = self.split_chart(chart_from)
        pt = self.split_chart(chart_to)
        pieces = self.split_coords(coords)
        out = [f.transition(cf, p, ct) for f, cf, p, ct in zip(self.factors, pf, pieces, pt)]
        return np.concatenate(out, axis=-1)

    def velocity_transition(self, chart_from, coords, vel, chart_to):
        pf = self.split_chart(chart_from)
        pt = self.split_chart(chart_to)
        pieces = self.split_coords(coords)
        vels = self.split_coords(vel)
        out = [
            f.velocity_transition(cf, p, v, ct)
            for f, cf, p, v, ct in zip(self.factors, pf, pieces, vels, pt)
        ]
        return np.concatenate(out, axis=-1)

    def preferred_chart(self, chart, coords):
        parts = self.split_chart(chart)
        pieces = self.split_coords(coords)
        charts, out = [], []
        for f, c, p in zip(self.factors, parts, pieces):
            c2, p2 = f.preferred_chart(c, p)
            charts.append(c2)
            out.append(p2)
        return "|".join(charts), np.concatenate(out)


def _chart_combos(options):
    if len(options) == 1:
        return [(c,) for c in options[0]]
    rest = _chart_combos(options[1:])
    return [(c,) + r for c in options[0] for r in rest]


# -- registry ---------------------------------------------------------------

_SPACES: dict[str, object] = {}


def get_space(space_id: str):
    """Return the space object for an identifier like 'R3', 'S2', 'S2xS2'."""
    if space_id in _SPACES:
        return _SPACES[space_id]
    if space_id.startswith("R") and space_id[1:].isdigit():
        sp = EuclideanSpace(space_id, int(space_id[1:]))
    elif space_id == "S2":
        sp = SphereSpace("S2")
    elif space_id == "S2xS2":
        sp = ProductSpace("S2xS2", [SphereSpace("S2"), SphereSpace("S2")])
    else:
        raise ChartError(f"unknown space {space_id!r}")
    _SPACES[space_id] = sp
    return sp


@dataclass(frozen=True)
class ManifoldPoint:
    """A chart-tagged coordinate tuple on a registered phase space."""

    space_id: str
    chart_id: str
    coords: tuple

    def __post_init__(self):
        space = get_space(self.space_id)
        coords = tuple(float(c) for c in self.coords)
        if len(coords) != space.dim:
            raise ChartError(
                f"{self.space_id} expects {space.dim} coordinates, got {len(coords)}"
            )
        if not np.all(np.isfinite(coords)):
            raise ChartError("coordinates must be finite")
        if not np.all(space.chart_valid(self.chart_id, np.asarray(coords))):
            raise ChartError(
                f"coordinates {coords} outside domain of chart {self.chart_id!r}"
            )
        object.__setattr__(self, "coords", coords)

    @property
    def space(self):
        return get_space(self.space_id)

    def array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)

    def embedded(self) -> np.ndarray:
        return self.space.to_embedding(self.chart_id, self.array())

    def in_chart(self, chart_id: str) -> "ManifoldPoint":
        coords = self.space.transition(self.chart_id, self.array(), chart_id)
        return ManifoldPoint(self.space_id, chart_id, tuple(coords))

    def normalized(self) -> "ManifoldPoint":
        """Same point, re-charted into the integrator's working atlas."""
        chart, coords = self.space.preferred_chart(self.chart_id, self.array())
        return ManifoldPoint(self.space_id, chart, tuple(coords))


def point_from_embedding(space_id: str, emb) -> ManifoldPoint:
    chart, coords = get_space(space_id).from_embedding(np.asarray(emb, dtype=float))
    return ManifoldPoint(space_id, chart, tuple(coords))


def distance(x: ManifoldPoint, y: ManifoldPoint) -> float:
    """Chordal (product) distance; zero iff same point under pole identification."""
    if x.space_id != y.space_id:
        raise ChartError(f"points live on {x.space_id} and {y.space_id}")
    return float(np.linalg.norm(x.embedded() - y.embedded()))
