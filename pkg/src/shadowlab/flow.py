"""Numerical flow map, trajectories, and finite-difference Jacobians.

Integration runs in chart coordinates.  On sphere factors the integrator
hands off between the band chart and the Cartesian pole charts with a small
hysteresis (band -> pole at |r| = 0.87, pole -> band at pole radius 0.17),
so orbits never reach a coordinate singularity.  The default integrator is
adaptive RK45 with rtol = atol = 1e-9; a fixed-step RK4 fallback
(``fixed_dt``) gives bit-reproducible runs.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .spaces import (
    SWITCH_TO_BAND,
    SWITCH_TO_POLE,
    ChartError,
    EuclideanSpace,
    ManifoldPoint,
    ProductSpace,
    SphereSpace,
    get_space,
)


class IntegrationError(RuntimeError):
    """Integration failed; ``reach_time`` is how far the solver got."""

    def __init__(self, message, reach_time=None):
        super().__init__(message)
        self.reach_time = reach_time


@dataclass(frozen=True)
class VectorFieldDef:
    """An evaluable field x -> X(x) with chart metadata.

    ``chart_eval(chart_id, coords)`` is the workhorse: vectorized over the
    leading axes of ``coords`` and returning coordinate velocities in the
    same chart.
    """

    space_id: str
    chart_eval: Callable
    name: str = ""
    smoothness_note: str = ""
    params: dict = dc_field(default_factory=dict)

    @property
    def space(self):
        return get_space(self.space_id)

    @property
    def evaluator(self):
        return lambda x: evaluate_field(self, x)

    def __call__(self, x: ManifoldPoint) -> np.ndarray:
        return evaluate_field(self, x)


def field_from_callable(space_id, fn, name="", smoothness_note="", params=None):
    """Wrap a vectorized coordinate function f(coords) -> velocities."""
    space = get_space(space_id)
    if not isinstance(space, EuclideanSpace):
        raise ChartError("field_from_callable only supports Euclidean spaces")

    def chart_eval(chart_id, coords):
        if chart_id != "e":
            raise ChartError(f"unknown chart {chart_id!r} on {space_id}")
        return np.asarray(fn(np.asarray(coords, dtype=float)), dtype=float)

    return VectorFieldDef(space_id, chart_eval, name=name,
                          smoothness_note=smoothness_note, params=params or {})


def evaluate_field(field, x: ManifoldPoint) -> np.ndarray:
    """Evaluate X(x), returned in the chart of x.

    Points outside the working atlas (e.g. band coordinates with
    |r| > 0.9) are re-charted internally; the velocity is converted back.
    A zero velocity at a sphere pole is returned as the zero band vector.
    """
    if x.space_id != field.space_id:
        raise ChartError(f"point on {x.space_id}, field on {field.space_id}")
    space = x.space
    chart, coords = space.preferred_chart(x.chart_id, x.array())
    vel = np.asarray(field.chart_eval(chart, coords), dtype=float)
    if chart == x.chart_id:
        return vel
    return space.velocity_transition(chart, coords, vel, x.chart_id)


# -- chart switching --------------------------------------------------------


def _factor_layout(space):
    """[(factor, chart-slice-index, coord offset)] for product/plain spaces."""
    if isinstance(space, ProductSpace):
        out = []
        k = 0
        for i, f in enumerate(space.factors):
            out.append((f, i, k))
            k += f.dim
        return out
    return [(space, 0, 0)]


def _split_chart(space, chart):
    return space.split_chart(chart) if isinstance(space, ProductSpace) else [chart]


def _join_chart(parts):
    return "|".join(parts)


def _switch_events(space, chart):
    """Terminal solve_ivp events that trigger a chart handoff."""
    events = []
    parts = _split_chart(space, chart)
    for f, i, k in _factor_layout(space):
        if not isinstance(f, SphereSpace):
            continue
        if parts[i] == "band":
            def ev_up(t, y, k=k):
                return y[k] - SWITCH_TO_POLE

            def ev_dn(t, y, k=k):
                return y[k] + SWITCH_TO_POLE

            ev_up.terminal = True
            ev_dn.terminal = True
            events.extend([ev_up, ev_dn])
        else:
            def ev_out(t, y, k=k):
                return y[k] ** 2 + y[k + 1] ** 2 - SWITCH_TO_BAND ** 2

            ev_out.terminal = True
            ev_out.direction = 1
            events.append(ev_out)
    return events


def _apply_switches(space, chart, coords):
    """Re-chart any sphere factor that left its hysteresis window."""
    parts = list(_split_chart(space, chart))
    coords = np.asarray(coords, dtype=float).copy()
    changed = False
    for f, i, k in _factor_layout(space):
        if not isinstance(f, SphereSpace):
            continue
        sub = coords[k:k + f.dim]
        if parts[i] == "band":
            r = sub[0]
            if abs(r) >= SWITCH_TO_POLE:
                target = "n" if r > 0 else "s"
                coords[k:k + f.dim] = f.transition("band", sub, target)
                parts[i] = target
                changed = True
        else:
            if np.hypot(sub[0], sub[1]) >= SWITCH_TO_BAND:
                coords[k:k + f.dim] = f.transition(parts[i], sub, "band")
                parts[i] = "band"
                changed = True
    return _join_chart(parts), coords, changed


# -- flow solutions ----------------------------------------------------------


@dataclass
class _Segment:
    t0: float
    t1: float
    chart: str
    dense: object  # OdeSolution or Hermite table


class _HermiteTable:
    """Cubic Hermite dense output for the fixed-step integrator."""

    def __init__(self, ts, ys, fs):
        self.ts = np.asarray(ts)
        self.ys = np.asarray(ys)
        self.fs = np.asarray(fs)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        ts = self.ts
        ascending = ts[-1] >= ts[0]
        key = ts if ascending else -ts
        idx = np.clip(np.searchsorted(key, t if ascending else -t) - 1, 0, len(ts) - 2)
        t0, t1 = ts[idx], ts[idx + 1]
        h = t1 - t0
        s = np.where(h != 0, (t - t0) / np.where(h == 0, 1.0, h), 0.0)
        y0, y1 = self.ys[idx], self.ys[idx + 1]
        f0, f1 = self.fs[idx], self.fs[idx + 1]
        s = s[..., None]
        h = np.asarray(h)[..., None]
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        out = h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1
        return np.moveaxis(out, -1, 0) if out.ndim > 1 else out


class FlowSolution:
    """Dense flow solution across chart handoffs; evaluable at any time."""

    def __init__(self, field, segments, t_start, t_end):
        self.field = field
        self.segments = segments
        self.t_start = t_start
        self.t_end = t_end

    def _segment_for(self, t):
        fwd = self.t_end >= self.t_start
        for seg in self.segments:
            lo, hi = (seg.t0, seg.t1) if fwd else (seg.t1, seg.t0)
            if lo - 1e-12 <= t <= hi + 1e-12:
                return seg
        return self.segments[-1]

    def eval_chart(self, t):
        seg = self._segment_for(t)
        y = np.asarray(seg.dense(t), dtype=float)
        return seg.chart, y

    def eval(self, t) -> ManifoldPoint:
        chart, y = self.eval_chart(t)
        return ManifoldPoint(self.field.space_id, chart, tuple(y))

    def eval_embedded(self, t) -> np.ndarray:
        chart, y = self.eval_chart(t)
        return self.field.space.to_embedding(chart, y)

    def eval_many_embedded(self, ts) -> np.ndarray:
        space = self.field.space
        out = np.empty((len(ts), space.emb_dim))
        for j, t in enumerate(ts):
            out[j] = self.eval_embedded(t)
        return out


@dataclass(frozen=True)
class IntegratorOptions:
    rtol: float = 1e-9
    atol: float = 1e-9
    method: str = "RK45"
    fixed_dt: float | None = None
    max_switches: int = 10_000


DEFAULT_OPTS = IntegratorOptions()


def flow(field, x: ManifoldPoint, t_span, opts: IntegratorOptions = DEFAULT_OPTS):
    """Integrate the field from x over t_span; x is the state at t_span[0]."""
    t0, t1 = float(t_span[0]), float(t_span[1])
    space = field.space
    chart, coords = space.preferred_chart(x.chart_id, x.array())
    if t0 == t1:
        table = _HermiteTable([t0, t0], [coords, coords], np.zeros((2, len(coords))))
        return FlowSolution(field, [_Segment(t0, t1, chart, table)], t0, t1)
    if opts.fixed_dt is not None:
        return _flow_fixed(field, chart, coords, t0, t1, opts)

    def rhs_for(chart_id):
        def rhs(t, y):
            return field.chart_eval(chart_id, y)
        return rhs

    segments = []
    t_cur = t0
    for _ in range(opts.max_switches):
        sol = solve_ivp(
            rhs_for(chart), (t_cur, t1), coords,
            method=opts.method, rtol=opts.rtol, atol=opts.atol,
            dense_output=True, events=_switch_events(space, chart),
        )
        if sol.status == -1:
            raise IntegrationError(sol.message, reach_time=float(sol.t[-1]))
        segments.append(_Segment(t_cur, float(sol.t[-1]), chart, sol.sol))
        if sol.status == 0:
            return FlowSolution(field, segments, t0, t1)
        t_cur = float(sol.t[-1])
        chart, coords, _ = _apply_switches(space, chart, sol.y[:, -1])
    raise IntegrationError(
        f"exceeded {opts.max_switches} chart switches", reach_time=t_cur
    )


def _flow_fixed(field, chart, coords, t0, t1, opts):
    dt = abs(opts.fixed_dt) * (1 if t1 > t0 else -1)
    n = max(1, int(round((t1 - t0) / dt)))
    dt = (t1 - t0) / n
    space = field.space
    segments = []
    ts, ys, fs = [t0], [coords], [field.chart_eval(chart, coords)]
    t = t0
    y = coords
    for _ in range(n):
        k1 = field.chart_eval(chart, y)
        k2 = field.chart_eval(chart, y + 0.5 * dt * k1)
        k3 = field.chart_eval(chart, y + 0.5 * dt * k2)
        k4 = field.chart_eval(chart, y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
        new_chart, new_coords, changed = _apply_switches(space, chart, y)
        ts.append(t)
        ys.append(y)
        fs.append(field.chart_eval(chart, y))
        if changed:
            segments.append(_Segment(ts[0], t, chart, _HermiteTable(ts, ys, fs)))
            chart, y = new_chart, new_coords
            ts, ys, fs = [t], [y], [field.chart_eval(chart, y)]
    if len(ts) > 1:
        segments.append(_Segment(ts[0], t, chart, _HermiteTable(ts, ys, fs)))
    if not segments:
        segments.append(_Segment(t0, t1, chart, _HermiteTable(ts * 2, ys * 2, fs * 2)))
    return FlowSolution(field, segments, t0, t1)


def integrate(field, x: ManifoldPoint, t, opts: IntegratorOptions = DEFAULT_OPTS):
    """The flow map phi(t, x)."""
    if t == 0.0:
        return x
    return flow(field, x, (0.0, t), opts).eval(t)


# -- trajectories ------------------------------------------------------------


@dataclass
class Trajectory:
    """Sampled exact orbit; between samples the curve is the exact flow."""

    field: VectorFieldDef
    times: np.ndarray
    points: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must strictly increase")

    def embedded(self) -> np.ndarray:
        space = self.field.space
        return np.stack([p.embedded() for p in self.points])

    def to_csv(self, path):
        dim = self.field.space.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "chart"] + [f"c{i + 1}" for i in range(dim)])
            for t, p in zip(self.times, self.points):
                w.writerow([repr(float(t)), p.chart_id] + [repr(c) for c in p.coords])

    def to_json(self, path):
        rows = [
            {"t": float(t), "chart": p.chart_id, "coords": list(p.coords)}
            for t, p in zip(self.times, self.points)
        ]
        with open(path, "w") as fh:
            json.dump({"space": self.field.space_id, "field": self.field.name,
                       "samples": rows}, fh, indent=1, sort_keys=True)


def trajectory(field, x: ManifoldPoint, t0, t1, max_dt,
               opts: IntegratorOptions = DEFAULT_OPTS) -> Trajectory:
    """Sample the orbit of x (state at t0) on [t0, t1] at spacing <= max_dt."""
    if not t0 < t1:
        raise ValueError("need t0 < t1")
    if max_dt <= 0:
        raise ValueError("need max_dt > 0")
    n = max(1, int(np.ceil((t1 - t0) / max_dt)))
    times = np.linspace(t0, t1, n + 1)
    sol = flow(field, x, (t0, t1), opts)
    points = [sol.eval(t) for t in times]
    return Trajectory(field, times, points)


# -- Jacobians ---------------------------------------------------------------


@dataclass(frozen=True)
class JacobianEstimate:
    base: ManifoldPoint
    matrix: np.ndarray
    step: float

    def eigenvalues(self):
        return np.linalg.eigvals(self.matrix)


def jacobian(field, x: ManifoldPoint, step=1e-5) -> JacobianEstimate:
    """Central finite differences of the field in the chart of x."""
    if step <= 0:
        raise ValueError("need step > 0")
    space = field.space
    coords = x.array()
    dim = space.dim
    probes = np.repeat(coords[None, :], 2 * dim, axis=0)
    for i in range(dim):
        probes[2 * i, i] += step
        probes[2 * i + 1, i] -= step
    if not np.all(space.chart_valid(x.chart_id, probes)):
        raise ChartError("chart boundary too close for the requested step")
    vals = np.asarray(field.chart_eval(x.chart_id, probes), dtype=float)
    mat = np.empty((dim, dim))
    for i in range(dim):
        mat[:, i] = (vals[2 * i] - vals[2 * i + 1]) / (2.0 * step)
    return JacobianEstimate(x, mat, float(step))


# -- batched fixed-step integration -------------------------------------------


def batch_states_from_points(points):
    charts = np.array([p.chart_id for p in points], dtype=object)
    coords = np.stack([p.array() for p in points])
    return charts, coords


def batch_embed(space, charts, coords):
    out = np.empty((coords.shape[0], space.emb_dim))
    for chart in np.unique(charts):
        m = charts == chart
        out[m] = space.to_embedding(chart, coords[m])
    return out


def _batch_eval(field, charts, coords):
    out = np.empty_like(coords)
    for chart in np.unique(charts):
        m = charts == chart
        out[m] = field.chart_eval(chart, coords[m])
    return out


def _batch_switch(space, charts, coords):
    for f, i, k in _factor_layout(space):
        if not isinstance(f, SphereSpace):
            continue
        parts = np.array([c.split("|")[i] for c in charts], dtype=object) \
            if isinstance(space, ProductSpace) else charts
        band = parts == "band"
        r = coords[:, k]
        to_pole = band & (np.abs(r) >= SWITCH_TO_POLE)
        pole = ~band
        rho = np.hypot(coords[:, k], coords[:, k + 1])
        to_band = pole & (rho >= SWITCH_TO_BAND)
        for idx in np.flatnonzero(to_pole):
            target = "n" if coords[idx, k] > 0 else "s"
            coords[idx, k:k + 2] = f.transition("band", coords[idx, k:k + 2], target)
            charts[idx] = _replace_part(charts[idx], i, target, space)
        for idx in np.flatnonzero(to_band):
            part = charts[idx].split("|")[i] if isinstance(space, ProductSpace) else charts[idx]
            coords[idx, k:k + 2] = f.transition(part, coords[idx, k:k + 2], "band")
            charts[idx] = _replace_part(charts[idx], i, "band", space)
    return charts, coords


def _replace_part(chart, i, part, space):
    if not isinstance(space, ProductSpace):
        return part
    parts = chart.split("|")
    parts[i] = part
    return "|".join(parts)


def batch_flow(field, charts, coords, t0, t1, dt, observer=None):
    """Fixed-step RK4 for many states at once, chart-switching per row.

    ``observer(t, charts, coords)`` runs after every step; mutate-free.
    Returns the final (charts, coords).
    """
    charts = np.asarray(charts, dtype=object).copy()
    coords = np.asarray(coords, dtype=float).copy()
    space = field.space
    n = max(1, int(round(abs(t1 - t0) / dt)))
    h = (t1 - t0) / n
    t = t0
    for _ in range(n):
        k1 = _batch_eval(field, charts, coords)
        k2 = _batch_eval(field, charts, coords + 0.5 * h * k1)
        k3 = _batch_eval(field, charts, coords + 0.5 * h * k2)
        k4 = _batch_eval(field, charts, coords + h * k3)
        coords = coords + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
        charts, coords = _batch_switch(space, charts, coords)
        if observer is not None:
            observer(t, charts, coords)
    return charts, coords
