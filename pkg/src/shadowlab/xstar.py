"""The example system on S2 x S2: two sphere fields glued by a diffeomorphism.

First factor, upper half (r1 >= 0): dr1/dt = 1 - r1^2, dphi1/dt = 0 on the
band, blended (pole radius 0.2..0.4) into the exact linear field
diag(-2, -1) in north-pole-chart coordinates.

Second factor: a hyperbolic attractor at s2 = (0, pi) and repeller at
u2 = (0, 0), exactly linear with D = [[-1, 1], [-1, -1]] (resp. its
negation) within chart radius 0.2, blended over [0.2, 0.4] into the
meridian gradient flow of the height function along the u2-s2 axis.  The
gradient flow is replaced inside the polar caps (pole radius <= 0.3) by a
constant pole-chart field, so the assembled field is smooth in the working
atlas and has no rest points besides s2 and u2.

The glued field on the lower half is the time-reversed pushforward of the
upper field under the diffeomorphism

    (r1, phi1, r2, phi2) |-> (-r1, phi1,
                              w4*g2(r2) + (1 - w4)*g3(r2),
                              phi2 + g1(r1, phi1)),

with w4 = g4(r1, phi1).  All four auxiliary functions are re-verified
numerically at build time.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import root

from .flow import VectorFieldDef, jacobian
from .spaces import (
    ChartError,
    ManifoldPoint,
    get_space,
    smoothstep,
    smoothstep_d,
    wrap_angle,
)

TWO_PI = 2.0 * np.pi

L_S2 = np.array([[-1.0, 1.0], [-1.0, -1.0]])  # attractor block at s2
L_U2 = -L_S2                                  # repeller block at u2

U2_BAND = np.array([0.0, 0.0])
S2_BAND = np.array([0.0, np.pi])


@dataclass(frozen=True)
class XStarParams:
    g2_bow: float = 0.3            # g2(r2) = r2 - bow*(1 - r2^2)
    g4_amp: float = 0.25           # g4 = 1/2 + amp*sin(phi1)*fade(r1)
    g4_fade: tuple = (0.3, 0.5)    # r1 window where g4's phi1 term fades out
    g1_fade: tuple = (0.8, 0.95)   # r1 window where g1's phi1 term fades out
    x1_blend: tuple = (0.2, 0.4)   # pole-radius window of the X1 blend
    x2_linear: float = 0.2         # chart radius of exact linearity at s2/u2
    x2_blend: float = 0.4          # outer radius of the linear-to-gradient blend
    x2_cap: tuple = (0.15, 0.3)    # pole-radius window of the polar caps
    cap_speed: float = 0.5

    def as_dict(self):
        return {
            "g2_bow": self.g2_bow, "g4_amp": self.g4_amp,
            "g4_fade": list(self.g4_fade), "g1_fade": list(self.g1_fade),
            "x1_blend": list(self.x1_blend), "x2_linear": self.x2_linear,
            "x2_blend": self.x2_blend, "x2_cap": list(self.x2_cap),
            "cap_speed": self.cap_speed,
        }


class XStarBuildError(RuntimeError):
    """A numeric check of the construction failed at build time."""


# -- first factor -------------------------------------------------------------


def _x1_pole_weight(rho, params):
    lo, hi = params.x1_blend
    return 1.0 - smoothstep((rho - lo) / (hi - lo))


def x1_band(r, phi, params):
    rho = 1.0 - r
    beta = _x1_pole_weight(rho, params)
    cp = np.cos(phi)
    vr = (1.0 - beta) * (1.0 - r * r) + beta * rho * (1.0 + cp * cp)
    vphi = beta * np.sin(phi) * cp
    return np.stack([vr, vphi], axis=-1)


def x1_north(a, b, params):
    rho = np.hypot(a, b)
    beta = _x1_pole_weight(rho, params)
    slope = (1.0 - beta) * (2.0 - rho)
    va = -slope * a - beta * 2.0 * a
    vb = -slope * b - beta * b
    return np.stack([va, vb], axis=-1)


def make_x1_eval(params):
    def chart_eval(chart, coords):
        coords = np.asarray(coords, dtype=float)
        if chart == "band":
            return x1_band(coords[..., 0], coords[..., 1], params)
        if chart == "n":
            return x1_north(coords[..., 0], coords[..., 1], params)
        if chart == "s":
            # smooth continuation of the band formula below the equator
            a, b = coords[..., 0], coords[..., 1]
            rho = np.hypot(a, b)
            return np.stack([(2.0 - rho) * a, (2.0 - rho) * b], axis=-1)
        raise ChartError(f"unknown chart {chart!r} on S2")
    return chart_eval


def build_x1(params: XStarParams = XStarParams()) -> VectorFieldDef:
    """Field on the first sphere: north pole attracts the upper half."""
    return VectorFieldDef(
        "S2", make_x1_eval(params), name="x1",
        smoothness_note=(
            "C^2 on the closed upper half r >= 0 (the intended domain); the "
            "band formula extends smoothly below the equator."
        ),
        params={"blend": list(params.x1_blend)},
    )


# -- second factor ------------------------------------------------------------


def _gradient_band(r, phi):
    c = np.sqrt(np.clip(1.0 - r * r, 1e-12, None))
    return np.stack([r * c * np.cos(phi), np.sin(phi) / c], axis=-1)


def _gradient_pole(a, b, rho, south):
    c = np.sqrt(np.clip(rho * (2.0 - rho), 1e-12, None))
    safe = np.where(rho > 0, rho, 1.0)
    if south:
        r = rho - 1.0
        va = r * c * a * a / safe**2 - b * b / (safe * c)
    else:
        r = 1.0 - rho
        va = -(r * c * a * a / safe**2 + b * b / (safe * c))
    vb = a * b * (3.0 * rho - rho * rho - 1.0) / (safe * c)
    return np.stack([va, vb], axis=-1)


def _cap_weight(rho, params):
    lo, hi = params.x2_cap
    return 1.0 - smoothstep((rho - lo) / (hi - lo))


def _linear_weight(d, params):
    lo, hi = params.x2_linear, params.x2_blend
    return 1.0 - smoothstep((d - lo) / (hi - lo))


def x2_band(r, phi, params):
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    xi_u = np.stack([r, np.mod(phi + np.pi, TWO_PI) - np.pi], axis=-1)
    xi_s = np.stack([r, np.mod(phi, TWO_PI) - np.pi], axis=-1)
    w_u = _linear_weight(np.linalg.norm(xi_u, axis=-1), params)
    w_s = _linear_weight(np.linalg.norm(xi_s, axis=-1), params)
    rho_n = 1.0 - r
    rho_s = 1.0 + r
    w_cn = _cap_weight(rho_n, params)
    w_cs = _cap_weight(rho_s, params)
    w_g = 1.0 - w_u - w_s - w_cn - w_cs

    kappa = params.cap_speed
    cp, sp = np.cos(phi), np.sin(phi)
    cap_n = np.stack([kappa * cp, kappa * sp / np.where(rho_n > 0, rho_n, 1.0)], axis=-1)
    cap_s = np.stack([-kappa * cp, kappa * sp / np.where(rho_s > 0, rho_s, 1.0)], axis=-1)

    out = (w_u[..., None] * (xi_u @ L_U2.T)
           + w_s[..., None] * (xi_s @ L_S2.T)
           + w_cn[..., None] * cap_n
           + w_cs[..., None] * cap_s
           + w_g[..., None] * _gradient_band(r, phi))
    return out


def x2_pole(a, b, params, south):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rho = np.hypot(a, b)
    w_c = _cap_weight(rho, params)
    cap = np.stack([np.full_like(a, -params.cap_speed), np.zeros_like(a)], axis=-1)
    grad = _gradient_pole(a, b, rho, south)
    return w_c[..., None] * cap + (1.0 - w_c)[..., None] * grad


def make_x2_eval(params):
    def chart_eval(chart, coords):
        coords = np.asarray(coords, dtype=float)
        if chart == "band":
            return x2_band(coords[..., 0], coords[..., 1], params)
        if chart in ("n", "s"):
            return x2_pole(coords[..., 0], coords[..., 1], params, chart == "s")
        raise ChartError(f"unknown chart {chart!r} on S2")
    return chart_eval


def build_x2(params: XStarParams = XStarParams()) -> VectorFieldDef:
    """Field on the second sphere: repeller u2 = (0, 0), attractor s2 = (0, pi)."""
    return VectorFieldDef(
        "S2", make_x2_eval(params), name="x2",
        smoothness_note="C^2 everywhere in the working atlas",
        params={"linear_radius": params.x2_linear, "blend_radius": params.x2_blend,
                "cap": list(params.x2_cap), "cap_speed": params.cap_speed},
    )


# -- auxiliary functions and the gluing map -----------------------------------


class FStar:
    """The gluing diffeomorphism between the two halves, and its pieces."""

    def __init__(self, params: XStarParams = XStarParams()):
        self.params = params
        self.space = get_space("S2xS2")

    # scalar auxiliary functions (vectorized over numpy arrays)

    def _g1_fade(self, r1):
        lo, hi = self.params.g1_fade
        return 1.0 - smoothstep((r1 - lo) / (hi - lo))

    def _g1_fade_d(self, r1):
        lo, hi = self.params.g1_fade
        return -smoothstep_d((r1 - lo) / (hi - lo)) / (hi - lo)

    def _g4_fade(self, r1):
        lo, hi = self.params.g4_fade
        return 1.0 - smoothstep((r1 - lo) / (hi - lo))

    def _g4_fade_d(self, r1):
        lo, hi = self.params.g4_fade
        return -smoothstep_d((r1 - lo) / (hi - lo)) / (hi - lo)

    def g1(self, r1, phi1):
        s2 = np.sin(0.5 * np.asarray(phi1)) ** 2
        arg = np.asarray(r1) ** 2 + 4.0 * self._g1_fade(r1) * s2
        return np.pi * (1.0 - np.exp(-arg))

    def g1_partials(self, r1, phi1):
        r1 = np.asarray(r1, dtype=float)
        phi1 = np.asarray(phi1, dtype=float)
        s2 = np.sin(0.5 * phi1) ** 2
        arg = r1 ** 2 + 4.0 * self._g1_fade(r1) * s2
        e = np.pi * np.exp(-arg)
        d_r1 = e * (2.0 * r1 + 4.0 * self._g1_fade_d(r1) * s2)
        d_phi1 = e * (2.0 * self._g1_fade(r1) * np.sin(phi1))
        return d_r1, d_phi1

    def g2(self, r2):
        r2 = np.asarray(r2, dtype=float)
        return r2 - self.params.g2_bow * (1.0 - r2 * r2)

    def g3(self, r2):
        r2 = np.asarray(r2, dtype=float)
        return r2 + self.params.g2_bow * (1.0 - r2 * r2)

    def g4(self, r1, phi1):
        return 0.5 + self.params.g4_amp * np.sin(phi1) * self._g4_fade(r1)

    def g4_partials(self, r1, phi1):
        amp = self.params.g4_amp
        d_r1 = amp * np.sin(phi1) * self._g4_fade_d(r1)
        d_phi1 = amp * np.cos(phi1) * self._g4_fade(r1)
        return d_r1, d_phi1

    # the r2 slot: w4-weighted combination of g2 and g3

    def blend(self, r2, w4):
        k = self.params.g2_bow * (1.0 - 2.0 * np.asarray(w4))
        r2 = np.asarray(r2, dtype=float)
        return r2 + k * (1.0 - r2 * r2)

    def blend_inv(self, out, w4):
        k = self.params.g2_bow * (1.0 - 2.0 * np.asarray(w4))
        out = np.asarray(out, dtype=float)
        disc = np.sqrt(1.0 - 4.0 * k * (out - k))
        return 2.0 * (out - k) / (1.0 + disc)

    def blend_dr2(self, r2, w4):
        k = self.params.g2_bow * (1.0 - 2.0 * np.asarray(w4))
        return 1.0 - 2.0 * k * np.asarray(r2)

    def g2_minus_g3(self, r2):
        r2 = np.asarray(r2, dtype=float)
        return -2.0 * self.params.g2_bow * (1.0 - r2 * r2)

    # band-coordinate forward / inverse maps (vectorized over rows (..., 4))

    def forward_band(self, coords):
        coords = np.asarray(coords, dtype=float)
        r1, phi1, r2, phi2 = (coords[..., i] for i in range(4))
        w4 = self.g4(r1, phi1)
        return np.stack([
            -r1, phi1, self.blend(r2, w4), wrap_angle(phi2 + self.g1(r1, phi1)),
        ], axis=-1)

    def inverse_band(self, coords):
        coords = np.asarray(coords, dtype=float)
        r1m, phi1, r2m, phi2m = (coords[..., i] for i in range(4))
        r1 = -r1m
        w4 = self.g4(r1, phi1)
        return np.stack([
            r1, phi1, self.blend_inv(r2m, w4),
            wrap_angle(phi2m - self.g1(r1, phi1)),
        ], axis=-1)

    # point-level maps (chart-aware, normalized output)

    def forward(self, p: ManifoldPoint) -> ManifoldPoint:
        return self._apply_point(p, inverse=False)

    def inverse(self, p: ManifoldPoint) -> ManifoldPoint:
        return self._apply_point(p, inverse=True)

    def _apply_point(self, p, inverse):
        band = _to_band4(p)
        out = self.inverse_band(band) if inverse else self.forward_band(band)
        return ManifoldPoint(
            "S2xS2", "band|band", tuple(np.atleast_1d(out).ravel())
        ).normalized()

    # numeric contract checks (raise on violation)

    def check_contract(self, n=4000, seed=7, tol=1e-10):
        rng = np.random.default_rng(seed)
        r1 = rng.uniform(0.0, 1.0, n)
        phi1 = rng.uniform(0.0, TWO_PI, n)
        r2 = rng.uniform(-1.0, 1.0, n)

        g1v = self.g1(r1, phi1)
        mask = (r1 ** 2 + np.sin(0.5 * phi1) ** 2) > 1e-8
        if not (abs(float(self.g1(0.0, 0.0))) < tol):
            raise XStarBuildError("g1(0,0) != 0")
        if not np.all((g1v[mask] > 0.0) & (g1v[mask] < TWO_PI)):
            raise XStarBuildError("g1 leaves (0, 2*pi)")

        g2p = 1.0 + 2.0 * self.params.g2_bow * r2
        if not np.all((g2p > 0.0) & (g2p < 2.0)):
            raise XStarBuildError("g2' leaves (0, 2)")
        if not (float(self.g2(0.0)) < 0.0):
            raise XStarBuildError("g2(0) must be negative")
        if abs(float(self.g2(-1.0)) + 1.0) > tol or abs(float(self.g2(1.0)) - 1.0) > tol:
            raise XStarBuildError("g2 endpoints must be -1, 1")
        if np.max(np.abs(self.g3(r2) - (2.0 * r2 - self.g2(r2)))) > tol:
            raise XStarBuildError("g3 != 2*r2 - g2")

        if abs(float(self.g4(0.0, 0.0)) - 0.5) > tol:
            raise XStarBuildError("g4(0,0) != 1/2")
        h = 1e-6
        dphi = (self.g4(0.0, h) - self.g4(0.0, -h)) / (2 * h)
        if abs(float(dphi)) <= 1e-6:
            raise XStarBuildError("d g4 / d phi1 vanishes at (0,0)")

        g4v = self.g4(r1, phi1)
        if not np.all((g4v >= 0.0) & (g4v <= 1.0)):
            raise XStarBuildError("g4 leaves [0, 1]")

    def check_roundtrip(self, n=1000, seed=11, tol=1e-10):
        rng = np.random.default_rng(seed)
        pts = np.stack([
            rng.uniform(0.0, 1.0, n), rng.uniform(0.0, TWO_PI, n),
            rng.uniform(-1.0, 1.0, n), rng.uniform(0.0, TWO_PI, n),
        ], axis=-1)
        back = self.inverse_band(self.forward_band(pts))
        err_lin = np.max(np.abs(back[:, [0, 2]] - pts[:, [0, 2]]))
        dphi = np.abs(np.mod(back[:, [1, 3]] - pts[:, [1, 3]] + np.pi, TWO_PI) - np.pi)
        err = max(float(err_lin), float(np.max(dphi)))
        if err > tol:
            raise XStarBuildError(f"f o f^-1 deviates from identity by {err:.3e}")
        return err


def build_fstar(params: XStarParams = XStarParams()) -> FStar:
    """Construct the gluing diffeomorphism and verify its numeric contract."""
    f = FStar(params)
    f.check_contract()
    f.check_roundtrip()
    return f


# -- band forms ---------------------------------------------------------------


def _to_band4(p: ManifoldPoint) -> np.ndarray:
    space = get_space("S2xS2")
    parts = space.split_chart(p.chart_id)
    pieces = space.split_coords(p.array())
    s2 = space.factors[0]
    out = [s2.transition(c, piece, "band") for c, piece in zip(parts, pieces)]
    return np.concatenate(out)


def _band_form(chart_part, m):
    """(r, phi) of one sphere factor from any chart; phi = 0 at exact poles."""
    if chart_part == "band":
        return m[..., 0], m[..., 1]
    a, b = m[..., 0], m[..., 1]
    rho = np.hypot(a, b)
    phi = np.where(rho > 0, np.arctan2(b, a), 0.0)
    r = 1.0 - rho if chart_part == "n" else rho - 1.0
    return r, phi


def _band_vel_to_chart(chart_part, r, phi, vr, vphi, south_sign=None):
    """Convert a band velocity at (r, phi) to chart_part coordinates."""
    if chart_part == "band":
        return np.stack([vr, vphi], axis=-1)
    rho = 1.0 - r if chart_part == "n" else 1.0 + r
    drho = -vr if chart_part == "n" else vr
    cp, sp = np.cos(phi), np.sin(phi)
    va = drho * cp - rho * sp * vphi
    vb = drho * sp + rho * cp * vphi
    return np.stack([va, vb], axis=-1)


# -- the glued field ----------------------------------------------------------


class _XStarEval:
    """Chart-aware, vectorized evaluator of the glued field."""

    def __init__(self, fstar: FStar, params: XStarParams):
        self.f = fstar
        self.params = params
        self.x1 = make_x1_eval(params)
        self.x2 = make_x2_eval(params)

    def __call__(self, chart, coords):
        coords = np.asarray(coords, dtype=float)
        squeeze = coords.ndim == 1
        coords = np.atleast_2d(coords)
        c1, c2 = get_space("S2xS2").split_chart(chart)
        m1, m2 = coords[:, :2], coords[:, 2:]
        r1, phi1 = _band_form(c1, m1)

        out = np.empty_like(coords)
        plus = r1 >= 0.0
        if np.any(plus):
            out[plus] = self._plus(c1, c2, m1[plus], m2[plus], r1[plus])
        if np.any(~plus):
            out[~plus] = self._minus(c1, c2, m1[~plus], m2[~plus],
                                     r1[~plus], phi1[~plus])
        return out[0] if squeeze else out

    def _plus(self, c1, c2, m1, m2, r1):
        v1 = self.x1(c1, m1)
        v2 = self.x2(c2, m2) * (r1 * r1)[:, None]
        return np.concatenate([v1, v2], axis=1)

    def _minus(self, c1, c2, m1, m2, r1, phi1):
        f = self.f
        r1y = -r1
        w4 = f.g4(r1y, phi1)
        rot = f.g1(r1y, phi1)
        dg4_r1, dg4_p1 = f.g4_partials(r1y, phi1)
        dg1_r1, dg1_p1 = f.g1_partials(r1y, phi1)

        # band velocity of the upper field at the preimage, first factor
        v1y = x1_band(r1y, phi1, self.params)

        r2x, phi2x = _band_form(c2, m2)
        near_pole2 = np.abs(r2x) > 0.95

        n = m1.shape[0]
        vout = np.empty((n, 4))

        # first-factor output: the mirror map flips the r1 velocity sign
        if c1 == "band":
            vout[:, 0] = v1y[:, 0]
            vout[:, 1] = -v1y[:, 1]
        else:
            # pole charts of the two halves share coordinates; the pullback
            # of the first factor is the plain negation there
            vout[:, 0:2] = -x1_north(m1[:, 0], m1[:, 1], self.params)

        # second-factor output, band route
        safe = ~near_pole2
        if np.any(safe):
            r2y = f.blend_inv(r2x[safe], w4[safe])
            phi2y = phi2x[safe] - rot[safe]
            v2y = x2_band(r2y, phi2y, self.params) * (r1y[safe] ** 2)[:, None]
            vr2 = -(dg4_r1[safe] * f.g2_minus_g3(r2y) * v1y[safe, 0]
                    + dg4_p1[safe] * f.g2_minus_g3(r2y) * v1y[safe, 1]
                    + f.blend_dr2(r2y, w4[safe]) * v2y[:, 0])
            vp2 = -(dg1_r1[safe] * v1y[safe, 0]
                    + dg1_p1[safe] * v1y[safe, 1]
                    + v2y[:, 1])
            vout[safe, 2:4] = _band_vel_to_chart(c2, r2x[safe], phi2x[safe], vr2, vp2)

        if np.any(near_pole2):
            vout[near_pole2, 2:4] = self._minus_pole2(
                c2, m2[near_pole2], r2x[near_pole2], r1y[near_pole2],
                phi1[near_pole2], w4[near_pole2], rot[near_pole2],
                dg4_r1[near_pole2], dg4_p1[near_pole2],
                dg1_r1[near_pole2], dg1_p1[near_pole2],
                v1y[near_pole2],
            )
        return vout

    def _minus_pole2(self, c2, m2, r2x, r1y, phi1, w4, rot,
                     dg4_r1, dg4_p1, dg1_r1, dg1_p1, v1y):
        """Second-factor pullback velocity near the second-sphere poles.

        There the r2 slot acts on pole coordinates as a radial rescale
        rho -> rho * s(rho, w4) composed with the rotation by g1.
        """
        f = self.f
        params = self.params
        south = r2x < 0
        pole_chart = np.where(south, "s", "n")
        # pole coordinates of x's second factor
        if c2 == "band":
            rho_x = 1.0 - np.abs(r2x)
            ax = rho_x * np.cos(m2[:, 1])
            bx = rho_x * np.sin(m2[:, 1])
        else:
            ax, bx = m2[:, 0], m2[:, 1]
            rho_x = np.hypot(ax, bx)

        kk = params.g2_bow * (1.0 - 2.0 * w4)
        sgn = np.where(south, -1.0, 1.0)  # s(rho) = 1 - sgn*kk*(2 - rho)
        # invert rho_x = rho_y * s(rho_y)
        A = sgn * kk
        disc = np.sqrt((1.0 - 2.0 * A) ** 2 + 4.0 * A * rho_x)
        rho_y = 2.0 * rho_x / ((1.0 - 2.0 * A) + disc)
        s_val = 1.0 - A * (2.0 - rho_y)
        s_drho = A
        s_dw4 = -sgn * params.g2_bow * (-2.0) * (2.0 - rho_y)

        cr, sr = np.cos(rot), np.sin(rot)
        scale = np.where(rho_x > 0, rho_y / np.where(rho_x > 0, rho_x, 1.0), 1.0 / s_val)
        ay = scale * (cr * ax + sr * bx)
        by = scale * (-sr * ax + cr * bx)

        v2y = np.empty((m2.shape[0], 2))
        for ch in ("n", "s"):
            m = (pole_chart == ch)
            if np.any(m):
                v2y[m] = x2_pole(ay[m], by[m], params, ch == "s")
        v2y *= (r1y ** 2)[:, None]

        # D(second slot)/D(second factor): R(rot) @ (s I + (s'/rho) y y^T)
        safe_rho = np.where(rho_y > 0, rho_y, 1.0)
        oxx = s_val + s_drho * ay * ay / safe_rho
        oxy = s_drho * ay * by / safe_rho
        oyy = s_val + s_drho * by * by / safe_rho
        mva = oxx * v2y[:, 0] + oxy * v2y[:, 1]
        mvb = oxy * v2y[:, 0] + oyy * v2y[:, 1]
        da = cr * mva - sr * mvb
        db = sr * mva + cr * mvb

        # D(second slot)/D(first factor) via w4 and the rotation angle
        base_a = cr * ay - sr * by
        base_b = sr * ay + cr * by
        rota = -sr * ay - cr * by   # d/d rot of R(rot) y, first row
        rotb = cr * ay - sr * by
        dw4_dot_v1 = dg4_r1 * v1y[:, 0] + dg4_p1 * v1y[:, 1]
        drot_dot_v1 = dg1_r1 * v1y[:, 0] + dg1_p1 * v1y[:, 1]
        da += s_dw4 * dw4_dot_v1 * base_a / np.where(s_val != 0, s_val, 1.0)
        db += s_dw4 * dw4_dot_v1 * base_b / np.where(s_val != 0, s_val, 1.0)
        da += drot_dot_v1 * rota
        db += drot_dot_v1 * rotb

        va, vb = -da, -db
        if c2 == "band":
            # convert the pole velocity back to band coordinates
            rho = rho_x
            if np.any(rho == 0):
                vmag = np.hypot(va, vb)
                if np.any(vmag[rho == 0] > 1e-13):
                    raise ChartError(
                        "velocity at a second-factor pole is not representable "
                        "in the band chart"
                    )
            safe = np.where(rho > 0, rho, 1.0)
            cp = np.where(rho > 0, ax / safe, 1.0)
            sp = np.where(rho > 0, bx / safe, 0.0)
            drho = cp * va + sp * vb
            vphi = (-sp * va + cp * vb) / safe
            vr = np.where(south, drho, -drho)
            return np.stack([vr, vphi], axis=-1)
        return np.stack([va, vb], axis=-1)


# -- system assembly ----------------------------------------------------------


@dataclass
class XStarSystem:
    """The assembled example field with its rest points and gluing map."""

    field: VectorFieldDef
    x1: VectorFieldDef
    x2: VectorFieldDef
    f_star: FStar
    rest_points: dict
    params: XStarParams
    build_info: dict = dc_field(default_factory=dict)

    @property
    def g_funcs(self):
        f = self.f_star
        return {"g1": f.g1, "g2": f.g2, "g3": f.g3, "g4": f.g4}

    def seam_defect(self, phi1, r2, phi2):
        """|one-sided limits of the field| mismatch on the seam r1 = 0.

        Returns the max-norm difference of the upper-half value and the
        glued-half value at (0, phi1, r2, phi2); both are evaluated from
        their defining formulas.
        """
        phi1, r2, phi2 = np.broadcast_arrays(
            np.asarray(phi1, float), np.asarray(r2, float), np.asarray(phi2, float))
        shape = phi1.shape
        coords = np.stack([np.zeros_like(phi1).ravel(), phi1.ravel(),
                           r2.ravel(), phi2.ravel()], axis=-1)
        impl = self._impl
        vplus = impl._plus("band", "band", coords[:, :2], coords[:, 2:], coords[:, 0])
        vminus = impl._minus("band", "band", coords[:, :2], coords[:, 2:],
                             coords[:, 0], coords[:, 1])
        return np.max(np.abs(vplus - vminus), axis=-1).reshape(shape)

    @property
    def _impl(self):
        return self.field.chart_eval

    def descriptor(self):
        rps = {k: {"chart": p.chart_id, "coords": list(p.coords)}
               for k, p in self.rest_points.items()}
        return {
            "name": "xstar", "space": "S2xS2",
            "params": self.params.as_dict(),
            "rest_points": rps,
            "build_info": self.build_info,
        }


def _grid_candidates():
    """Coarse product grid used by the rest-point census."""
    factor = [("band", (r, p))
              for r in np.linspace(-0.8, 0.8, 7)
              for p in np.linspace(0.0, TWO_PI, 8, endpoint=False)]
    factor += [("n", (0.0, 0.0)), ("s", (0.0, 0.0))]
    out = []
    for c1, m1 in factor:
        for c2, m2 in factor:
            out.append((f"{c1}|{c2}", m1 + m2))
    return out


def _refine_rest_point(field, chart, coords):
    space = field.space
    for _ in range(4):
        sol = root(lambda y: field.chart_eval(chart, y), np.asarray(coords, float),
                   method="hybr", tol=1e-14)
        coords = sol.x
        try:
            new_chart, new_coords = space.preferred_chart(chart, coords)
        except ChartError:
            return None
        if new_chart == chart:
            res = float(np.linalg.norm(field.chart_eval(chart, coords)))
            return (chart, coords, res) if res <= 1e-10 else None
        chart, coords = new_chart, new_coords
    return None


def find_rest_points(field, cluster_tol=1e-6):
    """Residual search on a coarse grid plus Newton refinement."""
    space = field.space
    found = []
    cands = _grid_candidates()
    residuals = []
    for chart, coords in cands:
        v = field.chart_eval(chart, np.asarray(coords))
        residuals.append(float(np.linalg.norm(v)))
    order = np.argsort(residuals)
    keep = [i for i in order[:80]] + [i for i, r in enumerate(residuals) if r < 0.05]
    seen_emb = []
    for i in dict.fromkeys(keep):
        chart, coords = cands[i]
        ref = _refine_rest_point(field, chart, np.asarray(coords, float))
        if ref is None:
            continue
        chart, coords, res = ref
        emb = space.to_embedding(chart, coords)
        if any(np.linalg.norm(emb - e) < cluster_tol for e in seen_emb):
            continue
        seen_emb.append(emb)
        found.append(ManifoldPoint(field.space_id, chart, tuple(coords)))
    return found


def _classify_rest_points(field, points):
    names = {}
    for p in points:
        eig = jacobian(field, p, 1e-5).eigenvalues()
        re = np.sort(eig.real)
        n_neg = int(np.sum(eig.real < 0))
        has_cplx_pos = bool(np.any((np.abs(eig.imag) > 0.5) & (eig.real > 0)))
        has_cplx_neg = bool(np.any((np.abs(eig.imag) > 0.5) & (eig.real < 0)))
        if n_neg == 4:
            names["s"] = p
        elif n_neg == 0:
            names["u"] = p
        elif has_cplx_pos:
            names["p"] = p
        elif has_cplx_neg:
            names["q"] = p
    return names


_CACHED_SYSTEM = {}


def build_xstar(params: XStarParams = XStarParams(), cache=True) -> XStarSystem:
    """Assemble the glued field, locate its rest points, verify the build."""
    key = params
    if cache and key in _CACHED_SYSTEM:
        return _CACHED_SYSTEM[key]
    fstar = build_fstar(params)
    impl = _XStarEval(fstar, params)
    field = VectorFieldDef(
        "S2xS2", impl, name="xstar",
        smoothness_note=(
            "C^1 across the gluing seam r1 = 0; C^2 elsewhere in the "
            "working atlas"
        ),
        params=params.as_dict(),
    )
    points = find_rest_points(field)
    if len(points) != 4:
        raise XStarBuildError(f"rest-point census found {len(points)} points, expected 4")
    names = _classify_rest_points(field, points)
    if sorted(names) != ["p", "q", "s", "u"]:
        raise XStarBuildError(f"could not classify rest points: {sorted(names)}")

    system = XStarSystem(field=field, x1=build_x1(params), x2=build_x2(params),
                         f_star=fstar, rest_points=names, params=params)

    # quick build-time verification; the full checks live in the test suite
    rng = np.random.default_rng(3)
    seam = system.seam_defect(rng.uniform(0, TWO_PI, 200),
                              rng.uniform(-1, 1, 200),
                              rng.uniform(0, TWO_PI, 200))
    max_seam = float(np.max(seam))
    if max_seam > 1e-8:
        raise XStarBuildError(f"seam mismatch {max_seam:.3e} exceeds 1e-8")
    for name, p in names.items():
        res = float(np.linalg.norm(field.chart_eval(p.chart_id, p.array())))
        if res > 1e-10:
            raise XStarBuildError(f"rest point {name} residual {res:.3e}")
    system.build_info = {"seam_defect_sampled": max_seam,
                         "rest_point_count": len(points)}
    if cache:
        _CACHED_SYSTEM[key] = system
    return system
