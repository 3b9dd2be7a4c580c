"""Shared oracle-grade constructions for the test suite.

Closed-form conjugated potentials: the weighted symmetric gradient of a
closed-form lower-rank field, evaluated analytically from the metric data
(no grid, no finite differences).  Used to exercise the transform/normal
kernels on continuum potentials.
"""

import numpy as np

from conetomo.field import AnalyticField, phi_weight_deriv
from conetomo.geometry import (
    SYM_SLOTS,
    dlog_frame_weights,
    frame_weight_arrays,
    _coord_metric_and_derivs,
    _gamma_from,
)


def gamma_points(spec, x, y):
    g, dg = _coord_metric_and_derivs(spec, np.asarray(x, float), np.asarray(y, float))
    return _gamma_from(g, dg)


def log_bump(grid_like, width=0.09, center=0.45):
    """Smooth radial profile in normalized log-x units, with derivative."""
    x_lo, x_hi = grid_like.x_lo, grid_like.x_hi
    span = np.log(x_hi / x_lo)

    def B(x):
        u = np.log(np.asarray(x, float) / x_lo) / span
        return np.exp(-((u - center) ** 2) / (2 * width ** 2))

    def dB(x):
        x = np.asarray(x, float)
        u = np.log(x / x_lo) / span
        return B(x) * (-(u - center) / (width ** 2)) / (span * x)

    return B, dB


def analytic_scalar_potential(spec, F, h, grid_like, m=(1, 2), amp=1.0,
                              width=0.09, center=0.45):
    """(g, d_{h,F} g) as analytic fields: conjugated scalar and its gradient."""
    B, dB = log_bump(grid_like, width, center)
    m1, m2 = m

    def gfun(x, y):
        return amp * B(x) * np.cos(m1 * y[..., 0]) * np.sin(m2 * y[..., 1])

    def g_x(x, y):
        return amp * dB(x) * np.cos(m1 * y[..., 0]) * np.sin(m2 * y[..., 1])

    def g_y1(x, y):
        return -amp * m1 * B(x) * np.sin(m1 * y[..., 0]) * np.sin(m2 * y[..., 1])

    def g_y2(x, y):
        return amp * m2 * B(x) * np.cos(m1 * y[..., 0]) * np.cos(m2 * y[..., 1])

    def pot(x, y):
        x = np.asarray(x, float)
        wx, wy = frame_weight_arrays(spec, x, h)
        phi_p = phi_weight_deriv(x, spec.x0)
        c0 = (g_x(x, y) + (F / h) * phi_p * gfun(x, y)) / wx
        return np.stack([c0, g_y1(x, y) / wy, g_y2(x, y) / wy])

    g_field = AnalyticField(0, lambda x, y: gfun(x, y)[None], F=F, h=h,
                            state="weighted")
    pot_field = AnalyticField(1, pot, F=F, h=h, state="weighted")
    return g_field, pot_field


def analytic_oneform_potential(spec, F, h, grid_like, amp=1.0, width=0.09,
                               center=0.45, seed=0):
    """(v, d^s_{h,F} v) analytic: conjugated one-form and its sym gradient."""
    B, dB = log_bump(grid_like, width, center)
    rng = np.random.default_rng(seed)
    modes = rng.integers(1, 3, size=(3, 2))
    phases = rng.uniform(0, 2 * np.pi, 3)

    def comp(c, x, y):
        m1, m2 = modes[c]
        return amp * B(x) * np.cos(m1 * y[..., 0] + phases[c]) * np.cos(m2 * y[..., 1])

    def dcomp(c, x, y):
        m1, m2 = modes[c]
        base_x = amp * dB(x) * np.cos(m1 * y[..., 0] + phases[c]) * np.cos(m2 * y[..., 1])
        base_1 = -amp * m1 * B(x) * np.sin(m1 * y[..., 0] + phases[c]) * np.cos(m2 * y[..., 1])
        base_2 = -amp * m2 * B(x) * np.cos(m1 * y[..., 0] + phases[c]) * np.sin(m2 * y[..., 1])
        return base_x, base_1, base_2

    def vfun(x, y):
        return np.stack([comp(c, x, y) for c in range(3)])

    def pot(x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        wx, wy = frame_weight_arrays(spec, x, h)
        w = [wx, wy, wy]
        dlx, dly = dlog_frame_weights(spec, x, h)
        dlw = [dlx, dly, dly]
        phi_p = phi_weight_deriv(x, spec.x0)
        gamma = gamma_points(spec, x, y)
        v = [comp(c, x, y) for c in range(3)]
        dv = [dcomp(c, x, y) for c in range(3)]
        U = np.empty((3, 3) + np.shape(x))
        for c in range(3):
            for b in range(3):
                term = dv[b][c] / w[c]
                if c == 0:
                    term = term + (dlw[b] + F * phi_p / h) * v[b] / wx
                for d in range(3):
                    term = term - gamma[..., d, c, b] * (w[d] / (w[c] * w[b])) * v[d]
                U[c, b] = term
        out = np.empty((6,) + np.shape(x))
        for s, (a, b) in enumerate(SYM_SLOTS):
            out[s] = 0.5 * (U[a, b] + U[b, a])
        return out

    v_field = AnalyticField(1, vfun, F=F, h=h, state="weighted")
    pot_field = AnalyticField(2, pot, F=F, h=h, state="weighted")
    return v_field, pot_field
