"""Geodesic flow on the asymptotically conic collar.

Geodesics are integrated in "boundary time" t with state (x, y, lam, omega):
xdot = x*lam and ydot = omega, where lam is the normalized radial slope and
omega the link velocity.  In these variables the flow is non-stiff as x -> 0
and the conserved speed is lam^2 + |omega|^2_gt = 1 (the unit-speed condition
for the rescaled metric x^2 g; arc length satisfies ds = dt/x).  Internally
the covector components (tau, mu) = (lam, gt . omega) are evolved:

    x'    = x tau
    y'    = gt^{-1} mu
    tau'  = -|mu|^2 - (x/2) (d_x gt^{-1})(mu, mu)
    mu_k' = tau mu_k - (1/2) (d_{y_k} gt^{-1})(mu, mu)

For the unperturbed cone this reproduces the closed-form bicharacteristics
x = (x_s/sin r0) sin(r + r0), tau = cos(r + r0), |mu| = sin(r + r0), with
(y, mu_hat) moving along a unit-speed link geodesic of length up to pi.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .geometry import LinkMetric, MetricSpec

__all__ = [
    "GeodesicState",
    "GeodesicPath",
    "shoot",
    "conic_closed_form",
    "concavity_alpha",
    "alpha_quadratic",
    "conjugate_scan",
    "flow_samples",
]

X_MIN_FACTOR = 1e-3   # truncation floor for integration, as a fraction of x0
T_MAX = 60.0          # hard safety cap on boundary time


@dataclass
class GeodesicState:
    """Point of the unit sphere bundle in (x, y, lam, omega) variables."""

    x: float
    y: np.ndarray        # chart point on the link, shape (2,)
    lam: float           # normalized radial slope, xdot = x lam
    omega: np.ndarray    # link velocity (chart components), shape (2,)
    t: float = 0.0

    def speed(self, spec: MetricSpec) -> float:
        gt = spec.gt(self.x, self.y)
        return float(self.lam ** 2 + self.omega @ gt @ self.omega)


class GeodesicPath:
    """Sampled geodesic through an initial state, with dense evaluation.

    Samples are ordered by t with t=0 at the initial state.  Endpoint
    classification per side: "exit" (crossed x = x0) or "truncated" (reached
    the x_min floor or the safety time cap).
    """

    def __init__(self, ts, xs, ys, lams, omegas, r_links, energies,
                 end_backward, end_forward, dense_backward, dense_forward,
                 spec):
        self.ts = ts
        self.xs = xs
        self.ys = ys
        self.lams = lams
        self.omegas = omegas
        self.r_links = r_links
        self.energies = energies
        self.end_backward = end_backward
        self.end_forward = end_forward
        self._dense_b = dense_backward
        self._dense_f = dense_forward
        self.spec = spec

    @property
    def energy_drift(self) -> float:
        return float(np.max(np.abs(self.energies - self.energies[0])))

    @property
    def tangency_index(self) -> Optional[int]:
        i = int(np.argmax(self.xs))
        if 0 < i < len(self.xs) - 1:
            return i
        return None

    @property
    def t_span(self):
        return float(self.ts[0]), float(self.ts[-1])

    def state_at(self, t):
        """Dense state at times t (scalar or array): columns of the raw state."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((7, t.size))
        back = t < 0
        if back.any():
            if self._dense_b is None:
                raise ValueError("no backward branch")
            out[:, back] = self._dense_b(t[back])
        if (~back).any():
            if self._dense_f is None:
                raise ValueError("no forward branch")
            out[:, ~back] = self._dense_f(t[~back])
        return out

    def velocities_at(self, t):
        """(x, y, lam, omega) at times t; omega recovered from gt^{-1} mu."""
        raw = self.state_at(t)
        x, y1, y2, tau, mu1, mu2 = raw[0], raw[1], raw[2], raw[3], raw[4], raw[5]
        Y = np.stack([y1, y2], axis=-1)
        gtinv = np.linalg.inv(self.spec.gt(x, Y))
        mu = np.stack([mu1, mu2], axis=-1)
        omega = np.einsum("...ij,...j->...i", gtinv, mu)
        return x, Y, tau, omega

    def to_csv(self, path):
        """Dump columns (t, x, y1, y2, lam, omega1, omega2, energy_drift)."""
        drift = self.energies - self.energies[0]
        data = np.column_stack(
            [self.ts, self.xs, self.ys, self.lams, self.omegas, drift]
        )
        header = "t,x,y1,y2,lam,omega1,omega2,energy_drift"
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def _rhs_single(spec: MetricSpec):
    def rhs(t, s):
        x, y1, y2, tau, mu1, mu2, _ = s
        y = np.array([y1, y2])
        mu = np.array([mu1, mu2])
        gt = spec.gt(x, y)
        gtinv = np.linalg.inv(gt)
        dgi_x = -gtinv @ spec.dgt_dx(x, y) @ gtinv
        dgt_y = spec.dgt_dy(x, y)
        dgi_y1 = -gtinv @ dgt_y[0] @ gtinv
        dgi_y2 = -gtinv @ dgt_y[1] @ gtinv
        omega = gtinv @ mu
        mm = mu @ omega
        return [
            x * tau,
            omega[0],
            omega[1],
            -mm - 0.5 * x * (mu @ dgi_x @ mu),
            tau * mu1 - 0.5 * (mu @ dgi_y1 @ mu),
            tau * mu2 - 0.5 * (mu @ dgi_y2 @ mu),
            np.sqrt(max(mm, 0.0)),
        ]

    return rhs


def _init_raw_state(spec: MetricSpec, init: GeodesicState):
    """Raw state vector with (tau, mu) normalized to unit energy."""
    gt = spec.gt(init.x, init.y)
    mu = gt @ np.asarray(init.omega, dtype=float)
    tau = float(init.lam)
    E = tau ** 2 + mu @ np.linalg.inv(gt) @ mu
    if E <= 0:
        raise ValueError("zero direction vector")
    s = 1.0 / np.sqrt(E)
    return np.array([init.x, init.y[0], init.y[1], tau * s, mu[0] * s, mu[1] * s, 0.0])


def shoot(spec: MetricSpec, init: GeodesicState, tol=1e-10) -> GeodesicPath:
    """Integrate the geodesic through `init` in both time directions.

    Stops on exit through x = x0 or truncation at x_min = 1e-3 x0 (flagged,
    not an error).  The direction is normalized to unit speed; the residual
    drift of lam^2 + |omega|^2 along the path is reported via the samples.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not (0 < init.x < spec.x0):
        raise ValueError("initial point outside the open collar")
    x_min = X_MIN_FACTOR * spec.x0
    rhs = _rhs_single(spec)
    s0 = _init_raw_state(spec, init)

    def ev_exit(t, s):
        return s[0] - spec.x0

    def ev_floor(t, s):
        return s[0] - x_min

    ev_exit.terminal = True
    ev_floor.terminal = True

    halves = {}
    for name, t_end in (("f", T_MAX), ("b", -T_MAX)):
        sol = solve_ivp(
            rhs, (0.0, t_end), s0, method="DOP853", rtol=tol, atol=tol,
            events=[ev_exit, ev_floor], dense_output=True,
        )
        if not sol.success:
            raise RuntimeError(f"geodesic integration failed: {sol.message}")
        if sol.t_events[0].size:
            end = "exit"
        elif sol.t_events[1].size:
            end = "truncated"
        else:
            end = "truncated"  # time cap; weight there is negligible
        halves[name] = (sol, end)

    sol_f, end_f = halves["f"]
    sol_b, end_b = halves["b"]
    tb = sol_b.t[::-1]
    tf = sol_f.t
    ts = np.concatenate([tb[:-1], tf])
    states = np.concatenate([sol_b.y[:, ::-1][:, :-1], sol_f.y], axis=1)
    x, y1, y2, tau, mu1, mu2, r = states
    Y = np.stack([y1, y2], axis=-1)
    gtinv = np.linalg.inv(spec.gt(x, Y))
    mu = np.stack([mu1, mu2], axis=-1)
    omega = np.einsum("...ij,...j->...i", gtinv, mu)
    energy = tau ** 2 + np.einsum("...i,...ij,...j->...", mu, gtinv, mu)
    return GeodesicPath(
        ts=ts, xs=x, ys=Y, lams=tau, omegas=omega, r_links=r,
        energies=energy, end_backward=end_b, end_forward=end_f,
        dense_backward=sol_b.sol, dense_forward=sol_f.sol, spec=spec,
    )


def conic_closed_form(x0_start, r0, y0, mu_hat0, link: LinkMetric, r):
    """Closed-form unit bicharacteristic of the exact cone at link distance r.

    Launched from radial value x0_start with initial phase r0 in (0, pi):
    x = (x0_start/sin r0) sin(r + r0), tau = cos(r + r0), |mu| = sin(r + r0),
    and (y, mu_hat) advanced a distance r along the link geodesic.  Valid for
    r in (-r0, -r0 + pi).
    """
    if not (0.0 < r0 < np.pi):
        raise ValueError("r0 must lie in (0, pi)")
    if not (-r0 < r < -r0 + np.pi):
        raise ValueError("r outside (-r0, -r0 + pi)")
    X = x0_start / np.sin(r0)
    x = X * np.sin(r + r0)
    tau = np.cos(r + r0)
    mu_abs = np.sin(r + r0)
    y, mu_hat = link.geodesic_advance(np.asarray(y0, float), np.asarray(mu_hat0, float), r)
    return GeodesicState(x=float(x), y=y, lam=float(tau), omega=mu_abs * mu_hat, t=float(r))


def alpha_quadratic(spec: MetricSpec, x, y, lam, omega):
    """Concavity coefficient from the flow's second derivative, analytic.

    alpha = x''(0)/(2 x) for the unit-normalized direction:
    alpha = (lam^2 - |mu|^2 - (x/2)(d_x gt^{-1})(mu,mu)) / 2.
    Fast path used inside kernels; cross-validated against the fitted value.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    omega = np.asarray(omega, dtype=float)
    gt = spec.gt(x, y)
    gtinv = np.linalg.inv(gt)
    mu = np.einsum("...ij,...j->...i", gt, omega)
    E = np.asarray(lam, dtype=float) ** 2 + np.einsum("...i,...ij,...j->...", mu, gtinv, mu)
    s2 = 1.0 / E
    dgi_x = -np.einsum("...ij,...jk,...kl->...il", gtinv, spec.dgt_dx(x, y), gtinv)
    mm = np.einsum("...i,...ij,...j->...", mu, gtinv, mu)
    quad = np.einsum("...i,...ij,...j->...", mu, dgi_x, mu)
    return 0.5 * s2 * (np.asarray(lam) ** 2 - mm - 0.5 * x * quad)


def concavity_alpha(spec: MetricSpec, point, lam, omega, n_fit=41,
                    residual_threshold=1e-4):
    """Concavity coefficient alpha of x(t)/x - 1 - lam t, by least squares.

    Integrates the geodesic over |t| <= 0.1 x (the validity scale of the
    quadratic expansion), fits t^2 and t^3 terms, returns (alpha, residual).
    Residual is the rms misfit relative to the fitted quadratic scale; a
    warning is emitted when it exceeds `residual_threshold`.
    """
    point = np.asarray(point, dtype=float)
    x0p, y0p = float(point[0]), point[1:]
    init = GeodesicState(x=x0p, y=y0p, lam=float(lam), omega=np.asarray(omega, float))
    s0 = _init_raw_state(spec, init)
    lam_n = s0[3]
    t_fit = 0.1 * x0p
    rhs = _rhs_single(spec)
    ts = np.linspace(-t_fit, t_fit, n_fit)
    sol_f = solve_ivp(rhs, (0.0, t_fit), s0, method="DOP853", rtol=1e-12,
                      atol=1e-14, dense_output=True)
    sol_b = solve_ivp(rhs, (0.0, -t_fit), s0, method="DOP853", rtol=1e-12,
                      atol=1e-14, dense_output=True)
    xs = np.empty_like(ts)
    for i, t in enumerate(ts):
        sol = sol_f if t >= 0 else sol_b
        xs[i] = sol.sol(t)[0]
    resid_curve = xs / x0p - 1.0 - lam_n * ts
    A = np.column_stack([ts ** 2, ts ** 3])
    coef, *_ = np.linalg.lstsq(A, resid_curve, rcond=None)
    alpha = float(coef[0])
    misfit = resid_curve - A @ coef
    scale = max(abs(alpha) * t_fit ** 2, 1e-30)
    residual = float(np.sqrt(np.mean(misfit ** 2)) / scale)
    if residual > residual_threshold:
        warnings.warn(f"concavity fit residual {residual:.2e} above threshold")
    return alpha, residual


def conjugate_scan(link: LinkMetric, y0, mu_hat0, max_dist):
    """First conjugate distance along a link geodesic, or None.

    Integrates the scalar normal Jacobi equation J'' + K J = 0 with J(0)=0,
    J'(0)=1 along the unit-speed geodesic and returns the first zero of J in
    (0, max_dist].
    """
    if max_dist > np.pi + 1e-12:
        raise ValueError("max_dist must be <= pi")
    y0 = np.asarray(y0, dtype=float)
    mu0 = np.asarray(mu_hat0, dtype=float)

    def rhs(r, s):
        y, _ = link.geodesic_advance(y0, mu0, r)
        K = link.gauss_curvature(y)
        return [s[1], -K * s[0]]

    def ev_zero(r, s):
        return s[0]

    ev_zero.terminal = True
    ev_zero.direction = -1
    eps = 1e-9
    # slight overshoot so a zero sitting exactly at max_dist is detected
    over = max_dist + 1e-6
    sol = solve_ivp(rhs, (eps, over), [eps, 1.0], method="DOP853",
                    rtol=1e-12, atol=1e-14, events=[ev_zero])
    if not sol.success:
        raise RuntimeError(f"Jacobi integration failed: {sol.message}")
    if sol.t_events[0].size:
        return float(sol.t_events[0][0])
    return None


# -- vectorized short-arc flow for kernel assembly ---------------------------


def _rhs_batch(spec: MetricSpec, state):
    """Vectorized flow right-hand side; state shape (7, N)."""
    x, y1, y2, tau, mu1, mu2 = state[0], state[1], state[2], state[3], state[4], state[5]
    Y = np.stack([y1, y2], axis=-1)
    mu = np.stack([mu1, mu2], axis=-1)
    if spec.pert_amplitude == 0.0 and spec.link == "torus":
        omega = mu
        mm = mu1 ** 2 + mu2 ** 2
        dtau = -mm
        dmu = tau[..., None] * mu
    else:
        gt = spec.gt(x, Y)
        gtinv = np.linalg.inv(gt)
        omega = np.einsum("...ij,...j->...i", gtinv, mu)
        mm = np.einsum("...i,...i->...", mu, omega)
        dgi_x = -np.einsum("...ij,...jk,...kl->...il", gtinv, spec.dgt_dx(x, Y), gtinv)
        dgt_y = spec.dgt_dy(x, Y)
        dgi_y = -np.einsum("...ij,...kjl,...lm->...kim", gtinv, dgt_y, gtinv)
        dtau = -mm - 0.5 * x * np.einsum("...i,...ij,...j->...", mu, dgi_x, mu)
        dmu = tau[..., None] * mu - 0.5 * np.einsum("...i,...kij,...j->...k", mu, dgi_y, mu)
    out = np.empty_like(state)
    out[0] = x * tau
    out[1] = omega[..., 0]
    out[2] = omega[..., 1]
    out[3] = dtau
    out[4] = dmu[..., 0]
    out[5] = dmu[..., 1]
    out[6] = np.sqrt(np.maximum(mm, 0.0))
    return out


def flow_samples(spec: MetricSpec, x, y, lam, omega, half_width, n_samples,
                 substeps=2):
    """Short-arc flow samples for a batch of initial directions.

    Starts at (x, y, lam, omega) (arrays of shape (N,) / (N,2), assumed unit
    normalized) and integrates with fixed-step RK4 to produce states at the
    per-path times linspace(-T_j, T_j, n_samples).  Returns (times, states)
    with times (N, n_samples) and states (7, N, n_samples).
    """
    x = np.asarray(x, dtype=float)
    N = x.size
    if n_samples % 2 == 0:
        raise ValueError("n_samples must be odd")
    gt = spec.gt(x, np.asarray(y, dtype=float))
    mu = np.einsum("...ij,...j->...i", gt, np.asarray(omega, dtype=float))
    s0 = np.zeros((7, N))
    s0[0] = x
    s0[1] = np.asarray(y)[..., 0]
    s0[2] = np.asarray(y)[..., 1]
    s0[3] = np.asarray(lam, dtype=float)
    s0[4] = mu[..., 0]
    s0[5] = mu[..., 1]
    half = (n_samples - 1) // 2
    T = np.asarray(half_width, dtype=float)
    dt_sample = T / half
    states = np.empty((7, N, n_samples))
    times = np.outer(np.ones(N), np.arange(-half, half + 1)) * dt_sample[:, None]
    states[:, :, half] = s0
    for sign, idxs in ((1.0, range(half + 1, n_samples)), (-1.0, range(half - 1, -1, -1))):
        s = s0.copy()
        dt = sign * dt_sample / substeps
        for i in idxs:
            for _ in range(substeps):
                k1 = _rhs_batch(spec, s)
                k2 = _rhs_batch(spec, s + 0.5 * dt * k1)
                k3 = _rhs_batch(spec, s + 0.5 * dt * k2)
                k4 = _rhs_batch(spec, s + dt * k3)
                s = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            states[:, :, i] = s
    return times, states
