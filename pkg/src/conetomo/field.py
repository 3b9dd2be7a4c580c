"""Tensor fields on the collar: grids, weights, conjugation, velocity pairing.

Fields of rank 0, 1, 2 are sampled on a product grid (log-spaced radial nodes
times a structured link mesh) and stored in the sc-1c frame, which keeps
components O(1) uniformly in x and h.  The exponential weight

    Phi(x) = -1/(2 x^2)  toward the conic end,
    Phi(x) = 1/(x0 - x)  toward the artificial boundary,

(quintic-blended, strictly increasing) drives the conjugation
e^{+-F Phi/h}; all exponentials are evaluated in log space with an explicit
overflow flag.  Off-node evaluation is trilinear in (log x, link chart) with
zero extension outside the grid.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import (
    SYM_MULT,
    LinkMetric,
    MetricSpec,
    ZONE_HI,
    ZONE_LO,
    frame_weight_arrays,
    quintic_step,
)

__all__ = [
    "Grid",
    "TensorField",
    "AnalyticField",
    "phi_weight",
    "phi_weight_deriv",
    "apply_conjugation",
    "chi_cutoff",
    "pair_velocity",
    "ConjugationOverflowError",
    "save_field",
    "load_field",
]

NCOMP = {0: 1, 1: 3, 2: 6}
OVERFLOW_LOG_LIMIT = 200.0


class ConjugationOverflowError(FloatingPointError):
    """A conjugation factor would push a nonzero component past e^200."""


# -- weight function ----------------------------------------------------------


def _phi_branches(x, x0):
    zlo, zhi = ZONE_LO * x0, ZONE_HI * x0
    s = quintic_step((x - zlo) / (zhi - zlo))
    p1 = -0.5 / (x * x)
    p2 = 1.0 / (x0 - x)
    return s, p1, p2, zlo, zhi


def phi_weight(x, x0):
    """Weight profile Phi(x): -1/(2x^2) deep in, 1/(x0-x) near the boundary.

    Quintic-blended on [x0/3, 2 x0/3]; strictly increasing on (0, x0).
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0) or np.any(x >= x0):
        raise ValueError("x outside (0, x0)")
    s, p1, p2, _, _ = _phi_branches(x, x0)
    out = (1.0 - s) * p1 + s * p2
    return float(out) if np.isscalar(out) or out.ndim == 0 else out


def phi_weight_deriv(x, x0):
    """d Phi/dx, analytic; positive on all of (0, x0)."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0) or np.any(x >= x0):
        raise ValueError("x outside (0, x0)")
    s, p1, p2, zlo, zhi = _phi_branches(x, x0)
    u = np.clip((x - zlo) / (zhi - zlo), 0.0, 1.0)
    ds = 30.0 * u * u * (1.0 - u) ** 2 / (zhi - zlo)
    d1 = x ** -3.0
    d2 = (x0 - x) ** -2.0
    out = (1.0 - s) * d1 + s * d2 + ds * (p2 - p1)
    return float(out) if np.isscalar(out) or out.ndim == 0 else out


# -- grid ---------------------------------------------------------------------


class Grid:
    """Product grid: log-spaced radial nodes times a structured link mesh.

    Radial nodes are strictly inside (x_lo, x_hi) subset of (0, x0); fields
    are zero-extended beyond them, which realizes the Dirichlet convention at
    both numerical boundaries.  The torus mesh is uniform-periodic in both
    chart directions; the sphere mesh is cell-centered in the polar angle
    (no pole nodes) and periodic in the azimuth.
    """

    def __init__(self, spec: MetricSpec, nx, n1, n2, x_lo=None, x_hi=None):
        self.spec = spec
        self.link = spec.link_metric
        x0 = spec.x0
        self.x_lo = x_lo if x_lo is not None else 0.025 * x0
        self.x_hi = x_hi if x_hi is not None else 0.95 * x0
        if not (0.0 < self.x_lo < self.x_hi < x0):
            raise ValueError("need 0 < x_lo < x_hi < x0")
        self.nx, self.n1, self.n2 = int(nx), int(n1), int(n2)
        self.xs = np.geomspace(self.x_lo, self.x_hi, self.nx)
        self.dlog = np.log(self.xs[1] / self.xs[0]) if self.nx > 1 else 1.0
        L1, L2 = self.link.lengths
        p1, p2 = self.link.periodic
        if p1:
            self.y1s = np.arange(self.n1) * (L1 / self.n1)
            self.d1 = L1 / self.n1
        else:
            self.d1 = L1 / self.n1
            self.y1s = (np.arange(self.n1) + 0.5) * self.d1
        self.y2s = np.arange(self.n2) * (L2 / self.n2)
        self.d2 = L2 / self.n2
        self._quad = None

    @property
    def shape(self):
        return (self.nx, self.n1, self.n2)

    @property
    def n_nodes(self):
        return self.nx * self.n1 * self.n2

    def __eq__(self, other):
        if self is other:
            return True
        return (
            isinstance(other, Grid)
            and self.spec == other.spec
            and self.shape == other.shape
            and np.allclose(self.xs, other.xs)
        )

    def signature(self) -> bytes:
        import hashlib

        m = hashlib.sha256()
        m.update(repr((self.spec, self.shape, self.x_lo, self.x_hi)).encode())
        return m.digest()[:16]

    def node_coords(self):
        """(X, Y) arrays: X (nx,n1,n2), Y (nx,n1,n2,2)."""
        X, Y1, Y2 = np.meshgrid(self.xs, self.y1s, self.y2s, indexing="ij")
        return X, np.stack([Y1, Y2], axis=-1)

    def quad_weights(self, spec: MetricSpec = None):
        """Metric-density quadrature weights sqrt(det gt) x^-3 dlog dy1 dy2."""
        spec = spec or self.spec
        if spec != self.spec:
            raise ValueError("grid was built for a different metric spec")
        if self._quad is None:
            X, Y = self.node_coords()
            dens = np.sqrt(np.linalg.det(spec.gt(X, Y)))
            self._quad = dens * self.dlog * self.d1 * self.d2 / X ** 3
        return self._quad

    # -- trilinear interpolation stencils ------------------------------------

    def interp_stencil(self, x, y):
        """Trilinear stencil in (log x, y1, y2) for points (x (M,), y (M,2)).

        Returns (idx, w): idx (M,8) int32 flat node indices, w (M,8) weights.
        Points outside the radial range, or outside a non-periodic link
        chart, get all-zero weights (zero extension).
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        M = x.size
        u = (np.log(np.maximum(x, 1e-300)) - np.log(self.xs[0])) / self.dlog
        inside = (u >= -1e-9) & (u <= self.nx - 1 + 1e-9)
        u = np.clip(u, 0.0, self.nx - 1)
        i0 = np.minimum(u.astype(np.int64), self.nx - 2)
        fu = u - i0

        idxs = []
        fracs = []
        masks = []
        for ax, (ys, d, per, n) in enumerate(
            [
                (self.y1s, self.d1, self.link.periodic[0], self.n1),
                (self.y2s, self.d2, self.link.periodic[1], self.n2),
            ]
        ):
            v = (y[:, ax] - ys[0]) / d
            if per:
                v = v % n
                j0 = np.floor(v).astype(np.int64) % n
                j1 = (j0 + 1) % n
                fv = v - np.floor(v)
                mask = np.ones(M, dtype=bool)
            else:
                mask = (v >= -1e-9) & (v <= n - 1 + 1e-9)
                v = np.clip(v, 0.0, n - 1)
                j0 = np.minimum(v.astype(np.int64), n - 2)
                j1 = j0 + 1
                fv = v - j0
            idxs.append((j0, j1))
            fracs.append(fv)
            masks.append(mask)

        ok = inside & masks[0] & masks[1]
        (j0a, j1a), (j0b, j1b) = idxs
        fva, fvb = fracs
        n12 = self.n1 * self.n2
        idx = np.empty((M, 8), dtype=np.int64)
        w = np.empty((M, 8))
        corner = 0
        for di, wi in ((0, 1.0 - fu), (1, fu)):
            base_i = (i0 + di) * n12
            for (ja, wa) in ((j0a, 1.0 - fva), (j1a, fva)):
                for (jb, wb) in ((j0b, 1.0 - fvb), (j1b, fvb)):
                    idx[:, corner] = base_i + ja * self.n2 + jb
                    w[:, corner] = wi * wa * wb
                    corner += 1
        w[~ok, :] = 0.0
        idx[~ok, :] = 0
        return idx, w


# -- fields -------------------------------------------------------------------


@dataclass
class TensorField:
    """Rank 0/1/2 field sampled on a Grid, components in the sc-1c frame.

    Rank-2 fields hold only the upper triangle (slots 00,01,02,11,12,22).
    `state` records whether the samples are the plain field or the weighted
    representative e^{-F Phi/h} f.
    """

    grid: Grid
    rank: int
    components: np.ndarray  # (ncomp, nx, n1, n2)
    F: float
    h: float
    state: str = "plain"

    def __post_init__(self):
        if self.rank not in (0, 1, 2):
            raise ValueError("rank must be 0, 1 or 2")
        want = (NCOMP[self.rank],) + self.grid.shape
        if self.components.shape != want:
            raise ValueError(f"component shape {self.components.shape} != {want}")
        if self.state not in ("plain", "weighted"):
            raise ValueError("state must be 'plain' or 'weighted'")

    @classmethod
    def zeros(cls, grid, rank, F=1.0, h=0.1, state="plain", dtype=float):
        comps = np.zeros((NCOMP[rank],) + grid.shape, dtype=dtype)
        return cls(grid, rank, comps, F, h, state)

    @classmethod
    def from_function(cls, grid, rank, fn, F=1.0, h=0.1, state="plain"):
        """Sample frame components fn(X, Y) -> (ncomp, ...) on the grid."""
        X, Y = grid.node_coords()
        comps = np.asarray(fn(X, Y))
        if comps.shape != (NCOMP[rank],) + grid.shape:
            raise ValueError("fn returned wrong component shape")
        return cls(grid, rank, comps, F, h, state)

    def copy(self, components=None, state=None):
        return TensorField(
            grid=self.grid,
            rank=self.rank,
            components=self.components.copy() if components is None else components,
            F=self.F,
            h=self.h,
            state=self.state if state is None else state,
        )

    def flat(self):
        return self.components.reshape(-1)

    def with_flat(self, vec, state=None):
        comps = np.asarray(vec).reshape(self.components.shape)
        return self.copy(components=comps, state=state)

    def eval_components(self, x, y):
        """Trilinear frame components at off-grid points; 0 outside the grid."""
        idx, w = self.grid.interp_stencil(x, y)
        flat = self.components.reshape(NCOMP[self.rank], -1)
        return (flat[:, idx] * w[None, :, :]).sum(axis=-1)

    def norm(self):
        from .geometry import sc_1c_inner_product

        return np.sqrt(
            abs(sc_1c_inner_product(self.grid.spec, self.h, self.F, self, self))
        )


class AnalyticField:
    """A field given by a closed-form frame-component function (no grid).

    Used as an exact oracle in transform tests and as a wave-packet source:
    fn(x, y) with x (...,) and y (...,2) must return (ncomp, ...).
    """

    def __init__(self, rank, fn, F=1.0, h=0.1, state="plain"):
        self.rank = rank
        self.fn = fn
        self.F = F
        self.h = h
        self.state = state
        self.grid = None

    def eval_components(self, x, y):
        return np.asarray(self.fn(np.asarray(x, float), np.asarray(y, float)))


# -- conjugation --------------------------------------------------------------


def apply_conjugation(field: TensorField, F, h, sign) -> TensorField:
    """Multiply components by e^{sign F Phi/h} and toggle the state flag.

    sign=-1 takes a plain field to its weighted representative, sign=+1 back.
    Exponents are evaluated in log space; a nonzero component that would
    exceed e^200 raises ConjugationOverflowError instead of producing inf.
    """
    if sign not in (-1, 1, -1.0, 1.0):
        raise ValueError("sign must be +-1")
    want = "plain" if sign < 0 else "weighted"
    if field.state != want:
        raise ValueError(
            f"conjugation state error: sign={sign:+.0f} requires a {want} field, "
            f"got {field.state}"
        )
    x0 = field.grid.spec.x0
    X, _ = field.grid.node_coords()
    expo = sign * F * phi_weight(X, x0) / h
    comps = field.components
    mag = np.abs(comps)
    with np.errstate(divide="ignore"):
        logmag = np.where(mag > 0, np.log(np.where(mag > 0, mag, 1.0)), -np.inf)
    worst = logmag + expo[None]
    if np.any(worst > OVERFLOW_LOG_LIMIT):
        n_bad = int(np.sum(worst > OVERFLOW_LOG_LIMIT))
        raise ConjugationOverflowError(
            f"{n_bad} components would exceed e^{OVERFLOW_LOG_LIMIT:.0f}"
        )
    # exponent applied only where the component is nonzero (0 * inf guard)
    safe_expo = np.where(comps != 0, expo[None], 0.0)
    out = comps * np.exp(safe_expo)
    return field.copy(components=out, state="weighted" if sign < 0 else "plain")


def chi_cutoff(x, lambda_hat, alpha, F=1.0):
    """Gaussian direction cutoff e^{lambda_hat^2/(2 nu)} with nu = alpha/F.

    lambda_hat is the regime-rescaled slope (lam/(h^{1/2}x) toward the conic
    end, x lam/(h^{1/2}(x0-x)) toward the artificial boundary).  Requires
    alpha < 0; the profile is even in lambda_hat, equals 1 at 0, and decays.
    The x argument is kept for interface parity with the kernel usage.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha >= 0):
        raise ValueError("concavity violated: alpha must be negative")
    lh = np.asarray(lambda_hat, dtype=float)
    out = np.exp(lh * lh * np.asarray(F, float) / (2.0 * alpha))
    return float(out) if out.ndim == 0 else out


# -- velocity pairing ---------------------------------------------------------


def pair_components(spec, rank, comps, x, lam, omega, h):
    """Contract frame components with the m-th power of x lam d_x + omega d_y.

    comps: (ncomp, M); x, lam: (M,); omega: (M,2).  Converts frame to
    coordinate components via the frame weights and sums the full index
    contraction.
    """
    if rank == 0:
        return comps[0]
    wx, wy = frame_weight_arrays(spec, x, h)
    q0 = wx * x * lam
    q1 = wy * omega[..., 0]
    q2 = wy * omega[..., 1]
    if rank == 1:
        return comps[0] * q0 + comps[1] * q1 + comps[2] * q2
    qq = [q0 * q0, q0 * q1, q0 * q2, q1 * q1, q1 * q2, q2 * q2]
    out = 0.0
    for s in range(6):
        out = out + SYM_MULT[s] * comps[s] * qq[s]
    return out


def pair_velocity(field, state, h):
    """Pair a field with the tensor power of the geodesic velocity at a state.

    The velocity is x lam d_x + omega d_y; frame components are converted to
    coordinate components at the (interpolated) point and fully contracted.
    Points outside the grid support contribute 0.
    """
    if field.rank > 2:
        raise ValueError("rank > 2 unsupported")
    x = np.atleast_1d(np.asarray(state.x, dtype=float))
    y = np.atleast_2d(np.asarray(state.y, dtype=float))
    comps = field.eval_components(x, y)
    omega = np.atleast_2d(np.asarray(state.omega, dtype=float))
    spec = field.grid.spec if field.grid is not None else None
    if spec is None:
        raise ValueError("pair_velocity needs a grid-backed field; use "
                         "pair_components for analytic fields")
    val = pair_components(spec, field.rank, comps, x, np.asarray(state.lam), omega, h)
    return float(val[0]) if val.shape == (1,) else val


# -- serialization ------------------------------------------------------------

_MAGIC = b"CTFD"
_LINK_CODE = {"torus": 0, "sphere": 1}
_LINK_NAME = {v: k for k, v in _LINK_CODE.items()}
_STATE_CODE = {"plain": 0, "weighted": 1}
_STATE_NAME = {v: k for k, v in _STATE_CODE.items()}


def save_field(field: TensorField, path):
    """Structured binary dump: fixed header + little-endian float64 payload.

    Header: magic, rank, state, complex flag, link code, dims, F, h, grid
    x-range and x0.  Payload is node-major (node index outer, component
    inner).
    """
    g = field.grid
    comp = np.ascontiguousarray(np.moveaxis(field.components, 0, -1))
    is_complex = 1 if np.iscomplexobj(comp) else 0
    header = struct.pack(
        "<4sBBBBiii d d d d d",
        _MAGIC,
        field.rank,
        _STATE_CODE[field.state],
        is_complex,
        _LINK_CODE[g.link.kind],
        g.nx,
        g.n1,
        g.n2,
        field.F,
        field.h,
        g.x_lo,
        g.x_hi,
        g.spec.x0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(comp.astype("<c16" if is_complex else "<f8").tobytes())


def load_field(path, spec: MetricSpec) -> TensorField:
    size = struct.calcsize("<4sBBBBiii d d d d d")
    with open(path, "rb") as fh:
        raw = fh.read(size)
        magic, rank, state, is_complex, link, nx, n1, n2, F, h, x_lo, x_hi, x0 = (
            struct.unpack("<4sBBBBiii d d d d d", raw)
        )
        if magic != _MAGIC:
            raise ValueError("not a field dump")
        if _LINK_NAME[link] != spec.link or abs(x0 - spec.x0) > 1e-14:
            raise ValueError("field dump does not match the given metric spec")
        payload = fh.read()
    grid = Grid(spec, nx, n1, n2, x_lo=x_lo, x_hi=x_hi)
    dt = "<c16" if is_complex else "<f8"
    comp = np.frombuffer(payload, dtype=dt).reshape(grid.shape + (NCOMP[rank],))
    comp = np.moveaxis(comp, -1, 0).copy()
    return TensorField(grid, rank, comp, F, h, _STATE_NAME[state])


def export_csv(field: TensorField, path):
    """Plotting-oriented CSV: x, y1, y2, then one column per component."""
    X, Y = field.grid.node_coords()
    cols = [X.ravel(), Y[..., 0].ravel(), Y[..., 1].ravel()]
    for c in range(NCOMP[field.rank]):
        cols.append(np.real(field.components[c]).ravel())
    header = "x,y1,y2," + ",".join(f"c{c}" for c in range(NCOMP[field.rank]))
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header,
               comments="", fmt="%.17g")
