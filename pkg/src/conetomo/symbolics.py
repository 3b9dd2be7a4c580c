"""Principal-symbol matrices, gauge kernels, ellipticity margins, and probes.

Symbols are evaluated at fiber points (x, y, xi, eta, F) with eta expressed
in a gt-orthonormal link frame, so the link metric enters only through the
concavity coefficient alpha(omega) and the boundary endomorphism b_s.  Slot
bases: rank 1 uses (dx-frame, dy1, dy2); rank 2 the symmetric pairs
(00, 01, 02, 11, 12, 22) with multiplicity weights (1,2,2,1,2,1) in the slot
inner product.

The weighted symmetric-gradient symbol is

    sigma(d) v = ( (xi - iF) v0 ;  sym(eta (x) v) + b_s v0 ... )

and sigma(delta) is its slot adjoint, with +iF and the contractions iota_eta
and <b_s, .>.  The localized backprojection symbol at finite fiber points is
the circle integral of a rank-one factor built from

    nu = alpha/F,  phi = -nu (xi^2 + F^2),  rho = eta . omega,
    C10 = nu (xi - iF) rho / phi,
    C20 = nu^2 (xi - iF)^2 rho^2/phi^2 + 2 i nu alpha (xi - iF)/phi,

with the row factor the complex conjugate of the column factor (the sign of
the non-factorized part of C02/C01 is fixed by the identity
nu (xi - iF) + 2 i alpha = nu (xi + iF), which also gives the factorization
C_{i0} C_{0j} = C_{ij} exactly).  At fiber infinity the symbol is the
integral of cutoff-weighted projections over the equatorial circle
{xi lam + eta . omega = 0}.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .field import Grid, NCOMP, TensorField
from .geodesic import alpha_quadratic
from .geometry import (
    SYM_MULT,
    SYM_SLOTS,
    MetricSpec,
    ZONE_HI,
    ZONE_LO,
    b_s_at,
    frame_weight_arrays,
)

__all__ = [
    "FiberPoint",
    "SymbolMatrix",
    "sigma_d",
    "sigma_delta",
    "sigma_laplacian",
    "sigma_ddelta",
    "sigma_normal_finite",
    "sigma_normal_infinity",
    "kernel_basis",
    "ellipticity_margin",
    "MarginReport",
    "SampleSpec",
    "probe_operator_symbol",
    "ResolutionError",
    "make_wave_packet",
]

RANK1_SLOTS = ["dx", "dy1", "dy2"]
RANK2_SLOTS = ["dxdx", "dxdy1", "dxdy2", "dy1dy1", "dy1dy2", "dy2dy2"]


class ResolutionError(ValueError):
    """Wave packet not resolvable on the grid at the requested frequency."""


@dataclass
class FiberPoint:
    """Base point plus fiber coordinates where symbols are evaluated.

    eta holds components in a gt-orthonormal frame at the base point.  F > 0
    is required for the conjugated symbols at finite fiber points; h is
    carried for bookkeeping only (principal symbols are h-independent).
    rho_fiber = 1/|(xi, eta)| supports fiber-infinity checks.
    """

    spec: MetricSpec
    x: float
    y: np.ndarray
    xi: float
    eta: np.ndarray
    F: float
    h: float = 0.0
    regime: Optional[str] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        if self.F <= 0:
            raise ValueError("F must be positive")
        x0 = self.spec.x0
        auto = "1c" if self.x < ZONE_LO * x0 else ("sc" if self.x > ZONE_HI * x0 else "interior")
        if self.regime is None:
            self.regime = auto
        elif self.regime != auto:
            raise ValueError(f"regime {self.regime!r} inconsistent with x={self.x}")

    @property
    def rho_fiber(self):
        n = np.hypot(self.xi, np.linalg.norm(self.eta))
        return np.inf if n == 0 else 1.0 / n

    # -- geometric data in the orthonormal link frame ------------------------

    def chol(self):
        return np.linalg.cholesky(self.spec.gt(self.x, self.y))

    def b_s(self):
        """Boundary endomorphism in the orthonormal frame, symmetric (2,2)."""
        L = self.chol()
        b = b_s_at(self.spec, self.x, self.y, h=max(self.h, 1e-3))
        Li = np.linalg.inv(L)
        return Li @ b @ Li.T

    def alpha_of(self, omega_hat):
        """Concavity coefficient for tangent directions, orthonormal omega."""
        om = np.asarray(omega_hat, dtype=float)
        L = self.chol()
        om_chart = np.linalg.solve(L.T, om.T).T
        return alpha_quadratic(
            self.spec,
            np.broadcast_to(self.x, om.shape[:-1]).copy(),
            np.broadcast_to(self.y, om.shape),
            np.zeros(om.shape[:-1]),
            om_chart,
        )


@dataclass
class SymbolMatrix:
    """Complex matrix with tensor-slot labels on rows and columns."""

    mat: np.ndarray
    rows: list
    cols: list

    @property
    def shape(self):
        return self.mat.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.mat, dtype=dtype)


def _slots(rank):
    return {0: ["1"], 1: RANK1_SLOTS, 2: RANK2_SLOTS}[rank]


def slot_mult(rank):
    return {0: np.ones(1), 1: np.ones(3), 2: SYM_MULT.copy()}[rank]


# -- differential symbols -----------------------------------------------------


def sigma_d(point: FiberPoint, rank_in: int) -> SymbolMatrix:
    """Symbol of the conjugated symmetric gradient, rank_in -> rank_in + 1."""
    xi, eta, F = point.xi, point.eta, point.F
    z = xi - 1j * F
    if rank_in == 0:
        mat = np.array([[z], [eta[0]], [eta[1]]], dtype=complex)
        return SymbolMatrix(mat, _slots(1), _slots(0))
    if rank_in != 1:
        raise ValueError("rank_in must be 0 or 1")
    b = point.b_s()
    mat = np.zeros((6, 3), dtype=complex)
    for S, (a, c) in enumerate(SYM_SLOTS):
        if (a, c) == (0, 0):
            mat[S, 0] = z
        elif a == 0:  # slot (0, j)
            j = c
            mat[S, 0] = 0.5 * eta[j - 1]
            mat[S, j] = 0.5 * z
        else:  # link pair (i, j)
            i, j = a, c
            mat[S, 0] = b[i - 1, j - 1]
            mat[S, i] += 0.5 * eta[j - 1]
            mat[S, j] += 0.5 * eta[i - 1]
    return SymbolMatrix(mat, _slots(2), _slots(1))


def sigma_delta(point: FiberPoint, rank_in: int) -> SymbolMatrix:
    """Symbol of the weighted divergence, rank_in -> rank_in - 1."""
    xi, eta, F = point.xi, point.eta, point.F
    zb = xi + 1j * F
    if rank_in == 1:
        mat = np.array([[zb, eta[0], eta[1]]], dtype=complex)
        return SymbolMatrix(mat, _slots(0), _slots(1))
    if rank_in != 2:
        raise ValueError("rank_in must be 1 or 2")
    b = point.b_s()
    mat = np.zeros((3, 6), dtype=complex)
    # scalar row: (xi + iF) v00 + eta . v0j + <b_s, v_link>
    mat[0, 0] = zb
    mat[0, 1] = eta[0]
    mat[0, 2] = eta[1]
    mat[0, 3] = b[0, 0]
    mat[0, 4] = 2.0 * b[0, 1]
    mat[0, 5] = b[1, 1]
    # link rows: (xi + iF) v0l + sum_k eta_k v_kl
    for l in (1, 2):
        mat[l, l] = zb
        for k in (1, 2):
            S = _SLOT_OF[(min(k, l), max(k, l))]
            mat[l, S] += eta[k - 1]
    return SymbolMatrix(mat, _slots(1), _slots(2))


_SLOT_OF = {s: i for i, s in enumerate(SYM_SLOTS)}


def sigma_laplacian(point: FiberPoint, rank: int) -> SymbolMatrix:
    """Symbol of Delta = delta d on rank-0 or rank-1 fields."""
    if rank == 0:
        val = point.xi ** 2 + point.F ** 2 + point.eta @ point.eta
        return SymbolMatrix(np.array([[val]], dtype=complex), _slots(0), _slots(0))
    if rank != 1:
        raise ValueError("rank must be 0 or 1")
    mat = sigma_delta(point, 2).mat @ sigma_d(point, 1).mat
    return SymbolMatrix(mat, _slots(1), _slots(1))


def sigma_ddelta(point: FiberPoint, rank: int) -> SymbolMatrix:
    """Symbol of d delta on rank-1 or rank-2 fields (a Gram-type product)."""
    if rank == 1:
        mat = sigma_d(point, 0).mat @ sigma_delta(point, 1).mat
        return SymbolMatrix(mat, _slots(1), _slots(1))
    if rank != 2:
        raise ValueError("rank must be 1 or 2")
    mat = sigma_d(point, 1).mat @ sigma_delta(point, 2).mat
    return SymbolMatrix(mat, _slots(2), _slots(2))


# -- normal-operator symbols ---------------------------------------------------


def c_coefficients(xi, F, nu, rho, alpha):
    """The localized-backprojection coefficients (C10, C01, C20, C02).

    All four derive from Gaussian moments of the cutoff profile; the row
    entries are complex conjugates of the column entries, and the full grid
    C_{ij} = C_{i0} C_{0j} follows from nu (xi - iF) + 2 i alpha = nu (xi + iF).
    """
    z = xi - 1j * F
    phi = -nu * (xi ** 2 + F ** 2)
    C10 = nu * z * rho / phi
    C20 = nu ** 2 * z ** 2 * rho ** 2 / phi ** 2 + 2j * nu * alpha * z / phi
    return C10, np.conj(C10), C20, np.conj(C20)


def c_matrix(xi, F, nu, rho, alpha):
    """Full 3x3 grid of C_{ij} = C_{i0} C_{0j}, i, j in {0, 1, 2}."""
    C10, C01, C20, C02 = c_coefficients(xi, F, nu, rho, alpha)
    col = np.array([1.0 + 0j, C10, C20])
    row = np.array([1.0 + 0j, C01, C02])
    return np.outer(col, row)


def sigma_normal_finite(point: FiberPoint, rank: int, n_theta=64) -> SymbolMatrix:
    """Localized backprojection symbol at a finite fiber point.

    Circle integral of the rank-one factorization with the exact-Gaussian
    cutoff; Hermitian positive semidefinite in the slot inner product.
    Requires alpha < 0 at the base point (checked; phi > 0 follows).
    """
    if rank not in (1, 2):
        raise ValueError("rank must be 1 or 2")
    xi, eta, F = point.xi, point.eta, point.F
    # resolve the Gaussian feature in theta (width ~ sqrt(phi)/|eta| at the
    # zeros of rho): coarse alpha scan first, then the adaptive node count
    coarse = np.stack([np.cos(np.linspace(0, 2 * np.pi, 16, endpoint=False)),
                       np.sin(np.linspace(0, 2 * np.pi, 16, endpoint=False))], axis=-1)
    a_coarse = point.alpha_of(coarse)
    if np.any(a_coarse >= 0):
        raise ValueError("internal consistency: alpha >= 0 at base point")
    phi_min = np.min(-a_coarse / F) * (xi ** 2 + F ** 2)
    eta_norm = np.linalg.norm(eta)
    if eta_norm > 0:
        n_needed = int(60.0 * eta_norm / np.sqrt(phi_min)) + 1
        n_theta = int(min(131072, max(n_theta, n_needed)))
    thetas = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
    om = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
    alpha = point.alpha_of(om)
    nu = alpha / F
    phi = -nu * (xi ** 2 + F ** 2)
    if np.any(phi <= 0):
        raise ValueError("internal consistency: phi <= 0")
    rho = om @ eta
    C10, C01, C20, C02 = c_coefficients(xi, F, nu, rho, alpha)
    if rank == 1:
        u = np.stack([C10, om[:, 0] + 0j, om[:, 1] + 0j], axis=0)  # (3, n)
    else:
        u = np.stack(
            [
                C20,
                C10 * om[:, 0],
                C10 * om[:, 1],
                om[:, 0] ** 2 + 0j,
                om[:, 0] * om[:, 1] + 0j,
                om[:, 1] ** 2 + 0j,
            ],
            axis=0,
        )
    w = 2.0 * np.pi * np.sqrt(np.abs(nu) / phi) * np.exp(-(rho ** 2) / (2.0 * phi))
    dtheta = 2.0 * np.pi / n_theta
    quad = np.einsum("n,an,bn->ab", w, u, np.conj(u)) * dtheta
    mat = point.x * quad @ np.diag(slot_mult(rank))
    return SymbolMatrix(mat, _slots(rank), _slots(rank))


def sigma_normal_infinity(direction, rank: int, base: FiberPoint,
                          n_theta=256) -> SymbolMatrix:
    """Leading symbol at fiber infinity: equatorial integral of projections.

    direction: unit (xi_hat, eta_hat) in R^3.  Integrates the cutoff-weighted
    projections u u^T over the equatorial set {(lam, omega):
    xi_hat lam + eta_hat . omega = 0}, parametrized by the omega circle with
    lam = -eta_hat . omega / xi_hat (graph branch, |xi_hat| not small) or by
    the free lam line over the two omega directions orthogonal to eta_hat
    (|xi_hat| small).  Both branches carry the normalization that makes this
    the exact |(xi,eta)| -> infinity limit of |(xi,eta)| * the finite-point
    symbol; positive semidefinite.
    """
    if rank not in (1, 2):
        raise ValueError("rank must be 1 or 2")
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    xi_hat, eta_hat = d[0], d[1:]

    def proj_stack(lam_hat, om):
        if rank == 1:
            return np.stack([lam_hat + 0j, om[:, 0] + 0j, om[:, 1] + 0j], axis=0)
        return np.stack(
            [
                lam_hat ** 2 + 0j,
                lam_hat * om[:, 0] + 0j,
                lam_hat * om[:, 1] + 0j,
                om[:, 0] ** 2 + 0j,
                om[:, 0] * om[:, 1] + 0j,
                om[:, 1] ** 2 + 0j,
            ],
            axis=0,
        )

    e_norm = np.linalg.norm(eta_hat)
    # cutoff feature width in theta along the graph branch ~ sqrt(nu) xi/eta
    nu_scale = np.sqrt(abs(float(base.alpha_of(np.array([1.0, 0.0])))) / base.F)
    n_graph = n_theta
    if e_norm > 0 and xi_hat != 0:
        n_graph = int(min(131072, max(n_theta, 60.0 * e_norm / (nu_scale * abs(xi_hat)))))
    if abs(xi_hat) > 1e-3 and n_graph < 131072:
        thetas = np.linspace(0.0, 2.0 * np.pi, n_graph, endpoint=False)
        om = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
        lam_hat = -(om @ eta_hat) / xi_hat
        alpha = base.alpha_of(om)
        nu = alpha / base.F
        chi = np.exp(-(lam_hat ** 2) / (2.0 * np.abs(nu)))
        U = proj_stack(lam_hat, om)
        quad = np.einsum("n,an,bn->ab", chi, U, np.conj(U)) * (2.0 * np.pi / n_graph)
        mat = base.x * (2.0 * np.pi / abs(xi_hat)) * quad
    else:
        # equator degenerates: free lam over the two omega points orthogonal
        # to eta_hat, with the matching 1/|eta_hat| Jacobian
        if e_norm < 1e-12:
            raise ValueError("degenerate direction: |eta_hat| ~ 0 with xi_hat ~ 0")
        perp = np.array([-eta_hat[1], eta_hat[0]]) / e_norm
        mat = np.zeros((NCOMP[rank] if rank == 0 else (3 if rank == 1 else 6),) * 2,
                       dtype=complex)
        for sgn in (+1.0, -1.0):
            om0 = sgn * perp
            alpha = float(base.alpha_of(om0))
            nu = alpha / base.F
            width = np.sqrt(abs(nu))
            lam = np.linspace(-8 * width, 8 * width, n_theta)
            dlam = lam[1] - lam[0]
            chi = np.exp(-(lam ** 2) / (2.0 * abs(nu)))
            om = np.broadcast_to(om0, (n_theta, 2))
            U = proj_stack(lam, om)
            mat = mat + np.einsum("n,an,bn->ab", chi, U, np.conj(U)) * dlam
        mat = base.x * (2.0 * np.pi / e_norm) * mat
    mat = mat @ np.diag(slot_mult(rank))
    return SymbolMatrix(mat.astype(complex), _slots(rank), _slots(rank))


# -- kernels and margins --------------------------------------------------------


def kernel_basis(point: FiberPoint, rank: int, at_infinity=False, tol=1e-10):
    """Orthonormal basis (slot inner product) of ker sigma(delta) at a point.

    At fiber infinity the conditions drop the iF shift and the boundary
    endomorphism.  The dimension is whatever the SVD reports at tolerance
    `tol` relative to the largest singular value.
    """
    if at_infinity:
        xi, eta = point.xi, point.eta
        if rank == 1:
            cond = np.array([[xi, eta[0], eta[1]]], dtype=complex)
        else:
            cond = np.zeros((3, 6), dtype=complex)
            cond[0, :3] = [xi, eta[0], eta[1]]
            for l in (1, 2):
                cond[l, l] = xi
                for k in (1, 2):
                    cond[l, _SLOT_OF[(min(k, l), max(k, l))]] += eta[k - 1]
    else:
        cond = sigma_delta(point, rank).mat
    m = slot_mult(rank)
    B = np.diag(np.sqrt(m))
    Binv = np.diag(1.0 / np.sqrt(m))
    A = cond @ Binv
    _, s, Vh = np.linalg.svd(A)
    rank_A = int(np.sum(s > tol * max(s[0], 1e-300))) if s.size else 0
    null_z = Vh[rank_A:].conj().T  # orthonormal in z-coordinates
    basis = Binv @ null_z  # columns M-orthonormal slot vectors
    return basis


@dataclass
class SampleSpec:
    """Sampling plan for ellipticity sweeps.

    Finite fiber points use a signed log grid per axis (n_per_axis values up
    to radius R) at base points in both regimes; fiber infinity uses
    n_infinity unit directions.
    """

    spec: MetricSpec
    h: float = 0.1
    n_per_axis: int = 17
    R: float = 1e3
    n_infinity: int = 64
    n_eta_angles: int = 3
    base_fracs: tuple = (0.12, 0.9)  # x/x0 for the 1c and sc base points
    y_base: tuple = (1.1, 2.3)

    def axis_values(self):
        n_half = (self.n_per_axis - 1) // 2
        pos = np.geomspace(self.R * 10 ** (-(n_half - 1) * 0.4), self.R, n_half)
        return np.concatenate([-pos[::-1], [0.0], pos])

    def base_points(self, F):
        pts = []
        for frac in self.base_fracs:
            x = frac * self.spec.x0
            y = np.array(self.y_base)
            if self.spec.link == "sphere":
                y = np.array([1.2, 2.3])
            pts.append(FiberPoint(self.spec, x, y, 0.0 + 1e-9, np.zeros(2), F, self.h))
        return pts

    def infinity_directions(self):
        k = np.arange(self.n_infinity)
        golden = (1 + 5 ** 0.5) / 2
        zc = (2 * k + 1) / self.n_infinity - 1
        th = 2 * np.pi * k / golden
        r = np.sqrt(1 - zc ** 2)
        return np.stack([zc, r * np.cos(th), r * np.sin(th)], axis=-1)


@dataclass
class MarginRecord:
    where: str
    xi: float
    eta: tuple
    margin_raw: float
    margin_rel: float
    sv_min: float


@dataclass
class MarginReport:
    rank: int
    F: float
    records: list = dc_field(default_factory=list)
    full_records: list = dc_field(default_factory=list)
    m0: float = 0.0
    wall_time: float = 0.0

    @property
    def kernel_margin(self):
        return min(r.margin_rel for r in self.records)

    @property
    def kernel_margin_raw(self):
        return min(r.margin_raw for r in self.records)

    @property
    def full_margin(self):
        return min(r.margin_rel for r in self.full_records) if self.full_records else np.nan

    @property
    def minimizer(self):
        return min(self.records, key=lambda r: r.margin_rel)

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["where", "xi", "eta1", "eta2", "margin_raw", "margin_rel", "sv_min"])
            for r in self.records:
                w.writerow([r.where, r.xi, r.eta[0], r.eta[1], r.margin_raw,
                            r.margin_rel, r.sv_min])


def _restricted_margin(mat, basis, mult):
    """(raw, relative, sv_min) of a symbol restricted to a kernel basis."""
    if basis.shape[1] == 0:
        return np.inf, np.inf, np.inf
    M = np.diag(mult)
    H = basis.conj().T @ (M @ mat) @ basis
    Hh = 0.5 * (H + H.conj().T)
    evals = np.linalg.eigvalsh(Hh)
    scale = max(np.linalg.norm(H, 2), 1e-300)
    sv = np.linalg.svd(H, compute_uv=False)
    return float(evals[0]), float(evals[0] / scale), float(sv[-1] / scale)


def ellipticity_margin(rank: int, F: float, sample: SampleSpec,
                       m0: Optional[float] = None, n_theta=64) -> MarginReport:
    """Sweep the normal-operator symbol over the sample plan.

    Kernel margins: smallest eigenvalue of the Hermitian part (and smallest
    singular value) of the symbol restricted to ker sigma(delta), relative to
    the restricted norm.  Full margins: the combined symbol
    N + sigma(d) m0 (1 + xi^2 + F^2 + |eta|^2)^{-3/2} sigma(delta) over the
    whole slot space.  Non-positive margins are reported, not raised.
    """
    t0 = time.perf_counter()
    report = MarginReport(rank=rank, F=F)
    mult = slot_mult(rank)
    axis = sample.axis_values()
    eta_mags = axis[axis >= 0]
    psis = np.linspace(0.0, np.pi, sample.n_eta_angles, endpoint=False)
    for base in sample.base_points(F):
        name = f"x={base.x:.3f}"
        # cache: the theta-dependent alpha profile is shared per base point
        for xi in axis:
            for em in eta_mags:
                for psi in psis if em > 0 else psis[:1]:
                    eta = em * np.array([np.cos(psi), np.sin(psi)])
                    if xi == 0.0 and em == 0.0:
                        continue
                    pt = FiberPoint(sample.spec, base.x, base.y, float(xi), eta,
                                    F, sample.h)
                    A = sigma_normal_finite(pt, rank, n_theta=n_theta).mat
                    K = kernel_basis(pt, rank)
                    raw, rel, sv = _restricted_margin(A, K, mult)
                    report.records.append(
                        MarginRecord(f"{name} finite", float(xi), tuple(eta), raw, rel, sv)
                    )
                    if m0 is not None:
                        smooth = m0 * (1.0 + xi ** 2 + F ** 2 + eta @ eta) ** -1.5
                        dd = sigma_ddelta(pt, rank).mat * smooth
                        full = A + dd
                        raw, rel, sv = _restricted_margin(
                            full, np.diag(1.0 / np.sqrt(mult)), mult
                        )
                        report.full_records.append(
                            MarginRecord(f"{name} full", float(xi), tuple(eta), raw, rel, sv)
                        )
        for d in sample.infinity_directions():
            pt = FiberPoint(sample.spec, base.x, base.y, float(d[0]), d[1:], F, sample.h)
            A = sigma_normal_infinity(d, rank, pt).mat
            K = kernel_basis(pt, rank, at_infinity=True)
            raw, rel, sv = _restricted_margin(A, K, mult)
            report.records.append(
                MarginRecord(f"{name} infinity", float(d[0]), tuple(d[1:]), raw, rel, sv)
            )
    report.m0 = m0 if m0 is not None else 0.0
    report.wall_time = time.perf_counter() - t0
    return report


# -- wave-packet probing --------------------------------------------------------


def make_wave_packet(grid: Grid, point: FiberPoint, packet_width=5.0,
                     rank=0, polarization=None):
    """Gaussian wave packet oscillating at frame-scaled frequency (xi, eta).

    The radial phase integrates xi w_x(x) exactly in the deep 1c zone and is
    accurate to O(width^2) elsewhere; the link phase uses eta w_y frozen at
    the center.  Raises ResolutionError when the local wavelength or the
    envelope is not resolved (width >= 4 cells, >= ~5 cells per period).
    """
    if packet_width < 4.0:
        raise ResolutionError("packet width must be at least 4 cells")
    h = point.h if point.h > 0 else 0.1
    wx_c, wy_c = frame_weight_arrays(grid.spec, point.x, h)
    # resolvability: phase advance per cell below ~1.3 rad
    k_log = abs(point.xi) * wx_c * point.x * grid.dlog
    k_y1 = abs(point.eta[0]) * wy_c * grid.d1
    k_y2 = abs(point.eta[1]) * wy_c * grid.d2
    if max(k_log, k_y1, k_y2) > 1.3:
        raise ResolutionError(
            f"unresolved packet: phase/cell = {max(k_log, k_y1, k_y2):.2f} rad"
        )
    X, Y = grid.node_coords()
    # radial phase: d(phase)/dx = xi w_x; integrate on the grid spacing
    wx_nodes, _ = frame_weight_arrays(grid.spec, grid.xs, h)
    integrand = point.xi * wx_nodes * grid.xs * grid.dlog  # d phase per dlog step
    phase_x_nodes = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]))])
    ic = int(np.argmin(np.abs(grid.xs - point.x)))
    phase_x_nodes -= phase_x_nodes[ic]
    phase = phase_x_nodes[:, None, None] + np.zeros_like(X)
    L1, L2 = grid.link.lengths
    dy1 = Y[..., 0] - grid.y1s[(np.abs(grid.y1s - point.y[0])).argmin()]
    dy2 = Y[..., 1] - grid.y2s[(np.abs(grid.y2s - point.y[1])).argmin()]
    if grid.link.periodic[0]:
        dy1 = (dy1 + L1 / 2) % L1 - L1 / 2
    dy2 = (dy2 + L2 / 2) % L2 - L2 / 2
    phase = phase + wy_c * (point.eta[0] * dy1 + point.eta[1] * dy2)
    s_log = packet_width * grid.dlog
    s_1 = packet_width * grid.d1
    s_2 = packet_width * grid.d2
    dlogx = np.log(X / grid.xs[ic])
    envelope = np.exp(
        -(dlogx ** 2) / (2 * s_log ** 2)
        - dy1 ** 2 / (2 * s_1 ** 2)
        - dy2 ** 2 / (2 * s_2 ** 2)
    )
    packet = envelope * np.exp(1j * phase)
    f = TensorField.zeros(grid, rank, F=point.F, h=h, state="weighted", dtype=complex)
    if rank == 0:
        f.components[0] = packet
    else:
        if polarization is None:
            raise ValueError("polarization required for rank > 0 packets")
        for c, p in enumerate(np.asarray(polarization, dtype=complex)):
            f.components[c] = p * packet
    center = (ic, int((np.abs(grid.y1s - point.y[0])).argmin()),
              int((np.abs(grid.y2s - point.y[1])).argmin()))
    return f, center


def probe_operator_symbol(operator, point: FiberPoint, packet_width=5.0,
                          grid: Optional[Grid] = None, rank_in=0,
                          polarization=None, out_slot=0):
    """Ratio (operator(packet) at center) / (packet at center).

    `operator` is a callable TensorField -> TensorField, or an object with
    apply_at_nodes(field, nodes) for expensive kernels.  Converges to the
    predicted principal symbol entry as h -> 0 and the grid refines.
    """
    if grid is None:
        raise ValueError("probe needs the grid the operator acts on")
    f, center = make_wave_packet(grid, point, packet_width, rank_in, polarization)
    pol_idx = 0
    if rank_in > 0:
        pol_idx = int(np.argmax(np.abs(np.asarray(polarization))))
    denom = f.components[pol_idx][center]
    if hasattr(operator, "apply_at_nodes"):
        flat_center = (center[0] * grid.n1 + center[1]) * grid.n2 + center[2]
        out = operator.apply_at_nodes(f, np.array([flat_center]))
        val = out[out_slot, 0]
    else:
        out = operator(f)
        val = out.components[out_slot][center]
    return complex(val / denom)
