"""Weighted symmetric gradient, divergence, Laplacian, and gauge projections.

The conjugated symmetric gradient d acts on frame components of a rank m-1
field v by

    (d v)_{cb} = sym_{cb} [ (1/w_c) del_c v_b
                            + delta_{c0} (dlog w_b/dx + F Phi'/h) v_b / w_x
                            - Gamma^d_{cb} (w_d/(w_c w_b)) v_d ]

with central differences on the grid (zero ghosts = Dirichlet at both
numerical radial boundaries, periodic on periodic link axes).  The zeroth
order terms carry both the exponential conjugation (F Phi'/h) and the
frame-change residual; the (link,link) <- radial-slot entries of the latter
are the boundary endomorphism of the divergence symbol.

The divergence delta is the exact transpose of d with respect to the
weighted inner product (machine-precision adjointness by construction), and
Delta = delta d is symmetric positive definite on the Dirichlet subspace;
it is inverted by Jacobi-preconditioned conjugate gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from .field import Grid, NCOMP, TensorField, phi_weight_deriv
from .geometry import (
    SYM_SLOTS,
    MetricSpec,
    dlog_frame_weights,
    frame_weight_arrays,
    gamma_grid,
    sc_1c_inner_product,
    slot_metric_blocks,
)

__all__ = [
    "GaugeOperators",
    "SolveInfo",
    "dsym",
    "ddiv",
    "laplacian_solve",
    "project_solenoidal",
]

_SLOT_INDEX = {s: i for i, s in enumerate(SYM_SLOTS)}


@dataclass
class SolveInfo:
    """Iteration diagnostics of one conjugate-gradient solve."""

    iterations: int
    residuals: list = dc_field(default_factory=list)
    converged: bool = True
    wall_time: float = 0.0

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual"])
            for i, r in enumerate(self.residuals):
                w.writerow([i, f"{r:.17g}"])


def _derivative_stencils(grid: Grid):
    """Sparse first-derivative matrices (per scalar component) on the grid.

    Central differences; zero ghost values beyond the radial range and the
    non-periodic link boundary, periodic wrap otherwise.
    """
    nx, n1, n2 = grid.shape
    N = grid.n_nodes

    def axis_matrix(n, spacing, periodic):
        rows, cols, vals = [], [], []
        for i in range(n):
            for di, s in ((1, 1.0), (-1, -1.0)):
                j = i + di
                if periodic:
                    j %= n
                elif not (0 <= j < n):
                    continue
                rows.append(i)
                cols.append(j)
                vals.append(s / (2.0 * spacing))
        return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

    Ix = sp.identity(nx, format="csr")
    I1 = sp.identity(n1, format="csr")
    I2 = sp.identity(n2, format="csr")
    # d/dlog x, then divide by x at the output node
    Dlog = axis_matrix(nx, grid.dlog, periodic=False)
    Dx = sp.diags(1.0 / grid.xs) @ Dlog
    D1 = axis_matrix(n1, grid.d1, periodic=grid.link.periodic[0])
    D2 = axis_matrix(n2, grid.d2, periodic=grid.link.periodic[1])
    return (
        sp.kron(sp.kron(Dx, I1), I2).tocsr(),
        sp.kron(sp.kron(Ix, D1), I2).tocsr(),
        sp.kron(sp.kron(Ix, I1), D2).tocsr(),
    )


def _node_diag(values):
    return sp.diags(values.reshape(-1))


class GaugeOperators:
    """Discrete d, delta = d^T (weighted), and Delta = delta d on one grid.

    Parameters fix (F, h) and the target rank m in {1, 2}: d maps rank m-1
    to rank m.  All operators are sparse matrices acting on flattened
    component vectors (component-major).  Pure applications; the CG solver
    owns its workspace, so concurrent solves are independent.
    """

    def __init__(self, grid: Grid, F, h, rank: int):
        if rank not in (1, 2):
            raise ValueError("target rank must be 1 or 2")
        self.grid = grid
        self.spec = grid.spec
        self.F = float(F)
        self.h = float(h)
        self.rank = rank
        self._build()

    # -- assembly -------------------------------------------------------------

    def _build(self):
        grid, spec, F, h = self.grid, self.spec, self.F, self.h
        nx, n1, n2 = grid.shape
        N = grid.n_nodes
        Dx, D1, D2 = _derivative_stencils(grid)
        wx, wy = frame_weight_arrays(spec, grid.xs, h)
        dlogwx, dlogwy = dlog_frame_weights(spec, grid.xs, h)
        phi_p = phi_weight_deriv(grid.xs, spec.x0)
        conj_term = (dlogwx * 0.0 + F * phi_p / h)  # radial zeroth order, rank 0 input

        def xprof(arr):
            """Broadcast an x-profile to flattened node order."""
            return np.repeat(arr, n1 * n2)

        inv_wc = [xprof(1.0 / wx), xprof(1.0 / wy), xprof(1.0 / wy)]
        D = [Dx, D1, D2]

        # rank 0 -> 1
        blocks0 = []
        for c in range(3):
            M = _node_diag(inv_wc[c]) @ D[c]
            if c == 0:
                M = M + _node_diag(xprof(F * phi_p / h / wx))
            blocks0.append(M)
        self.d0 = sp.vstack(blocks0).tocsr()

        # rank 1 -> 2
        gamma = gamma_grid(spec, grid.xs, grid.y1s, grid.y2s)  # (...,3,3,3)
        w_of = [wx, wy, wy]
        dlogw_of = [dlogwx, dlogwy, dlogwy]
        rows = []
        for (a, b) in SYM_SLOTS:
            M = sp.csr_matrix((N, 3 * N))
            for (c, bb) in ((a, b), (b, a)):
                # derivative part: (1/w_c) del_c acting on component bb
                part = sp.hstack(
                    [
                        _node_diag(inv_wc[c]) @ D[c] if d == bb else sp.csr_matrix((N, N))
                        for d in range(3)
                    ]
                )
                M = M + 0.5 * part
                # radial zeroth order (conjugation + input frame log-derivative)
                if c == 0:
                    coef = xprof((dlogw_of[bb] + F * phi_p / h) / wx)
                    Z = [sp.csr_matrix((N, N))] * 3
                    Z[bb] = _node_diag(coef)
                    M = M + 0.5 * sp.hstack(Z)
                # Christoffel part: -Gamma^d_{c bb} w_d/(w_c w_bb) on component d
                Zs = []
                for d in range(3):
                    coef = (
                        -gamma[..., d, c, bb]
                        * (xprof(w_of[d]) / (xprof(w_of[c]) * xprof(w_of[bb]))).reshape(
                            grid.shape
                        )
                    ).reshape(-1)
                    Zs.append(_node_diag(coef))
                M = M + 0.5 * sp.hstack(Zs)
            rows.append(M)
        self.d1 = sp.vstack(rows).tocsr()

        # weighted inner-product blocks
        quad = grid.quad_weights(spec).reshape(-1)
        self.W0 = sp.diags(quad)
        G1 = slot_metric_blocks(spec, grid, 1).reshape(-1, 3, 3)
        G2 = slot_metric_blocks(spec, grid, 2).reshape(-1, 6, 6)
        self.W1 = _block_diag_weighted(G1, quad)
        self.W2 = _block_diag_weighted(G2, quad)
        self.W0_inv = sp.diags(1.0 / quad)
        self.W1_inv = _block_diag_weighted(np.linalg.inv(G1), 1.0 / quad)
        self.W2_inv = _block_diag_weighted(np.linalg.inv(G2), 1.0 / quad)

        if self.rank == 1:
            self.d = self.d0
            self.W_in, self.W_in_inv, self.W_out = self.W0, self.W0_inv, self.W1
        else:
            self.d = self.d1
            self.W_in, self.W_in_inv, self.W_out = self.W1, self.W1_inv, self.W2
        self.delta = (self.W_in_inv @ (self.d.T @ self.W_out)).tocsr()
        self.K = (self.d.T @ (self.W_out @ self.d)).tocsr()  # = W_in Delta
        self.K_diag = np.asarray(self.K.diagonal())

    # -- applications ----------------------------------------------------------

    def _wrap(self, vec, rank, state="weighted"):
        f = TensorField.zeros(self.grid, rank, F=self.F, h=self.h, state=state,
                              dtype=np.asarray(vec).dtype)
        return f.with_flat(vec, state=state)

    def dsym(self, v: TensorField) -> TensorField:
        """Symmetric weighted gradient: rank m-1 -> rank m (conjugated fields)."""
        if v.rank != self.rank - 1:
            raise ValueError(f"dsym expects rank {self.rank - 1}")
        if v.rank == 2:
            raise ValueError("rank 2 input unsupported (output would be rank 3)")
        return self._wrap(self.d @ v.flat(), self.rank, v.state)

    def ddiv(self, f: TensorField) -> TensorField:
        """Weighted divergence: exact transpose of dsym, rank m -> m-1."""
        if f.rank != self.rank:
            raise ValueError(f"ddiv expects rank {self.rank}")
        return self._wrap(self.delta @ f.flat(), self.rank - 1, f.state)

    def apply_laplacian(self, v: TensorField) -> TensorField:
        return self.ddiv(self.dsym(v))

    def inner(self, a: TensorField, b: TensorField):
        return sc_1c_inner_product(self.spec, self.h, self.F, a, b)

    # -- solver ----------------------------------------------------------------

    def laplacian_solve(self, rhs: TensorField, tol=1e-10, max_iter=20000):
        """Solve Delta u = rhs by preconditioned CG on the symmetric form.

        Works on K u = W rhs with K = d^T W d (SPD on the Dirichlet subspace)
        and Jacobi preconditioning; the convergence criterion is the weighted
        residual |Delta u - rhs| <= tol |rhs| in the field norm.  Returns
        (u, SolveInfo); stagnation is reported, not raised.
        """
        if rhs.rank != self.rank - 1:
            raise ValueError(f"laplacian_solve expects rank {self.rank - 1}")
        if tol < 1e-14:
            raise ValueError("tol too small")
        t0 = time.perf_counter()
        b = self.W_in @ rhs.flat()
        x = np.zeros_like(b)
        Minv = 1.0 / np.maximum(self.K_diag, 1e-300)
        r = b.copy()
        z = Minv * r
        p = z.copy()
        rz = r @ z
        # norm of rhs in the W^{-1} sense matches |rhs|_W
        b_norm = np.sqrt(max(b @ (self.W_in_inv @ b), 1e-300))
        residuals = []
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            Kp = self.K @ p
            alpha = rz / (p @ Kp)
            x += alpha * p
            r -= alpha * Kp
            res = np.sqrt(max(r @ (self.W_in_inv @ r), 0.0)) / b_norm
            residuals.append(res)
            if res <= tol:
                converged = True
                break
            z = Minv * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        info = SolveInfo(
            iterations=it,
            residuals=residuals,
            converged=converged,
            wall_time=time.perf_counter() - t0,
        )
        return self._wrap(x, self.rank - 1, rhs.state), info

    def _factorized(self):
        if not hasattr(self, "_lu"):
            import scipy.sparse.linalg as spla

            self._lu = spla.splu(self.K.tocsc())
        return self._lu

    def project_solenoidal_direct(self, f: TensorField) -> TensorField:
        """Solenoidal projection via a cached direct factorization of Delta.

        Same operator as project_solenoidal but with the inner solve done by
        sparse LU; used inside iterative inversion where the projector is
        applied every step.
        """
        if f.rank != self.rank:
            raise ValueError(f"project expects rank {self.rank}")
        df = self.ddiv(f)
        q = self._factorized().solve(self.W_in @ df.flat())
        P = self.d @ q
        return f.copy(components=f.components - P.reshape(f.components.shape))

    def project_solenoidal(self, f: TensorField, tol=1e-10, max_iter=20000):
        """Split f = Sf + Pf with Pf = dsym(Qf), Qf = Delta^{-1} ddiv f.

        Qf satisfies the Dirichlet condition by construction; Sf + Pf = f
        exactly and ddiv(Sf) vanishes up to the solver residual.
        """
        if f.rank != self.rank:
            raise ValueError(f"project_solenoidal expects rank {self.rank}")
        df = self.ddiv(f)
        # aim the inner solve so the divergence residual lands near tol*|f|
        f_norm = f.norm()
        df_norm = df.norm()
        inner_tol = tol if df_norm == 0 else max(
            1e-14, min(tol, 0.5 * tol * f_norm / df_norm)
        )
        Q, info = self.laplacian_solve(df, tol=inner_tol, max_iter=max_iter)
        P = self.dsym(Q)
        S = f.copy(components=f.components - P.components)
        return S, P, Q, info


def _block_diag_weighted(blocks, quad):
    """Block-diagonal sparse matrix of per-node (k,k) blocks times weights.

    blocks: (N, k, k); quad: scalar weight per node (or scalar).  Component-
    major vector layout: entry (c*N + n, c'*N + n) = blocks[n, c, c'] * w_n.
    """
    N, k, _ = blocks.shape
    w = np.broadcast_to(np.asarray(quad), (N,))
    rows, cols, vals = [], [], []
    nodes = np.arange(N)
    for c in range(k):
        for cp in range(k):
            col = blocks[:, c, cp] * w
            if not np.any(col):
                continue
            rows.append(c * N + nodes)
            cols.append(cp * N + nodes)
            vals.append(col)
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(k * N, k * N),
    ).tocsr()


# -- functional interface (operator cache keyed by grid and parameters) -------

_CACHE: dict = {}


def _ops_for(field_or_grid, F, h, rank) -> GaugeOperators:
    grid = field_or_grid.grid if hasattr(field_or_grid, "grid") else field_or_grid
    key = (id(grid), float(F), float(h), int(rank))
    ops = _CACHE.get(key)
    if ops is None:
        ops = GaugeOperators(grid, F, h, rank)
        if len(_CACHE) > 8:
            _CACHE.clear()
        _CACHE[key] = ops
    return ops


def dsym(v: TensorField, F, h) -> TensorField:
    return _ops_for(v, F, h, v.rank + 1).dsym(v)


def ddiv(f: TensorField, F, h) -> TensorField:
    return _ops_for(f, F, h, f.rank).ddiv(f)


def laplacian_solve(rhs: TensorField, F, h, tol=1e-10, max_iter=20000):
    return _ops_for(rhs, F, h, rhs.rank + 1).laplacian_solve(rhs, tol, max_iter)


def project_solenoidal(f: TensorField, F, h, tol=1e-10, max_iter=20000):
    return _ops_for(f, F, h, f.rank).project_solenoidal(f, tol, max_iter)
