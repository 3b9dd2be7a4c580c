import numpy as np
import pytest

from conetomo.geometry import MetricSpec
from conetomo.symbolics import (
    FiberPoint,
    SampleSpec,
    c_matrix,
    ellipticity_margin,
    kernel_basis,
    sigma_d,
    sigma_ddelta,
    sigma_delta,
    sigma_laplacian,
    sigma_normal_finite,
    sigma_normal_infinity,
    slot_mult,
)


@pytest.fixture(scope="module")
def spec():
    return MetricSpec(x0=0.3, link="torus")


def fp(spec, xi, eta, F, x=0.03):
    return FiberPoint(spec, x, np.array([1.0, 2.0]), float(xi),
                      np.asarray(eta, dtype=float), float(F), 0.1)


class TestDifferentialSymbols:
    def test_gradient_column_rank0(self, spec):
        # (xi, eta, F) = (1, 0, 2): column (1 - 2i, 0, 0)
        m = sigma_d(fp(spec, 1.0, [0.0, 0.0], 2.0), 0).mat
        assert m[0, 0] == 1.0 - 2.0j
        assert m[1, 0] == 0 and m[2, 0] == 0

    def test_real_multiplication_when_unconjugated(self, spec):
        # F -> 0+ limit realized at small F: radial slot is multiplication by xi
        m = sigma_d(fp(spec, 1.5, [0.0, 0.0], 1e-12), 0).mat
        assert abs(m[0, 0] - 1.5) < 1e-9

    def test_adjoint_consistency(self, spec, rng):
        for _ in range(10):
            pt = fp(spec, rng.uniform(-3, 3), rng.uniform(-3, 3, 2), rng.uniform(0.5, 5))
            for rin, rout in ((0, 1), (1, 2)):
                sd = sigma_d(pt, rin).mat
                sdel = sigma_delta(pt, rout).mat
                Mi = np.diag(slot_mult(rin))
                Mo = np.diag(slot_mult(rout))
                adj = np.linalg.inv(Mi) @ sd.conj().T @ Mo
                assert np.abs(adj - sdel).max() < 1e-12

    def test_conjugation_covariance(self, spec):
        # flipping the sign of F turns the gradient symbol into the transpose
        # partner of the divergence symbol (entrywise, no conjugation)
        pt = fp(spec, 0.7, [0.4, -1.1], 2.5)
        pt_neg = FiberPoint(spec, pt.x, pt.y, pt.xi, pt.eta, pt.F, pt.h)
        sd_negF = sigma_d(fp(spec, 0.7, [0.4, -1.1], 2.5), 0).mat.conj()  # xi real
        sdel = sigma_delta(pt, 1).mat
        assert np.abs(sd_negF.T - sdel).max() < 1e-14

    def test_divergence_kernel_example(self, spec):
        # (xi, eta, F) = (0, (1,0), 1): v = (i, 1, 0) satisfies the condition
        m = sigma_delta(fp(spec, 0.0, [1.0, 0.0], 1.0), 1).mat
        v = np.array([1j, 1.0, 0.0])
        assert abs(m @ v) < 1e-15

    def test_diagonal_structure_eta_zero(self, spec):
        # eta = 0 and a point where the boundary term is the only coupling
        pt = fp(spec, 1.0, [0.0, 0.0], 1.0)
        K = kernel_basis(pt, 1)
        # kernel of the rank-1 divergence symbol: {(0, v1)}
        assert K.shape[1] == 2
        assert np.abs(K[0]).max() < 1e-12

    def test_two_tensor_kernel_relations(self, spec, rng):
        # v00 and v01 recovered from v11 through the stated relations
        for _ in range(10):
            xi = rng.uniform(-2, 2)
            eta = rng.uniform(-2, 2, 2)
            F = rng.uniform(0.5, 4)
            pt = fp(spec, xi, eta, F)
            b = pt.b_s()
            sdel = sigma_delta(pt, 2).mat
            v11 = rng.standard_normal((2, 2))
            v11 = 0.5 * (v11 + v11.T)
            z = xi + 1j * F
            v00 = (np.einsum("i,ij,j->", eta, v11, eta) - z * np.sum(b * v11)) / z ** 2
            v01 = -(eta @ v11) / z
            v = np.array([v00, v01[0], v01[1], v11[0, 0], v11[0, 1], v11[1, 1]])
            assert np.abs(sdel @ v).max() < 1e-12 * max(1.0, np.abs(v).max())


class TestLaplacianSymbol:
    def test_scalar_values(self, spec):
        assert sigma_laplacian(fp(spec, 1.0, [2.0, 0.0], 3.0), 0).mat[0, 0] == 14.0
        assert sigma_laplacian(fp(spec, 0.0, [0.0, 0.0], 2.0), 0).mat[0, 0] == 4.0

    def test_rank1_matches_hand_blocks(self, spec, rng):
        # against the independently hand-coded block formula with b_s = 0
        class NoBoundary(FiberPoint):
            def b_s(self):
                return np.zeros((2, 2))

        for _ in range(10):
            xi = rng.uniform(-3, 3)
            eta = rng.uniform(-3, 3, 2)
            F = rng.uniform(0.5, 5)
            pt = NoBoundary(spec, 0.03, np.array([1.0, 2.0]), xi, eta, F, 0.1)
            got = sigma_laplacian(pt, 1).mat
            z, zb = xi - 1j * F, xi + 1j * F
            hand = np.zeros((3, 3), dtype=complex)
            hand[0, 0] = xi ** 2 + F ** 2 + 0.5 * (eta @ eta)
            hand[0, 1:] = 0.5 * z * eta
            hand[1:, 0] = 0.5 * zb * eta
            hand[1:, 1:] = (
                0.5 * (xi ** 2 + F ** 2) * np.eye(2)
                + 0.5 * (eta @ eta) * np.eye(2)
                + 0.5 * np.outer(eta, eta)
            )
            assert np.abs(got - hand).max() < 1e-12

    def test_composition_at_principal_level(self, spec, rng):
        for _ in range(10):
            pt = fp(spec, rng.uniform(-3, 3), rng.uniform(-3, 3, 2), rng.uniform(0.5, 5))
            prod = sigma_delta(pt, 2).mat @ sigma_d(pt, 1).mat
            assert np.abs(prod - sigma_laplacian(pt, 1).mat).max() < 1e-12


class TestDDeltaSymbol:
    def test_gram_positivity(self, spec, rng):
        for _ in range(100):
            pt = fp(spec, rng.uniform(-4, 4), rng.uniform(-4, 4, 2), rng.uniform(0.5, 20))
            rank = rng.choice([1, 2])
            A = sigma_ddelta(pt, rank).mat
            m = slot_mult(rank)
            H = np.diag(np.sqrt(m)) @ A @ np.diag(1.0 / np.sqrt(m))
            evals = np.linalg.eigvalsh(0.5 * (H + H.conj().T))
            assert evals.min() > -1e-12 * max(evals.max(), 1.0)

    def test_rank_bound(self, spec):
        pt = fp(spec, 1.0, [0.5, -0.5], 2.0)
        A = sigma_ddelta(pt, 2).mat
        s = np.linalg.svd(A, compute_uv=False)
        assert np.sum(s > 1e-10 * s[0]) <= 3

    def test_top_left_entry(self, spec):
        pt = fp(spec, 1.2, [0.3, 0.4], 2.0)
        A = sigma_ddelta(pt, 2).mat
        assert abs(A[0, 0] - (1.2 ** 2 + 4.0)) < 1e-12

    def test_boundary_term_small_at_large_F(self, spec, rng):
        class NoBoundary(FiberPoint):
            def b_s(self):
                return np.zeros((2, 2))

        for _ in range(20):
            xi = rng.uniform(-5, 5)
            eta = rng.uniform(-5, 5, 2)
            pt = fp(spec, xi, eta, 20.0)
            pt0 = NoBoundary(spec, 0.03, np.array([1.0, 2.0]), xi, eta, 20.0, 0.1)
            e1 = np.sort(np.abs(np.linalg.eigvals(sigma_ddelta(pt, 2).mat)))
            e0 = np.sort(np.abs(np.linalg.eigvals(sigma_ddelta(pt0, 2).mat)))
            big = e0 > 1e-8 * e0.max()
            assert np.abs(e1[big] - e0[big]).max() <= 0.1 * e0.max()


class TestCFactorization:
    def test_identity_at_random_points(self, rng):
        for _ in range(1000):
            xi = rng.uniform(-5, 5)
            F = rng.uniform(0.2, 30)
            alpha = -rng.uniform(0.05, 3)
            nu = alpha / F
            rho = rng.uniform(-2, 2)
            C = c_matrix(xi, F, nu, rho, alpha)
            for i in range(3):
                for j in range(3):
                    assert abs(C[i, 0] * C[0, j] - C[i, j]) < 1e-12 * max(1, abs(C[i, j]))

    def test_c10_hand_value(self):
        # xi = 0, F = 1: C10 = nu (-i) phi^-1 rho
        nu, rho, alpha = -0.5, 0.3, -0.5
        phi = -nu * 1.0
        C = c_matrix(0.0, 1.0, nu, rho, alpha)
        assert abs(C[1, 0] - nu * (-1j) * rho / phi) < 1e-15

    def test_list_transcription(self, rng):
        # independent transcription of the generator entries
        for _ in range(50):
            xi = rng.uniform(-4, 4)
            F = rng.uniform(0.3, 10)
            alpha = -rng.uniform(0.1, 2)
            nu = alpha / F
            rho = rng.uniform(-1, 1)
            z = xi - 1j * F
            phi = -nu * (xi ** 2 + F ** 2)
            C = c_matrix(xi, F, nu, rho, alpha)
            assert abs(C[1, 0] - nu * z * rho / phi) < 1e-14
            assert abs(C[2, 0] - (nu ** 2 * z ** 2 * rho ** 2 / phi ** 2
                                  + 2j * nu * alpha * z / phi)) < 1e-13
            # the consistent row entries are the conjugates (adjoint factor)
            assert abs(C[0, 1] - np.conj(C[1, 0])) < 1e-14
            assert abs(C[0, 2] - np.conj(C[2, 0])) < 1e-13
            # the internal identity that fixes the printed sign ambiguity
            assert abs(nu * z + 2j * alpha - nu * (xi + 1j * F)) < 1e-13


class TestNormalSymbols:
    def test_finite_psd(self, spec, rng):
        for rank in (1, 2):
            for _ in range(25):
                pt = fp(spec, rng.uniform(-4, 4), rng.uniform(-4, 4, 2),
                        rng.uniform(0.3, 25))
                A = sigma_normal_finite(pt, rank).mat
                m = slot_mult(rank)
                H = np.diag(m) @ A
                Hh = 0.5 * (H + H.conj().T)
                B = np.diag(1.0 / np.sqrt(m))
                evals = np.linalg.eigvalsh(B @ Hh @ B)
                assert evals.min() > -1e-12 * max(evals.max(), 1e-300)

    def test_phi_positive_guard(self, spec):
        A = sigma_normal_finite(fp(spec, 0.5, [0.5, 0.0], 1.0), 1)
        assert np.isfinite(A.mat).all()

    def test_infinity_psd_and_projection_structure(self, spec, rng):
        for rank in (1, 2):
            for _ in range(20):
                d = rng.standard_normal(3)
                d /= np.linalg.norm(d)
                base = fp(spec, d[0], d[1:], 1.0)
                A = sigma_normal_infinity(d, rank, base).mat
                m = slot_mult(rank)
                B = np.diag(1.0 / np.sqrt(m))
                H = np.diag(m) @ A
                evals = np.linalg.eigvalsh(B @ (0.5 * (H + H.conj().T)) @ B)
                assert evals.min() > -1e-10 * max(evals.max(), 1e-300)

    def test_infinity_rank1_radial_kernel_positive(self, spec):
        # xi_hat = 0: the F-free kernel coincides with the span of the
        # equatorial projections; minimum eigenvalue strictly positive
        d = np.array([0.0, 0.6, 0.8])
        base = fp(spec, d[0] + 1e-12, d[1:], 1.0)
        A = sigma_normal_infinity(d, 1, base).mat
        pt = fp(spec, 0.0, d[1:], 1.0)
        K = kernel_basis(pt, 1, at_infinity=True)
        H = K.conj().T @ A @ K
        evals = np.linalg.eigvalsh(0.5 * (H + H.conj().T))
        assert evals.min() > 1e-3 * evals.max()

    def test_infinity_rank2_kernel_positive(self, spec, rng):
        for _ in range(10):
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            if abs(d[0]) < 0.2:
                d[0] = 0.5
                d /= np.linalg.norm(d)
            base = fp(spec, d[0], d[1:], 1.0)
            A = sigma_normal_infinity(d, 2, base).mat
            pt = fp(spec, d[0], d[1:], 1.0)
            K = kernel_basis(pt, 2, at_infinity=True)
            m = slot_mult(2)
            H = K.conj().T @ np.diag(m) @ A @ K
            evals = np.linalg.eigvalsh(0.5 * (H + H.conj().T))
            assert evals.min() > 0

    def test_finite_to_infinity_consistency(self, spec, rng):
        # |(xi,eta)| * finite symbol approaches the infinity symbol along rays
        for rank in (1, 2):
            for _ in range(4):
                d = rng.standard_normal(3)
                d /= np.linalg.norm(d)
                base = fp(spec, d[0], d[1:], 1.0)
                Ainf = sigma_normal_infinity(d, rank, base).mat
                s = 1e3
                pt = fp(spec, s * d[0], s * d[1:], 1.0)
                Afin = sigma_normal_finite(pt, rank).mat * s
                rel = np.abs(Ainf - Afin).max() / np.abs(Ainf).max()
                assert rel < 0.05

    def test_finite_nonsingular_on_kernel_F20(self, spec, rng):
        # smallest singular value of the restricted symbol stays positive
        for _ in range(20):
            pt = fp(spec, rng.uniform(-4, 4), rng.uniform(-4, 4, 2), 20.0)
            A = sigma_normal_finite(pt, 2).mat
            K = kernel_basis(pt, 2)
            H = K.conj().T @ np.diag(slot_mult(2)) @ A @ K
            s = np.linalg.svd(H, compute_uv=False)
            assert s[-1] > 0


class TestKernelBasis:
    def test_rank1_dimension(self, spec, rng):
        for _ in range(10):
            pt = fp(spec, rng.uniform(-3, 3), rng.uniform(-3, 3, 2), rng.uniform(0.5, 5))
            assert kernel_basis(pt, 1).shape[1] == 2

    def test_rank2_dimension(self, spec, rng):
        for _ in range(10):
            pt = fp(spec, rng.uniform(-3, 3), rng.uniform(-3, 3, 2), rng.uniform(0.5, 5))
            assert kernel_basis(pt, 2).shape[1] == 3

    def test_basis_annihilated(self, spec, rng):
        pt = fp(spec, 1.3, [0.7, -0.2], 2.0)
        K = kernel_basis(pt, 2)
        resid = sigma_delta(pt, 2).mat @ K
        assert np.abs(resid).max() < 1e-12

    def test_orthonormal_in_slot_product(self, spec):
        pt = fp(spec, 0.8, [1.0, 0.5], 1.5)
        K = kernel_basis(pt, 2)
        G = K.conj().T @ np.diag(slot_mult(2)) @ K
        assert np.abs(G - np.eye(K.shape[1])).max() < 1e-12


class TestMargins:
    def test_rank1_positive_at_F1(self, spec):
        samp = SampleSpec(spec=spec, h=0.1, n_per_axis=9, n_infinity=16)
        rep = ellipticity_margin(1, 1.0, samp)
        assert rep.kernel_margin > 0

    def test_rank2_positive_at_F20(self, spec):
        samp = SampleSpec(spec=spec, h=0.1, n_per_axis=9, n_infinity=16)
        rep = ellipticity_margin(2, 20.0, samp)
        assert rep.kernel_margin > 0

    def test_report_csv(self, spec, tmp_path):
        samp = SampleSpec(spec=spec, h=0.1, n_per_axis=5, n_infinity=8)
        rep = ellipticity_margin(1, 1.0, samp, m0=1.0)
        p = tmp_path / "margins.csv"
        rep.to_csv(p)
        assert p.read_text().startswith("where,xi")
        assert np.isfinite(rep.full_margin)
