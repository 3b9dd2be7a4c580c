import numpy as np
import pytest

from conetomo.geometry import (
    LinkMetric,
    MetricSpec,
    b_s_at,
    christoffel_from_metric,
    frame_weight_arrays,
    frame_weights,
    lambda_scale,
    metric_at,
    sc_1c_inner_product,
    slot_metric_blocks,
)
from conetomo.field import Grid, TensorField


def test_link_restriction_is_link_metric(pert_spec):
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = rng.uniform(0, 2 * np.pi, 2)
        gt0 = pert_spec.gt(0.0, y)
        assert np.allclose(gt0, pert_spec.link_metric.g0(y), atol=1e-15)


def test_metric_blocks_cone(cone_spec):
    blocks = metric_at(cone_spec, [0.05, 1.0, 2.0])
    # scattering-frame blocks of the unperturbed cone: identity radial part
    assert np.allclose(blocks.g_sc, np.diag([1.0, 1.0, 1.0]), atol=1e-13)
    assert np.allclose(blocks.g_inv_sc, np.diag([1.0, 1.0, 1.0]), atol=1e-13)
    # dual metric leading behavior g^00 = x^4 (1 + O(x))
    assert abs(blocks.g_inv_coord[0, 0] / 0.05 ** 4 - 1.0) < 1e-10


def test_metric_blocks_consistency(pert_spec):
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.uniform(0.01, pert_spec.x0)
        y = rng.uniform(0, 2 * np.pi, 2)
        b = metric_at(pert_spec, [x, *y])
        assert np.allclose(b.g_coord @ b.g_inv_coord, np.eye(3), atol=1e-12)
        assert np.allclose(b.g_coord, b.g_coord.T, atol=0)
        evals = np.linalg.eigvalsh(b.g_coord)
        assert evals.min() > 0
        # Christoffel symmetry in the lower indices
        assert np.allclose(b.gamma, np.swapaxes(b.gamma, 1, 2), atol=0)


def test_sc_frame_blocks_x_independent(cone_spec):
    b1 = metric_at(cone_spec, [0.04, 0.7, 1.3])
    b2 = metric_at(cone_spec, [0.08, 0.7, 1.3])
    assert np.allclose(b1.g_sc, b2.g_sc, atol=1e-12)


def test_christoffel_against_difference_oracle(pert_spec):
    rng = np.random.default_rng(2)
    for _ in range(5):
        p = np.array([rng.uniform(0.03, 0.25), rng.uniform(0, 6), rng.uniform(0, 6)])
        b = metric_at(pert_spec, p)

        def gfun(q):
            x, y = q[0], q[1:]
            g = np.zeros((3, 3))
            g[0, 0] = x ** -4.0
            g[1:, 1:] = pert_spec.gt(x, y) / x ** 2
            return g

        gam = christoffel_from_metric(gfun, p, step=1e-4)
        assert np.allclose(b.gamma, gam, rtol=1e-6, atol=1e-6)


def test_exact_cone_christoffels_in_r_coordinates(sphere_spec):
    # dr^2 + r^2(dphi^2 + sin^2 phi dtheta^2): Gamma^r_phiphi = -r,
    # Gamma^phi_{r phi} = 1/r, Gamma^phi_{theta theta} = -sin phi cos phi
    x, phi, th = 0.08, 1.1, 2.0
    r = 1.0 / x
    b = metric_at(sphere_spec, [x, phi, th])
    # transform the radial index: r = 1/x, dr/dx = -1/x^2, plus the affine
    # term (d^2 r/dx^2)/(dr/dx) on the lower-index pair (x only)
    drdx = -1.0 / x ** 2
    d2rdx2 = 2.0 / x ** 3
    gamma_r_phiphi = drdx * b.gamma[0, 1, 1]
    assert abs(gamma_r_phiphi - (-r)) < 1e-9 * r
    # Gamma^phi_{r phi} = Gamma^phi_{x phi} * dx/dr
    gamma_phi_rphi = b.gamma[1, 0, 1] / drdx
    assert abs(gamma_phi_rphi - 1.0 / r) < 1e-12
    gamma_phi_thth = b.gamma[1, 2, 2]
    assert abs(gamma_phi_thth - (-np.sin(phi) * np.cos(phi))) < 1e-12


def test_flat_metric_zero_christoffels():
    gam = christoffel_from_metric(lambda p: np.eye(3), np.array([0.3, 1.0, -2.0]))
    assert np.allclose(gam, 0.0, atol=1e-12)


def test_frame_weights_regimes(cone_spec):
    h = 0.01
    x = 0.05  # deep 1c for x0 = 0.3
    fw = frame_weights(cone_spec, x, h)
    assert fw.regime == "1c"
    assert np.isclose(fw.w_x, 1.0 / (h * x ** 3), rtol=1e-13)
    assert np.isclose(fw.w_y, 1.0 / (np.sqrt(h) * x), rtol=1e-13)
    x = 0.29  # deep sc
    fw = frame_weights(cone_spec, x, h)
    assert fw.regime == "sc"
    assert np.isclose(fw.w_x, 1.0 / (h * (0.3 - x) ** 2), rtol=1e-13)
    assert np.isclose(fw.w_y, 1.0 / (np.sqrt(h) * (0.3 - x)), rtol=1e-13)
    x = 0.15  # interior plateau
    fw = frame_weights(cone_spec, x, h)
    assert fw.regime == "interior"
    assert np.isclose(fw.w_x, 1.0 / h, rtol=1e-13)
    assert np.isclose(fw.w_y, 1.0 / np.sqrt(h), rtol=1e-13)


def test_frame_weights_sandwich_and_continuity(cone_spec):
    h = 0.05
    x0 = cone_spec.x0
    # midpoint of the first transition zone: between the two branch values
    xm = 0.5 * (x0 / 3 + 0.46 * x0)
    wx, _ = frame_weight_arrays(cone_spec, xm, h)
    lo, hi = sorted([1.0 / (h * xm ** 3), 1.0 / h])
    assert lo <= wx <= hi
    # continuity across the collar (weights diverge only at x0 itself)
    xs = np.linspace(0.02, x0 * 0.98, 4000)
    wxs, wys = frame_weight_arrays(cone_spec, xs, h)
    assert np.all(wxs > 0) and np.all(wys > 0)
    rel_jump = np.abs(np.diff(np.log(wxs)))
    assert rel_jump.max() < 0.05


def test_frame_weight_limit_rate(cone_spec):
    # w_x * h x^3 -> 1 with the deviation confined to the transition zone
    h = 0.1
    xs = np.geomspace(1e-4, cone_spec.x0 / 3, 60)
    wx, _ = frame_weight_arrays(cone_spec, xs, h)
    assert np.allclose(wx * h * xs ** 3, 1.0, rtol=1e-12)


def test_lambda_scale_limits(cone_spec):
    assert np.isclose(lambda_scale(cone_spec, 0.05), 0.05, rtol=1e-12)
    assert np.isclose(lambda_scale(cone_spec, 0.29), 1.0, rtol=1e-12)


def test_section_order_claims_dyadic(pert_spec):
    # frame-coefficient boundedness of the connection terms as x -> 0:
    # x*Gamma^0_00, Gamma^0_{b0}/x, x*Gamma^d_{b0}, Gamma^d_{bc}, Gamma^0_{bc}/x
    vals = {k: [] for k in ("a", "b", "c", "d", "e")}
    for k in range(4, 14):
        x = 2.0 ** (-k)
        if x >= pert_spec.x0:
            continue
        g = metric_at(pert_spec, [x, 0.7, 1.9]).gamma
        vals["a"].append(abs(x * g[0, 0, 0]))
        vals["b"].append(max(abs(g[0, b, 0]) for b in (1, 2)) / x)
        vals["c"].append(max(abs(x * g[d, b, 0]) for d in (1, 2) for b in (1, 2)))
        vals["d"].append(max(abs(g[d, b, c]) for d in (1, 2) for b in (1, 2) for c in (1, 2)))
        vals["e"].append(max(abs(g[0, b, c]) for b in (1, 2) for c in (1, 2)) / x)
    for key, seq in vals.items():
        seq = np.array(seq)
        assert np.all(seq < 10.0 * max(seq[0], 1.0)), key


def test_b_s_cone_limit(cone_spec):
    # unperturbed cone: b_s -> -g0 as x -> 0 (flat torus: -identity)
    b = b_s_at(cone_spec, 0.01, [1.0, 2.0], h=0.1)
    assert np.allclose(b, -np.eye(2), atol=1e-12)
    # h independence
    b2 = b_s_at(cone_spec, 0.01, [1.0, 2.0], h=0.02)
    assert np.allclose(b, b2, atol=1e-13)


class TestInnerProduct:
    def test_positive_definite_and_symmetric(self, cone_spec, small_grid, rng):
        for rank in (0, 1, 2):
            a = TensorField.zeros(small_grid, rank, F=1.0, h=0.1)
            b = TensorField.zeros(small_grid, rank, F=1.0, h=0.1)
            a.components[:] = rng.standard_normal(a.components.shape)
            b.components[:] = rng.standard_normal(b.components.shape)
            ab = sc_1c_inner_product(cone_spec, 0.1, 1.0, a, b)
            ba = sc_1c_inner_product(cone_spec, 0.1, 1.0, b, a)
            aa = sc_1c_inner_product(cone_spec, 0.1, 1.0, a, a)
            assert aa > 0
            assert abs(ab - ba) <= 1e-14 * abs(aa)

    def test_single_bump_equals_density_quadrature(self, cone_spec, small_grid):
        # one-hot radial-frame bump: pairing = the density weight at the node
        f = TensorField.zeros(small_grid, 1, F=1.0, h=0.1)
        f.components[0, 5, 3, 2] = 1.0
        val = sc_1c_inner_product(cone_spec, 0.1, 1.0, f, f)
        x = small_grid.xs[5]
        w_hand = (
            small_grid.dlog * small_grid.d1 * small_grid.d2 / x ** 3
        )  # sqrt(det gt)=1 on the flat torus cone
        assert np.isclose(val, w_hand, rtol=1e-13)

    def test_grid_mismatch_raises(self, cone_spec, small_grid):
        other = Grid(cone_spec, 10, 8, 8)
        a = TensorField.zeros(small_grid, 0)
        b = TensorField.zeros(other, 0)
        with pytest.raises(ValueError):
            sc_1c_inner_product(cone_spec, 0.1, 1.0, a, b)

    def test_rank2_blocks_multiplicity(self, cone_spec, small_grid):
        B = slot_metric_blocks(cone_spec, small_grid, 2)
        # flat torus cone: Ghat = identity, so blocks are diag(1,2,2,1,2,1)
        assert np.allclose(B[3, 4, 5], np.diag([1, 2, 2, 1, 2, 1]), atol=1e-13)


def test_metric_spec_validation():
    with pytest.raises(ValueError):
        MetricSpec(x0=1.5)
    with pytest.raises(ValueError):
        MetricSpec(x0=0.5, pert_amplitude=5.0)
    with pytest.raises(ValueError):
        metric_at(MetricSpec(x0=0.3), [0.5, 0.0, 0.0])
    with pytest.raises(ValueError):
        frame_weights(MetricSpec(x0=0.3), 0.1, -1.0)


def test_dual_metric_blockwise_vs_inversion(pert_spec):
    rng = np.random.default_rng(7)
    for _ in range(10):
        x = rng.uniform(0.02, 0.28)
        y = rng.uniform(0, 2 * np.pi, 2)
        b = metric_at(pert_spec, [x, *y])
        # blockwise dual for the block metric: g^00 = x^4, g^ij = x^2 gt^{-1}
        gtinv = np.linalg.inv(pert_spec.gt(x, y))
        dual = np.zeros((3, 3))
        dual[0, 0] = x ** 4
        dual[1:, 1:] = x ** 2 * gtinv
        assert np.allclose(dual, b.g_inv_coord, rtol=1e-10, atol=1e-12)
