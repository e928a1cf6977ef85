import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtdemand import theory
from mtdemand.bench import _phi_families, _quadrature_posterior_theta0
from mtdemand.core import GenConfig, TaskPanel, generate
from mtdemand.errors import OracleUnavailable
from mtdemand.infoset import Design, build_info_set
from mtdemand.learners import linear_info_fit, symmetric_linear_fit

prices = st.floats(-50, 50, allow_nan=False)


def test_q_matrix_examples():
    q = theory.q_matrix(0.0, 2.0)
    np.testing.assert_array_equal(q.matrix, [[1, 1], [1, 2]])
    assert q.det == 1.0 and q.trace == 3.0
    q = theory.q_matrix(3.0, 3.0)
    np.testing.assert_array_equal(q.matrix, [[1, 3], [3, 9]])
    assert q.det == 0.0
    assert theory.query_price_variance(1.0, 2.0) == 0.25


@given(prices, prices)
def test_q_matrix_invariants(a, b):
    q = theory.q_matrix(a, b)
    assert q.matrix[0, 0] == 1.0 and q.matrix[0, 1] == q.matrix[1, 0]
    assert q.det == pytest.approx(np.linalg.det(q.matrix), rel=1e-6,
                                  abs=1e-12 * max(1.0, q.trace) ** 2)
    assert q.det == 0.25 * (a - b) ** 2


def test_eigen_bound_exact_values():
    lam, bound = theory.lambda_min_and_bound(theory.q_matrix(0.0, 2.0))
    assert lam == pytest.approx((3 - np.sqrt(5)) / 2, abs=1e-12)
    assert bound == pytest.approx(1 / 3, abs=1e-12)
    assert theory.lambda_min_and_bound(theory.q_matrix(1.5, 1.5)) == (0.0, 0.0)


@given(prices, prices)
def test_eigen_bound_holds(a, b):
    lam, bound = theory.lambda_min_and_bound(theory.q_matrix(a, b))
    assert lam >= bound
    assert lam == pytest.approx(np.linalg.eigvalsh(theory.q_matrix(a, b).matrix)[0],
                                abs=1e-9 * (1 + abs(a) + abs(b)) ** 2)


def test_eigen_bound_is_strict_on_random_draws():
    rng = np.random.default_rng(1)
    for a, b in rng.uniform(-5, 5, size=(2000, 2)):
        lam, bound = theory.lambda_min_and_bound(theory.q_matrix(a, b))
        assert lam > bound


def test_oracle_requires_example1_world():
    with pytest.raises(OracleUnavailable):
        theory.gaussian_bayes_oracle(GenConfig.appendix_b())
    oracle = theory.gaussian_bayes_oracle(GenConfig.example1())
    panel = generate(GenConfig.example1(n_tasks=1))[0]
    with pytest.raises(OracleUnavailable):
        oracle.predict_many([build_info_set(panel, Design.META)])
    with pytest.raises(OracleUnavailable):
        theory.excess_risk_check(theory.ConstantOracle([1, -1]), None, [panel])


def test_oracle_limits():
    oracle = theory.gaussian_bayes_oracle(GenConfig.example1())
    np.testing.assert_allclose(oracle.theta_given_prices([5.0, 5.0]), [[10.0, -1.0]], atol=1e-12)
    sharp = theory.gaussian_bayes_oracle(GenConfig.example1(pricing_noise_sd=1e-6))
    assert sharp.theta_given_prices([4.8, 5.4])[0, 0] == pytest.approx(2 * 5.1, abs=1e-6)


def test_oracle_matches_quadrature():
    cfg = GenConfig.example1()
    oracle = theory.gaussian_bayes_oracle(cfg)
    rng = np.random.default_rng(7)
    for p in rng.normal(5.0, 0.6, size=(20, 2)):
        assert oracle.theta_given_prices(p)[0, 0] == pytest.approx(
            _quadrature_posterior_theta0(cfg, p), abs=1e-6)


def test_oracle_support_conditioning_is_affine_and_biased_toward_prior():
    oracle = theory.gaussian_bayes_oracle(GenConfig.example1())
    a = oracle.theta_given_support([4.0, 5.0, 6.0], [5.0, 5.0, 5.0])[:, 0]
    assert a[1] - a[0] == pytest.approx(a[2] - a[1], rel=1e-10)


def test_oracle_has_lowest_mse_on_example1():
    cfg = GenConfig.example1(n_tasks=4000, seed=5)
    panels = generate(cfg)
    test = generate(cfg.with_(seed=6))
    infos = [build_info_set(p, Design.DCMOML) for p in test]
    truth = np.array([p.true_params.as_array() for p in test])
    oracle_mse = np.mean((theory.gaussian_bayes_oracle(cfg).predict_many(infos) - truth)[:, 0] ** 2)
    for model in (symmetric_linear_fit(panels), linear_info_fit(panels, Design.DCMOML)):
        mse = np.mean((model.predict_many(infos) - truth)[:, 0] ** 2)
        assert oracle_mse <= mse * 1.02


def test_excess_risk_zero_for_oracle():
    cfg = GenConfig.example1(n_tasks=3000, seed=2)
    oracle = theory.gaussian_bayes_oracle(cfg)
    res = theory.excess_risk_check(oracle, oracle, generate(cfg))
    assert res.lhs == 0.0 and res.rhs == 0.0


def test_excess_risk_noiseless_constant_world_is_exact():
    rng = np.random.default_rng(3)
    theta, offset = np.array([2.0, -1.0]), np.array([0.3, -0.2])
    panels = []
    expected = []
    for i in range(100):
        p = rng.uniform(0.5, 3.0, size=2)
        panels.append(TaskPanel(i, p, theta[0] + theta[1] * p))
        expected.append(offset @ theory.q_matrix(*p).matrix @ offset)
    res = theory.excess_risk_check(theory.ConstantOracle(theta + offset),
                                   theory.ConstantOracle(theta), panels, loss_mode="averaged")
    assert res.lhs == pytest.approx(res.rhs, abs=1e-10)
    assert res.rhs == pytest.approx(np.mean(expected), rel=1e-12)


def test_excess_risk_monte_carlo_small():
    cfg = GenConfig.example1(n_tasks=2000, seed=0)
    fit = symmetric_linear_fit(generate(cfg))
    res = theory.excess_risk_check(fit, theory.gaussian_bayes_oracle(cfg),
                                   generate(cfg.with_(n_tasks=20000, seed=1)))
    assert abs(res.lhs - res.rhs) < 3 * res.combined_se


def test_excess_risk_rejects_other_designs():
    panels = generate(GenConfig.example1(n_tasks=5))
    oracle = theory.ConstantOracle([10, -1])
    with pytest.raises(ValueError):
        theory.excess_risk_check(oracle, oracle, panels, design=Design.META)


@pytest.fixture(scope="module")
def shift_world():
    panels = generate(GenConfig.appendix_b(0.1, n_tasks=1000, seed=2))
    return (panels, linear_info_fit(panels, Design.DCML),
            linear_info_fit(panels, Design.DCMOML))


@pytest.mark.parametrize("family", sorted(_phi_families()))
def test_dcml_shift_leaves_loss_unchanged(shift_world, family):
    panels, dcml, dcmoml = shift_world
    phi = _phi_families()[family]
    a, b = theory.dcml_shift_demo(dcml, panels, phi)
    assert b == pytest.approx(a, rel=1e-12)
    a, b = theory.dcmoml_shift_demo(dcmoml, panels, phi)
    assert b > a


@given(st.floats(-3, 3).filter(lambda c: abs(c) > 1e-3), st.integers(0, 3))
def test_dcml_shift_property(scale, power):
    panels = generate(GenConfig.appendix_b(0.0, n_tasks=50, seed=power))
    model = linear_info_fit(panels, Design.DCML)
    a, b = theory.dcml_shift_demo(model, panels,
                                  lambda info: scale * float(info.prices[0]) ** power)
    assert b == pytest.approx(a, rel=1e-12, abs=1e-12)


def test_zero_shift_is_identity(shift_world):
    panels, dcml, dcmoml = shift_world
    a, b = theory.dcml_shift_demo(dcml, panels, lambda info: 0.0)
    assert a == b
    a, b = theory.dcmoml_shift_demo(dcmoml, panels, lambda info: 0.0)
    assert a == b


def test_query_shock_bins_are_centered_in_probe_world():
    probe = generate(GenConfig.two_point_probe(n_tasks=5000, seed=1))
    bins = theory.query_shock_bins(probe)
    assert sum(b.n for b in bins) == 5000
    assert all(abs(b.mean) < 4 * b.se for b in bins)
