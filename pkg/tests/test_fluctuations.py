import math

import numpy as np
import pytest

from anderson_lab.errors import DegenerateEigenvalue, DegenerateSample, EmptyWindow
from anderson_lab.eigensolve import continuum_reference, lowest_k
from anderson_lab.fluctuations import (EnsembleConfig, EnsembleResult, Parameters, SampleRecord, divergence_kappa,
                                       clt_report, convergence_experiment, discrete_covariance,
                                       empirical_covariance, heavy_tail_divergence, normality_tests,
                                       predicted_covariance, rescaled_fluctuations, resolve_parameters,
                                       run_ensemble, truncation_mean_gap)
from anderson_lab.hamiltonian import assemble
from anderson_lab.lattice import ContinuumDomain, discretize
from anderson_lab.potential import PotentialModel

UNIT = ContinuumDomain.unit_box(1)
CUBE = ContinuumDomain.unit_box(3)
UNIFORM = PotentialModel("uniform", a=1.0, mean=0.0, variance=1 / 3)


def config(**kw):
    base = dict(domain=UNIT, model=UNIFORM, eps_list=(1 / 64,), k_indices=(1,), n_samples=4, base_seed=3)
    base.update(kw)
    return EnsembleConfig(**base)


# ---- configuration and parameters ------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        config(eps_list=())
    with pytest.raises(ValueError):
        config(k_indices=(1, 1))
    with pytest.raises(ValueError):
        config(n_samples=1)
    with pytest.raises(ValueError):
        config(kappa_mode="bogus")
    with pytest.raises(ValueError):
        config(workers=0)


def test_window_midpoints_and_override_errors():
    p = resolve_parameters(config())  # uniform: K = inf, d = 1
    assert p.kappa_mode == "clt" and p.kappa == pytest.approx(0.25)
    with pytest.raises(EmptyWindow) as info:
        resolve_parameters(config(kappa=0.9))
    assert info.value.interval == pytest.approx((0.0, 0.5))
    with pytest.raises(ValueError):
        resolve_parameters(config(kappa_mode="free"))


def test_auto_mode_falls_back_to_homogenization():
    cfg = config(domain=CUBE, model=PotentialModel("pareto-negative", K=2.0), eps_list=(0.25,))
    p = resolve_parameters(cfg)
    assert p.kappa_mode == "homogenization" and p.kappa == pytest.approx(1.75)


# ---- ensembles -----------------------------------------------------------

def test_ensemble_is_deterministic():
    a = run_ensemble(config(n_samples=2))
    b = run_ensemble(config(n_samples=2))
    for ra, rb in zip(a.records, b.records):
        assert ra.seed == rb.seed
        np.testing.assert_array_equal(ra.lambda_raw, rb.lambda_raw)


def test_bounded_model_has_no_truncation_effect():
    res = run_ensemble(config(n_samples=5, k_indices=(1, 2)))
    for rec in res.records:
        assert not rec.truncation_hit
        np.testing.assert_array_equal(rec.lambda_raw, rec.lambda_trunc)


def test_parallel_equals_serial():
    cfg = config(n_samples=16, eps_list=(1 / 32, 1 / 64))
    serial = run_ensemble(cfg)
    parallel = run_ensemble(EnsembleConfig(**{**cfg.__dict__, "workers": 8}))
    assert [r.seed for r in serial.records] == [r.seed for r in parallel.records]
    for a, b in zip(serial.records, parallel.records):
        np.testing.assert_array_equal(a.lambda_raw, b.lambda_raw)


def _hand_result(raw, trunc, eps=0.25, d=1):
    cfg = config(eps_list=(eps,), n_samples=len(raw))
    recs = tuple(SampleRecord(eps=eps, eps_index=0, sample_id=j, seed=j, lambda_raw=np.array([r]),
                              lambda_trunc=np.array([t]), truncation_hit=False, xi_min=0.0)
                 for j, (r, t) in enumerate(zip(raw, trunc)))
    return EnsembleResult(config=cfg, parameters=Parameters(0.25, "clt", None, None), records=recs,
                          lattice_sizes=(3,))


def test_rescaled_fluctuations_by_hand():
    res = _hand_result([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(rescaled_fluctuations(res, 0.25, 1), [-2.0, 0.0, 2.0])
    shifted = _hand_result([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(rescaled_fluctuations(shifted, 0.25, 1), [2.0, 4.0, 6.0])


def test_rescaled_fluctuations_affine_equivariance():
    rng = np.random.default_rng(0)
    raw, tr = rng.normal(size=30), rng.normal(size=30)
    base = rescaled_fluctuations(_hand_result(raw, tr), 0.25, 1)
    moved = rescaled_fluctuations(_hand_result(3 * raw + 7, 3 * tr + 7), 0.25, 1)
    np.testing.assert_allclose(moved, 3 * base, atol=1e-12)


def test_rescaled_fluctuations_needs_two_usable_samples():
    with pytest.raises(ValueError):
        rescaled_fluctuations(_hand_result([1.0, math.nan], [1.0, 1.0]), 0.25, 1)


# ---- predicted and empirical covariance ---------------------------------

@pytest.fixture(scope="module")
def unit_reference():
    return continuum_reference(UNIT, 0.0, k=3, fine_eps=1 / 1024)


def test_predicted_covariance_unit_interval(unit_reference):
    sig = predicted_covariance(unit_reference, 1.0, (1, 2))
    np.testing.assert_allclose(sig, [[1.5, 1.0], [1.0, 1.5]], atol=1e-9)
    assert np.all(np.linalg.eigvalsh(sig) >= 0)
    np.testing.assert_allclose(predicted_covariance(unit_reference, 0.0, (1, 2)), 0.0)
    np.testing.assert_allclose(predicted_covariance(unit_reference, 0.25, (1, 2, 3)),
                               0.25 * predicted_covariance(unit_reference, 1.0, (1, 2, 3)))


def test_predicted_covariance_from_grid_reference():
    ref = continuum_reference(UNIT, "0*x[0]", k=1, fine_eps=1 / 1024, analytic=False)
    assert predicted_covariance(ref, 1.0, (1,))[0, 0] == pytest.approx(1.5, abs=0.01)


def test_predicted_covariance_rejects_degenerate_index():
    square = continuum_reference(ContinuumDomain.unit_box(2), 0.0, k=3, fine_eps=1 / 64)
    with pytest.raises(DegenerateEigenvalue):
        predicted_covariance(square, 1.0, (2,))
    with pytest.raises(ValueError):
        predicted_covariance(square, 1.0, (5,))


def test_discrete_covariance_approaches_continuum():
    lat = discretize(UNIT, 1 / 256)
    spec = lowest_k(assemble(lat, np.zeros(lat.n)), 2)
    np.testing.assert_allclose(discrete_covariance(lat, spec.eigenvectors, 1.0, (1, 2)),
                               [[1.5, 1.0], [1.0, 1.5]], atol=0.02)


def test_empirical_covariance_examples():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(empirical_covariance([x, x]), np.full((2, 2), 5 / 3))
    coins = np.random.default_rng(1).choice([-1.0, 1.0], size=10**4)
    assert empirical_covariance([coins])[0, 0] == pytest.approx(1.0, abs=0.03)
    np.testing.assert_array_equal(empirical_covariance([np.full(5, 2.0)]), [[0.0]])
    with pytest.raises(ValueError):
        empirical_covariance([x, x[:3]])
    with pytest.raises(ValueError):
        empirical_covariance([x[:1]])


def test_normality_tests_calibration_and_power():
    rng = np.random.default_rng(2)
    pvals = np.array([normality_tests(rng.normal(0, 2, 10**4), 4.0)[1] for _ in range(100)])
    assert 0.0 <= np.mean(pvals < 0.05) <= 0.15
    flat = rng.uniform(-1, 1, 10**4)  # variance 1/3, wrong shape
    stat, p, skew, kurt = normality_tests(flat, 1 / 3)
    assert p < 1e-6 and kurt == pytest.approx(-1.2, abs=0.1)


def test_normality_tests_input_errors():
    with pytest.raises(DegenerateSample):
        normality_tests(np.zeros(200), 1.0)
    with pytest.raises(ValueError):
        normality_tests(np.ones(99), 1.0)
    with pytest.raises(ValueError):
        normality_tests(np.arange(200.0), 0.0)


def test_clt_report_small_run():
    res = run_ensemble(config(n_samples=120, k_indices=(1, 2), fine_eps=1 / 256))
    rep = clt_report(res, 1 / 64)
    assert rep.samples.shape == (2, 120)
    np.testing.assert_allclose(rep.predicted, [[0.5, 1 / 3], [1 / 3, 0.5]], atol=1e-9)
    summary = rep.summary()
    assert summary["n_samples"] == 120 and len(summary["ks_p"]) == 2


# ---- experiments ----------------------------------------------------------

def test_convergence_deterministic_limit():
    flat = PotentialModel("uniform", mean=0.0, variance=0.0)
    tab = convergence_experiment(config(model=flat, eps_list=(1 / 32, 1 / 64, 1 / 256), n_samples=2))
    last = tab.rows[-1]
    assert last["continuum"] == pytest.approx(math.pi**2)
    assert last["abs_error"] <= 0.3 and last["spread"] == 0.0
    assert tab.notes["monotone"] == {1: True}


def test_convergence_constant_shift():
    shifted = PotentialModel("uniform", mean=5.0, variance=0.0)
    tab = convergence_experiment(config(model=shifted, eps_list=(1 / 128,), n_samples=2))
    assert tab.rows[0]["continuum"] == pytest.approx(math.pi**2 + 5)
    n = discretize(UNIT, 1 / 128).n  # path of n sites: 4 eps^-2 sin^2(pi / (2 (n + 1)))
    assert tab.rows[0]["median"] - 5 == pytest.approx(4 * 128**2 * math.sin(math.pi / (2 * (n + 1))) ** 2,
                                                      rel=1e-9)


def test_convergence_spread_scales_like_sqrt_eps():
    tab = convergence_experiment(config(eps_list=(1 / 64, 1 / 256), n_samples=200))
    ratio = tab.rows[1]["spread"] / tab.rows[0]["spread"]
    assert 0.5 / 1.5 <= ratio <= 0.5 * 1.5


def test_divergence_kappa_windows():
    assert divergence_kappa(1.0, 3) == pytest.approx((2.2, 1.25))
    with pytest.raises(EmptyWindow):
        divergence_kappa(1.0, 2)
    with pytest.raises(EmptyWindow):
        divergence_kappa(2.0, 3)
    with pytest.raises(EmptyWindow):
        divergence_kappa(1.0, 3, K_prime=1.6)


def test_heavy_tail_requires_native_negative_pareto():
    with pytest.raises(ValueError):
        heavy_tail_divergence(config(domain=CUBE, eps_list=(0.25,)))


def test_heavy_tail_min_fraction_matches_exact_probability():
    cfg = config(domain=CUBE, model=PotentialModel("pareto-negative", K=1.0), eps_list=(0.25, 0.2),
                 n_samples=100, base_seed=11)
    tab = heavy_tail_divergence(cfg)
    for row in tab.rows:
        assert abs(row["frac_min_xi_below"] - row["p_min_xi_exact"]) <= 3 * row["binomial_se"]
        assert row["p_min_xi_lower_bound"] <= row["p_min_xi_exact"]
        assert row["certificate_holds"]
    assert tab.notes["kappa"] == pytest.approx(2.2)


def test_truncation_gap_windows():
    with pytest.raises(EmptyWindow):
        truncation_mean_gap(config(domain=CUBE, model=PotentialModel("pareto-negative", K=3.0),
                                   eps_list=(0.25,)))
    with pytest.raises(EmptyWindow):
        truncation_mean_gap(config(model=PotentialModel("pareto-negative", K=2.0), eps_list=(0.25,)))
    with pytest.raises(ValueError):
        truncation_mean_gap(config(domain=CUBE, model=PotentialModel("pareto-negative", K=2.0),
                                   eps_list=(0.25,)), estimator="other")


def test_truncation_gap_estimators_share_truncated_field():
    cfg = config(domain=CUBE, model=PotentialModel("pareto-negative", K=2.0), eps_list=(0.25, 0.2),
                 n_samples=30, base_seed=5)
    imp = truncation_mean_gap(cfg)
    plain = truncation_mean_gap(cfg, estimator="plain")
    assert imp.notes["tail_index"] == 1.0 and plain.notes["tail_index"] is None
    for a, b in zip(imp.rows, plain.rows):
        assert a["mean_trunc"] == b["mean_trunc"]
        assert a["truncation_rate"] == b["truncation_rate"]
    plain_weights = [rec.log_weight for rec in plain.result.records]
    assert plain_weights == [0.0] * len(plain_weights)
    hit = [rec for rec in imp.result.records if rec.truncation_hit]
    assert all(rec.log_weight != 0.0 for rec in hit)
    assert all(rec.log_weight == 0.0 for rec in imp.result.records if not rec.truncation_hit)
    assert all(row["gap"] <= 0 for row in imp.rows)
