import numpy as np
import pytest

from sphreg.errors import DataError
from sphreg.inference import (
    CredibleBand,
    PosteriorDraws,
    activation_map,
    decide_nonzero,
    load_draws,
    mcc,
    mrse,
    pointwise_intervals,
    posterior_predictive_gof,
    save_draws,
    simultaneous_band,
    split_rhat,
    write_diagnostics_csv,
    write_summary_csv,
)
from sphreg.model import make_dataset


def synthetic_draws(rng, s=400, p=2, m=30, chains=4):
    beta = rng.standard_normal((s, p, m))
    chain_ids = np.repeat(np.arange(chains), s // chains)
    traces = {"sigma2": rng.uniform(0.5, 1.5, size=(s, m))}
    return PosteriorDraws(beta=beta, chain_ids=chain_ids, variance_traces=traces,
                          metadata={"variant": "test"})


# ---------------------------------------------------------------------------
# pointwise intervals


def test_pointwise_degenerate_and_gaussian(rng):
    const = np.full((50, 3), 2.5)
    lo, hi = pointwise_intervals(const, 0.9)
    np.testing.assert_allclose(lo, 2.5)
    np.testing.assert_allclose(hi, 2.5)

    z = rng.standard_normal((100_000, 2))
    lo, hi = pointwise_intervals(z, 0.95)
    np.testing.assert_allclose(lo, -1.96, atol=0.05)
    np.testing.assert_allclose(hi, 1.96, atol=0.05)


def test_pointwise_nesting(rng):
    draws = rng.standard_normal((500, 4))
    lo80, hi80 = pointwise_intervals(draws, 0.8)
    lo95, hi95 = pointwise_intervals(draws, 0.95)
    assert np.all(lo95 <= lo80) and np.all(hi80 <= hi95)


def test_pointwise_validation(rng):
    with pytest.raises(ValueError):
        pointwise_intervals(rng.standard_normal((30, 2)), 1.2)
    with pytest.raises(ValueError):
        pointwise_intervals(rng.standard_normal((10, 2)), 0.9)


# ---------------------------------------------------------------------------
# simultaneous bands


def test_band_single_vertex_equals_pointwise(rng):
    draws = rng.standard_normal((2000, 1)) * 1.7 + 0.4
    band = simultaneous_band(draws, 0.2)
    center, scale = draws.mean(), draws.std(ddof=1)
    ratios = np.abs(draws[:, 0] - center) / scale
    m = np.quantile(ratios, 0.8, method="inverted_cdf")
    assert band.multiplier == pytest.approx(m)
    assert band.lo[0] == pytest.approx(center - m * scale)
    assert band.hi[0] == pytest.approx(center + m * scale)


def test_band_multiplier_exceeds_pointwise(rng):
    draws = rng.standard_normal((5000, 100))
    band = simultaneous_band(draws, 0.2)
    assert band.multiplier > 1.282


def test_band_containment_fraction(rng):
    for m_dim, level in [(10, 0.2), (50, 0.1), (3, 0.5)]:
        draws = rng.standard_normal((800, m_dim)) @ np.diag(rng.uniform(0.5, 2, m_dim))
        band = simultaneous_band(draws, level)
        inside = np.mean([band.contains_everywhere(d) for d in draws])
        s = draws.shape[0]
        assert 1 - level - 2 / np.sqrt(s) <= inside <= 1 - level + 2 / np.sqrt(s) + 1 / s


def test_band_nesting_in_level(rng):
    draws = rng.standard_normal((1000, 20))
    mults = [simultaneous_band(draws, a).multiplier for a in (0.05, 0.1, 0.2, 0.4)]
    assert np.all(np.diff(mults) <= 0)


def test_band_zero_variance_vertex(rng):
    draws = rng.standard_normal((200, 3))
    draws[:, 1] = 7.0  # degenerate vertex
    band = simultaneous_band(draws, 0.2)
    assert np.isfinite(band.multiplier)
    assert band.lo[1] == pytest.approx(7.0, abs=1e-6)


def test_band_robust_flag(rng):
    draws = rng.standard_normal((500, 5))
    band = simultaneous_band(draws, 0.2, robust=True)
    np.testing.assert_allclose(band.center, np.median(draws, axis=0))


# ---------------------------------------------------------------------------
# decisions


def test_decide_nonzero_basics():
    m = np.ones(4)
    band = CredibleBand(center=np.zeros(4), scale=m, multiplier=2.0, level=0.2)
    assert not decide_nonzero(band).any()
    band2 = CredibleBand(center=10.0 * 2.0 * m, scale=m, multiplier=2.0, level=0.2)
    assert decide_nonzero(band2).all()


def test_decide_nonzero_matches_direct(rng):
    for _ in range(20):
        center = rng.standard_normal(10)
        scale = rng.uniform(0.1, 2.0, 10)
        band = CredibleBand(center=center, scale=scale,
                            multiplier=float(rng.uniform(0.5, 3.0)), level=0.2)
        direct = (band.center - band.multiplier * band.scale > 0) \
            | (band.center + band.multiplier * band.scale < 0)
        np.testing.assert_array_equal(decide_nonzero(band), direct)


def test_simultaneous_decisions_subset_of_pointwise(rng):
    # correlated, MCMC-like draws
    chol = np.linalg.cholesky(0.5 * np.eye(40) + 0.5)
    draws = rng.standard_normal((2000, 40)) @ chol.T + rng.uniform(-1, 1, 40)
    band = simultaneous_band(draws, 0.2)
    lo, hi = pointwise_intervals(draws, 0.8)
    pointwise_nonzero = (lo > 0) | (hi < 0)
    band_nonzero = decide_nonzero(band)
    assert np.all(~band_nonzero | pointwise_nonzero)


def test_activation_map_labels(rng):
    m = 60
    center = np.zeros(m)
    center[:20] = 0.8    # clear positive plateau
    center[20:30] = 0.5  # above threshold but uncertain
    center[30:40] = -0.8
    draws = center + 0.05 * rng.standard_normal((1000, m))
    draws[:, 20:30] += 0.45 * rng.standard_normal((1000, 10))
    labels = activation_map(draws, threshold=0.4, level=0.2)
    assert set(labels[:20]) == {"positive-core"}
    assert set(labels[30:40]) == {"negative-core"}
    assert set(labels[20:30]) <= {"positive-mean", "null"}
    assert set(labels[40:]) == {"null"}

    band_draws = 0.7 + 0.02 * rng.standard_normal((500, 5))
    assert set(activation_map(band_draws, threshold=0.0)) == {"positive-core"}


# ---------------------------------------------------------------------------
# scores


def test_mcc_values():
    truth = np.array([1, 1, 0, 0, 1, 0], dtype=bool)
    assert mcc(truth, truth) == 1.0
    assert mcc(np.zeros(6, dtype=bool), truth) == 0.0
    decisions = np.concatenate([np.ones(50), np.zeros(30), np.ones(10), np.zeros(10)]) > 0
    labels = np.concatenate([np.ones(50), np.zeros(30), np.zeros(10), np.ones(10)]) > 0
    assert mcc(decisions, labels) == pytest.approx(1400.0 / 2400.0)
    assert mcc(~decisions, ~labels) == pytest.approx(mcc(decisions, labels))
    with pytest.raises(ValueError):
        mcc(np.array([], dtype=bool), np.array([], dtype=bool))


def test_mrse_values(rng):
    truth = rng.standard_normal((3, 20))
    assert mrse(truth, truth) == 0.0
    assert mrse(np.zeros_like(truth), truth) == pytest.approx(100.0)
    assert mrse(2.0 * truth, truth) == pytest.approx(100.0)
    with pytest.raises(ValueError):
        mrse(truth, np.zeros_like(truth))


def test_mrse_rotation_invariance(rng):
    truth = rng.standard_normal(60)
    est = truth + 0.3 * rng.standard_normal(60)
    q = np.linalg.qr(rng.standard_normal((60, 60)))[0]
    assert mrse(q @ est, q @ truth) == pytest.approx(mrse(est, truth), rel=1e-10)


# ---------------------------------------------------------------------------
# split R-hat


def test_rhat_constant_chains():
    assert split_rhat(np.full((4, 100), 3.0)) == 1.0
    assert split_rhat(np.full((4, 100), 3.0), folded=True) == 1.0


def test_rhat_calibration_iid():
    rng = np.random.default_rng(2024)
    chains = rng.standard_normal((8, 1000))
    assert split_rhat(chains) < 1.01
    assert split_rhat(chains, folded=True) < 1.01


def test_rhat_detects_shift():
    rng = np.random.default_rng(7)
    chains = rng.standard_normal((8, 1000))
    chains[0] += 3.0
    assert split_rhat(chains) > 1.1


def test_rhat_detects_scale_mismatch_via_folding():
    rng = np.random.default_rng(8)
    chains = rng.standard_normal((8, 2000))
    chains[0] *= 4.0  # same center, inflated spread
    assert split_rhat(chains, folded=True) > 1.1


def test_rhat_affine_invariance():
    rng = np.random.default_rng(9)
    chains = rng.standard_normal((4, 500)) + 0.3
    base = split_rhat(chains)
    assert split_rhat(2.5 * chains - 7.0) == pytest.approx(base, rel=1e-12)
    assert split_rhat(-1.5 * chains + 2.0) == pytest.approx(base, rel=1e-12)


def test_rhat_validation():
    with pytest.raises(ValueError):
        split_rhat(np.zeros((1, 100)))
    with pytest.raises(ValueError):
        split_rhat(np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# posterior predictive goodness of fit


def gof_problem(rng, n=40, m=60, p=2, regions=6):
    x = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    beta_true = rng.standard_normal((p, m))
    sigma_true = rng.uniform(0.8, 1.2, size=m)
    y = x @ beta_true + rng.standard_normal((n, m)) * sigma_true
    ds = make_dataset(x, y)
    labels = np.arange(m) % regions

    s = 300
    beta_draws = beta_true + 0.02 * rng.standard_normal((s, p, m))
    sigma2_draws = sigma_true**2 * rng.uniform(0.97, 1.03, size=(s, m))
    draws = PosteriorDraws(beta=beta_draws, chain_ids=np.zeros(s, dtype=int),
                           variance_traces={"sigma2": sigma2_draws})
    return ds, draws, labels


def test_gof_self_consistency(rng):
    ds, draws, labels = gof_problem(rng)
    result = posterior_predictive_gof(draws, ds, labels, n_replicates=200, rng=rng)
    tail = np.array([row["tail_prob"] for row in result.table])
    assert np.mean((tail >= 0.01) & (tail <= 0.99)) >= 0.95
    assert set(result.ks_by_region) == set(range(6))
    assert result.ks_by_region[result.best_region] <= result.ks_by_region[result.median_region]
    assert result.ks_by_region[result.median_region] <= result.ks_by_region[result.worst_region]


def test_gof_discrepancy_shrinks_with_replicates(rng):
    ds, draws, labels = gof_problem(rng, regions=1)
    few = posterior_predictive_gof(draws, ds, labels, n_replicates=10,
                                   rng=np.random.default_rng(0))
    many = posterior_predictive_gof(draws, ds, labels, n_replicates=300,
                                    rng=np.random.default_rng(0))
    mean_row = [r for r in many.table if r["statistic"] == "mean"][0]
    # predictive mean converges onto the observed mean for a correct model
    assert mean_row["abs_difference"] <= 0.05


def test_gof_requires_labels_and_sigma(rng):
    ds, draws, labels = gof_problem(rng)
    with pytest.raises(DataError):
        posterior_predictive_gof(draws, ds, None)
    bare = PosteriorDraws(beta=draws.beta, chain_ids=draws.chain_ids)
    with pytest.raises(DataError):
        posterior_predictive_gof(bare, ds, labels)


# ---------------------------------------------------------------------------
# persistence and summaries


def test_draws_validation(rng):
    with pytest.raises(ValueError):
        PosteriorDraws(beta=np.zeros((1, 2, 3)), chain_ids=np.zeros(1, dtype=int))
    bad = rng.standard_normal((5, 2, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        PosteriorDraws(beta=bad, chain_ids=np.zeros(5, dtype=int))


def test_save_load_round_trip(tmp_path, rng):
    draws = synthetic_draws(rng)
    prefix = tmp_path / "fit"
    save_draws(draws, prefix)
    back = load_draws(prefix)
    np.testing.assert_array_equal(back.beta, draws.beta)
    np.testing.assert_array_equal(back.chain_ids, draws.chain_ids)
    np.testing.assert_allclose(back.variance_traces["sigma2"],
                               draws.variance_traces["sigma2"])
    assert back.metadata["variant"] == "test"


def test_summary_and_diagnostics_csv(tmp_path, rng):
    draws = synthetic_draws(rng, s=400, p=2, m=10)
    summary = tmp_path / "summary.csv"
    write_summary_csv(draws, summary, band_level=0.2, activation_threshold=0.4)
    lines = summary.read_text().strip().splitlines()
    assert lines[0].startswith("coefficient,vertex,mean,sd")
    assert len(lines) == 1 + 2 * 10

    diag = tmp_path / "diag.csv"
    worst = write_diagnostics_csv(draws, diag)
    assert worst["max_rhat"] >= 1.0 or worst["max_rhat"] > 0.99
    assert len(diag.read_text().strip().splitlines()) == 1 + 2 * 10
