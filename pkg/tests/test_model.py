import numpy as np
import pytest

from sphreg.errors import DataError
from sphreg.model import (
    BinaryImageFile,
    ChainState,
    GeneratedImages,
    InMemoryImages,
    beta_from_gamma,
    factorize_design,
    gamma_from_beta,
    make_dataset,
    parse_config_file,
    read_covariates_csv,
    read_outcome_csv,
    residual_ss_per_vertex,
    stream_sufficient_stats,
    working_loglik,
    write_covariates_csv,
    write_outcome_binary,
    write_outcome_csv,
)


def random_case(rng, n=20, m=100, p=3):
    x = rng.standard_normal((n, p))
    y = rng.standard_normal((n, m))
    ds = make_dataset(x, y)
    stats = stream_sufficient_stats(ds)
    return ds, stats, x, y


def state_for(stats, gamma=None, sigma2=None):
    rank, m = stats.rank, stats.n_vertices
    return ChainState(
        gamma=np.zeros((rank, m)) if gamma is None else gamma,
        sigma2=np.ones(m) if sigma2 is None else sigma2,
        xi=1.0, tau2=1.0, zeta2=np.ones(stats.n_covariates))


# ---------------------------------------------------------------------------
# design factorization


def test_identity_design_unit_singular_values():
    u, s, v = factorize_design(np.eye(4))
    np.testing.assert_allclose(s, 1.0)
    np.testing.assert_allclose(u @ np.diag(s) @ v.T, np.eye(4), atol=1e-12)


def test_duplicate_column_dropped_with_warning():
    x = np.column_stack([np.ones(10), np.arange(10.0), np.arange(10.0)])
    with pytest.warns(UserWarning, match="near-null"):
        u, s, v = factorize_design(x)
    assert s.shape == (2,)


def test_reconstruction_residual(rng):
    x = rng.standard_normal((50, 7))
    u, s, v = factorize_design(x)
    err = np.linalg.norm(x - u @ np.diag(s) @ v.T)
    assert err <= 1e-10 * np.linalg.norm(x)
    np.testing.assert_allclose(u.T @ u, np.eye(7), atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(7), atol=1e-10)
    assert np.all(np.diff(s) <= 0) and np.all(s > 0)


def test_zero_design_rejected():
    with pytest.raises(DataError):
        factorize_design(np.zeros((5, 2)))
    with pytest.raises(DataError):
        factorize_design(np.array([[np.nan, 1.0]]))


# ---------------------------------------------------------------------------
# sufficient statistics


def test_single_image_stats():
    y = np.array([[1.0, -2.0, 3.0]])
    ds = make_dataset(np.array([[1.0]]), y)
    stats = stream_sufficient_stats(ds)
    np.testing.assert_allclose(stats.projected, y)
    np.testing.assert_allclose(stats.sumsq, y[0] ** 2)


def test_two_identical_images():
    y0 = np.array([0.5, 1.5, -1.0, 2.0])
    y = np.vstack([y0, y0])
    ds = make_dataset(np.array([[1.0], [1.0]]), y)
    stats = stream_sufficient_stats(ds)
    np.testing.assert_allclose(stats.projected, np.sqrt(2.0) * y0[None, :])
    np.testing.assert_allclose(stats.sumsq, 2.0 * y0**2)


def test_stats_match_dense_kronecker(rng):
    ds, stats, x, y = random_case(rng)
    dense = ds.u.T @ y  # (U' kron I) y reshaped per vertex
    np.testing.assert_allclose(stats.projected, dense, atol=1e-12)
    np.testing.assert_allclose(stats.sumsq, (y**2).sum(axis=0), atol=1e-12)


def test_stats_order_insensitive(rng):
    ds, stats, x, y = random_case(rng, n=30, m=40)
    perm = rng.permutation(30)
    ds2 = make_dataset(ds.x[perm], y[perm])
    stats2 = stream_sufficient_stats(ds2)
    # same design rows paired with same images: identical statistics up to
    # float accumulation order (the rotated basis may differ in sign only
    # when singular values are distinct, so compare via invariant quantities)
    np.testing.assert_allclose(stats2.sumsq, stats.sumsq, rtol=1e-8)
    fit1 = stats.v_matrix @ (stats.projected * stats.singular_values[:, None])
    fit2 = stats2.v_matrix @ (stats2.projected * stats2.singular_values[:, None])
    np.testing.assert_allclose(fit1, fit2, rtol=1e-8, atol=1e-10)


def test_stream_error_reports_image_index(rng):
    x = rng.standard_normal((3, 2))
    y = rng.standard_normal((3, 5))
    y[1, 2] = np.inf
    ds = make_dataset(x, y)
    with pytest.raises(DataError, match="image 1"):
        stream_sufficient_stats(ds)

    short = [np.zeros(5), np.zeros(4), np.zeros(5)]
    with pytest.raises(DataError, match="image 1"):
        stream_sufficient_stats(ds, images=short)

    with pytest.raises(DataError, match="expected 3"):
        stream_sufficient_stats(ds, images=[np.zeros(5)] * 2)


def test_generated_images_stream(rng):
    x = rng.standard_normal((10, 2))
    base = rng.standard_normal((10, 6))

    def factory():
        return (row for row in base)

    ds = make_dataset(x, GeneratedImages(factory, 10, 6))
    stats = stream_sufficient_stats(ds)
    np.testing.assert_allclose(stats.projected, ds.u.T @ base, atol=1e-12)


# ---------------------------------------------------------------------------
# likelihood pieces against dense oracles


def dense_loglik(x, y, beta, sigma2):
    n, m = y.shape
    resid = y - x @ beta
    return float(-0.5 * np.sum(resid**2 / sigma2) - 0.5 * n * np.sum(np.log(sigma2)))


def test_loglik_zero_gamma(rng):
    ds, stats, x, y = random_case(rng, n=10, m=12, p=2)
    sigma2 = rng.uniform(0.5, 2.0, size=12)
    state = state_for(stats, sigma2=sigma2)
    expect = -0.5 * np.sum(stats.sumsq / sigma2) - 0.5 * 10 * np.sum(np.log(sigma2))
    assert working_loglik(stats, state) == pytest.approx(expect, rel=1e-12)


def test_loglik_hand_example():
    # one vertex, two images, unit variance
    x = np.array([[1.0], [1.0]])
    y = np.array([[1.0], [2.0]])
    ds = make_dataset(x, y)
    stats = stream_sufficient_stats(ds)
    beta = np.array([[0.7]])
    gamma = gamma_from_beta(stats, beta)
    state = state_for(stats, gamma=gamma)
    direct = dense_loglik(x, y, beta, np.ones(1))
    assert working_loglik(stats, state) == pytest.approx(direct, rel=1e-12)


def test_loglik_matches_dense(rng):
    ds, stats, x, y = random_case(rng, n=10, m=30, p=2)
    beta = rng.standard_normal((2, 30))
    sigma2 = rng.uniform(0.3, 3.0, size=30)
    state = state_for(stats, gamma=gamma_from_beta(stats, beta), sigma2=sigma2)
    assert working_loglik(stats, state) == pytest.approx(
        dense_loglik(x, y, beta, sigma2), rel=1e-10)


def test_loglik_permutation_invariant(rng):
    ds, stats, x, y = random_case(rng, n=8, m=25, p=2)
    gamma = rng.standard_normal((2, 25))
    sigma2 = rng.uniform(0.5, 2.0, size=25)
    state = state_for(stats, gamma=gamma, sigma2=sigma2)
    ll = working_loglik(stats, state)

    perm = rng.permutation(25)
    stats_p = stream_sufficient_stats(make_dataset(x, y[:, perm]))
    state_p = state_for(stats_p, gamma=gamma[:, perm], sigma2=sigma2[perm])
    assert working_loglik(stats_p, state_p) == pytest.approx(ll, rel=1e-10)


def test_rss_zero_gamma_and_dense(rng):
    ds, stats, x, y = random_case(rng, n=20, m=50, p=3)
    state = state_for(stats)
    np.testing.assert_allclose(residual_ss_per_vertex(stats, state), stats.sumsq)

    beta = rng.standard_normal((3, 50))
    state2 = state_for(stats, gamma=gamma_from_beta(stats, beta))
    dense = ((y - x @ beta) ** 2).sum(axis=0)
    np.testing.assert_allclose(residual_ss_per_vertex(stats, state2), dense, rtol=1e-10)


def test_rss_interpolating_case(rng):
    # N == P: exact interpolation drives RSS to zero
    x = rng.standard_normal((3, 3))
    y = rng.standard_normal((3, 7))
    ds = make_dataset(x, y)
    stats = stream_sufficient_stats(ds)
    beta = np.linalg.solve(x, y)
    state = state_for(stats, gamma=gamma_from_beta(stats, beta))
    np.testing.assert_allclose(residual_ss_per_vertex(stats, state), 0.0, atol=1e-9)


def test_rotation_round_trip(rng):
    ds, stats, x, y = random_case(rng, n=15, m=20, p=4)
    gamma = rng.standard_normal((4, 20))
    back = gamma_from_beta(stats, beta_from_gamma(stats, gamma))
    np.testing.assert_allclose(back, gamma, atol=1e-12)


def test_state_validation():
    with pytest.raises(ValueError):
        ChainState(gamma=np.zeros((1, 2)), sigma2=np.array([1.0, 0.0]),
                   xi=1.0, tau2=1.0, zeta2=np.ones(1))
    with pytest.raises(ValueError):
        ChainState(gamma=np.array([[np.nan]]), sigma2=np.ones(1),
                   xi=1.0, tau2=1.0, zeta2=np.ones(1))


# ---------------------------------------------------------------------------
# file formats


def test_outcome_binary_round_trip(tmp_path, rng):
    y = rng.standard_normal((6, 11))
    path = tmp_path / "outcomes.bin"
    write_outcome_binary(path, y)
    src = BinaryImageFile(path)
    assert (src.n_images, src.n_vertices) == (6, 11)
    np.testing.assert_allclose(src.require_array(), y)
    ds = make_dataset(rng.standard_normal((6, 2)), InMemoryImages(y))
    stats1 = stream_sufficient_stats(ds)
    stats2 = stream_sufficient_stats(ds, images=src)
    np.testing.assert_allclose(stats1.projected, stats2.projected)


def test_outcome_binary_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(DataError, match="magic"):
        BinaryImageFile(path)


def test_outcome_csv_round_trip(tmp_path, rng):
    y = rng.standard_normal((4, 5))
    path = tmp_path / "outcomes.csv"
    write_outcome_csv(path, y)
    np.testing.assert_allclose(read_outcome_csv(path).require_array(), y, rtol=1e-12)


def test_covariates_csv_round_trip(tmp_path, rng):
    x = rng.standard_normal((5, 3))
    ids = [f"s{i}" for i in range(5)]
    path = tmp_path / "covs.csv"
    write_covariates_csv(path, ids, x, ["age", "score", "group"])
    got_ids, got_x, names = read_covariates_csv(path)
    assert list(got_ids) == ids
    assert names == ["age", "score", "group"]
    np.testing.assert_allclose(got_x, x)


def test_config_parse(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("kernel.psi = 0.077\nkernel.nu=2.0\n# comment\n\nseed=42\n")
    cfg = parse_config_file(path)
    assert cfg == {"kernel.psi": "0.077", "kernel.nu": "2.0", "seed": "42"}
    bad = tmp_path / "bad.cfg"
    bad.write_text("this is not a pair\n")
    with pytest.raises(DataError):
        parse_config_file(bad)
