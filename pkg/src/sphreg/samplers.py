"""Posterior computation for the spatial regression variants.

The rotated coefficients gamma (rank x M) are updated with Hamiltonian
Monte Carlo whose mass matrix is the Kronecker prior precision

    Mass = V' Z^{-1} V  (x)  tau^{-2} Ctilde_M^{-1},

with Ctilde_M a second sparse build at a smaller radius (quasi-Newton
preconditioning by the prior). Variance components are updated by
conjugate Gibbs draws. Three fitting strategies share this engine:

* working     -- independent heteroscedastic errors, all variances sampled;
* marginal    -- correlated error covariance Htilde = tau^2 C + diag(sigma^2)
                 held fixed at empirical-Bayes estimates, only the
                 coefficient-scale variances resampled;
* conditional -- per-image spatial deviations fixed at their posterior
                 mode, then the working sampler runs on residualized data.

No step ever materializes an (M P) x (M P) matrix: everything is applied
through M-sized sparse passes and rank-sized dense mixes.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from . import vecchia
from .errors import FitError
from .inference import PosteriorDraws
from .model import (
    ChainState,
    RegressionDataset,
    SufficientStats,
    beta_from_gamma,
    make_dataset,
    residual_ss_per_vertex,
    stream_sufficient_stats,
)

DEFAULT_PRIOR_RADIUS_MM = 8.0
DEFAULT_MASS_RADIUS_MM = 3.0

_STEP_FLOOR = 1e-12
# exactly-interpolated data (RSS == 0) makes the noise-variance posterior
# improper; the draw is floored so degenerate inputs stay finite
_SIGMA2_FLOOR = 1e-12
ALL_VARIANCE_UPDATES = ("sigma2", "xi", "zeta2", "tau2")


@dataclass(frozen=True)
class HmcConfig:
    """Sampler settings. Defaults mirror the reference protocol: 35
    leapfrog steps, 65% target acceptance, 5000 warmup + 2000 sampling
    iterations thinned by 10, eight chains."""

    leapfrog_steps: int = 35
    target_accept: float = 0.65
    warmup: int = 5000
    samples: int = 2000
    thin: int = 10
    chains: int = 8
    seed: int = 0
    threads: int = 1
    initial_step: float = 0.1
    da_gamma: float = 0.05
    da_t0: float = 10.0
    da_kappa: float = 0.75

    def __post_init__(self):
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")
        if self.warmup < 0 or self.samples < 1 or self.thin < 1 or self.chains < 1:
            raise ValueError("warmup/samples/thin/chains out of range")
        if self.samples < self.thin:
            raise ValueError("samples must be >= thin (no draws would be kept)")

    def content_hash(self) -> str:
        return hashlib.sha1(repr(self).encode()).hexdigest()[:12]


class MassMatrix:
    """Kronecker mass: rotated coefficient scale times a sparse spatial
    precision built at its own (smaller) radius."""

    def __init__(self, v_matrix: np.ndarray, vecchia_mass: vecchia.VecchiaPrecision,
                 zeta2, tau2: float):
        self.v_matrix = np.asarray(v_matrix, dtype=float)
        self.vecchia_mass = vecchia_mass
        self.refresh(zeta2, tau2)

    def refresh(self, zeta2, tau2: float) -> None:
        self.zeta2 = np.asarray(zeta2, dtype=float)
        self.tau2 = float(tau2)
        v = self.v_matrix
        self.w = v.T @ (v / self.zeta2[:, None])
        self._w_cho = cho_factor(self.w, lower=True)

    def draw_momentum(self, rng: np.random.Generator) -> np.ndarray:
        """p ~ N(0, Mass) via V'Z^{-1/2} eps and the sparse half-precision."""
        p_cov, m = self.v_matrix.shape[0], self.vecchia_mass.n_vertices
        eps = rng.standard_normal((p_cov, m))
        mixed = (self.v_matrix / np.sqrt(self.zeta2)[:, None]).T @ eps
        return self.vecchia_mass.color_precision_noise(mixed) / np.sqrt(self.tau2)

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.w @ (self.vecchia_mass.apply_precision(p) / self.tau2)

    def apply_inverse(self, p: np.ndarray) -> np.ndarray:
        return cho_solve(self._w_cho, self.tau2 * self.vecchia_mass.apply_covariance(p))

    def kinetic(self, p: np.ndarray, velocity: np.ndarray | None = None) -> float:
        v = self.apply_inverse(p) if velocity is None else velocity
        return 0.5 * float(np.sum(p * v))


class CorrelatedNoise:
    """Fixed correlated error model Htilde for the marginal variant; caches
    the solved data projection since Htilde never changes."""

    def __init__(self, vp: vecchia.VecchiaPrecision, projected: np.ndarray):
        self.vp = vp
        self.hinv_projected = vp.apply_precision(projected)

    def apply_inv(self, rows: np.ndarray) -> np.ndarray:
        return self.vp.apply_precision(rows)


def _prior_mix(v_matrix: np.ndarray, zeta2, tau2: float) -> np.ndarray:
    return (v_matrix.T @ (v_matrix / np.asarray(zeta2)[:, None])) / tau2


def _potential_parts(stats: SufficientStats, gamma: np.ndarray, sigma2,
                     mix: np.ndarray, prior: vecchia.VecchiaPrecision, noise):
    d = stats.singular_values
    if noise is None:
        inv_s2 = 1.0 / sigma2
        data_quad = (d[:, None] ** 2 * gamma) * inv_s2
        data_lin = (d[:, None] * stats.projected) * inv_s2
    else:
        data_quad = d[:, None] ** 2 * noise.apply_inv(gamma)
        data_lin = d[:, None] * noise.hinv_projected
    prior_apply = mix @ prior.apply_precision(gamma)
    potential = float(0.5 * np.sum(gamma * data_quad) - np.sum(gamma * data_lin)
                      + 0.5 * np.sum(gamma * prior_apply))
    return potential, data_quad - data_lin + prior_apply


def potential_and_gradient(stats: SufficientStats, state: ChainState,
                           prior: vecchia.VecchiaPrecision, noise=None):
    """Potential U(gamma) and its (rank, M) gradient.

    U is the negative log conditional density of gamma up to terms free of
    gamma: 0.5 g'(D^2 x H^{-1})g - g'(D U' x H^{-1})y + 0.5 g' Prior g,
    with H the error covariance (diagonal sigma^2 unless ``noise`` is a
    correlated model).
    """
    mix = _prior_mix(stats.v_matrix, state.zeta2, state.tau2)
    return _potential_parts(stats, state.gamma, state.sigma2, mix, prior, noise)


def _leapfrog(gamma0, p0, eps: float, n_steps: int, stats, sigma2, mix,
              prior, noise, mass: MassMatrix):
    """Volume-preserving leapfrog integration; returns (gamma, p, U0, U1)."""
    u0, grad = _potential_parts(stats, gamma0, sigma2, mix, prior, noise)
    gamma = gamma0.copy()
    p = p0 - 0.5 * eps * grad
    u1 = u0
    for step in range(n_steps):
        gamma += eps * mass.apply_inverse(p)
        u1, grad = _potential_parts(stats, gamma, sigma2, mix, prior, noise)
        if step < n_steps - 1:
            p -= eps * grad
    p -= 0.5 * eps * grad
    return gamma, p, u0, u1


def hamiltonian_error(state: ChainState, stats: SufficientStats, prior,
                      mass: MassMatrix, momentum: np.ndarray, eps: float,
                      n_steps: int, noise=None) -> float:
    """Energy drift |H(end) - H(start)| of one deterministic trajectory."""
    mix = _prior_mix(stats.v_matrix, state.zeta2, state.tau2)
    _, p1, u0, u1 = _leapfrog(state.gamma, momentum, eps, n_steps, stats,
                              state.sigma2, mix, prior, noise, mass)
    return abs((u1 + mass.kinetic(p1)) - (u0 + mass.kinetic(momentum)))


def hmc_step(state: ChainState, stats: SufficientStats,
             prior: vecchia.VecchiaPrecision, mass: MassMatrix,
             cfg: HmcConfig, rng: np.random.Generator, noise=None):
    """One Metropolis-adjusted leapfrog trajectory for gamma.

    Returns (state, accepted, accept_prob). A non-finite Hamiltonian
    rejects the proposal and halves the step size.
    """
    eps = state.step_size
    mix = _prior_mix(stats.v_matrix, state.zeta2, state.tau2)
    p0 = mass.draw_momentum(rng)
    gamma, p, u0, u1 = _leapfrog(state.gamma, p0, eps, cfg.leapfrog_steps,
                                 stats, state.sigma2, mix, prior, noise, mass)
    h_new = u1 + mass.kinetic(p)
    h_old = u0 + mass.kinetic(p0)
    if not np.isfinite(h_new):
        state.step_size = max(0.5 * eps, _STEP_FLOOR)
        return state, False, 0.0
    accept_prob = min(1.0, float(np.exp(min(0.0, h_old - h_new))))
    accepted = rng.random() < accept_prob
    if accepted:
        state.gamma = gamma
    return state, accepted, accept_prob


def gibbs_update_variances(state: ChainState, stats: SufficientStats,
                           prior: vecchia.VecchiaPrecision,
                           rng: np.random.Generator,
                           updates=ALL_VARIANCE_UPDATES) -> ChainState:
    """Conjugate draws for the variance components, in the order
    sigma^2(.), xi, zeta_j^2, tau^2 (shape-rate Gamma forms)."""
    n, m = stats.n_images, stats.n_vertices
    if "sigma2" in updates:
        rss = residual_ss_per_vertex(stats, state)
        lam = rng.gamma(0.5 + 0.5 * n, 1.0 / (state.xi + 0.5 * rss))
        state.sigma2 = np.maximum(1.0 / lam, _SIGMA2_FLOOR)
    if "xi" in updates:
        state.xi = float(rng.gamma(0.5 + 0.5 * m, 1.0 / (1.0 + np.sum(1.0 / state.sigma2))))
    if "zeta2" in updates or "tau2" in updates:
        beta = beta_from_gamma(stats, state.gamma)
        q = np.array([prior.quad_form(beta[j]) for j in range(beta.shape[0])])
    if "zeta2" in updates:
        lam_z = rng.gamma(1.0 + 0.5 * m, 1.0 / (0.5 + q / (2.0 * state.tau2)))
        state.zeta2 = 1.0 / lam_z
    if "tau2" in updates:
        p_cov = stats.n_covariates
        rate = 0.5 + float(np.sum(q / state.zeta2)) / 2.0
        state.tau2 = 1.0 / float(rng.gamma(1.0 + 0.5 * m * p_cov, 1.0 / rate))
    return state


class DualAveraging:
    """Nesterov-style step-size adaptation toward a target acceptance."""

    def __init__(self, initial_step: float, target: float, gamma: float = 0.05,
                 t0: float = 10.0, kappa: float = 0.75):
        self.mu = np.log(10.0 * initial_step)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.h_bar = 0.0
        self.log_step_bar = 0.0
        self.m = 0

    def update(self, accept_prob: float) -> float:
        self.m += 1
        eta = 1.0 / (self.m + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob)
        log_step = self.mu - np.sqrt(self.m) / self.gamma * self.h_bar
        w = self.m ** (-self.kappa)
        self.log_step_bar = w * log_step + (1.0 - w) * self.log_step_bar
        return float(np.exp(log_step))

    def final(self) -> float:
        return float(np.exp(self.log_step_bar))


def find_reasonable_step(state: ChainState, stats: SufficientStats, prior,
                         mass: MassMatrix, cfg: HmcConfig,
                         rng: np.random.Generator, noise=None) -> float:
    """Double/halve a single-step trajectory until the acceptance
    probability crosses 1/2."""
    probe = replace(cfg, leapfrog_steps=1)

    def accept_prob(step):
        trial = state.copy()
        trial.step_size = step
        return hmc_step(trial, stats, prior, mass, probe, rng, noise)[2]

    step = cfg.initial_step
    grow = accept_prob(step) > 0.5
    for _ in range(50):
        nxt = step * (2.0 if grow else 0.5)
        prob = accept_prob(nxt)
        if (grow and prob <= 0.5) or (not grow and prob >= 0.5):
            return max(nxt if not grow else step, _STEP_FLOOR)
        step = nxt
    return max(step, _STEP_FLOOR)


def _initial_state(stats: SufficientStats, cfg: HmcConfig) -> ChainState:
    m = stats.n_vertices
    n = max(stats.n_images, 1)
    # start at the vertex-wise least-squares solution (rotated basis)
    gamma = stats.projected / stats.singular_values[:, None]
    state = ChainState(gamma=gamma, sigma2=np.ones(m), xi=1.0,
                       tau2=1.0, zeta2=np.ones(stats.n_covariates),
                       step_size=cfg.initial_step)
    rss = residual_ss_per_vertex(stats, state)
    state.sigma2 = np.maximum(rss / n, 1e-6)
    return state


def _run_chain(chain_idx: int, seed_seq: np.random.SeedSequence,
               stats: SufficientStats, prior: vecchia.VecchiaPrecision,
               mass_vecchia: vecchia.VecchiaPrecision, cfg: HmcConfig,
               init_state: ChainState, noise, updates):
    rng = np.random.default_rng(seed_seq)
    state = init_state.copy()
    mass = MassMatrix(stats.v_matrix, mass_vecchia, state.zeta2, state.tau2)
    state.step_size = find_reasonable_step(state, stats, prior, mass, cfg, rng, noise)

    adapt = DualAveraging(state.step_size, cfg.target_accept, cfg.da_gamma,
                          cfg.da_t0, cfg.da_kappa)
    for _ in range(cfg.warmup):
        state, _, prob = hmc_step(state, stats, prior, mass, cfg, rng, noise)
        state.step_size = adapt.update(prob)
        if state.step_size < 10.0 * _STEP_FLOOR:
            raise FitError(f"chain {chain_idx}: step size underflow in warmup")
        gibbs_update_variances(state, stats, prior, rng, updates)
        mass.refresh(state.zeta2, state.tau2)
    if cfg.warmup:
        state.step_size = max(adapt.final(), _STEP_FLOOR)

    kept_beta, kept_sigma2, kept_scalars = [], [], []
    n_accept = 0
    for it in range(cfg.samples):
        state, accepted, _ = hmc_step(state, stats, prior, mass, cfg, rng, noise)
        n_accept += accepted
        gibbs_update_variances(state, stats, prior, rng, updates)
        mass.refresh(state.zeta2, state.tau2)
        if (it + 1) % cfg.thin == 0:
            kept_beta.append(beta_from_gamma(stats, state.gamma))
            kept_sigma2.append(state.sigma2.copy())
            kept_scalars.append((state.tau2, state.xi, *state.zeta2))
    return (np.array(kept_beta), np.array(kept_sigma2), np.array(kept_scalars),
            n_accept / cfg.samples, state.step_size)


def _chain_worker(args):
    return _run_chain(*args)


def _collect_chains(results, cfg: HmcConfig, metadata: dict) -> PosteriorDraws:
    betas, sigmas, scalars, accept_rates, steps = zip(*results)
    per_chain = betas[0].shape[0]
    chain_ids = np.repeat(np.arange(len(results)), per_chain)
    scalars = np.concatenate(scalars, axis=0)
    traces = {"sigma2": np.concatenate(sigmas, axis=0),
              "tau2": scalars[:, 0], "xi": scalars[:, 1], "zeta2": scalars[:, 2:]}
    metadata = dict(metadata, accept_rates=list(accept_rates),
                    step_sizes=list(steps), config_hash=cfg.content_hash(),
                    seed=cfg.seed)
    return PosteriorDraws(beta=np.concatenate(betas, axis=0), chain_ids=chain_ids,
                          variance_traces=traces, metadata=metadata)


def _run_chains(stats, prior, mass_vecchia, cfg, init_state, noise, updates,
                metadata) -> PosteriorDraws:
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    args = [(idx, seeds[idx], stats, prior, mass_vecchia, cfg, init_state,
             noise, updates) for idx in range(cfg.chains)]
    if cfg.threads > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.threads, cfg.chains)) as pool:
            results = list(pool.map(_chain_worker, args))
    else:
        results = [_run_chain(*a) for a in args]
    return _collect_chains(results, cfg, metadata)


def fit_working(dataset: RegressionDataset, prior: vecchia.VecchiaPrecision,
                cfg: HmcConfig, mass_vecchia: vecchia.VecchiaPrecision | None = None,
                stats: SufficientStats | None = None,
                init_state: ChainState | None = None,
                gibbs_updates=ALL_VARIANCE_UPDATES) -> PosteriorDraws:
    """Sample the independent-error model: HMC for gamma alternating with
    Gibbs draws of (sigma^2, xi, zeta^2, tau^2)."""
    if stats is None:
        stats = stream_sufficient_stats(dataset)
    if mass_vecchia is None:
        mass_vecchia = prior
    if init_state is None:
        init_state = _initial_state(stats, cfg)
    return _run_chains(stats, prior, mass_vecchia, cfg, init_state, None,
                       tuple(gibbs_updates), {"variant": "working"})


@dataclass
class MapEstimate:
    """Joint posterior mode (precision parameterization) of the
    independent-error model."""

    gamma: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    xi: float
    tau2: float
    zeta2: np.ndarray
    objective: float
    iterations: int
    converged: bool


def _map_objective(stats, gamma, lam_sigma, xi, lam_tau, lam_zeta, q, prior_logdet):
    n, m = stats.n_images, stats.n_vertices
    d = stats.singular_values
    dg = d[:, None] * gamma
    rss = stats.sumsq - 2.0 * np.einsum("km,km->m", dg, stats.projected) \
        + np.einsum("km,km->m", dg, dg)
    loglik = -0.5 * float(np.sum(rss * lam_sigma)) + 0.5 * n * float(np.sum(np.log(lam_sigma)))
    log_prior_gamma = -0.5 * lam_tau * float(np.sum(lam_zeta * q)) \
        + 0.5 * m * (len(lam_zeta) * np.log(lam_tau) + float(np.sum(np.log(lam_zeta)))) \
        - 0.5 * len(lam_zeta) * prior_logdet
    hyper = float(np.sum(-0.5 * np.log(lam_sigma) - xi * lam_sigma)) \
        + 0.5 * m * np.log(xi) - 0.5 * np.log(xi) - xi \
        - 0.5 * lam_tau - 0.5 * float(np.sum(lam_zeta))
    return loglik + log_prior_gamma + hyper


def map_optimize_working(dataset: RegressionDataset, prior: vecchia.VecchiaPrecision,
                         homoscedastic: bool = False,
                         stats: SufficientStats | None = None,
                         init_gamma: np.ndarray | None = None,
                         max_outer: int = 500, tol: float = 1e-8,
                         inner_steps: int = 40) -> MapEstimate:
    """Alternate preconditioned gradient ascent on gamma (backtracking line
    search) with closed-form conditional-mode updates of the variance
    components. The objective is monotone by construction and checked."""
    if stats is None:
        stats = stream_sufficient_stats(dataset)
    n, m, p_cov = stats.n_images, stats.n_vertices, stats.n_covariates
    d = stats.singular_values
    prior_logdet = prior.log_det()

    gamma = np.zeros((stats.rank, m)) if init_gamma is None else init_gamma.copy()
    lam_sigma = np.minimum(n / np.maximum(stats.sumsq, 1e-12), 1e6) * np.ones(m)
    xi, lam_tau = 1.0, 1.0
    lam_zeta = np.ones(p_cov)

    def q_forms(g):
        beta = beta_from_gamma(stats, g)
        return np.array([prior.quad_form(beta[j]) for j in range(p_cov)])

    def data_terms(g):
        return (d[:, None] ** 2 * g) * lam_sigma, (d[:, None] * stats.projected) * lam_sigma

    prev = -np.inf
    objective = _map_objective(stats, gamma, lam_sigma, xi, lam_tau, lam_zeta,
                               q_forms(gamma), prior_logdet)
    iterations = 0
    converged = False
    for outer in range(max_outer):
        iterations = outer + 1
        w = stats.v_matrix.T @ (stats.v_matrix * lam_zeta[:, None])  # V' Z^{-1} V
        w_cho = cho_factor(w, lower=True)

        # --- gamma ascent steps (quadratic subproblem at fixed variances)
        for _ in range(inner_steps):
            quad, lin = data_terms(gamma)
            prior_apply = lam_tau * (w @ prior.apply_precision(gamma))
            grad = lin - quad - prior_apply  # ascent direction of the log posterior
            gnorm = float(np.linalg.norm(grad))
            if gnorm <= 1e-12 * (1.0 + float(np.linalg.norm(lin))):
                break
            direction = cho_solve(w_cho, prior.apply_covariance(grad)) / lam_tau
            h_dir = (d[:, None] ** 2 * direction) * lam_sigma \
                + lam_tau * (w @ prior.apply_precision(direction))
            curvature = float(np.sum(direction * h_dir))
            slope = float(np.sum(direction * grad))
            if curvature <= 0 or slope <= 0:
                break
            step = slope / curvature
            # backtrack on the exact quadratic decrease (guards roundoff)
            for _ in range(30):
                gain = step * slope - 0.5 * step**2 * curvature
                if gain > 0:
                    break
                step *= 0.5
            gamma = gamma + step * direction
            if gnorm * step <= 1e-14 * (1.0 + float(np.linalg.norm(gamma))):
                break

        # --- closed-form conditional modes (precision parameterization)
        dg = d[:, None] * gamma
        rss = np.maximum(stats.sumsq - 2.0 * np.einsum("km,km->m", dg, stats.projected)
                         + np.einsum("km,km->m", dg, dg), 0.0)
        if homoscedastic:
            lam_shared = max(m * max(n - 1.0, 0.5), 0.5) / (float(np.sum(rss)) + 2.0 * m * xi)
            lam_sigma = np.full(m, lam_shared)
        else:
            lam_sigma = np.maximum(n - 1.0, 0.5) / (rss + 2.0 * xi)
        lam_sigma = np.minimum(lam_sigma, 1.0 / _SIGMA2_FLOOR)  # degenerate data guard
        xi = max((m - 1.0) / 2.0, 0.25) / (float(np.sum(lam_sigma)) + 1.0)
        xi = max(xi, _SIGMA2_FLOOR)
        q = q_forms(gamma)
        lam_zeta = m / (lam_tau * q + 1.0)
        lam_tau = m * p_cov / (float(np.sum(lam_zeta * q)) + 1.0)

        prev = objective
        objective = _map_objective(stats, gamma, lam_sigma, xi, lam_tau, lam_zeta,
                                   q, prior_logdet)
        if not np.isfinite(objective):
            raise FitError("MAP objective became non-finite")
        if objective < prev - 1e-6 * (abs(prev) + 1.0):
            raise FitError(f"MAP objective decreased at iteration {outer}: "
                           f"{prev} -> {objective}")
        if abs(objective - prev) < tol * (abs(prev) + 1.0):
            converged = True
            break

    return MapEstimate(gamma=gamma, beta=beta_from_gamma(stats, gamma),
                       sigma2=1.0 / lam_sigma, xi=xi, tau2=1.0 / lam_tau,
                       zeta2=1.0 / lam_zeta, objective=objective,
                       iterations=iterations, converged=converged)


# ---------------------------------------------------------------------------
# conditional variant


def _jacobi_cg(op: sp.csr_matrix, rhs: np.ndarray, tol: float, max_iter: int):
    """Conjugate gradients with diagonal preconditioning, vectorized over
    right-hand-side columns."""
    diag = op.diagonal()
    x = np.zeros_like(rhs)
    r = rhs.copy()
    z = r / diag[:, None]
    p = z.copy()
    rz = np.einsum("ij,ij->j", r, z)
    norms = np.linalg.norm(rhs, axis=0)
    norms[norms == 0.0] = 1.0
    for _ in range(max_iter):
        if np.all(np.linalg.norm(r, axis=0) <= tol * norms):
            return x
        ap = op @ p
        denom = np.einsum("ij,ij->j", p, ap)
        denom[denom == 0.0] = 1.0
        alpha = rz / denom
        x += alpha * p
        r -= alpha * ap
        z = r / diag[:, None]
        rz_new = np.einsum("ij,ij->j", r, z)
        p = z + (rz_new / np.where(rz == 0.0, 1.0, rz)) * p
        rz = rz_new
    raise FitError(f"conjugate gradients did not converge in {max_iter} iterations")


def estimate_deviations(images: np.ndarray, x: np.ndarray, beta: np.ndarray,
                        prior: vecchia.VecchiaPrecision, tau2: float,
                        sigma2: float, cg_tol: float = 1e-8) -> np.ndarray:
    """Posterior mode of the per-image spatial deviations given beta.

    Solves (tau^{-2} Ctilde^{-1} + sigma^{-2} I) w_i = sigma^{-2} r_i for
    every image by preconditioned conjugate gradients on the explicit
    sparse precision.
    """
    m = images.shape[1]
    resid = images - x @ beta
    op = (prior.precision_csr() / tau2 + sp.eye(m, format="csr") / sigma2).tocsr()
    rhs = resid.T / sigma2
    omega = _jacobi_cg(op, rhs, tol=cg_tol, max_iter=10 * m)
    return omega.T


def conditional_map(dataset: RegressionDataset, prior: vecchia.VecchiaPrecision,
                    max_rounds: int = 20, round_tol: float = 1e-6):
    """Alternate the homoscedastic coefficient mode with the deviation
    modes until the joint estimate settles. Returns (MapEstimate, omega)
    with omega the (N, M) fitted deviations."""
    images = dataset.images.require_array()
    stats = stream_sufficient_stats(dataset)
    est = map_optimize_working(dataset, prior, homoscedastic=True, stats=stats)
    omega = np.zeros_like(images)
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        sigma2 = float(est.sigma2[0])
        omega_new = estimate_deviations(images, dataset.x, est.beta, prior,
                                        est.tau2, sigma2)
        resid_ds = make_dataset(dataset.x, images - omega_new)
        est_new = map_optimize_working(resid_ds, prior, homoscedastic=True,
                                       init_gamma=est.gamma)
        change = (np.linalg.norm(omega_new - omega) + np.linalg.norm(est_new.beta - est.beta))
        scale = 1.0 + np.linalg.norm(omega_new) + np.linalg.norm(est_new.beta)
        est, omega = est_new, omega_new
        if change <= round_tol * scale:
            break
    return est, omega, rounds


def fit_conditional(dataset: RegressionDataset, prior: vecchia.VecchiaPrecision,
                    cfg: HmcConfig, mass_vecchia: vecchia.VecchiaPrecision | None = None,
                    max_rounds: int = 20, round_tol: float = 1e-6) -> PosteriorDraws:
    """Two-phase conditional strategy: fix the per-image deviations at a
    homoscedastic joint mode, then run the working sampler on the
    residualized images."""
    images = dataset.images.require_array()
    est, omega, rounds = conditional_map(dataset, prior, max_rounds, round_tol)
    final = make_dataset(dataset.x, images - omega)
    draws = fit_working(final, prior, cfg, mass_vecchia=mass_vecchia)
    draws.metadata["variant"] = "conditional"
    draws.metadata["map_rounds"] = rounds
    return draws


# ---------------------------------------------------------------------------
# marginal variant


def fit_marginal(dataset: RegressionDataset, prior: vecchia.VecchiaPrecision,
                 hyper, cfg: HmcConfig, mesh, nbr_index,
                 mass_vecchia: vecchia.VecchiaPrecision | None = None,
                 sill_floor_rel: float = 1e-6) -> PosteriorDraws:
    """Empirical-Bayes marginal strategy.

    The error covariance Htilde = tau^2 C + diag(sigma^2) is assembled once
    from hyper-parameter estimates (``hyper`` provides psi, nu, tau2) and a
    per-vertex sill decomposition of the MAP residuals, then held fixed
    over MCMC; only the coefficient scales zeta^2 are resampled.
    """
    from .kernels import CorrelationModel

    stats = stream_sufficient_stats(dataset)
    est = map_optimize_working(dataset, prior, stats=stats)
    n = stats.n_images
    dg = stats.singular_values[:, None] * est.gamma
    rss = np.maximum(stats.sumsq - 2.0 * np.einsum("km,km->m", dg, stats.projected)
                     + np.einsum("km,km->m", dg, dg), 0.0)
    sill = rss / max(n - 1, 1)
    tau2 = float(hyper.tau2)
    sigma2 = np.maximum(sill - tau2, sill_floor_rel * np.maximum(sill, 1e-12))
    sigma2 = np.maximum(sigma2, 1e-12)

    init = _initial_state(stats, cfg)
    init.gamma = est.gamma.copy()
    init.sigma2 = sigma2.copy()
    init.zeta2 = np.maximum(est.zeta2, 1e-8)

    if tau2 <= 1e-12:
        # degenerate spatial error: Htilde is diagonal and the sampler is
        # exactly the working model with sigma^2 frozen at the sill
        return _run_chains(stats, prior, mass_vecchia or prior, cfg, init,
                           None, ("zeta2", "tau2"), {"variant": "marginal"})

    init.tau2 = tau2
    kernel = CorrelationModel(psi=float(hyper.psi), nu=float(hyper.nu))
    noise_vp = vecchia.build(mesh, nbr_index, kernel, scale=tau2, nugget=sigma2)
    noise = CorrelatedNoise(noise_vp, stats.projected)
    return _run_chains(stats, prior, mass_vecchia or prior, cfg, init, noise,
                       ("zeta2",), {"variant": "marginal"})
