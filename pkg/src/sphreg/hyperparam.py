"""Empirical-Bayes estimation of the correlation and variance
hyper-parameters (psi, nu, tau^2, sigma0^2).

The objective is the marginal likelihood of a surrogate intercept-only
model with homogeneous white noise,

    -(N/2) logdet(tau^2 C + sigma0^2 I)
    - (1/2) sum_i y_i' (tau^2 C + sigma0^2 I)^{-1} y_i,

evaluated through a sparse factored build of the covariance (log
determinant from the conditional variances, quadratic forms through the
sparse precision). Images must be mean-centered beforehand;
``estimate_hyper`` centers copies itself.

Maximization is derivative-free: a bound-constrained trust-region method
that interpolates a diagonal quadratic model on 2n+1 points (in log /
logit transformed coordinates), with a Nelder-Mead fallback when the
model cannot be built.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import Bounds, minimize

from . import vecchia
from .kernels import CorrelationModel, fwhm_to_psi

DEFAULT_BOUNDS = {
    "psi": (1e-4, 10.0),
    "nu": (0.2, 2.0),
    "tau2": (1e-8, 1e4),
    "sigma2_0": (1e-8, 1e4),
}

_PARAM_ORDER = ("psi", "nu", "tau2", "sigma2_0")
_LOGIT_CLIP = 12.0


@dataclass
class HyperEstimate:
    """Optimum of the surrogate marginal likelihood."""

    psi: float
    nu: float
    tau2: float
    sigma2_0: float
    objective: float
    evaluations: int
    converged: bool


def surrogate_loglik(images, mesh, nbr_index, psi: float, nu: float,
                     tau2: float, sigma2_0: float) -> float:
    """Surrogate marginal log likelihood (integration constant omitted).

    Images are assumed mean-centered. Returns -inf when the sparse
    covariance build fails, so optimizers treat the point as infeasible.
    """
    if not sigma2_0 > 0:
        raise ValueError(f"sigma2_0 must be positive, got {sigma2_0}")
    if tau2 < 0:
        raise ValueError(f"tau2 must be nonnegative, got {tau2}")
    y = np.asarray(images, dtype=float)
    if y.ndim != 2 or y.shape[1] != mesh.n_vertices:
        raise ValueError(f"images must be (N, {mesh.n_vertices}), got {y.shape}")
    n, m = y.shape
    if tau2 == 0.0:
        # independence limit: iid Gaussian likelihood
        return float(-0.5 * n * m * np.log(sigma2_0) - np.sum(y * y) / (2.0 * sigma2_0))
    kernel = CorrelationModel(psi=psi, nu=nu)
    try:
        vp = vecchia.build(mesh, nbr_index, kernel, scale=tau2,
                           nugget=np.full(m, sigma2_0))
    except vecchia.BuildError:
        return -np.inf
    quads = vp.quad_form_many(y)
    return float(-0.5 * n * vp.log_det() - 0.5 * np.sum(quads))


# ---------------------------------------------------------------------------
# bound-constrained derivative-free trust region (diagonal quadratic model)


class _ModelFailure(RuntimeError):
    pass


def _fit_coordinate_model(f_center, f_plus, f_minus, a, b):
    """Gradient/curvature of a 1-D quadratic through three points at
    offsets +a, 0, -b (either offset may be absent)."""
    if a > 0.0 and b > 0.0:
        h = 2.0 * (b * (f_plus - f_center) + a * (f_minus - f_center)) / (a * b * (a + b))
        g = (f_plus - f_center) / a - 0.5 * h * a
    elif a > 0.0:
        g, h = (f_plus - f_center) / a, 0.0
    elif b > 0.0:
        g, h = (f_center - f_minus) / b, 0.0
    else:
        g, h = 0.0, 0.0
    return g, h


def _solve_box_step(g, h, lo, hi):
    """Minimize g s + h s^2 / 2 per coordinate over [lo, hi] (separable)."""
    step = np.zeros_like(g)
    for i in range(g.size):
        candidates = [lo[i], hi[i]]
        if h[i] > 0.0:
            interior = -g[i] / h[i]
            if lo[i] < interior < hi[i]:
                candidates.append(interior)
        values = [g[i] * s + 0.5 * h[i] * s * s for s in candidates]
        step[i] = candidates[int(np.argmin(values))]
    return step


def minimize_trust_region(fun, x0, lower, upper, max_evals: int = 2000,
                          radius_tol: float = 1e-6, initial_radius: float = 0.25):
    """Derivative-free bound-constrained minimization.

    Interpolates a diagonal quadratic model on 2n+1 axis points, takes the
    separable box-constrained trust-region step, and adapts the radius by
    the usual agreement ratio. Never evaluates outside [lower, upper].
    Raises _ModelFailure if no finite model can be built.
    """
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    n = x.size
    evals = 0

    def feval(pt):
        nonlocal evals
        evals += 1
        val = fun(pt)
        return float(val) if np.isfinite(val) else np.inf

    fx = feval(x)
    if not np.isfinite(fx):
        raise _ModelFailure("objective not finite at the start point")
    best_x, best_f = x.copy(), fx
    radius = initial_radius

    while radius > radius_tol and evals + 2 * n + 1 <= max_evals:
        g = np.zeros(n)
        h = np.zeros(n)
        model_ok = True
        for i in range(n):
            a = min(radius, upper[i] - x[i])
            b = min(radius, x[i] - lower[i])
            f_plus = f_minus = fx
            if a > 1e-12:
                probe = x.copy()
                probe[i] += a
                f_plus = feval(probe)
            else:
                a = 0.0
            if b > 1e-12:
                probe = x.copy()
                probe[i] -= b
                f_minus = feval(probe)
            else:
                b = 0.0
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                model_ok = False
                break
            g[i], h[i] = _fit_coordinate_model(fx, f_plus, f_minus, a, b)
        if not model_ok:
            radius *= 0.5
            if radius <= radius_tol:
                raise _ModelFailure("quadratic model not finite near the iterate")
            continue

        lo = np.maximum(-radius, lower - x)
        hi = np.minimum(radius, upper - x)
        step = _solve_box_step(g, h, lo, hi)
        predicted = -(float(g @ step) + 0.5 * float(np.sum(h * step * step)))
        if predicted <= 1e-15 * (1.0 + abs(fx)):
            radius *= 0.5
            continue
        f_new = feval(x + step)
        ratio = (fx - f_new) / predicted if np.isfinite(f_new) else -1.0
        if ratio >= 0.1:
            x = x + step
            fx = f_new
            if fx < best_f:
                best_x, best_f = x.copy(), fx
        if ratio >= 0.7 and np.max(np.abs(step)) >= 0.9 * radius:
            radius = min(2.0 * radius, 10.0)
        elif ratio < 0.25:
            radius *= 0.5

    return best_x, best_f, evals, radius <= radius_tol


# ---------------------------------------------------------------------------
# parameter transforms and the public estimator


class _Transform:
    """Log scale for psi/tau2/sigma2_0, scaled logit for nu; coordinates
    with collapsed bounds are frozen at their value."""

    def __init__(self, bounds: dict):
        self.bounds = bounds
        self.free = [k for k in _PARAM_ORDER if bounds[k][0] < bounds[k][1]]
        self.fixed = {k: bounds[k][0] for k in _PARAM_ORDER if bounds[k][0] >= bounds[k][1]}

    def to_internal(self, params: dict) -> np.ndarray:
        u = []
        for k in self.free:
            lo, hi = self.bounds[k]
            val = min(max(params[k], lo), hi)
            if k == "nu":
                frac = (val - lo) / (hi - lo)
                frac = min(max(frac, 1e-9), 1.0 - 1e-9)
                u.append(np.clip(np.log(frac / (1.0 - frac)), -_LOGIT_CLIP, _LOGIT_CLIP))
            else:
                u.append(np.log(val))
        return np.array(u)

    def to_params(self, u: np.ndarray) -> dict:
        params = dict(self.fixed)
        for k, val in zip(self.free, u):
            lo, hi = self.bounds[k]
            if k == "nu":
                params[k] = lo + (hi - lo) / (1.0 + np.exp(-val))
            else:
                params[k] = float(np.exp(val))
        return params

    def internal_bounds(self):
        lo, hi = [], []
        for k in self.free:
            blo, bhi = self.bounds[k]
            if k == "nu":
                lo.append(-_LOGIT_CLIP)
                hi.append(_LOGIT_CLIP)
            else:
                lo.append(np.log(blo))
                hi.append(np.log(bhi))
        return np.array(lo), np.array(hi)


def default_start(images) -> dict:
    """Moderate smoothness and an even split of the pooled variance."""
    pooled = float(np.var(np.asarray(images)))
    half = max(0.5 * pooled, 1e-6)
    return {"psi": fwhm_to_psi(6.0, 1.5), "nu": 1.5, "tau2": half, "sigma2_0": half}


def estimate_hyper(images, mesh, nbr_index, bounds: dict | None = None,
                   start: dict | None = None, max_evals: int = 2000,
                   radius_tol: float = 1e-6) -> HyperEstimate:
    """Maximize the surrogate marginal likelihood over (psi, nu, tau2,
    sigma0^2) within box bounds.

    Bounds entries with lo == hi pin that parameter. The returned estimate
    stores the achieved objective, which never falls below the start's.
    """
    y = np.asarray(images, dtype=float)
    y = y - y.mean(axis=1, keepdims=True)  # center each image
    merged = dict(DEFAULT_BOUNDS)
    if bounds:
        merged.update(bounds)
    for k, (lo, hi) in merged.items():
        if lo > hi:
            raise ValueError(f"bound for {k} has lo > hi")
    transform = _Transform(merged)
    params0 = default_start(y)
    if start:
        params0.update(start)
    for k in _PARAM_ORDER:
        lo, hi = merged[k]
        if not lo <= params0[k] <= hi:
            params0[k] = min(max(params0[k], lo), hi)
    if not np.isfinite(surrogate_loglik(y, mesh, nbr_index, **params0)):
        raise ValueError("no feasible start: surrogate likelihood not finite "
                         "at the initial parameters")

    n_evals = 0

    def objective(u):
        nonlocal n_evals
        n_evals += 1
        return -surrogate_loglik(y, mesh, nbr_index, **transform.to_params(u))

    u0 = transform.to_internal(params0)
    f0 = objective(u0)
    lo, hi = transform.internal_bounds()
    if len(u0) == 0:
        params = transform.to_params(u0)
        return HyperEstimate(**params, objective=-f0, evaluations=n_evals, converged=True)

    try:
        u_best, f_best, _, converged = minimize_trust_region(
            objective, u0, lo, hi, max_evals=max_evals, radius_tol=radius_tol)
    except _ModelFailure:
        result = minimize(objective, np.clip(u0, lo, hi), method="Nelder-Mead",
                          bounds=Bounds(lo, hi),
                          options={"maxfev": max_evals, "xatol": radius_tol,
                                   "fatol": 1e-10})
        u_best, f_best, converged = result.x, float(result.fun), bool(result.success)

    if f_best > f0:  # never return worse than the start
        u_best, f_best = u0, f0
    params = transform.to_params(u_best)
    achieved = surrogate_loglik(y, mesh, nbr_index, **params)
    return HyperEstimate(**params, objective=float(achieved),
                         evaluations=n_evals, converged=converged)


def write_hyper_file(est: HyperEstimate, path) -> None:
    """key=value file consumed by the marginal-variant fit."""
    with open(path, "w") as fh:
        for key in _PARAM_ORDER:
            fh.write(f"hyper.{key}={getattr(est, key)!r}\n")
        fh.write(f"hyper.objective={est.objective!r}\n")


def read_hyper_file(path) -> HyperEstimate:
    from .model import parse_config_file

    cfg = parse_config_file(path)
    try:
        values = {k: float(cfg[f"hyper.{k}"]) for k in _PARAM_ORDER}
    except KeyError as exc:
        raise ValueError(f"{path}: missing hyper-parameter key {exc}") from None
    return HyperEstimate(**values, objective=float(cfg.get("hyper.objective", np.nan)),
                         evaluations=0, converged=True)
