"""Posterior summarization and decision procedures.

Covers pointwise credible intervals, simultaneous credible bands over all
vertices (the multiplier m is the empirical quantile of the max
standardized deviation, so a fixed fraction of draws lies entirely inside
the band), thresholded activation maps, binary-decision scoring (MCC),
estimation error (MRSE), rank-normalized split R-hat convergence
diagnostics (folded and non-folded), and posterior predictive
goodness-of-fit summaries by brain region.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import rankdata

from .errors import DataError
from .model import DRAWS_MAGIC

SCALE_FLOOR = 1e-12

ACTIVATION_LABELS = ("positive-core", "negative-core", "positive-mean",
                     "negative-mean", "null")


@dataclass
class PosteriorDraws:
    """Retained coefficient draws with chain provenance.

    beta has shape (S, P, M); chain_ids maps each draw to its chain;
    variance_traces holds whatever per-draw variance samples the fitter
    produced (e.g. "sigma2" (S, M), "tau2" (S,), "zeta2" (S, P)).
    """

    beta: np.ndarray
    chain_ids: np.ndarray
    variance_traces: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.ndim != 3 or self.beta.shape[0] < 2:
            raise ValueError(f"draws must be (S>=2, P, M), got {self.beta.shape}")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("draws contain non-finite values")
        self.chain_ids = np.asarray(self.chain_ids, dtype=int)
        if self.chain_ids.shape != (self.beta.shape[0],):
            raise ValueError("chain_ids must label every draw")

    @property
    def n_draws(self):
        return self.beta.shape[0]

    @property
    def n_coefficients(self):
        return self.beta.shape[1]

    @property
    def n_vertices(self):
        return self.beta.shape[2]

    @property
    def n_chains(self):
        return int(self.chain_ids.max()) + 1

    def mean(self) -> np.ndarray:
        return self.beta.mean(axis=0)

    def sd(self) -> np.ndarray:
        return self.beta.std(axis=0, ddof=1)

    def by_chain(self, coefficient: int, vertex: int) -> np.ndarray:
        """(n_chains, draws_per_chain) view of one scalar's trace."""
        series = [self.beta[self.chain_ids == c, coefficient, vertex]
                  for c in range(self.n_chains)]
        length = min(len(s) for s in series)
        return np.array([s[:length] for s in series])


@dataclass
class CredibleBand:
    """Symmetric band center +- multiplier * scale; ``level`` is the miss
    probability alpha (an 80% band has level 0.2)."""

    center: np.ndarray
    scale: np.ndarray
    multiplier: float
    level: float

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.multiplier * self.scale

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.multiplier * self.scale

    def contains_everywhere(self, f) -> bool:
        f = np.asarray(f, dtype=float)
        return bool(np.all(np.abs(f - self.center) <= self.multiplier * self.scale))


def pointwise_intervals(draws, level: float):
    """Equal-tailed empirical intervals per coefficient and vertex.

    ``draws`` is (S, ...) with S >= 20; returns (lo, hi) of the trailing
    shape. ``level`` is the coverage (e.g. 0.95).
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    draws = np.asarray(draws, dtype=float)
    if draws.shape[0] < 20:
        raise ValueError(f"need at least 20 draws, got {draws.shape[0]}")
    tail = (1.0 - level) / 2.0
    lo = np.quantile(draws, tail, axis=0)
    hi = np.quantile(draws, 1.0 - tail, axis=0)
    return lo, hi


def simultaneous_band(draws, level: float = 0.2, robust: bool = False) -> CredibleBand:
    """Simultaneous credible band for one coefficient from (S, M) draws.

    The multiplier is the empirical (1 - level) quantile (inverted-cdf
    convention) of max_s |draw(s) - center(s)| / scale(s), so a
    (1 - level) fraction of draws, within 1/S, lies inside the band at
    every vertex jointly. ``robust`` switches center/scale to median/MAD.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise ValueError(f"expected (S, M) draws, got {draws.shape}")
    if draws.shape[0] < 50:
        raise ValueError(f"need at least 50 draws, got {draws.shape[0]}")
    if robust:
        center = np.median(draws, axis=0)
        scale = 1.4826 * np.median(np.abs(draws - center), axis=0)
    else:
        center = draws.mean(axis=0)
        scale = draws.std(axis=0, ddof=1)
    scale = np.maximum(scale, SCALE_FLOOR)
    ratios = np.max(np.abs(draws - center) / scale, axis=1)
    mult = float(np.quantile(ratios, 1.0 - level, method="inverted_cdf"))
    return CredibleBand(center=center, scale=scale, multiplier=mult, level=level)


def decide_nonzero(band: CredibleBand) -> np.ndarray:
    """True where the band excludes zero."""
    return (band.lo > 0.0) | (band.hi < 0.0)


def activation_map(draws, threshold: float, level: float = 0.2) -> np.ndarray:
    """Label vertices by simultaneous evidence that |effect| > threshold.

    core: the whole band lies beyond the (signed) threshold;
    mean: only the center exceeds it; null otherwise.
    """
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    band = simultaneous_band(draws, level)
    labels = np.full(band.center.shape[0], "null", dtype="<U13")
    labels[band.center > threshold] = "positive-mean"
    labels[band.center < -threshold] = "negative-mean"
    labels[band.lo > threshold] = "positive-core"
    labels[band.hi < -threshold] = "negative-core"
    return labels


def mcc(decisions, truth) -> float:
    """Matthews correlation coefficient; 0 when any margin is empty."""
    decisions = np.asarray(decisions, dtype=bool).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    if decisions.size == 0 or decisions.shape != truth.shape:
        raise ValueError("decisions and truth must be equal-length and nonempty")
    tp = float(np.sum(decisions & truth))
    tn = float(np.sum(~decisions & ~truth))
    fp = float(np.sum(decisions & ~truth))
    fn = float(np.sum(~decisions & truth))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0.0:
        return 0.0
    return (tp * tn - fp * fn) / np.sqrt(denom)


def mrse(estimate, truth) -> float:
    """Relative squared error as a percentage: 100 * |e - t|^2 / |t|^2."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    denom = float(np.sum(truth**2))
    if denom == 0.0:
        raise ValueError("truth field has zero norm")
    return 100.0 * float(np.sum((estimate - truth) ** 2)) / denom


# ---------------------------------------------------------------------------
# convergence diagnostics


def _classic_split_rhat(z: np.ndarray) -> float:
    """Split-half R-hat on already-transformed chains (k, n)."""
    k, n = z.shape
    half = n // 2
    splits = np.concatenate([z[:, :half], z[:, half:2 * half]], axis=0)
    n_s = splits.shape[1]
    within = splits.var(axis=1, ddof=1).mean()
    between = n_s * splits.mean(axis=1).var(ddof=1)
    if within <= 0.0:
        return 1.0
    return float(np.sqrt(((n_s - 1.0) / n_s * within + between / n_s) / within))


def split_rhat(chains, folded: bool = False) -> float:
    """Rank-normalized split R-hat for one scalar.

    ``chains`` is (n_chains, n_draws) with at least 2 chains of >= 4
    draws. The folded variant applies the statistic to |x - median|,
    probing tail rather than location convergence. Constant input returns
    exactly 1 by convention.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 4:
        raise ValueError("need >= 2 chains with >= 4 draws each")
    if np.ptp(chains) == 0.0:
        return 1.0
    x = np.abs(chains - np.median(chains)) if folded else chains
    ranks = rankdata(x.ravel(), method="average").reshape(x.shape)
    z = ndtri((ranks - 0.375) / (x.size + 0.25))
    return _classic_split_rhat(z)


def rhat_table(draws: PosteriorDraws) -> dict:
    """Folded and non-folded split R-hat per coefficient and vertex."""
    p, m = draws.n_coefficients, draws.n_vertices
    out = {"plain": np.empty((p, m)), "folded": np.empty((p, m))}
    for j in range(p):
        for s in range(m):
            series = draws.by_chain(j, s)
            out["plain"][j, s] = split_rhat(series, folded=False)
            out["folded"][j, s] = split_rhat(series, folded=True)
    return out


# ---------------------------------------------------------------------------
# posterior predictive goodness of fit


_GOF_STATS = {
    "mean": lambda v: float(np.mean(v)),
    "q10": lambda v: float(np.quantile(v, 0.10)),
    "q90": lambda v: float(np.quantile(v, 0.90)),
}


@dataclass
class GofResult:
    table: list                      # one dict per (region, statistic)
    residuals: np.ndarray            # (N, M) standardized residuals
    ks_by_region: dict               # region id -> KS distance to N(0,1)
    best_region: int
    median_region: int
    worst_region: int


def _ks_to_standard_normal(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    n = v.size
    cdf = ndtr(v)
    upper = np.max(np.arange(1, n + 1) / n - cdf)
    lower = np.max(cdf - np.arange(0, n) / n)
    return float(max(upper, lower))


def posterior_predictive_gof(draws: PosteriorDraws, dataset, region_labels,
                             statistics=("mean", "q10", "q90"),
                             n_replicates: int = 200,
                             rng: np.random.Generator | None = None) -> GofResult:
    """Compare observed per-region summaries against replicates simulated
    from the independent-error likelihood at sampled parameters.

    For each region and statistic the table reports the observed value,
    the posterior predictive mean, their absolute difference, and the
    fraction of replicates at or below the observed value (a tail
    probability near 0 or 1 flags misfit). Standardized residuals
    (y - x'beta_bar) / sigma_bar are scored per region by
    Kolmogorov-Smirnov distance to a standard normal.
    """
    if region_labels is None:
        raise DataError("region labels are required for regional summaries")
    region_labels = np.asarray(region_labels, dtype=int)
    if "sigma2" not in draws.variance_traces:
        raise DataError("draws lack a sigma2 trace; goodness-of-fit needs the "
                        "independent-error variant")
    rng = np.random.default_rng(0) if rng is None else rng
    y = dataset.images.require_array()
    x = dataset.x
    n, m = y.shape
    if region_labels.shape != (m,):
        raise DataError("region labels must have one entry per vertex")
    for name in statistics:
        if name not in _GOF_STATS:
            raise ValueError(f"unknown statistic {name!r}")

    sigma2 = draws.variance_traces["sigma2"]
    pick = np.linspace(0, draws.n_draws - 1, min(n_replicates, draws.n_draws)).astype(int)
    regions = np.unique(region_labels)
    masks = {r: region_labels == r for r in regions}

    observed = {(r, s): _GOF_STATS[s](y[:, masks[r]]) for r in regions for s in statistics}
    rep_values = {key: [] for key in observed}
    for t in pick:
        mean_t = x @ draws.beta[t]
        y_rep = mean_t + rng.standard_normal((n, m)) * np.sqrt(sigma2[t])
        for r in regions:
            block = y_rep[:, masks[r]]
            for s in statistics:
                rep_values[(r, s)].append(_GOF_STATS[s](block))

    table = []
    for r in regions:
        for s in statistics:
            reps = np.asarray(rep_values[(r, s)])
            obs = observed[(r, s)]
            table.append({
                "region": int(r), "statistic": s, "observed": obs,
                "predictive_mean": float(reps.mean()),
                "abs_difference": float(abs(obs - reps.mean())),
                "tail_prob": float(np.mean(reps <= obs)),
            })

    beta_bar = draws.mean()
    sigma_bar = np.sqrt(sigma2.mean(axis=0))
    residuals = (y - x @ beta_bar) / np.maximum(sigma_bar, SCALE_FLOOR)
    ks = {int(r): _ks_to_standard_normal(residuals[:, masks[r]].ravel()) for r in regions}
    ranked = sorted(ks, key=ks.get)
    return GofResult(table=table, residuals=residuals, ks_by_region=ks,
                     best_region=ranked[0], median_region=ranked[len(ranked) // 2],
                     worst_region=ranked[-1])


# ---------------------------------------------------------------------------
# draws persistence and summaries


def save_draws(draws: PosteriorDraws, prefix) -> None:
    """Write draws as the documented binary plus sidecar metadata.

    ``<prefix>.gpdr``: magic "GPDR", u32 version, u64 S/P/M/n_chains,
    then i64 chain ids and f64 draws (S, P, M) row-major.
    ``<prefix>.meta.json``: metadata; ``<prefix>.var.npz``: variance traces.
    """
    prefix = str(prefix)
    s, p, m = draws.beta.shape
    with open(prefix + ".gpdr", "wb") as fh:
        fh.write(DRAWS_MAGIC)
        fh.write(struct.pack("<IQQQQ", 1, s, p, m, draws.n_chains))
        fh.write(np.ascontiguousarray(draws.chain_ids, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(draws.beta, dtype="<f8").tobytes())
    with open(prefix + ".meta.json", "w") as fh:
        json.dump(draws.metadata, fh, indent=1, default=str)
    if draws.variance_traces:
        np.savez_compressed(prefix + ".var.npz", **draws.variance_traces)


def load_draws(prefix) -> PosteriorDraws:
    import os

    prefix = str(prefix)
    with open(prefix + ".gpdr", "rb") as fh:
        header = fh.read(40)
        if header[:4] != DRAWS_MAGIC:
            raise DataError(f"{prefix}.gpdr: bad draws magic")
        version, s, p, m, _ = struct.unpack("<IQQQQ", header[4:40])
        if version != 1:
            raise DataError(f"{prefix}.gpdr: unsupported version {version}")
        chain_ids = np.frombuffer(fh.read(8 * s), dtype="<i8")
        beta = np.frombuffer(fh.read(8 * s * p * m), dtype="<f8").reshape(s, p, m)
    metadata, traces = {}, {}
    if os.path.exists(prefix + ".meta.json"):
        with open(prefix + ".meta.json") as fh:
            metadata = json.load(fh)
    if os.path.exists(prefix + ".var.npz"):
        with np.load(prefix + ".var.npz") as data:
            traces = {k: data[k] for k in data.files}
    return PosteriorDraws(beta=beta.copy(), chain_ids=chain_ids.copy(),
                          variance_traces=traces, metadata=metadata)


def write_summary_csv(draws: PosteriorDraws, path, band_level: float = 0.2,
                      activation_threshold: float = 0.0) -> None:
    """Per-vertex posterior summary: mean, sd, outer/inner quantiles, the
    simultaneous band, and the activation label."""
    mean = draws.mean()
    sd = draws.sd()
    lo95, hi95 = pointwise_intervals(draws.beta, 0.95)
    lo80, hi80 = pointwise_intervals(draws.beta, 0.80)
    with open(path, "w") as fh:
        fh.write("coefficient,vertex,mean,sd,q2.5,q10,band_lo,band_hi,q90,q97.5,label\n")
        for j in range(draws.n_coefficients):
            band = simultaneous_band(draws.beta[:, j, :], band_level)
            labels = activation_map(draws.beta[:, j, :], activation_threshold, band_level)
            for s in range(draws.n_vertices):
                fh.write(f"{j},{s},{mean[j, s]!r},{sd[j, s]!r},{lo95[j, s]!r},"
                         f"{lo80[j, s]!r},{band.lo[s]!r},{band.hi[s]!r},"
                         f"{hi80[j, s]!r},{hi95[j, s]!r},{labels[s]}\n")


def write_diagnostics_csv(draws: PosteriorDraws, path) -> dict:
    """R-hat (plain and folded) per coefficient-vertex plus the worst cases."""
    table = rhat_table(draws)
    with open(path, "w") as fh:
        fh.write("coefficient,vertex,rhat,rhat_folded\n")
        for j in range(draws.n_coefficients):
            for s in range(draws.n_vertices):
                fh.write(f"{j},{s},{table['plain'][j, s]!r},{table['folded'][j, s]!r}\n")
    worst = {
        "max_rhat": float(table["plain"].max()),
        "max_rhat_folded": float(table["folded"].max()),
        "worst_vertex": [int(v) for v in
                         np.unravel_index(int(np.argmax(table["folded"])),
                                          table["folded"].shape)],
    }
    return worst
