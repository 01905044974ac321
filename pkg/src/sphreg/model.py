"""Regression data model: design factorization, image streaming, and the
sufficient statistics that let every posterior update run without touching
the original images.

The design matrix X (N x P) is factored as X = U diag(d) V' (thin SVD).
Coefficients are handled in the rotated basis gamma = (V' kron I_M) beta;
the data enter the likelihood only through

    projected = (U' kron I_M) y   (rank x M)   and
    sumsq(s)  = sum_i y_i(s)^2    (length M),

both accumulated in a single pass over the images.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

_SV_DROP_REL = 1e-10

OUTCOME_MAGIC = b"GPIS"
DRAWS_MAGIC = b"GPDR"


# ---------------------------------------------------------------------------
# image sources: anything with n_images / n_vertices that yields rows


class InMemoryImages:
    """Image source over an (N, M) array; rows are outcome images."""

    def __init__(self, values):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise DataError(f"expected a 2-D image array, got shape {values.shape}")
        self.values = values

    @property
    def n_images(self):
        return self.values.shape[0]

    @property
    def n_vertices(self):
        return self.values.shape[1]

    def __iter__(self):
        return iter(self.values)

    def require_array(self):
        return self.values


class BinaryImageFile:
    """Streaming reader for the documented binary outcome format.

    Layout: magic "GPIS", u32 version (=1), u64 N, u64 M, then N*M
    little-endian float64 values, one image (row) after another.
    """

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as fh:
            header = fh.read(24)
        if len(header) < 24 or header[:4] != OUTCOME_MAGIC:
            raise DataError(f"{path}: not an outcome binary (bad magic)")
        version, n, m = struct.unpack("<IQQ", header[4:24])
        if version != 1:
            raise DataError(f"{path}: unsupported outcome version {version}")
        self.n_images = int(n)
        self.n_vertices = int(m)

    def __iter__(self):
        row_bytes = 8 * self.n_vertices
        with open(self.path, "rb") as fh:
            fh.seek(24)
            for _ in range(self.n_images):
                buf = fh.read(row_bytes)
                if len(buf) < row_bytes:
                    raise DataError(f"{self.path}: truncated outcome file")
                yield np.frombuffer(buf, dtype="<f8")

    def require_array(self):
        return np.array(list(self))


class GeneratedImages:
    """Re-iterable image source backed by a generator factory.

    ``factory()`` must return a fresh iterator of N length-M rows each
    time; lets N >> memory cases stream without materializing.
    """

    def __init__(self, factory, n_images, n_vertices):
        self.factory = factory
        self.n_images = int(n_images)
        self.n_vertices = int(n_vertices)

    def __iter__(self):
        return iter(self.factory())

    def require_array(self):
        return np.array(list(self))


def write_outcome_binary(path, values) -> None:
    values = np.asarray(values, dtype=float)
    n, m = values.shape
    with open(path, "wb") as fh:
        fh.write(OUTCOME_MAGIC)
        fh.write(struct.pack("<IQQ", 1, n, m))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_outcome_csv(path) -> InMemoryImages:
    """CSV alternative: one image per row, no header."""
    values = np.loadtxt(path, delimiter=",", ndmin=2)
    return InMemoryImages(values)


def write_outcome_csv(path, values) -> None:
    np.savetxt(path, np.asarray(values, dtype=float), delimiter=",")


def read_covariates_csv(path):
    """Covariate CSV with header; first column is a subject id.

    Returns (ids, X, column_names).
    """
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if len(header) < 2:
        raise DataError(f"{path}: covariate file needs an id column plus covariates")
    raw = np.loadtxt(path, delimiter=",", skiprows=1, dtype=str, ndmin=2)
    ids = raw[:, 0]
    try:
        x = raw[:, 1:].astype(float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric covariate value ({exc})") from None
    return ids, x, header[1:]


def write_covariates_csv(path, ids, x, names) -> None:
    x = np.asarray(x, dtype=float)
    with open(path, "w") as fh:
        fh.write(",".join(["id"] + list(names)) + "\n")
        for i, row in zip(ids, x):
            fh.write(",".join([str(i)] + [repr(float(v)) for v in row]) + "\n")


def parse_config_file(path) -> dict:
    """Plain-text ``key=value`` config; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# design factorization and sufficient statistics


@dataclass
class RegressionDataset:
    """Design matrix with its thin orthogonal factorization plus outcomes."""

    x: np.ndarray               # (N, P)
    u: np.ndarray               # (N, rank)
    singular_values: np.ndarray  # (rank,)
    v: np.ndarray               # (P, rank)
    images: object              # image source (n_images == N, n_vertices == M)

    @property
    def n_images(self):
        return self.x.shape[0]

    @property
    def n_covariates(self):
        return self.x.shape[1]

    @property
    def rank(self):
        return self.singular_values.shape[0]

    @property
    def n_vertices(self):
        return self.images.n_vertices


def factorize_design(x: np.ndarray):
    """Thin SVD of the design; drops near-null singular directions.

    Returns (u, singular_values, v). Columns with singular value below
    1e-10 times the largest are dropped with a warning.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DataError(f"design must be a nonempty 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("design matrix contains non-finite entries")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    if s[0] <= 0:
        raise DataError("design matrix is identically zero")
    keep = s > _SV_DROP_REL * s[0]
    if not np.all(keep):
        warnings.warn(f"dropping {np.count_nonzero(~keep)} near-null design "
                      f"direction(s); effective rank {np.count_nonzero(keep)}",
                      stacklevel=2)
    return u[:, keep], s[keep], vt[keep].T


def make_dataset(x, images) -> RegressionDataset:
    if isinstance(images, np.ndarray):
        images = InMemoryImages(images)
    u, s, v = factorize_design(x)
    if images.n_images != u.shape[0]:
        raise DataError(f"design has {u.shape[0]} rows but source has "
                        f"{images.n_images} images")
    return RegressionDataset(x=np.asarray(x, dtype=float), u=u,
                             singular_values=s, v=v, images=images)


@dataclass
class SufficientStats:
    """Single-pass statistics: projected images, per-vertex energy, and the
    design factors needed to evaluate the likelihood without the data."""

    projected: np.ndarray        # (rank, M)
    sumsq: np.ndarray            # (M,)
    n_images: int
    singular_values: np.ndarray  # (rank,)
    v_matrix: np.ndarray         # (P, rank)

    @property
    def rank(self):
        return self.singular_values.shape[0]

    @property
    def n_vertices(self):
        return self.sumsq.shape[0]

    @property
    def n_covariates(self):
        return self.v_matrix.shape[0]


def stream_sufficient_stats(dataset: RegressionDataset, images=None) -> SufficientStats:
    """Accumulate the sufficient statistics in one pass over the images."""
    source = dataset.images if images is None else images
    m = source.n_vertices if hasattr(source, "n_vertices") else dataset.n_vertices
    u = dataset.u
    n, rank = u.shape
    projected = np.zeros((rank, m))
    sumsq = np.zeros(m)
    count = 0
    for i, row in enumerate(source):
        if i >= n:
            raise DataError(f"more images than design rows (expected {n})")
        row = np.asarray(row, dtype=float)
        if row.shape != (m,):
            raise DataError(f"image {i} has length {row.shape}, expected {m}")
        if not np.all(np.isfinite(row)):
            raise DataError(f"image {i} contains non-finite values")
        projected += np.outer(u[i], row)
        sumsq += row * row
        count += 1
    if count != n:
        raise DataError(f"expected {n} images, streamed {count}")
    return SufficientStats(projected=projected, sumsq=sumsq, n_images=n,
                           singular_values=dataset.singular_values.copy(),
                           v_matrix=dataset.v.copy())


# ---------------------------------------------------------------------------
# chain state and likelihood pieces


@dataclass
class ChainState:
    """Current sampler state: rotated coefficients plus variance components."""

    gamma: np.ndarray    # (rank, M)
    sigma2: np.ndarray   # (M,)
    xi: float
    tau2: float
    zeta2: np.ndarray    # (P,)
    step_size: float = 0.1

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        self.zeta2 = np.asarray(self.zeta2, dtype=float)
        self.validate()

    def validate(self):
        if not np.all(np.isfinite(self.gamma)):
            raise ValueError("gamma contains non-finite values")
        for name, val in (("sigma2", self.sigma2), ("zeta2", self.zeta2)):
            if np.any(np.asarray(val) <= 0) or not np.all(np.isfinite(val)):
                raise ValueError(f"{name} must be strictly positive and finite")
        if not (self.xi > 0 and np.isfinite(self.xi)):
            raise ValueError("xi must be strictly positive and finite")
        if not (self.tau2 > 0 and np.isfinite(self.tau2)):
            raise ValueError("tau2 must be strictly positive and finite")

    def copy(self) -> "ChainState":
        return replace(self, gamma=self.gamma.copy(), sigma2=self.sigma2.copy(),
                       zeta2=self.zeta2.copy())


def beta_from_gamma(stats: SufficientStats, gamma: np.ndarray) -> np.ndarray:
    """Rotate (rank, M) gamma back to (P, M) beta."""
    return stats.v_matrix @ gamma


def gamma_from_beta(stats: SufficientStats, beta: np.ndarray) -> np.ndarray:
    return stats.v_matrix.T @ beta


def _rss_raw(stats: SufficientStats, gamma: np.ndarray) -> np.ndarray:
    d = stats.singular_values
    dg = d[:, None] * gamma
    return stats.sumsq - 2.0 * np.einsum("km,km->m", gamma, d[:, None] * stats.projected) \
        + np.einsum("km,km->m", dg, dg)


def residual_ss_per_vertex(stats: SufficientStats, state: ChainState) -> np.ndarray:
    """Per-vertex residual sum of squares from the streamed statistics.

    Mathematically nonnegative; clamped at zero against roundoff in the
    exactly-interpolating case.
    """
    return np.maximum(_rss_raw(stats, state.gamma), 0.0)


def working_loglik(stats: SufficientStats, state: ChainState) -> float:
    """Log likelihood of the independent-error model (constant omitted).

    Includes the -(N/2) sum log sigma2(s) normalization so Gibbs and
    Metropolis ratios over the variances are correct.
    """
    if np.any(state.sigma2 <= 0):
        raise ValueError("sigma2 must be strictly positive")
    rss = _rss_raw(stats, state.gamma)
    return float(-0.5 * np.sum(rss / state.sigma2)
                 - 0.5 * stats.n_images * np.sum(np.log(state.sigma2)))
