"""Sparse factored GP precision from ordered conditional regressions.

The dense covariance S (a correlation or covariance function evaluated on
geodesic distances, optionally plus a heteroscedastic diagonal) is replaced
by S_tilde with sparse precision

    S_tilde^{-1} = (I - A)' D^{-1} (I - A),

where row i of the strictly lower triangular A regresses vertex i on its
prior-ordered neighbors within a fixed physical radius, and D holds the
positive conditional variances. With complete neighborhoods the
approximation is exact (the factorization is then a permuted Cholesky).

All public operations take and return vectors in the original vertex
order; the build ordering is internal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import splu

from .errors import BuildError
from .kernels import CorrelationModel
from .sphere import NeighborIndex, SphericalMesh, arc_between

DEFAULT_MAX_NEIGHBORS = 64

# Local Gram solves escalate diagonal jitter (relative to the mean
# diagonal) through these levels before giving up.
_JITTER_LEVELS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass
class VecchiaPrecision:
    """Sparse factored approximation of a spatial covariance inverse."""

    order: np.ndarray            # ordered position -> original vertex id
    inv_order: np.ndarray        # original vertex id -> ordered position
    i_minus_a: sp.csr_matrix     # unit lower triangular (ordered basis)
    cond_var: np.ndarray         # conditional variances (ordered basis)
    radius_mm: float
    kernel: CorrelationModel
    scale: float = 1.0
    has_nugget: bool = False
    mesh_hash: str = ""
    ordering: str = "sweep"
    _lu: object = field(default=None, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.cond_var.shape[0]

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_lu"] = None  # SuperLU handles do not pickle; rebuilt lazily
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)

    def _factor(self):
        if self._lu is None:
            # (I - A) is already triangular; NATURAL ordering keeps L = I - A.
            self._lu = splu(self.i_minus_a.tocsc(), permc_spec="NATURAL",
                            diag_pivot_thresh=0.0)
        return self._lu

    def _to_ordered(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.n_vertices:
            raise ValueError(f"expected last axis {self.n_vertices}, got {v.shape}")
        return v[..., self.order]

    def quad_form(self, v) -> float:
        """v' S_tilde^{-1} v (>= 0, zero iff v == 0)."""
        vo = self._to_ordered(v)
        w = self.i_minus_a @ vo
        return float(np.sum(w * w / self.cond_var))

    def quad_form_many(self, v) -> np.ndarray:
        """Row-wise quadratic forms for a (k, M) batch."""
        vo = self._to_ordered(v).T
        w = self.i_minus_a @ vo
        return np.sum(w * w / self.cond_var[:, None], axis=0)

    def log_det(self) -> float:
        """log det of the implied covariance S_tilde."""
        return float(np.sum(np.log(self.cond_var)))

    def apply_precision(self, v) -> np.ndarray:
        """S_tilde^{-1} v via two sparse triangular passes (last axis = vertices)."""
        vo = self._to_ordered(v).T
        w = self.i_minus_a @ vo
        w /= self.cond_var[:, None] if w.ndim == 2 else self.cond_var
        out = self.i_minus_a.T @ w
        return out.T[..., self.inv_order]

    def apply_covariance(self, v) -> np.ndarray:
        """S_tilde v via two sparse triangular solves; inverse of apply_precision."""
        vo = np.ascontiguousarray(self._to_ordered(v).T)
        lu = self._factor()
        z = lu.solve(vo, trans="T")
        z *= self.cond_var[:, None] if z.ndim == 2 else self.cond_var
        out = lu.solve(z, trans="N")
        return out.T[..., self.inv_order]

    def sample(self, scale_sd: float, rng: np.random.Generator, size=None) -> np.ndarray:
        """Draw from N(0, scale_sd**2 * S_tilde); exact under complete neighborhoods."""
        if not scale_sd > 0:
            raise ValueError(f"scale must be positive, got {scale_sd}")
        shape = (self.n_vertices,) if size is None else (size, self.n_vertices)
        eps = rng.standard_normal(shape)
        w = np.ascontiguousarray((eps * np.sqrt(self.cond_var)).T)
        out = self._factor().solve(w, trans="N")
        return scale_sd * out.T[..., self.inv_order]

    def color_precision_noise(self, eps) -> np.ndarray:
        """Map iid standard normals to N(0, S_tilde^{-1}) (momentum draws)."""
        eo = np.ascontiguousarray(self._to_ordered(eps).T)
        w = self.i_minus_a.T @ (eo / np.sqrt(self.cond_var)[:, None] if eo.ndim == 2
                                else eo / np.sqrt(self.cond_var))
        return w.T[..., self.inv_order]

    def precision_csr(self) -> sp.csr_matrix:
        """Explicit (I-A)' D^{-1} (I-A) in the original vertex order."""
        ia = self.i_minus_a
        p_ord = (ia.T.multiply(1.0 / self.cond_var) @ ia).tocsr()
        return p_ord[self.inv_order, :][:, self.inv_order].tocsr()

    def dense_precision(self) -> np.ndarray:
        return self.precision_csr().toarray()


def sweep_ordering(mesh: SphericalMesh) -> np.ndarray:
    """Vertices sorted by geodesic distance from vertex 0 (ties by id)."""
    d = mesh.distances_from(0)
    return np.lexsort((np.arange(mesh.n_vertices), d))


def maxmin_ordering(mesh: SphericalMesh) -> np.ndarray:
    """Greedy max-min ordering starting from vertex 0."""
    m = mesh.n_vertices
    order = np.empty(m, dtype=np.int64)
    order[0] = 0
    mindist = mesh.distances_from(0)
    mindist[0] = -np.inf
    for k in range(1, m):
        nxt = int(np.argmax(mindist))
        order[k] = nxt
        mindist = np.minimum(mindist, mesh.distances_from(nxt))
        mindist[nxt] = -np.inf
    return order

_ORDERINGS = {"sweep": sweep_ordering, "maxmin": maxmin_ordering}


def build(mesh: SphericalMesh, nbr_index: NeighborIndex, kernel: CorrelationModel,
          scale: float = 1.0, nugget=None, ordering: str = "sweep",
          max_neighbors: int | None = DEFAULT_MAX_NEIGHBORS) -> VecchiaPrecision:
    """Build the sparse factored precision of scale * C(d) [+ diag(nugget)].

    Each ordered vertex is regressed on its prior-ordered neighbors within
    the index radius (nearest ``max_neighbors`` kept when over budget).
    Local Gram solves use Cholesky with escalating jitter; an
    unfactorizable local system raises :class:`BuildError` naming the
    vertex.
    """
    if nbr_index.n_vertices != mesh.n_vertices:
        raise ValueError("neighbor index does not match mesh size")
    if nbr_index.mesh_hash and nbr_index.mesh_hash != mesh.content_hash():
        raise ValueError("neighbor index was built on a different mesh")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    m = mesh.n_vertices
    if nugget is not None:
        nugget = np.asarray(nugget, dtype=float)
        if nugget.shape != (m,):
            raise ValueError("nugget must have one entry per vertex")
        if np.any(nugget < 0):
            raise ValueError("nugget entries must be nonnegative")
    try:
        order = _ORDERINGS[ordering](mesh)
    except KeyError:
        raise ValueError(f"unknown ordering {ordering!r}") from None
    inv_order = np.empty(m, dtype=np.int64)
    inv_order[order] = np.arange(m)

    u = mesh.unit_vectors
    cond_var = np.empty(m)
    rows, cols, vals = [], [], []
    for pos in range(m):
        v = order[pos]
        marginal = scale + (nugget[v] if nugget is not None else 0.0)
        ids = nbr_index.neighbors[v]
        prior = ids[inv_order[ids] < pos] if len(ids) else ids
        if max_neighbors is not None and len(prior) > max_neighbors:
            prior = prior[:max_neighbors]  # neighbor lists are distance-sorted
        if len(prior) == 0:
            cond_var[pos] = marginal
            continue
        arcs = arc_between(u[prior][:, None, :], u[prior][None, :, :])
        local = scale * kernel(mesh.radius * arcs)
        if nugget is not None:
            local[np.diag_indices_from(local)] += nugget[prior]
        cross = scale * kernel(mesh.radius * arc_between(u[prior], u[v]))
        weights = _solve_local(local, cross, vertex=v)
        cv = marginal - float(cross @ weights)
        if not cv > 0:
            raise BuildError(f"nonpositive conditional variance at vertex {v}")
        cond_var[pos] = cv
        rows.extend([pos] * len(prior))
        cols.extend(inv_order[prior])
        vals.extend(-weights)

    rows.extend(range(m))
    cols.extend(range(m))
    vals.extend([1.0] * m)
    i_minus_a = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    return VecchiaPrecision(order=order, inv_order=inv_order, i_minus_a=i_minus_a,
                            cond_var=cond_var, radius_mm=nbr_index.radius_mm,
                            kernel=kernel, scale=float(scale),
                            has_nugget=nugget is not None,
                            mesh_hash=mesh.content_hash(), ordering=ordering)


def _solve_local(gram: np.ndarray, rhs: np.ndarray, vertex: int) -> np.ndarray:
    diag_scale = float(np.mean(np.diag(gram)))
    for level in _JITTER_LEVELS:
        try:
            g = gram if level == 0.0 else gram + level * diag_scale * np.eye(gram.shape[0])
            c = cho_factor(g, lower=True)
            return cho_solve(c, rhs)
        except np.linalg.LinAlgError:
            continue
    raise BuildError(f"local Gram matrix not factorizable at vertex {vertex} "
                     f"(size {gram.shape[0]}, max jitter {_JITTER_LEVELS[-1]:g})")


def gaussian_kl(cov_true: np.ndarray, vp: VecchiaPrecision) -> float:
    """KL( N(0, cov_true) || N(0, S_tilde) ), dense; for fidelity checks."""
    m = cov_true.shape[0]
    prec = vp.apply_precision(np.eye(m))
    trace = float(np.trace(prec @ cov_true))
    sign, logdet_true = np.linalg.slogdet(cov_true)
    if sign <= 0:
        raise ValueError("cov_true is not positive definite")
    return 0.5 * (trace - m + vp.log_det() - logdet_true)


def save_cache(vp: VecchiaPrecision, path) -> None:
    """Binary cache of (ordering, A, cond_var) keyed by build inputs."""
    ia = vp.i_minus_a.tocoo()
    np.savez_compressed(
        path, order=vp.order, cond_var=vp.cond_var,
        ia_row=ia.row, ia_col=ia.col, ia_val=ia.data,
        key=np.array([vp.mesh_hash, repr(vp.kernel.psi), repr(vp.kernel.nu),
                      repr(vp.radius_mm), repr(vp.scale), vp.ordering]),
        has_nugget=np.array([vp.has_nugget]))


def load_cache(path, mesh: SphericalMesh, kernel: CorrelationModel,
               radius_mm: float, scale: float = 1.0,
               ordering: str = "sweep") -> VecchiaPrecision | None:
    """Load a cached build if its key matches; otherwise return None."""
    try:
        data = np.load(path, allow_pickle=False)
    except (FileNotFoundError, OSError):
        return None
    key = list(data["key"])
    expect = [mesh.content_hash(), repr(kernel.psi), repr(kernel.nu),
              repr(float(radius_mm)), repr(float(scale)), ordering]
    if key != expect or bool(data["has_nugget"][0]):
        return None
    m = mesh.n_vertices
    order = data["order"]
    inv_order = np.empty(m, dtype=np.int64)
    inv_order[order] = np.arange(m)
    ia = sp.csr_matrix((data["ia_val"], (data["ia_row"], data["ia_col"])), shape=(m, m))
    return VecchiaPrecision(order=order, inv_order=inv_order, i_minus_a=ia,
                            cond_var=data["cond_var"], radius_mm=float(radius_mm),
                            kernel=kernel, scale=float(scale), has_nugget=False,
                            mesh_hash=mesh.content_hash(), ordering=ordering)
