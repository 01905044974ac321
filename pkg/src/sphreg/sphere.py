"""Spherical vertex sets: great-circle metric and radius-bounded neighbor search.

Vertices live on a sphere of known physical radius (mm). All distances in
this module are geodesic (great-circle) distances in mm. Neighbor queries
are exact: a 3D kd-tree prunes by chord length (chord <= geodesic), then
candidates are re-checked with the exact geodesic metric.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_SPHERE_RADIUS_MM = 100.0

_UNIT_TOL = 1e-9


@dataclass(frozen=True)
class SphericalMesh:
    """Fixed vertex set on a sphere: unit direction vectors plus a radius.

    Parameters
    ----------
    unit_vectors : ndarray (M, 3)
        Unit direction of each vertex. Indices are dense 0..M-1.
    radius : float
        Sphere radius in mm.
    region_labels : ndarray (M,) of int, optional
        Region id per vertex, for regional summaries.
    """

    unit_vectors: np.ndarray
    radius: float = DEFAULT_SPHERE_RADIUS_MM
    region_labels: np.ndarray | None = None

    def __post_init__(self):
        u = np.ascontiguousarray(np.asarray(self.unit_vectors, dtype=float))
        if u.ndim != 2 or u.shape[1] != 3 or u.shape[0] < 1:
            raise ValueError(f"unit_vectors must be (M, 3) with M >= 1, got {u.shape}")
        norms = np.linalg.norm(u, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("direction vectors are not unit length")
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            u = u / norms[:, None]  # renormalize small drift (e.g. CSV round-trip)
        object.__setattr__(self, "unit_vectors", u)
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.region_labels is not None:
            lab = np.asarray(self.region_labels, dtype=int)
            if lab.shape != (u.shape[0],):
                raise ValueError("region_labels must have one entry per vertex")
            object.__setattr__(self, "region_labels", lab)

    @property
    def n_vertices(self) -> int:
        return self.unit_vectors.shape[0]

    def distances_from(self, i: int) -> np.ndarray:
        """Geodesic distance from vertex ``i`` to every vertex (mm)."""
        _check_index(i, self.n_vertices)
        return self.radius * arc_between(self.unit_vectors, self.unit_vectors[i])

    def pairwise_distances(self, idx=None) -> np.ndarray:
        """Dense geodesic distance matrix over ``idx`` (default: all vertices)."""
        u = self.unit_vectors if idx is None else self.unit_vectors[np.asarray(idx)]
        m = u.shape[0]
        out = np.empty((m, m))
        # row blocks keep the cross-product temporaries modest on large meshes
        step = max(1, min(m, 512))
        for lo in range(0, m, step):
            hi = min(lo + step, m)
            out[lo:hi] = arc_between(u[lo:hi, None, :], u[None, :, :])
        return self.radius * out

    def diameter(self) -> float:
        """Upper bound on any geodesic distance (half circumference)."""
        return np.pi * self.radius

    def content_hash(self) -> str:
        h = hashlib.sha1()
        h.update(np.round(self.unit_vectors, 12).tobytes())
        h.update(np.float64(self.radius).tobytes())
        return h.hexdigest()[:16]


@dataclass
class NeighborIndex:
    """Per-vertex neighbor lists within a fixed geodesic radius.

    ``neighbors[i]`` and ``distances[i]`` are parallel arrays sorted by
    distance; self is excluded; the relation is symmetric.
    """

    radius_mm: float
    neighbors: list = field(repr=False)
    distances: list = field(repr=False)
    mesh_hash: str = ""

    @property
    def n_vertices(self) -> int:
        return len(self.neighbors)

    def degree(self) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors])


def _check_index(i, m):
    i = int(i)
    if not 0 <= i < m:
        raise IndexError(f"vertex index {i} out of range [0, {m})")
    return i


def arc_between(u, v) -> np.ndarray:
    """Angle between unit vectors along the last axis.

    Uses atan2(|u x v|, u . v), which stays accurate near 0 and pi where
    arccos of the dot product loses all precision.
    """
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = np.sum(np.asarray(u) * np.asarray(v), axis=-1)
    return np.arctan2(cross, dot)


def great_circle_distance(mesh: SphericalMesh, i: int, j: int) -> float:
    """Great-circle distance between vertices ``i`` and ``j`` in mm."""
    i = _check_index(i, mesh.n_vertices)
    j = _check_index(j, mesh.n_vertices)
    return mesh.radius * float(arc_between(mesh.unit_vectors[i], mesh.unit_vectors[j]))


def chord_from_geodesic(geodesic: float, radius: float) -> float:
    """3D chord length subtending a geodesic arc; chord <= geodesic."""
    arc = min(geodesic, np.pi * radius)
    return 2.0 * radius * np.sin(arc / (2.0 * radius))


def build_neighbor_index(mesh: SphericalMesh, radius_mm: float) -> NeighborIndex:
    """All vertex pairs within geodesic distance ``radius_mm`` (exact).

    A kd-tree on the embedded 3D coordinates finds candidates within the
    chord-length bound, then the exact geodesic distance filters them, so
    no qualifying pair is missed.
    """
    if not radius_mm > 0:
        raise ValueError(f"neighbor radius must be positive, got {radius_mm}")
    m = mesh.n_vertices
    pts = mesh.radius * mesh.unit_vectors
    tree = cKDTree(pts)
    chord = chord_from_geodesic(radius_mm, mesh.radius) * (1.0 + 1e-12)
    pairs = tree.query_pairs(chord, output_type="ndarray")

    nbr_ids = [[] for _ in range(m)]
    nbr_dist = [[] for _ in range(m)]
    if len(pairs):
        a, b = pairs[:, 0], pairs[:, 1]
        dist = mesh.radius * arc_between(mesh.unit_vectors[a], mesh.unit_vectors[b])
        keep = dist <= radius_mm
        for i, j, d in zip(a[keep], b[keep], dist[keep]):
            nbr_ids[i].append(j)
            nbr_ids[j].append(i)
            nbr_dist[i].append(d)
            nbr_dist[j].append(d)

    neighbors, distances = [], []
    for i in range(m):
        ids = np.asarray(nbr_ids[i], dtype=np.int64)
        ds = np.asarray(nbr_dist[i], dtype=float)
        order = np.lexsort((ids, ds))  # by distance, ties by id for determinism
        neighbors.append(ids[order])
        distances.append(ds[order])
    return NeighborIndex(radius_mm=float(radius_mm), neighbors=neighbors,
                         distances=distances, mesh_hash=mesh.content_hash())


def fibonacci_sphere(count: int, radius: float = DEFAULT_SPHERE_RADIUS_MM) -> SphericalMesh:
    """Deterministic quasi-uniform vertex set from the golden-angle lattice."""
    count = int(count)
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if count == 1:
        return SphericalMesh(np.array([[0.0, 0.0, 1.0]]), radius=radius)
    i = np.arange(count, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / count
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * i
    u = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    return SphericalMesh(u, radius=radius)


def geodesic_disc(mesh: SphericalMesh, center: int, cap_radius_mm: float) -> np.ndarray:
    """Vertex ids within ``cap_radius_mm`` of ``center``, sorted by distance."""
    if not cap_radius_mm > 0:
        raise ValueError(f"cap radius must be positive, got {cap_radius_mm}")
    center = _check_index(center, mesh.n_vertices)
    d = mesh.distances_from(center)
    ids = np.flatnonzero(d <= cap_radius_mm)
    order = np.lexsort((ids, d[ids]))
    return ids[order]


def extract_submesh(mesh: SphericalMesh, vertex_ids) -> SphericalMesh:
    """New mesh over ``vertex_ids`` (relabeled densely 0..k-1, order kept)."""
    ids = np.asarray(vertex_ids, dtype=int)
    labels = None if mesh.region_labels is None else mesh.region_labels[ids]
    return SphericalMesh(mesh.unit_vectors[ids], radius=mesh.radius, region_labels=labels)


def nearest_neighbor_spacing(mesh: SphericalMesh) -> np.ndarray:
    """Geodesic distance from each vertex to its nearest other vertex."""
    pts = mesh.radius * mesh.unit_vectors
    tree = cKDTree(pts)
    chord, _ = tree.query(pts, k=2)
    chord = chord[:, 1]
    return 2.0 * mesh.radius * np.arcsin(np.clip(chord / (2.0 * mesh.radius), 0.0, 1.0))


def write_mesh_csv(mesh: SphericalMesh, path) -> None:
    """Write the documented mesh format: header ``vertex,x,y,z[,region]``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        has_regions = mesh.region_labels is not None
        w.writerow(["vertex", "x", "y", "z"] + (["region"] if has_regions else []))
        for i, u in enumerate(mesh.unit_vectors):
            row = [i, repr(float(u[0])), repr(float(u[1])), repr(float(u[2]))]
            if has_regions:
                row.append(int(mesh.region_labels[i]))
            w.writerow(row)


def read_mesh_csv(path, radius: float = DEFAULT_SPHERE_RADIUS_MM) -> SphericalMesh:
    """Read a ``vertex,x,y,z[,region]`` CSV; radius comes from config/CLI."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        cols = [c.strip().lower() for c in header]
        if cols[:4] != ["vertex", "x", "y", "z"]:
            raise ValueError(f"unexpected mesh header {header!r}")
        has_regions = len(cols) > 4 and cols[4] == "region"
        rows = sorted((int(line[0]), line) for line in r if line)
    ids = [i for i, _ in rows]
    if ids != list(range(len(ids))):
        raise ValueError("vertex ids must be dense 0..M-1")
    u = np.array([[float(line[1]), float(line[2]), float(line[3])] for _, line in rows])
    labels = np.array([int(line[4]) for _, line in rows]) if has_regions else None
    return SphericalMesh(u, radius=radius, region_labels=labels)
