"""Triangulated surface meshes: FEM matrices, graph utilities, smoothing.

The mesh is the spatial domain for everything else in this package. All
geometry is linear (flat triangles embedded in 3D); vertex coordinates are
in millimetres.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, dijkstra


class MeshError(ValueError):
    """Invalid mesh construction or mesh file contents."""


# FWHM of a Gaussian = 2*sqrt(2*ln 2) * sigma
_FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


class SurfaceMesh:
    """Triangulated 2-manifold surface embedded in 3D.

    Parameters
    ----------
    vertices : (N, 3) array_like
        Vertex coordinates in mm.
    triangles : (T, 3) array_like of int
        Vertex index triples, 0-based.

    Raises
    ------
    MeshError
        On out-of-range indices, degenerate (zero-area) triangles, or
        edges shared by more than two triangles.
    """

    def __init__(self, vertices, triangles):
        v = np.asarray(vertices, dtype=float)
        t = np.asarray(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (T, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= v.shape[0]):
            raise MeshError("triangle index out of range")
        areas = _triangle_areas(v, t)
        bad = np.nonzero(areas <= 0.0)[0]
        if bad.size:
            raise MeshError(f"degenerate (zero-area) triangle at index {bad[0]}")
        # manifold check: each undirected edge in at most two triangles
        edges = np.sort(t[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        over = np.nonzero(counts > 2)[0]
        if over.size:
            e = uniq[over[0]]
            raise MeshError(f"edge ({e[0]}, {e[1]}) belongs to more than two triangles")
        self.vertices = v
        self.triangles = t
        self.N = v.shape[0]
        self._edges = uniq

    @property
    def edges(self):
        """Unique undirected edges, (E, 2) int array, each row sorted."""
        return self._edges

    def edge_lengths(self):
        d = self.vertices[self._edges[:, 0]] - self.vertices[self._edges[:, 1]]
        return np.linalg.norm(d, axis=1)

    def diameter(self):
        """Bounding-box diagonal, a cheap scale for the mesh extent."""
        span = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(span))

    def total_area(self):
        return float(_triangle_areas(self.vertices, self.triangles).sum())


@dataclass(frozen=True)
class FemMatrices:
    """Lumped mass matrix C (diagonal, mm^2) and cotangent stiffness G."""

    C: sparse.csr_matrix
    G: sparse.csr_matrix

    @property
    def n(self):
        return self.C.shape[0]


def _triangle_areas(v, t):
    a = v[t[:, 1]] - v[t[:, 0]]
    b = v[t[:, 2]] - v[t[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def assemble_fem(mesh: SurfaceMesh) -> FemMatrices:
    """Assemble linear-element FEM matrices on a surface mesh.

    The mass matrix is lumped: C_ii is one third of the total area of the
    triangles incident to vertex i. The stiffness matrix uses the cotangent
    formula on the embedded triangles; its rows sum to zero.
    """
    v, t = mesh.vertices, mesh.triangles
    n = mesh.N
    areas = _triangle_areas(v, t)

    lumped = np.zeros(n)
    np.add.at(lumped, t.ravel(), np.repeat(areas / 3.0, 3))
    C = sparse.diags(lumped, format="csr")

    # Cotangent weights: for the edge opposite corner c, the contribution is
    # cot(angle at c) / 2 = dot(e1, e2) / (4 * area) with e1, e2 the edges
    # leaving corner c.
    rows, cols, vals = [], [], []
    for corner, (i, j) in ((0, (1, 2)), (1, (2, 0)), (2, (0, 1))):
        e1 = v[t[:, i]] - v[t[:, corner]]
        e2 = v[t[:, j]] - v[t[:, corner]]
        w = 0.5 * np.einsum("ij,ij->i", e1, e2) / (2.0 * areas)
        rows.extend([t[:, i], t[:, j]])
        cols.extend([t[:, j], t[:, i]])
        vals.extend([-w, -w])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    G = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    G.sum_duplicates()
    # diagonal makes each row sum to exactly zero
    G = G + sparse.diags(-np.asarray(G.sum(axis=1)).ravel(), format="csr")
    G.sum_duplicates()
    return FemMatrices(C=C, G=G)


def vertex_adjacency(mesh: SurfaceMesh) -> sparse.csr_matrix:
    """Symmetric boolean vertex adjacency from shared triangle edges."""
    e = mesh.edges
    n = mesh.N
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    a = sparse.csr_matrix(
        (np.ones(rows.size, dtype=bool), (rows, cols)), shape=(n, n)
    )
    a.setdiag(False)
    a.eliminate_zeros()
    return a


def _edge_length_graph(mesh: SurfaceMesh) -> sparse.csr_matrix:
    e = mesh.edges
    w = mesh.edge_lengths()
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sparse.csr_matrix((np.concatenate([w, w]), (rows, cols)),
                             shape=(mesh.N, mesh.N))


def smoothing_weights(mesh: SurfaceMesh, fwhm: float) -> sparse.csr_matrix:
    """Row-normalized Gaussian kernel over graph-geodesic distances.

    Distances are shortest paths over edge lengths (Dijkstra), the kernel is
    truncated at 3 sigma. fwhm = 0 returns the identity. On a disconnected
    mesh the kernel never crosses components; a warning is emitted.
    """
    if fwhm < 0:
        raise ValueError("fwhm must be >= 0")
    n = mesh.N
    if fwhm == 0.0:
        return sparse.eye(n, format="csr")
    graph = _edge_length_graph(mesh)
    ncomp, _ = connected_components(graph, directed=False)
    if ncomp > 1:
        warnings.warn(
            f"mesh has {ncomp} connected components; smoothing stays within components",
            stacklevel=2,
        )
    sigma = fwhm * _FWHM_TO_SIGMA
    dist = dijkstra(graph, directed=False, limit=3.0 * sigma)
    with np.errstate(over="ignore"):
        w = np.exp(-0.5 * (dist / sigma) ** 2)
    w[~np.isfinite(dist)] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    return sparse.csr_matrix(w)


def surface_smooth(mesh: SurfaceMesh, fields, fwhm: float):
    """Smooth one field (N,) or several stacked fields (N, m) on the mesh."""
    fields = np.asarray(fields, dtype=float)
    if fields.shape[0] != mesh.N:
        raise ValueError(f"field has {fields.shape[0]} values, mesh has {mesh.N} vertices")
    if fwhm == 0.0:
        return fields.copy()
    return smoothing_weights(mesh, fwhm) @ fields


@dataclass(frozen=True)
class EdgeDistortion:
    """Per-edge length ratios between two embeddings of the same topology."""

    edges: np.ndarray        # (E, 2) vertex index pairs
    ratios: np.ndarray       # (E,) length in A / length in B
    quantiles: dict = field(default_factory=dict)


def edge_distance_distortion(mesh_a: SurfaceMesh, mesh_b: SurfaceMesh) -> EdgeDistortion:
    """Ratio of Euclidean edge lengths between two surfaces of equal topology."""
    if mesh_a.N != mesh_b.N or not np.array_equal(mesh_a.triangles, mesh_b.triangles):
        raise MeshError("meshes must share an identical triangle list")
    ratios = mesh_a.edge_lengths() / mesh_b.edge_lengths()
    qs = np.quantile(ratios, [0.0, 0.25, 0.5, 0.75, 1.0])
    quantiles = dict(zip(("min", "q25", "median", "q75", "max"), qs.tolist()))
    return EdgeDistortion(edges=mesh_a.edges.copy(), ratios=ratios, quantiles=quantiles)


def write_mesh(path, mesh: SurfaceMesh):
    """Write the text mesh format: header ``mesh N T``, vertex rows, triangle rows."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"mesh {mesh.N} {mesh.triangles.shape[0]}\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path) -> SurfaceMesh:
    """Strict reader for the text mesh format written by :func:`write_mesh`."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise MeshError(f"{path}: empty mesh file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "mesh":
        raise MeshError(f"{path}: bad header {lines[0]!r}, expected 'mesh <N> <T>'")
    try:
        n, t = int(head[1]), int(head[2])
    except ValueError as exc:
        raise MeshError(f"{path}: non-integer counts in header") from exc
    if len(lines) != 1 + n + t:
        raise MeshError(f"{path}: expected {1 + n + t} lines, found {len(lines)}")
    try:
        verts = np.array([[float(x) for x in ln.split()] for ln in lines[1:1 + n]])
        tris = np.array([[int(x) for x in ln.split()] for ln in lines[1 + n:]],
                        dtype=np.int64)
    except ValueError as exc:
        raise MeshError(f"{path}: malformed vertex or triangle row") from exc
    if n and verts.shape != (n, 3):
        raise MeshError(f"{path}: vertex rows must have 3 coordinates")
    if t and tris.shape != (t, 3):
        raise MeshError(f"{path}: triangle rows must have 3 indices")
    return SurfaceMesh(verts.reshape(n, 3), tris.reshape(t, 3))
