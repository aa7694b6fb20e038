"""Discrete domains: regular grids, triangle meshes, and the cotangent
Laplace operator with lumped mass."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ContractError, DimensionError

COT_CLAMP = 1e6


@dataclass
class Mesh:
    """Vertex coordinates plus triangle connectivity.

    vertices: (N, d) float64, d in {1, 2, 3}
    triangles: (T, 3) int64 vertex indices; empty for 1-d chains
    provenance: how the mesh was made, e.g. {"kind": "grid", "nx": ..., ...}
    """

    vertices: np.ndarray
    triangles: np.ndarray
    provenance: dict = field(default_factory=lambda: {"kind": "external"})

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] not in (1, 2, 3):
            raise DimensionError(
                f"vertices must be (N, d) with d in 1..3, got {self.vertices.shape}"
            )
        if self.triangles.size and self.triangles.shape[1] != 3:
            raise DimensionError(
                f"triangles must be (T, 3), got {self.triangles.shape}"
            )
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    def validate(self):
        n = self.n_vertices
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= n:
                raise ContractError(
                    f"triangle index out of range [0, {n}): "
                    f"min {self.triangles.min()}, max {self.triangles.max()}"
                )
            areas = triangle_areas(self.vertices, self.triangles)
            bad = np.flatnonzero(areas <= 0.0)
            if bad.size:
                raise ContractError(
                    f"{bad.size} degenerate (zero-area) triangle(s), "
                    f"first at index {bad[0]}"
                )


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - a
    e2 = vertices[triangles[:, 2]] - a
    if vertices.shape[1] == 2:
        cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        return 0.5 * np.abs(cross)
    cross = np.cross(e1, e2)
    return 0.5 * np.linalg.norm(cross, axis=1)


def make_grid(nx: int, ny: int, lx: float, ly: float) -> Mesh:
    """Uniform lattice over [0, lx] x [0, ly], each cell split into two
    triangles along the same diagonal. Vertices are row-major: index
    iy * nx + ix."""
    if nx < 2 or ny < 2:
        raise ContractError(f"grid needs nx, ny >= 2, got ({nx}, {ny})")
    if lx <= 0 or ly <= 0:
        raise ContractError(f"grid extents must be positive, got ({lx}, {ly})")
    xs = np.linspace(0.0, lx, nx)
    ys = np.linspace(0.0, ly, ny)
    gx, gy = np.meshgrid(xs, ys)  # shape (ny, nx), row-major over y
    vertices = np.column_stack([gx.ravel(), gy.ravel()])
    ix, iy = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    v00 = (iy * nx + ix).ravel()
    v10 = v00 + 1
    v01 = v00 + nx
    v11 = v01 + 1
    tris = np.concatenate(
        [
            np.column_stack([v00, v10, v11]),
            np.column_stack([v00, v11, v01]),
        ]
    )
    prov = {"kind": "grid", "nx": int(nx), "ny": int(ny), "lx": float(lx), "ly": float(ly)}
    return Mesh(vertices, tris, prov)


def make_line(n: int, length: float = 1.0, periodic: bool = True) -> Mesh:
    """Uniform 1-d point chain; carrier for the Fourier-transform mixers.

    With periodic=True the points are x_j = j * length / n (no duplicate
    endpoint), matching the sampling the discrete Fourier transform assumes.
    """
    if n < 2:
        raise ContractError(f"line needs n >= 2, got {n}")
    if periodic:
        xs = np.arange(n) * (length / n)
    else:
        xs = np.linspace(0.0, length, n)
    prov = {"kind": "line", "n": int(n), "length": float(length), "periodic": bool(periodic)}
    return Mesh(xs[:, None], np.zeros((0, 3), dtype=np.int64), prov)


def load_mesh(path) -> Mesh:
    """Read an ASCII OFF triangle mesh."""
    with open(path, "r") as f:
        tokens = []
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ContractError(f"{path}: not an ASCII OFF file")
    pos = 1
    nv, nf = int(tokens[pos]), int(tokens[pos + 1])
    pos += 3  # skip edge count
    verts = np.array(tokens[pos : pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
    pos += 3 * nv
    tris = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        k = int(tokens[pos])
        if k != 3:
            raise ContractError(f"{path}: face {i} has {k} vertices, need triangles")
        tris[i] = [int(t) for t in tokens[pos + 1 : pos + 4]]
        pos += 4
    if np.all(verts[:, 2] == 0.0):
        verts = verts[:, :2]
    return Mesh(verts, tris, {"kind": "external", "path": str(path)})


def assemble_laplacian(mesh: Mesh):
    """Cotangent stiffness matrix and lumped (diagonal) mass vector.

    Off-diagonal entries are -(cot a + cot b)/2 over the triangles sharing
    each edge; diagonals make rows sum to zero, so the matrix is symmetric
    positive semidefinite with the constant vector in its kernel. Mass is
    one third of the incident triangle areas per vertex. Near-degenerate
    cotangents are clamped to +-1e6 (a warning reports how many).
    """
    if mesh.triangles.size == 0:
        raise ContractError("mesh has no triangles; cannot assemble Laplacian")
    v = mesh.vertices
    t = mesh.triangles
    n = mesh.n_vertices

    rows_all = []
    cols_all = []
    vals_all = []
    clamped = 0
    # corner c is opposite edge (a, b); its cotangent weights that edge
    for c, a, b in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        ea = v[t[:, a]] - v[t[:, c]]
        eb = v[t[:, b]] - v[t[:, c]]
        dots = np.sum(ea * eb, axis=1)
        if v.shape[1] == 2:
            cross = np.abs(ea[:, 0] * eb[:, 1] - ea[:, 1] * eb[:, 0])
        else:
            cross = np.linalg.norm(np.cross(ea, eb), axis=1)
        cot = dots / cross
        over = np.abs(cot) > COT_CLAMP
        clamped += int(np.count_nonzero(over))
        cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        w = 0.5 * cot
        ia, ib = t[:, a], t[:, b]
        rows_all.extend([ia, ib, ia, ib])
        cols_all.extend([ib, ia, ia, ib])
        vals_all.extend([-w, -w, w, w])
    if clamped:
        warnings.warn(
            f"clamped {clamped} near-degenerate cotangent weight(s) to |cot| <= {COT_CLAMP:g}",
            RuntimeWarning,
            stacklevel=2,
        )
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    stiffness = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

    areas = triangle_areas(v, t)
    mass = np.zeros(n)
    for c in range(3):
        np.add.at(mass, t[:, c], areas / 3.0)
    return stiffness, mass
