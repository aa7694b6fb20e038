"""Truncated eigenbasis of the discrete Laplace operator.

The generalized symmetric problem L phi = lambda M phi is reduced with the
diagonal lumped mass to a standard symmetric problem and solved densely
(LAPACK). Two inner-product modes:

  mass_weighted  eigenvectors satisfy phi^T M phi = I; forward transforms
                 weight by M, which makes coefficients stable across mesh
                 resolutions (the default).
  plain          the mass is ignored entirely (standard problem L phi =
                 lambda phi, Euclidean-orthonormal eigenvectors, unweighted
                 products).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ContractError, EigensolverError, FormatError
from .geometry import Mesh, assemble_laplacian

N_CAP = 8192

BASIS_MAGIC = b"PCSB"
BASIS_VERSION = 1

_MODES = ("mass_weighted", "plain")


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def mesh_fingerprint(mesh: Mesh) -> int:
    return fnv1a64(np.ascontiguousarray(mesh.vertices).tobytes())


@dataclass
class SpectralBasis:
    """Eigenpairs (phi_i, lambda_i) plus the lumped mass of a mesh.

    eigenfunctions is (N, n_freq) with column i = phi_i; eigenvalues are
    nondecreasing with lambda_1 ~ 0. The sign gauge is fixed: the first
    entry of each column with |value| > 1e-12 is positive.
    """

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    mass: np.ndarray
    mesh_id: int
    inner_product: str
    vertices: np.ndarray

    def __post_init__(self):
        self._cache = {}

    @property
    def n_vertices(self) -> int:
        return self.eigenfunctions.shape[0]

    @property
    def n_freq(self) -> int:
        return self.eigenfunctions.shape[1]

    def forward_columns(self) -> np.ndarray:
        """Basis columns with the transform weight folded in: M phi in
        mass_weighted mode, phi in plain mode."""
        if self.inner_product == "plain":
            return self.eigenfunctions
        key = ("fwd", "f8")
        if key not in self._cache:
            self._cache[key] = self.mass[:, None] * self.eigenfunctions
        return self._cache[key]

    def arrays(self, dtype) -> dict:
        """Transform matrices cast to dtype (cached): 'phi' (N, K),
        'fwd_T' (K, N) with the inner-product weight folded in."""
        key = ("ops", np.dtype(dtype).str)
        if key not in self._cache:
            self._cache[key] = {
                "phi": np.ascontiguousarray(self.eigenfunctions, dtype=dtype),
                "fwd": np.ascontiguousarray(self.forward_columns(), dtype=dtype),
                "fwd_T": np.ascontiguousarray(self.forward_columns().T, dtype=dtype),
            }
        return self._cache[key]


def _fix_signs(phi: np.ndarray) -> np.ndarray:
    for j in range(phi.shape[1]):
        col = phi[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            phi[:, j] = -col
    return phi


def compute_basis(mesh: Mesh, n_freq: int, mode: str = "mass_weighted") -> SpectralBasis:
    """Lowest n_freq eigenpairs of the mesh Laplacian."""
    if mode not in _MODES:
        raise ContractError(f"inner_product must be one of {_MODES}, got {mode!r}")
    n = mesh.n_vertices
    if not 1 <= n_freq <= n:
        raise ContractError(f"n_freq must be in [1, {n}], got {n_freq}")
    if n > N_CAP:
        raise ContractError(f"dense eigensolver capped at N <= {N_CAP}, got {n}")
    stiffness, mass = assemble_laplacian(mesh)
    dense = stiffness.toarray()
    dense = 0.5 * (dense + dense.T)
    if mode == "mass_weighted":
        inv_sqrt = 1.0 / np.sqrt(mass)
        dense *= inv_sqrt[:, None]
        dense *= inv_sqrt[None, :]
        dense = 0.5 * (dense + dense.T)
    try:
        vals, vecs = scipy.linalg.eigh(dense, subset_by_index=[0, n_freq - 1])
    except scipy.linalg.LinAlgError as e:  # pragma: no cover - LAPACK failure
        raise EigensolverError(f"eigensolver failed on N={n}: {e}") from e
    if mode == "mass_weighted":
        vecs = inv_sqrt[:, None] * vecs
    phi = _fix_signs(np.ascontiguousarray(vecs))
    basis = SpectralBasis(
        eigenvalues=np.ascontiguousarray(vals),
        eigenfunctions=phi,
        mass=mass,
        mesh_id=mesh_fingerprint(mesh),
        inner_product=mode,
        vertices=mesh.vertices.copy(),
    )
    _check_residuals(stiffness, mass, basis)
    return basis


def _check_residuals(stiffness, mass, basis: SpectralBasis):
    phi = basis.eigenfunctions
    lam = basis.eigenvalues
    lhs = stiffness @ phi
    if basis.inner_product == "mass_weighted":
        rhs = lam[None, :] * (mass[:, None] * phi)
    else:
        rhs = lam[None, :] * phi
    res = np.linalg.norm(lhs - rhs, axis=0)
    ref = np.maximum(np.linalg.norm(lhs, axis=0), 1e-30)
    # the kernel eigenvector has lhs ~ 0; skip modes with tiny eigenvalues
    scale = np.abs(lam[-1]) if lam.size else 1.0
    active = np.abs(lam) > 1e-10 * max(scale, 1.0)
    if np.any(active):
        worst = np.max(res[active] / ref[active])
        if worst > 1e-8:
            raise EigensolverError(
                f"eigenpair residual {worst:.3e} exceeds 1e-8 "
                f"(residual norms: {res[active][:8]})"
            )


def sparse_frequency_select(basis_full: SpectralBasis, n_freq: int, r: int) -> SpectralBasis:
    """Every r-th mode of the lowest n_freq*r, injecting higher frequencies
    without growing the retained count."""
    if r not in (1, 2, 4):
        raise ContractError(f"sparsity ratio must be 1, 2 or 4, got {r}")
    needed = n_freq * r
    if basis_full.n_freq < needed:
        raise ContractError(
            f"sparse selection needs {needed} modes, basis holds {basis_full.n_freq}"
        )
    idx = np.arange(n_freq) * r
    out = SpectralBasis(
        eigenvalues=np.ascontiguousarray(basis_full.eigenvalues[idx]),
        eigenfunctions=np.ascontiguousarray(basis_full.eigenfunctions[:, idx]),
        mass=basis_full.mass,
        mesh_id=basis_full.mesh_id,
        inner_product=basis_full.inner_product,
        vertices=basis_full.vertices,
    )
    return out


def save_basis(path, basis: SpectralBasis) -> None:
    n = basis.n_vertices
    k = basis.n_freq
    d = basis.vertices.shape[1]
    mode_flag = _MODES.index(basis.inner_product)
    with open(path, "wb") as f:
        f.write(BASIS_MAGIC)
        f.write(struct.pack("<I", BASIS_VERSION))
        f.write(struct.pack("<QQQQQ", n, k, d, basis.mesh_id, mode_flag))
        f.write(np.ascontiguousarray(basis.vertices, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(basis.eigenvalues, dtype="<f8").tobytes())
        f.write(np.asfortranarray(basis.eigenfunctions, dtype="<f8").tobytes(order="F"))
        f.write(np.ascontiguousarray(basis.mass, dtype="<f8").tobytes())


def load_basis(path) -> SpectralBasis:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != BASIS_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {BASIS_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != BASIS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n, k, d, mesh_id, mode_flag = struct.unpack_from("<QQQQQ", blob, 8)
    off = 8 + 40
    vertices = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    off += 8 * n * d
    vals = np.frombuffer(blob, dtype="<f8", count=k, offset=off)
    off += 8 * k
    phi = np.frombuffer(blob, dtype="<f8", count=n * k, offset=off).reshape(
        (n, k), order="F"
    )
    off += 8 * n * k
    mass = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
    if mode_flag >= len(_MODES):
        raise FormatError(f"{path}: unknown inner-product flag {mode_flag}")
    actual = fnv1a64(np.ascontiguousarray(vertices).tobytes())
    if actual != mesh_id:
        raise FormatError(
            f"{path}: mesh fingerprint mismatch (stored {mesh_id:#018x}, "
            f"recomputed {actual:#018x})"
        )
    return SpectralBasis(
        eigenvalues=vals.copy(),
        eigenfunctions=np.ascontiguousarray(phi),
        mass=mass.copy(),
        mesh_id=mesh_id,
        inner_product=_MODES[mode_flag],
        vertices=np.ascontiguousarray(vertices),
    )
