"""Synthetic desk-scale PDE datasets with trusted classical solvers.

The Darcy generator draws piecewise-constant diffusivity fields by
thresholding spectrally filtered Gaussian noise, then solves
-div(a grad u) = 1 with homogeneous Dirichlet walls by a 5-point finite
difference scheme and a sparse direct solve; every sample's discrete
residual is checked at generation time and again on load. The 1-d Poisson
generator exercises the Fourier path and is exact by construction.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import ContractError, FormatError
from .geometry import Mesh, make_grid, make_line

DATASET_MAGIC = b"PCSD"
DATASET_VERSION = 1

DARCY_RESIDUAL_TOL = 1e-8


@dataclass
class Dataset:
    """Paired input/solution fields on one shared mesh.

    a: (n, N, d_a), u: (n, N, d_u). The first n_train samples are the
    training block (normalization statistics come from it alone); the last
    n_test are held out for final scoring.
    """

    mesh: Mesh
    a: np.ndarray
    u: np.ndarray
    n_train: int
    n_test: int
    stats: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        self.u = np.ascontiguousarray(self.u, dtype=np.float64)
        n = self.a.shape[0]
        if self.u.shape[0] != n:
            raise ContractError(
                f"a holds {n} samples but u holds {self.u.shape[0]}"
            )
        if self.a.shape[1] != self.mesh.n_vertices or self.u.shape[1] != self.mesh.n_vertices:
            raise ContractError(
                f"fields over {self.a.shape[1]}/{self.u.shape[1]} points do not "
                f"match mesh with {self.mesh.n_vertices} vertices"
            )
        if self.n_train + self.n_test > n:
            raise ContractError(
                f"split {self.n_train}+{self.n_test} exceeds {n} samples"
            )
        if not np.isfinite(self.a).all() or not np.isfinite(self.u).all():
            raise ContractError("dataset contains non-finite values")
        if not self.stats:
            self.stats = _compute_stats(self.a, self.u, self.n_train)

    @property
    def n_samples(self) -> int:
        return self.a.shape[0]

    def sample(self, i: int):
        return self.a[i], self.u[i]

    def normalize_inputs(self, a: np.ndarray) -> np.ndarray:
        return (a - self.stats["a_mean"]) / self.stats["a_std"]

    def denormalize_inputs(self, z: np.ndarray) -> np.ndarray:
        return z * self.stats["a_std"] + self.stats["a_mean"]

    def normalize_outputs(self, u: np.ndarray) -> np.ndarray:
        return (u - self.stats["u_mean"]) / self.stats["u_std"]

    def denormalize_outputs(self, z: np.ndarray) -> np.ndarray:
        return z * self.stats["u_std"] + self.stats["u_mean"]


def _compute_stats(a, u, n_train) -> dict:
    block_a = a[:n_train] if n_train else a
    block_u = u[:n_train] if n_train else u
    return {
        "a_mean": block_a.mean(axis=(0, 1)),
        "a_std": np.maximum(block_a.std(axis=(0, 1)), 1e-12),
        "u_mean": block_u.mean(axis=(0, 1)),
        "u_std": np.maximum(block_u.std(axis=(0, 1)), 1e-12),
    }


def _n_workers() -> int:
    raw = os.environ.get("PCSM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _run_indexed(fn, n: int) -> list:
    """Evaluate fn(i) for i in range(n), in index order, optionally on a
    thread pool capped by PCSM_THREADS. Results are identical either way
    because every sample derives its RNG from its own index."""
    workers = _n_workers()
    if workers == 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


# ---------------------------------------------------------------------------
# Darcy flow on the unit square


def _gaussian_field(rng: np.random.Generator, nx: int) -> np.ndarray:
    """Smooth random field: white noise filtered by 1/(|k|^2 + 1) over the
    integer grid wavenumbers."""
    white = rng.standard_normal((nx, nx))
    kx = np.fft.fftfreq(nx, d=1.0 / nx)
    k2 = kx[:, None] ** 2 + kx[None, :] ** 2
    filt = 1.0 / (k2 + 1.0)
    return np.real(np.fft.ifft2(np.fft.fft2(white) * filt))


def darcy_coefficient(rng: np.random.Generator, nx: int, lo: float, hi: float) -> np.ndarray:
    """Binary diffusivity: the smoothed field thresholded at its median."""
    f = _gaussian_field(rng, nx)
    return np.where(f >= np.median(f), hi, lo)


def _darcy_operator(a_grid: np.ndarray):
    """5-point operator for -div(a grad u) on the unit square with
    homogeneous Dirichlet walls; interface diffusivity is the arithmetic
    mean of the adjacent cell values. Returns (A, f) over the (nx-2)^2
    interior unknowns."""
    nx = a_grid.shape[0]
    h = 1.0 / (nx - 1)
    m = nx - 2
    idx = np.arange(m * m).reshape(m, m)  # [iy, ix]
    ay, ax = np.meshgrid(np.arange(1, nx - 1), np.arange(1, nx - 1), indexing="ij")
    a_c = a_grid[ay, ax]
    a_e = 0.5 * (a_c + a_grid[ay, ax + 1])
    a_w = 0.5 * (a_c + a_grid[ay, ax - 1])
    a_n = 0.5 * (a_c + a_grid[ay + 1, ax])
    a_s = 0.5 * (a_c + a_grid[ay - 1, ax])

    diag = (a_e + a_w + a_n + a_s).ravel() / h**2
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [diag]
    # east/west neighbours exist where ix +- 1 stays interior
    rows.append(idx[:, :-1].ravel()); cols.append(idx[:, 1:].ravel())
    vals.append(-a_e[:, :-1].ravel() / h**2)
    rows.append(idx[:, 1:].ravel()); cols.append(idx[:, :-1].ravel())
    vals.append(-a_w[:, 1:].ravel() / h**2)
    rows.append(idx[:-1, :].ravel()); cols.append(idx[1:, :].ravel())
    vals.append(-a_n[:-1, :].ravel() / h**2)
    rows.append(idx[1:, :].ravel()); cols.append(idx[:-1, :].ravel())
    vals.append(-a_s[1:, :].ravel() / h**2)
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m * m, m * m),
    )
    f = np.ones(m * m)
    return A, f


def solve_darcy(a_grid: np.ndarray) -> np.ndarray:
    """Solution field on the full grid (zero at the walls)."""
    nx = a_grid.shape[0]
    A, f = _darcy_operator(a_grid)
    u_int = spsolve(A, f)
    res = np.linalg.norm(A @ u_int - f) / np.linalg.norm(f)
    if res > DARCY_RESIDUAL_TOL:
        raise ContractError(f"Darcy solve residual {res:.3e} exceeds {DARCY_RESIDUAL_TOL}")
    u = np.zeros((nx, nx))
    u[1:-1, 1:-1] = u_int.reshape(nx - 2, nx - 2)
    return u


def darcy_residual(a_field: np.ndarray, u_field: np.ndarray, nx: int) -> float:
    """Relative residual of a stored sample against the assembled operator."""
    a_grid = a_field.reshape(nx, nx)
    u_grid = u_field.reshape(nx, nx)
    A, f = _darcy_operator(a_grid)
    r = A @ u_grid[1:-1, 1:-1].ravel() - f
    return float(np.linalg.norm(r) / np.linalg.norm(f))


def gen_darcy(
    nx: int,
    n_samples: int,
    seed: int,
    n_train: int | None = None,
    n_test: int | None = None,
    lo: float = 4.0,
    hi: float = 12.0,
) -> Dataset:
    """Piecewise-constant diffusivity -> pressure-field pairs on an
    nx-by-nx unit-square grid. Deterministic in (seed, index), so results
    do not depend on PCSM_THREADS."""
    if nx < 4:
        raise ContractError(f"gen_darcy needs nx >= 4, got {nx}")
    if n_train is None:
        n_train = int(round(0.8 * n_samples))
    if n_test is None:
        n_test = n_samples - n_train
    mesh = make_grid(nx, nx, 1.0, 1.0)

    def one(i: int):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        a_grid = darcy_coefficient(rng, nx, lo, hi)
        u_grid = solve_darcy(a_grid)
        return a_grid.ravel()[:, None], u_grid.ravel()[:, None]

    results = _run_indexed(one, n_samples)
    a = np.stack([r[0] for r in results])
    u = np.stack([r[1] for r in results])
    meta = {
        "generator": "darcy",
        "nx": int(nx),
        "seed": int(seed),
        "lo": lo,
        "hi": hi,
        "n_samples": int(n_samples),
    }
    return Dataset(mesh, a, u, n_train, n_test, meta=meta)


def verify_darcy(dataset: Dataset) -> float:
    """Worst per-sample discrete residual; raises above tolerance.

    Independent of the neural code path: re-assembles the finite-difference
    operator from the stored coefficients."""
    nx = dataset.meta["nx"]
    worst = 0.0
    for i in range(dataset.n_samples):
        res = darcy_residual(dataset.a[i, :, 0], dataset.u[i, :, 0], nx)
        worst = max(worst, res)
    if worst > DARCY_RESIDUAL_TOL:
        raise ContractError(
            f"stored Darcy sample residual {worst:.3e} exceeds {DARCY_RESIDUAL_TOL}"
        )
    return worst


# ---------------------------------------------------------------------------
# periodic 1-d Poisson (Fourier-path smoke problem)


def gen_poisson1d(
    n: int,
    n_samples: int,
    seed: int,
    n_train: int | None = None,
    n_test: int | None = None,
    max_mode: int = 8,
) -> Dataset:
    """Band-limited forcing f -> mean-zero periodic solution of -u'' = f
    on [0, 1); solved by spectral division, exact to machine precision."""
    if n < 8:
        raise ContractError(f"gen_poisson1d needs n >= 8, got {n}")
    if n_train is None:
        n_train = int(round(0.8 * n_samples))
    if n_test is None:
        n_test = n_samples - n_train
    kmax = min(max_mode, n // 4)
    mesh = make_line(n, 1.0, periodic=True)
    x = mesh.vertices[:, 0]

    def one(i: int):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        ks = np.arange(1, kmax + 1)
        ca = rng.standard_normal(kmax)
        cb = rng.standard_normal(kmax)
        ang = 2.0 * np.pi * x[:, None] * ks[None, :]
        f = np.cos(ang) @ ca + np.sin(ang) @ cb
        lam = (2.0 * np.pi * ks) ** 2
        u = np.cos(ang) @ (ca / lam) + np.sin(ang) @ (cb / lam)
        return f[:, None], u[:, None]

    results = _run_indexed(one, n_samples)
    a = np.stack([r[0] for r in results])
    u = np.stack([r[1] for r in results])
    meta = {
        "generator": "poisson1d",
        "n": int(n),
        "seed": int(seed),
        "max_mode": int(kmax),
        "n_samples": int(n_samples),
    }
    return Dataset(mesh, a, u, n_train, n_test, meta=meta)


# ---------------------------------------------------------------------------
# resolution restriction


def subsample(dataset: Dataset, factor: int) -> Dataset:
    """Strided restriction of fields and mesh; used for zero-shot
    cross-resolution evaluation. Grid meshes keep every factor-th lattice
    line; periodic lines require factor to divide n."""
    if factor < 1:
        raise ContractError(f"subsample factor must be >= 1, got {factor}")
    prov = dataset.mesh.provenance
    if prov.get("kind") == "grid":
        nx, ny = prov["nx"], prov["ny"]
        keep_x = np.arange(0, nx, factor)
        keep_y = np.arange(0, ny, factor)
        mask = (keep_y[:, None] * nx + keep_x[None, :]).ravel()
        verts = dataset.mesh.vertices[mask]
        sub_mesh = make_grid(
            len(keep_x), len(keep_y),
            float(verts[:, 0].max()), float(verts[:, 1].max()),
        )
        if not np.allclose(sub_mesh.vertices, verts, atol=1e-12):
            sub_mesh = Mesh(verts, sub_mesh.triangles, sub_mesh.provenance)
    elif prov.get("kind") == "line":
        n = prov["n"]
        if prov.get("periodic") and n % factor != 0:
            raise ContractError(
                f"periodic line of {n} points needs factor dividing n, got {factor}"
            )
        mask = np.arange(0, n, factor)
        sub_mesh = make_line(len(mask), prov["length"], periodic=prov.get("periodic", True))
    else:
        raise ContractError("subsample requires grid or line provenance")
    meta = dict(dataset.meta)
    meta["subsampled_by"] = meta.get("subsampled_by", 1) * factor
    return Dataset(
        sub_mesh,
        dataset.a[:, mask],
        dataset.u[:, mask],
        dataset.n_train,
        dataset.n_test,
        stats={k: v.copy() for k, v in dataset.stats.items()},
        meta=meta,
    )


# ---------------------------------------------------------------------------
# binary io (magic PCSD, little-endian, exact round trip)


def save_dataset(path, dataset: Dataset) -> None:
    mesh = dataset.mesh
    n, N, d_a = dataset.a.shape
    d_u = dataset.u.shape[2]
    d = mesh.dim
    T = mesh.triangles.shape[0]
    meta = dict(dataset.meta)
    meta["mesh_provenance"] = mesh.provenance
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    stats_blob = np.concatenate(
        [dataset.stats[k] for k in ("a_mean", "a_std", "u_mean", "u_std")]
    )
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<QQQQQQQQ", n, N, d, T, d_a, d_u,
                            dataset.n_train, dataset.n_test))
        f.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(mesh.triangles, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(dataset.a, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(dataset.u, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(stats_blob, dtype="<f8").tobytes())
        f.write(struct.pack("<Q", len(meta_blob)))
        f.write(meta_blob)
    sidecar = str(path) + ".json"
    with open(sidecar, "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def load_dataset(path, verify: bool = True) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {DATASET_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n, N, d, T, d_a, d_u, n_train, n_test = struct.unpack_from("<QQQQQQQQ", blob, 8)
    off = 8 + 64

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += count * np.dtype(dtype).itemsize
        return arr

    verts = take(N * d, "<f8").reshape(N, d).copy()
    tris = take(T * 3, "<i8").reshape(T, 3).copy()
    a = take(n * N * d_a, "<f8").reshape(n, N, d_a).copy()
    u = take(n * N * d_u, "<f8").reshape(n, N, d_u).copy()
    stats_flat = take(2 * d_a + 2 * d_u, "<f8").copy()
    (meta_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    meta = json.loads(blob[off : off + meta_len].decode())
    prov = meta.pop("mesh_provenance", {"kind": "external"})
    mesh = Mesh(verts, tris, prov)
    stats = {
        "a_mean": stats_flat[:d_a],
        "a_std": stats_flat[d_a : 2 * d_a],
        "u_mean": stats_flat[2 * d_a : 2 * d_a + d_u],
        "u_std": stats_flat[2 * d_a + d_u :],
    }
    ds = Dataset(mesh, a, u, n_train, n_test, stats=stats, meta=meta)
    if verify and meta.get("generator") == "darcy" and meta.get("subsampled_by", 1) == 1:
        verify_darcy(ds)
    return ds
