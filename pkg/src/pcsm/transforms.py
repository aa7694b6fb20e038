"""Fixed and point-calibrated truncated spectral transforms.

The forward transform projects point-sampled features onto the retained
basis columns; the point-calibrated variants first modulate each column
elementwise with that column's gate vector, so every point contributes to
each frequency in proportion to its learned preference. Forward and inverse
share one GateField instance per mixer invocation.

All transforms are differentiable compositions of tensor-engine primitives
and accept leading batch/head axes on x and on the gate values.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import precision
from .basis import SpectralBasis
from .errors import ContractError, DimensionError
from .tensor import Tensor, concat, matmul, matmul_tn, mul, scale, split, transpose

GATE_MODES = ("softmax_per_point", "sigmoid", "uniform_bypass")


@dataclass
class GateField:
    """Per-point, per-frequency calibration weights in [0, 1].

    values has trailing shape (N, n_freq); leading axes carry batch/heads.
    softmax_per_point rows sum to 1; uniform_bypass is exactly all-ones and
    reduces the calibrated transforms to the fixed ones.
    """

    values: Tensor
    normalization: str

    def __post_init__(self):
        if self.normalization not in GATE_MODES:
            raise ContractError(
                f"gate normalization must be one of {GATE_MODES}, "
                f"got {self.normalization!r}"
            )
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        if self.values.ndim < 2:
            raise DimensionError(
                f"gate values need trailing (N, n_freq), got {self.values.shape}"
            )

    @property
    def n_points(self) -> int:
        return self.values.shape[-2]

    @property
    def n_freq(self) -> int:
        return self.values.shape[-1]

    @staticmethod
    def uniform_bypass(n_points: int, n_freq: int) -> "GateField":
        return GateField(
            Tensor(np.ones((n_points, n_freq), dtype=precision.dtype())),
            "uniform_bypass",
        )


@dataclass
class SpectrumFeature:
    """Truncated spectral coefficients with a binding to their transform.

    coeffs has trailing shape (n_freq, d) for the eigenbasis transforms and
    (2 * n_freq, d) for the Fourier variants (cos rows then sin rows).
    """

    coeffs: Tensor
    basis_ref: object

    @property
    def n_rows(self) -> int:
        return self.coeffs.shape[-2]


def _check_points(x: Tensor, n: int, what: str):
    if x.shape[-2] != n:
        raise DimensionError(
            f"{what}: feature rows {x.shape} do not match point count {n}"
        )


def _check_gates(gates: GateField, n: int, k: int):
    if gates.n_points != n or gates.n_freq != k:
        raise DimensionError(
            f"gates shaped {gates.values.shape} do not match (N={n}, n_freq={k})"
        )


# ---------------------------------------------------------------------------
# eigenbasis transforms


def lbt_forward(x: Tensor, basis: SpectralBasis) -> SpectrumFeature:
    _check_points(x, basis.n_vertices, "lbt_forward")
    coeffs = matmul(Tensor(basis.arrays(precision.dtype())["fwd_T"]), x)
    return SpectrumFeature(coeffs, basis)


def lbt_inverse(s: SpectrumFeature, basis: SpectralBasis) -> Tensor:
    if s.basis_ref is not basis:
        raise ContractError("spectrum feature is bound to a different basis")
    if s.n_rows != basis.n_freq:
        raise DimensionError(
            f"coefficient rows {s.coeffs.shape} do not match n_freq {basis.n_freq}"
        )
    return matmul(Tensor(basis.arrays(precision.dtype())["phi"]), s.coeffs)


def pc_lbt_forward(x: Tensor, basis: SpectralBasis, gates: GateField) -> SpectrumFeature:
    _check_points(x, basis.n_vertices, "pc_lbt_forward")
    _check_gates(gates, basis.n_vertices, basis.n_freq)
    if gates.normalization == "uniform_bypass":
        return lbt_forward(x, basis)
    cols = basis.arrays(precision.dtype())["fwd"]
    gated = mul(gates.values, Tensor(cols))  # (..., N, K)
    coeffs = matmul_tn(gated, x)
    return SpectrumFeature(coeffs, basis)


def pc_lbt_inverse(s: SpectrumFeature, basis: SpectralBasis, gates: GateField) -> Tensor:
    if s.basis_ref is not basis:
        raise ContractError("spectrum feature is bound to a different basis")
    _check_gates(gates, basis.n_vertices, basis.n_freq)
    if gates.normalization == "uniform_bypass":
        return lbt_inverse(s, basis)
    phi = basis.arrays(precision.dtype())["phi"]
    gated = mul(gates.values, Tensor(phi))
    return matmul(gated, s.coeffs)


def transpose_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, axes)


# ---------------------------------------------------------------------------
# Fourier transforms on uniform 1-d grids (real cos/sin channel pairs)


@lru_cache(maxsize=32)
def _fourier_blocks(n: int, n_freq: int, dtype_str: str):
    """cos/sin blocks of the truncated DFT matrix, (N, n_freq) each, plus
    their transposes, in the requested dtype."""
    j = np.arange(n)[:, None]
    k = np.arange(n_freq)[None, :]
    ang = 2.0 * np.pi * j * k / n
    dt = np.dtype(dtype_str)
    c = np.cos(ang).astype(dt)
    s = np.sin(ang).astype(dt)
    return c, s, np.ascontiguousarray(c.T), np.ascontiguousarray(s.T)


def _dft_blocks(n: int, n_freq: int):
    if not 1 <= n_freq <= n // 2 + 1:
        raise ContractError(
            f"n_freq must be in [1, {n // 2 + 1}] for {n} points, got {n_freq}"
        )
    return _fourier_blocks(n, n_freq, precision.dtype().str)


class DftRef:
    """Binding token for Fourier spectrum features."""

    def __init__(self, n: int, n_freq: int):
        self.n = n
        self.n_freq = n_freq

    def __eq__(self, other):
        return (
            isinstance(other, DftRef)
            and (self.n, self.n_freq) == (other.n, other.n_freq)
        )

    def __hash__(self):
        return hash((self.n, self.n_freq))


def dft_forward(x: Tensor, n_freq: int) -> SpectrumFeature:
    n = x.shape[-2]
    c, s, ct, st = _dft_blocks(n, n_freq)
    re = matmul(Tensor(ct), x)
    im = matmul(Tensor(st), x)
    return SpectrumFeature(concat([re, im], axis=-2), DftRef(n, n_freq))


def dft_inverse(spec: SpectrumFeature, n_points: int) -> Tensor:
    ref = spec.basis_ref
    if not isinstance(ref, DftRef) or ref.n != n_points:
        raise ContractError("spectrum feature is not bound to this Fourier grid")
    c, s, ct, st = _dft_blocks(n_points, ref.n_freq)
    re, im = split(spec.coeffs, [ref.n_freq, ref.n_freq], axis=-2)
    y = matmul(Tensor(c), re) + matmul(Tensor(s), im)
    return scale(y, 1.0 / n_points)


def pc_dft_forward(x: Tensor, n_freq: int, gates: GateField) -> SpectrumFeature:
    n = x.shape[-2]
    _check_gates(gates, n, n_freq)
    if gates.normalization == "uniform_bypass":
        return dft_forward(x, n_freq)
    c, s, ct, st = _dft_blocks(n, n_freq)
    gc = mul(gates.values, Tensor(c))
    gs = mul(gates.values, Tensor(s))
    re = matmul_tn(gc, x)
    im = matmul_tn(gs, x)
    return SpectrumFeature(concat([re, im], axis=-2), DftRef(n, n_freq))


def pc_dft_inverse(spec: SpectrumFeature, n_points: int, gates: GateField) -> Tensor:
    ref = spec.basis_ref
    if not isinstance(ref, DftRef) or ref.n != n_points:
        raise ContractError("spectrum feature is not bound to this Fourier grid")
    _check_gates(gates, n_points, ref.n_freq)
    if gates.normalization == "uniform_bypass":
        return dft_inverse(spec, n_points)
    c, s, ct, st = _dft_blocks(n_points, ref.n_freq)
    gc = mul(gates.values, Tensor(c))
    gs = mul(gates.values, Tensor(s))
    re, im = split(spec.coeffs, [ref.n_freq, ref.n_freq], axis=-2)
    y = matmul(gc, re) + matmul(gs, im)
    return scale(y, 1.0 / n_points)


def check_uniform_1d(coords: np.ndarray, tol: float = 1e-9):
    """Fourier mixers require equally spaced points on a line."""
    c = np.asarray(coords)
    if c.ndim == 2:
        if c.shape[1] != 1:
            raise ContractError(
                f"Fourier transform needs 1-d coordinates, got dim {c.shape[1]}"
            )
        c = c[:, 0]
    d = np.diff(c)
    if d.size == 0 or np.any(d <= 0):
        raise ContractError("Fourier transform needs strictly increasing points")
    spread = np.max(d) - np.min(d)
    if spread > tol * max(np.max(np.abs(c)), 1.0):
        raise ContractError(
            f"Fourier transform needs a uniform grid; spacing varies by {spread:.3e}"
        )


# ---------------------------------------------------------------------------
# gate diagnostics


def frequency_intensity(gates: GateField) -> np.ndarray:
    """Per point: sum of the high-frequency half of the gates minus the sum
    of the low-frequency half. In [-1, 1] for softmax-normalized gates."""
    k = gates.n_freq
    if k % 2 != 0:
        raise ContractError(f"frequency intensity needs an even n_freq, got {k}")
    v = gates.values.data
    return v[..., k // 2 :].sum(axis=-1) - v[..., : k // 2].sum(axis=-1)
