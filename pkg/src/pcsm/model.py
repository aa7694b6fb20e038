"""The point-calibrated spectral mixer network.

Architecture: pointwise lift of [input field || normalized coordinates],
a stack of residual blocks (token mixing through a multi-head spectral
mixer, then channel mixing through a feed-forward layer, each behind a
LayerNorm), and a pointwise output projection.

Each head of a mixer owns a two-layer gate MLP that predicts per-point
frequency gates from the head's features; the gates calibrate both the
forward and the inverse spectral transform of that head. All per-head
parameters are stored stacked on a leading head axis so the whole mixer
runs as batched matrix products.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import precision
from .basis import SpectralBasis, sparse_frequency_select
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import (
    Parameter,
    Tensor,
    add,
    broadcast_to,
    concat,
    gelu,
    layernorm,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    tmean,
    transpose,
)
from .transforms import (
    GateField,
    SpectrumFeature,
    check_uniform_1d,
    dft_forward,
    dft_inverse,
    frequency_intensity,
    lbt_forward,
    lbt_inverse,
    pc_dft_forward,
    pc_dft_inverse,
    pc_lbt_forward,
    pc_lbt_inverse,
)

MIXER_KINDS = ("pc_lbt", "lbt_fixed", "pc_dft", "dft_fixed")
GATE_MODES = ("softmax", "sigmoid", "none")
GATE_INPUTS = ("features", "spectral_coeffs", "both")
GATE_SCOPES = ("point", "global")
GATE_STAGES = ("post_norm", "pre_norm")
ACTIVATIONS = ("gelu", "relu")

CHECKPOINT_MAGIC = b"PCSC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    depth: int
    width: int
    heads: int
    n_freq: int
    in_channels: int
    out_channels: int
    coord_channels: int = 2
    mixer_kind: str = "pc_lbt"
    gate_mode: str = "softmax"
    gate_input: str = "features"
    gate_scope: str = "point"
    gate_stage: str = "post_norm"
    activation: str = "gelu"
    sparse_layers: list = field(default_factory=list)

    def __post_init__(self):
        self.sparse_layers = [tuple(int(v) for v in p) for p in self.sparse_layers]

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def gated(self) -> bool:
        return self.mixer_kind in ("pc_lbt", "pc_dft")

    @property
    def fourier(self) -> bool:
        return self.mixer_kind in ("pc_dft", "dft_fixed")

    def validate(self) -> None:
        problems = []
        if self.depth < 0:
            problems.append(f"depth must be >= 0, got {self.depth}")
        if self.width < 1:
            problems.append(f"width must be >= 1, got {self.width}")
        if self.heads < 1:
            problems.append(f"heads must be >= 1, got {self.heads}")
        elif self.width % self.heads != 0:
            problems.append(
                f"width {self.width} not divisible by heads {self.heads}"
            )
        if self.n_freq < 1:
            problems.append(f"n_freq must be >= 1, got {self.n_freq}")
        if self.in_channels < 1:
            problems.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels < 1:
            problems.append(f"out_channels must be >= 1, got {self.out_channels}")
        if self.coord_channels not in (1, 2, 3):
            problems.append(
                f"coord_channels must be 1..3, got {self.coord_channels}"
            )
        for name, value, allowed in (
            ("mixer_kind", self.mixer_kind, MIXER_KINDS),
            ("gate_mode", self.gate_mode, GATE_MODES),
            ("gate_input", self.gate_input, GATE_INPUTS),
            ("gate_scope", self.gate_scope, GATE_SCOPES),
            ("gate_stage", self.gate_stage, GATE_STAGES),
            ("activation", self.activation, ACTIVATIONS),
        ):
            if value not in allowed:
                problems.append(f"{name} must be one of {allowed}, got {value!r}")
        if (self.gate_mode == "none") != (not self.gated):
            problems.append(
                f"gate_mode {self.gate_mode!r} inconsistent with mixer_kind "
                f"{self.mixer_kind!r} (fixed mixers take gate_mode='none')"
            )
        seen = set()
        for pair in self.sparse_layers:
            if len(pair) != 2:
                problems.append(f"sparse_layers entries are (layer, r), got {pair}")
                continue
            layer, r = pair
            if not 0 <= layer < max(self.depth, 1):
                problems.append(f"sparse layer index {layer} out of range")
            if layer in seen:
                problems.append(f"sparse layer index {layer} repeated")
            seen.add(layer)
            if r not in (1, 2, 4):
                problems.append(f"sparsity ratio must be 1, 2 or 4, got {r}")
        if self.sparse_layers and self.fourier:
            problems.append("sparse_layers only apply to eigenbasis mixers")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(blob: str) -> "ModelConfig":
        doc = json.loads(blob)
        cfg = ModelConfig(**doc)
        cfg.validate()
        return cfg


class PCSMModel:
    """Parameter registry plus the forward computation."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self._layer_basis_cache: dict = {}

    def _register(self, name: str, data) -> Parameter:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        for name, p in self.params.items():
            if name in state:
                arr = np.asarray(state[name], dtype=p.data.dtype)
                if arr.shape != p.data.shape:
                    raise DimensionError(
                        f"{name}: checkpoint shape {arr.shape} vs model {p.data.shape}"
                    )
                p.tensor.data = np.ascontiguousarray(arr)
            elif strict:
                raise ContractError(f"missing parameter {name!r} in state dict")


def count_params(model: PCSMModel) -> int:
    return sum(p.data.size for p in model.parameters())


def _glorot(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def build(config: ModelConfig, seed: int = 0) -> PCSMModel:
    """Construct a model with scaled-uniform weights and zero biases;
    bit-identical for identical (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    dt = precision.dtype()
    model = PCSMModel(config)
    dv, h, dh, k = config.width, config.heads, config.head_dim, config.n_freq
    d_in = config.in_channels + config.coord_channels

    def weight(name, shape):
        model._register(name, _glorot(rng, shape).astype(dt))

    def zeros(name, shape):
        model._register(name, np.zeros(shape, dtype=dt))

    def ones(name, shape):
        model._register(name, np.ones(shape, dtype=dt))

    gate_in = {"features": dh, "spectral_coeffs": dh, "both": 2 * dh}[config.gate_input]

    weight("lift.w", (d_in, dv))
    zeros("lift.b", (dv,))
    for i in range(config.depth):
        pre = f"blocks.{i}"
        ones(f"{pre}.norm1.gain", (dv,))
        zeros(f"{pre}.norm1.bias", (dv,))
        if config.gated:
            weight(f"{pre}.mixer.gate_mlp.w1", (h, gate_in, dh))
            zeros(f"{pre}.mixer.gate_mlp.b1", (h, 1, dh))
            weight(f"{pre}.mixer.gate_mlp.w2", (h, dh, k))
            zeros(f"{pre}.mixer.gate_mlp.b2", (h, 1, k))
        ones(f"{pre}.mixer.snorm.gain", (h, 1, dh))
        zeros(f"{pre}.mixer.snorm.bias", (h, 1, dh))
        weight(f"{pre}.mixer.fc.w", (h, dh, dh))
        zeros(f"{pre}.mixer.fc.b", (h, 1, dh))
        ones(f"{pre}.norm2.gain", (dv,))
        zeros(f"{pre}.norm2.bias", (dv,))
        weight(f"{pre}.ffn.w1", (dv, 2 * dv))
        zeros(f"{pre}.ffn.b1", (2 * dv,))
        weight(f"{pre}.ffn.w2", (2 * dv, dv))
        zeros(f"{pre}.ffn.b2", (dv,))
    weight("head.w", (dv, config.out_channels))
    zeros("head.b", (config.out_channels,))
    return model


def _activation(config: ModelConfig):
    return gelu if config.activation == "gelu" else relu


def _split_heads(x: Tensor, h: int, dh: int) -> Tensor:
    b, n, _ = x.shape
    return transpose(reshape(x, (b, n, h, dh)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _fixed_roundtrip(x: Tensor, config: ModelConfig, basis) -> Tensor:
    """Band-limited copy of x: fixed forward transform mapped back per
    point; the spectral-coefficient conditioning mode for the gate MLP."""
    if config.fourier:
        return dft_inverse(dft_forward(x, config.n_freq), x.shape[-2])
    if basis is None:
        raise ContractError("spectral gate conditioning needs a basis")
    return lbt_inverse(lbt_forward(x, basis), basis)


def predict_gates(
    x_in: Tensor, mlp: dict, config: ModelConfig, basis=None
) -> GateField:
    """Point-wise frequency gates from a two-layer MLP (hidden width =
    head dim, gelu), normalized per point by softmax over the frequency
    axis (or sigmoid per entry). Global scope mean-pools the input over
    points and broadcasts one shared gate row.

    x_in carries the head features with trailing shape (N, d_head); the
    spectral conditioning modes are resolved by the caller or here when a
    basis is supplied.
    """
    if config.gate_mode == "none":
        raise ContractError("fixed mixers have no gates to predict")
    n = x_in.shape[-2]
    gin = x_in
    if config.gate_input in ("spectral_coeffs", "both"):
        z = _fixed_roundtrip(x_in, config, basis)
        gin = z if config.gate_input == "spectral_coeffs" else concat([x_in, z], axis=-1)
    if config.gate_scope == "global":
        gin = tmean(gin, axis=-2, keepdims=True)
    hdn = gelu(add(matmul(gin, mlp["w1"]), mlp["b1"]))
    logits = add(matmul(hdn, mlp["w2"]), mlp["b2"])
    if config.gate_mode == "softmax":
        gates = softmax(logits, axis=-1)
        norm = "softmax_per_point"
    else:
        gates = sigmoid(logits)
        norm = "sigmoid"
    if config.gate_scope == "global":
        gates = broadcast_to(gates, gates.shape[:-2] + (n, gates.shape[-1]))
    return GateField(gates, norm)


def _layer_basis(model: PCSMModel, basis: SpectralBasis, layer: int) -> SpectralBasis:
    k = model.config.n_freq
    r = dict(model.config.sparse_layers).get(layer, 1)
    if basis.n_freq == k and r == 1:
        return basis
    key = (basis.mesh_id, basis.n_freq, basis.inner_product, k, r)
    cached = model._layer_basis_cache.get(key)
    if cached is None:
        cached = sparse_frequency_select(basis, k, r)
        model._layer_basis_cache[key] = cached
    return cached


def _mixer(
    model: PCSMModel,
    layer: int,
    x_norm: Tensor,
    x_raw: Tensor,
    basis,
    bypass_gates: bool,
    capture,
) -> Tensor:
    cfg = model.config
    p = model.params
    pre = f"blocks.{layer}.mixer"
    h, dh = cfg.heads, cfg.head_dim
    n = x_norm.shape[-2]

    xh = _split_heads(x_norm, h, dh)  # (B, h, N, dh)
    if cfg.gated and not bypass_gates:
        gate_src = xh if cfg.gate_stage == "post_norm" else _split_heads(x_raw, h, dh)
        mlp = {
            "w1": p[f"{pre}.gate_mlp.w1"].tensor,
            "b1": p[f"{pre}.gate_mlp.b1"].tensor,
            "w2": p[f"{pre}.gate_mlp.w2"].tensor,
            "b2": p[f"{pre}.gate_mlp.b2"].tensor,
        }
        gates = predict_gates(gate_src, mlp, cfg, basis)
    else:
        gates = GateField.uniform_bypass(n, cfg.n_freq)
    if capture is not None:
        capture.append((layer, gates))

    if cfg.fourier:
        spec = pc_dft_forward(xh, cfg.n_freq, gates)
    else:
        spec = pc_lbt_forward(xh, basis, gates)
    coeffs = layernorm(
        spec.coeffs, p[f"{pre}.snorm.gain"].tensor, p[f"{pre}.snorm.bias"].tensor
    )
    coeffs = add(matmul(coeffs, p[f"{pre}.fc.w"].tensor), p[f"{pre}.fc.b"].tensor)
    mixed = SpectrumFeature(coeffs, spec.basis_ref)
    if cfg.fourier:
        y = pc_dft_inverse(mixed, n, gates)
    else:
        y = pc_lbt_inverse(mixed, basis, gates)
    return _merge_heads(y)


def forward(
    model: PCSMModel,
    a,
    coords,
    basis: SpectralBasis | None = None,
    *,
    bypass_gates: bool = False,
    capture_gates: list | None = None,
) -> Tensor:
    """Map an input field (plus coordinates) to the output field.

    a: (N, d_a) or batched (B, N, d_a); coords: (N, d). The eigenbasis
    mixers require a basis over the same N points with at least n_freq
    modes (more when sparse layers are configured); the Fourier mixers
    require uniformly spaced 1-d coords instead.
    """
    cfg = model.config
    p = model.params
    a = a if isinstance(a, Tensor) else Tensor(a)
    squeeze = a.ndim == 2
    if squeeze:
        a = reshape(a, (1,) + a.shape)
    if a.ndim != 3 or a.shape[-1] != cfg.in_channels:
        raise DimensionError(
            f"input must be (B, N, {cfg.in_channels}), got {a.shape}"
        )
    n = a.shape[1]
    coords_arr = coords.data if isinstance(coords, Tensor) else np.asarray(coords)
    if coords_arr.ndim != 2 or coords_arr.shape != (n, cfg.coord_channels):
        raise DimensionError(
            f"coords must be ({n}, {cfg.coord_channels}), got {coords_arr.shape}"
        )
    if cfg.fourier:
        if cfg.depth > 0:
            check_uniform_1d(coords_arr)
    elif cfg.depth > 0:
        if basis is None:
            raise ContractError("eigenbasis mixers need a spectral basis")
        if basis.n_vertices != n:
            raise DimensionError(
                f"basis over {basis.n_vertices} points does not match N={n}"
            )
        max_r = max((r for _, r in cfg.sparse_layers), default=1)
        if basis.n_freq < cfg.n_freq * max_r:
            raise ContractError(
                f"basis holds {basis.n_freq} modes; config needs "
                f"{cfg.n_freq * max_r}"
            )

    lo = coords_arr.min(axis=0)
    span = coords_arr.max(axis=0) - lo
    span[span == 0] = 1.0
    cnorm = ((coords_arr - lo) / span).astype(precision.dtype())
    b = a.shape[0]
    coords_b = broadcast_to(Tensor(cnorm), (b, n, cfg.coord_channels))

    x = concat([a, coords_b], axis=-1)
    x = add(matmul(x, p["lift.w"].tensor), p["lift.b"].tensor)
    for i in range(cfg.depth):
        layer_basis = None if cfg.fourier else _layer_basis(model, basis, i)
        xn = layernorm(
            x, p[f"blocks.{i}.norm1.gain"].tensor, p[f"blocks.{i}.norm1.bias"].tensor
        )
        x = add(_mixer(model, i, xn, x, layer_basis, bypass_gates, capture_gates), x)
        xn = layernorm(
            x, p[f"blocks.{i}.norm2.gain"].tensor, p[f"blocks.{i}.norm2.bias"].tensor
        )
        act = _activation(cfg)
        hdn = act(add(matmul(xn, p[f"blocks.{i}.ffn.w1"].tensor), p[f"blocks.{i}.ffn.b1"].tensor))
        x = add(add(matmul(hdn, p[f"blocks.{i}.ffn.w2"].tensor), p[f"blocks.{i}.ffn.b2"].tensor), x)
    out = add(matmul(x, p["head.w"].tensor), p["head.b"].tensor)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def export_gates(model: PCSMModel, a, coords, basis=None):
    """Run a forward pass capturing every mixer's gates.

    Returns (gate_fields, intensities): gate_fields[layer][head] is a
    GateField over (N, n_freq) for the first batch element; intensities is
    an (depth, heads, N) array of high-minus-low frequency sums.
    """
    if not model.config.gated:
        raise ContractError("fixed-mixer models have no gates to export")
    captured: list = []
    forward(model, a, coords, basis, capture_gates=captured)
    h = model.config.heads
    per_layer: list[list[GateField]] = []
    intensities = []
    for _, gates in sorted(captured, key=lambda t: t[0]):
        vals = gates.values.data
        if vals.ndim == 4:
            vals = vals[0]
        fields = [GateField(Tensor(vals[j].copy()), gates.normalization) for j in range(h)]
        per_layer.append(fields)
        intensities.append(np.stack([frequency_intensity(f) for f in fields]))
    return per_layer, np.stack(intensities) if intensities else np.zeros((0, h, 0))


# ---------------------------------------------------------------------------
# checkpoint io

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_FROM_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, model: PCSMModel) -> None:
    cfg_blob = model.config.to_json().encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<Q", len(model.params)))
        for name, par in model.params.items():
            nb = name.encode()
            arr = np.ascontiguousarray(par.data)
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> PCSMModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    config = ModelConfig.from_json(blob[off : off + cfg_len].decode())
    off += cfg_len
    (n_params,) = struct.unpack_from("<Q", blob, off)
    off += 8
    state = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode()
        off += name_len
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        dt = _DTYPE_FROM_CODE[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(shape)
        off += dt.itemsize * count
        state[name] = arr
    with precision.precision_scope("f32" if next(iter(state.values())).dtype == np.float32 else "f64"):
        model = build(config, seed=0)
    model.load_state_dict(state)
    return model
