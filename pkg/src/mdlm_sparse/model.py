"""Toy bidirectional masked-diffusion transformer: config, weights, sublayers, weight files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .numerics import Rng, ShapeError, gelu, matmul, rng_normal_fill, rope_rotate

RESIDUAL_MODES = ("paper_literal", "residual")

WEIGHT_MAGIC = b"DYLM"
WEIGHT_VERSION = 1


class ConfigError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class UnsupportedVersionError(WeightFileError):
    pass


class UnexpectedEOFError(WeightFileError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 8
    n_kv_heads: int = 8
    d_ff: int = 512
    vocab_size: int = 512
    mask_token_id: int = 511
    rope_theta: float = 10000.0
    residual_mode: str = "paper_literal"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError(f"d_head={self.d_model // self.n_heads} must be even for RoPE")
        if not 0 <= self.mask_token_id < self.vocab_size:
            raise ConfigError(f"mask_token_id={self.mask_token_id} outside vocabulary of {self.vocab_size}")
        if not self.rope_theta > 0:
            raise ConfigError(f"rope_theta must be positive, got {self.rope_theta}")
        if self.residual_mode not in RESIDUAL_MODES:
            raise ConfigError(f"residual_mode must be one of {RESIDUAL_MODES}, got {self.residual_mode!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.d_head

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    attn_gain: np.ndarray
    ffn_gain: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights] = field(default_factory=list)
    final_gain: np.ndarray | None = None
    lm_head: np.ndarray | None = None

    def tensors(self):
        """``(name, array)`` pairs in initialization / file order."""
        yield "embedding", self.embedding
        for i, lw in enumerate(self.layers):
            for f in fields(LayerWeights):
                yield f"layers.{i}.{f.name}", getattr(lw, f.name)
        yield "final_gain", self.final_gain
        yield "lm_head", self.lm_head

    def equals(self, other: "ModelWeights") -> bool:
        if self.config != other.config:
            return False
        mine = list(self.tensors())
        theirs = list(other.tensors())
        return len(mine) == len(theirs) and all(
            a[0] == b[0] and a[1].shape == b[1].shape and np.array_equal(a[1], b[1]) for a, b in zip(mine, theirs)
        )


def _tensor_shapes(cfg: ModelConfig):
    d, kv, ff = cfg.d_model, cfg.kv_width, cfg.d_ff
    shapes = [("embedding", (cfg.vocab_size, d))]
    per_layer = {
        "wq": (d, d),
        "wk": (d, kv),
        "wv": (d, kv),
        "wo": (d, d),
        "w1": (d, ff),
        "w2": (ff, d),
        "attn_gain": (d,),
        "ffn_gain": (d,),
    }
    for i in range(cfg.n_layers):
        shapes += [(f"layers.{i}.{k}", s) for k, s in per_layer.items()]
    shapes += [("final_gain", (d,)), ("lm_head", (d, cfg.vocab_size))]
    return shapes


def _assemble(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelWeights:
    layers = [
        LayerWeights(**{f.name: arrays[f"layers.{i}.{f.name}"] for f in fields(LayerWeights)})
        for i in range(cfg.n_layers)
    ]
    return ModelWeights(cfg, arrays["embedding"], layers, arrays["final_gain"], arrays["lm_head"])


def init_weights(config: ModelConfig, seed: int, stddev: float = 0.02) -> ModelWeights:
    """Seeded weights from one SplitMix64 stream.

    Draw order: embedding, then per layer Wq, Wk, Wv, Wo, W1, W2, then lm_head.
    Gains are ones and consume no draws. ``stddev=0`` gives zero projections.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("config must be a ModelConfig")
    rng = Rng(seed)
    arrays = {}
    for name, shape in _tensor_shapes(config):
        if len(shape) == 1:
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = rng_normal_fill(rng, shape[0], shape[1], stddev)
    return _assemble(config, arrays)


def _check_rows(weights: ModelWeights, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != weights.config.d_model:
        raise ShapeError(f"expected rows of width d_model={weights.config.d_model}, got {x.shape}")


def qkv_project(weights: ModelWeights, layer: int, x_rows, positions):
    """Q, K, V for the given (already normalized) rows, with RoPE on Q and K.

    ``positions`` are the rows' global sequence indices.
    """
    x_rows = np.asarray(x_rows, dtype=np.float64)
    _check_rows(weights, x_rows)
    cfg = weights.config
    lw = weights.layers[layer]
    q = rope_rotate(matmul(x_rows, lw.wq), positions, cfg.rope_theta, cfg.d_head)
    k = rope_rotate(matmul(x_rows, lw.wk), positions, cfg.rope_theta, cfg.d_head)
    v = matmul(x_rows, lw.wv)
    return q, k, v


def kv_project(weights: ModelWeights, layer: int, x_rows, positions):
    """K and V only (the salient-row re-projection in a sparse step)."""
    x_rows = np.asarray(x_rows, dtype=np.float64)
    _check_rows(weights, x_rows)
    cfg = weights.config
    lw = weights.layers[layer]
    k = rope_rotate(matmul(x_rows, lw.wk), positions, cfg.rope_theta, cfg.d_head)
    return k, matmul(x_rows, lw.wv)


def q_project(weights: ModelWeights, layer: int, x_rows, positions):
    x_rows = np.asarray(x_rows, dtype=np.float64)
    _check_rows(weights, x_rows)
    cfg = weights.config
    return rope_rotate(matmul(x_rows, weights.layers[layer].wq), positions, cfg.rope_theta, cfg.d_head)


def ffn_forward(weights: ModelWeights, layer: int, x_rows) -> np.ndarray:
    """Two-layer GELU MLP applied row by row: ``GELU(x W1) W2``."""
    x_rows = np.asarray(x_rows, dtype=np.float64)
    _check_rows(weights, x_rows)
    lw = weights.layers[layer]
    return matmul(gelu(matmul(x_rows, lw.w1)), lw.w2)


# -- weight files ------------------------------------------------------------

_CONFIG_INTS = ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "mask_token_id")


def save_weights(weights: ModelWeights, path) -> None:
    """Write ``weights`` in the little-endian DYLM format.

    Layout: magic, u32 version, the seven integer config fields as u32 in
    declaration order, rope_theta as f64, residual_mode as u32 index, then
    every tensor as raw f64 in initialization order.
    """
    cfg = weights.config
    parts = [WEIGHT_MAGIC, struct.pack("<I", WEIGHT_VERSION)]
    parts.append(struct.pack("<7I", *(getattr(cfg, n) for n in _CONFIG_INTS)))
    parts.append(struct.pack("<d", cfg.rope_theta))
    parts.append(struct.pack("<I", RESIDUAL_MODES.index(cfg.residual_mode)))
    for (name, shape), (_, arr) in zip(_tensor_shapes(cfg), weights.tensors()):
        if arr.shape != shape:
            raise ShapeError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> ModelWeights:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHT_MAGIC:
        raise BadMagicError(f"bad magic in {path}: {data[:4]!r}")
    offset = 4

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise UnexpectedEOFError(f"unexpected end of file while reading {what}")
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != WEIGHT_VERSION:
        raise UnsupportedVersionError(f"unsupported weight file version {version}")
    ints = struct.unpack("<7I", take(28, "config"))
    (theta,) = struct.unpack("<d", take(8, "config.rope_theta"))
    (mode,) = struct.unpack("<I", take(4, "config.residual_mode"))
    if mode >= len(RESIDUAL_MODES):
        raise WeightFileError(f"unknown residual_mode index {mode}")
    try:
        cfg = ModelConfig(**dict(zip(_CONFIG_INTS, ints)), rope_theta=theta, residual_mode=RESIDUAL_MODES[mode])
    except ConfigError as exc:
        raise WeightFileError(f"invalid config in weight file: {exc}") from exc
    arrays = {}
    for name, shape in _tensor_shapes(cfg):
        n = int(np.prod(shape))
        raw = take(8 * n, f"tensor {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if offset != len(data):
        raise WeightFileError(f"{len(data) - offset} trailing bytes after last tensor")
    return _assemble(cfg, arrays)
