"""Model geometry, weights, context layout and the weight file format."""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx

MAGIC = b"ACGW"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid model configuration or input that does not fit the model."""


class WeightFormatError(ValueError):
    """A weight file that cannot be decoded."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    d_ffn: int = 176
    vocab_size: int = 256
    rope_enabled: bool = True
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_ffn", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads * d_head "
                f"({self.n_heads} * {self.d_head})"
            )
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.rope_enabled and self.d_head % 2:
            raise ConfigError("rotary embeddings need an even d_head")
        if not self.rope_theta > 0 or not self.norm_eps >= 0:
            raise ConfigError("rope_theta must be positive and norm_eps non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        if not isinstance(data, dict):
            raise ConfigError("model config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


PRESETS = {
    "desk": ModelConfig(),
    "single-layer": ModelConfig(n_layers=1, rope_enabled=False),
    "single-layer-rope": ModelConfig(n_layers=1, rope_enabled=True),
    "tiny": ModelConfig(n_layers=4, n_heads=2, d_model=32, d_head=16, d_ffn=64, vocab_size=64),
}
DEFAULT_N_VISUAL = 16


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray

    TENSORS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "attn_norm", "ffn_norm")

    def cast(self) -> "LayerWeights":
        return LayerWeights(*(nx.asarray(getattr(self, n)) for n in self.TENSORS))


@dataclass
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    head: np.ndarray
    _cast_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def tensors(self):
        """Yield ``(name, array)`` in serialization order."""
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            for name in LayerWeights.TENSORS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "final_norm", self.final_norm
        yield "head", self.head

    def expected_shapes(self):
        c = self.config
        d, f = c.d_model, c.d_ffn
        shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
                  "w_gate": (d, f), "w_up": (d, f), "w_down": (f, d),
                  "attn_norm": (d,), "ffn_norm": (d,)}
        yield "embed", (c.vocab_size, d)
        for i in range(c.n_layers):
            for name in LayerWeights.TENSORS:
                yield f"layers.{i}.{name}", shapes[name]
        yield "final_norm", (d,)
        yield "head", (d, c.vocab_size)

    def validate(self) -> None:
        if len(self.layers) != self.config.n_layers:
            raise ConfigError("layer count does not match config")
        for (name, arr), (_, shape) in zip(self.tensors(), self.expected_shapes()):
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ConfigError(f"{name} contains non-finite values")

    def working(self) -> "ModelWeights":
        """Weights cast to the current working precision (memoized per dtype)."""
        dtype = nx.get_dtype()
        if self.embed.dtype == dtype:
            return self
        cached = self._cast_cache.get(dtype)
        if cached is None:
            cached = ModelWeights(
                self.config,
                nx.asarray(self.embed),
                [layer.cast() for layer in self.layers],
                nx.asarray(self.final_norm),
                nx.asarray(self.head),
            )
            self._cast_cache[dtype] = cached
        return cached

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        save_weights(self, buf)
        return buf.getvalue()


def init_weights(config: ModelConfig, seed: int, proj_std: float | None = None) -> ModelWeights:
    """Seeded scaled-normal initialization; norms start at one.

    Projections use std 0.02/sqrt(n_layers) unless ``proj_std`` overrides it.
    Token embeddings use unit std so text rows sit on the same scale as
    standardized visual embeddings.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_weights expects a ModelConfig")
    rng = np.random.default_rng(seed)
    std = 0.02 / math.sqrt(config.n_layers) if proj_std is None else proj_std
    d, f = config.d_model, config.d_ffn

    def proj(shape):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    embed = rng.standard_normal((config.vocab_size, d)).astype(np.float32)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=proj((d, d)), wk=proj((d, d)), wv=proj((d, d)), wo=proj((d, d)),
            w_gate=proj((d, f)), w_up=proj((d, f)), w_down=proj((f, d)),
            attn_norm=np.ones(d, np.float32), ffn_norm=np.ones(d, np.float32),
        ))
    head = proj((d, config.vocab_size))
    weights = ModelWeights(config, embed, layers, np.ones(d, np.float32), head)
    weights.validate()
    return weights


def save_weights(weights: ModelWeights, dest) -> None:
    """Write ``ACGW`` | u32 version | u32 config length | config JSON | f32 tensors."""
    config_blob = json.dumps(weights.config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(config_blob)), config_blob]
    for _, arr in weights.tensors():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    data = b"".join(parts)
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(data)
    else:
        dest.write(data)


def load_weights(src) -> ModelWeights:
    if isinstance(src, (str, Path)):
        try:
            data = Path(src).read_bytes()
        except OSError as exc:
            raise WeightFormatError(f"cannot read weights {src}: {exc}") from exc
    else:
        data = src.read()
    if len(data) < 12:
        raise WeightFormatError("truncated file: header incomplete")
    if data[:4] != MAGIC:
        raise WeightFormatError("bad magic: not an ACGW weight file")
    version, config_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"version mismatch: file has {version}, expected {FORMAT_VERSION}")
    offset = 12
    if len(data) < offset + config_len:
        raise WeightFormatError("truncated file: config block incomplete")
    try:
        config = ModelConfig.from_dict(json.loads(data[offset:offset + config_len]))
    except (json.JSONDecodeError, ConfigError, TypeError) as exc:
        raise WeightFormatError(f"corrupt config block: {exc}") from exc
    offset += config_len

    skeleton = ModelWeights(config, None, [], None, None)
    arrays = {}
    for name, shape in skeleton.expected_shapes():
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise WeightFormatError(f"truncated file: tensor {name} incomplete")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(data):
        raise WeightFormatError(f"trailing bytes after last tensor ({len(data) - offset})")

    layers = [
        LayerWeights(**{n: arrays[f"layers.{i}.{n}"] for n in LayerWeights.TENSORS})
        for i in range(config.n_layers)
    ]
    weights = ModelWeights(config, arrays["embed"], layers, arrays["final_norm"], arrays["head"])
    try:
        weights.validate()
    except ConfigError as exc:
        raise WeightFormatError(str(exc)) from exc
    return weights


# ---------------------------------------------------------------------------
# context

@dataclass(frozen=True)
class ContextLayout:
    """Segment counts for ``[system | visual | query | response]``."""

    n_system: int
    n_visual: int
    n_query: int
    n_response: int = 0

    def __post_init__(self):
        for name in ("n_system", "n_visual", "n_query", "n_response"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.total == 0:
            raise ConfigError("empty context")

    @property
    def total(self) -> int:
        return self.n_system + self.n_visual + self.n_query + self.n_response

    @property
    def visual_start(self) -> int:
        return self.n_system

    @property
    def visual_stop(self) -> int:
        return self.n_system + self.n_visual

    @property
    def guided_index(self) -> int:
        """Position of the guided query: always the last row of the sequence."""
        return self.total - 1

    def is_visual(self, j: int) -> bool:
        return self.visual_start <= j < self.visual_stop

    def visual_flags(self) -> np.ndarray:
        flags = np.zeros(self.total, dtype=bool)
        flags[self.visual_start:self.visual_stop] = True
        return flags

    def extend(self, k: int = 1) -> "ContextLayout":
        return ContextLayout(self.n_system, self.n_visual, self.n_query, self.n_response + k)

    def text_only(self) -> "ContextLayout":
        return ContextLayout(self.n_system, 0, self.n_query, self.n_response)


@dataclass
class MultimodalInput:
    system_ids: list[int]
    visual: np.ndarray
    query_ids: list[int]

    def __post_init__(self):
        self.system_ids = [int(i) for i in self.system_ids]
        self.query_ids = [int(i) for i in self.query_ids]
        visual = np.asarray(self.visual, dtype=np.float64)
        if visual.size == 0:
            visual = visual.reshape(0, visual.shape[-1] if visual.ndim == 2 else 0)
        if visual.ndim != 2:
            raise ConfigError("visual embeddings must be a 2-D matrix")
        if not np.isfinite(visual).all():
            raise ConfigError("visual embeddings contain non-finite values")
        self.visual = visual
        if not self.query_ids:
            # the guided query must be a text token
            raise ConfigError("prompt needs at least one query token")

    @property
    def layout(self) -> ContextLayout:
        return ContextLayout(len(self.system_ids), self.visual.shape[0], len(self.query_ids))

    def without_visual(self) -> "MultimodalInput":
        return MultimodalInput(self.system_ids, self.visual[:0], self.query_ids)

    def with_visual(self, visual: np.ndarray) -> "MultimodalInput":
        return MultimodalInput(self.system_ids, visual, self.query_ids)


def _check_ids(ids, vocab_size: int, what: str) -> None:
    for i in ids:
        if not 0 <= i < vocab_size:
            raise ConfigError(f"{what} id {i} out of range for vocab of {vocab_size}")


def embed_tokens(ids, weights: ModelWeights) -> np.ndarray:
    w = weights.working()
    ids = list(ids)
    _check_ids(ids, w.config.vocab_size, "token")
    return np.ascontiguousarray(w.embed[np.asarray(ids, dtype=np.int64)]).reshape(len(ids), w.config.d_model)


def assemble_context(inp: MultimodalInput, generated, weights: ModelWeights):
    """Embed ``[system | visual | query | generated]`` into one sequence.

    Visual rows are copied verbatim; only token ids go through the embedding table.
    Returns ``(sequence, layout)``.
    """
    generated = list(generated)
    d = weights.config.d_model
    if inp.visual.shape[0] and inp.visual.shape[1] != d:
        raise ConfigError(f"visual embeddings have width {inp.visual.shape[1]}, model expects {d}")
    _check_ids(inp.system_ids, weights.config.vocab_size, "system")
    _check_ids(inp.query_ids, weights.config.vocab_size, "query")
    _check_ids(generated, weights.config.vocab_size, "generated")
    seq = np.concatenate([
        embed_tokens(inp.system_ids, weights),
        nx.asarray(inp.visual.reshape(-1, d)),
        embed_tokens(inp.query_ids, weights),
        embed_tokens(generated, weights),
    ])
    layout = ContextLayout(len(inp.system_ids), inp.visual.shape[0], len(inp.query_ids), len(generated))
    return nx.asarray(seq), layout


def synthetic_visual(n_visual: int, d_model: int, seed: int) -> np.ndarray:
    """Standard-normal stand-in for projected image features."""
    return np.random.default_rng(seed).standard_normal((n_visual, d_model))


def byte_ids(text: str, vocab_size: int = 256) -> list[int]:
    """Byte-level token ids, folded into the vocabulary."""
    return [b % vocab_size for b in text.encode("utf-8")]
