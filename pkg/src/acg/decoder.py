"""Layer stack, KV cache and greedy decoding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import AttentionTrace, GuidanceConfig, LayerCache, guided_attention_block
from .model import ConfigError, ContextLayout, ModelWeights, MultimodalInput, assemble_context, embed_tokens

MODES = ("off", "full", "fast")


@dataclass
class KvCache:
    layers: list[LayerCache]
    positions: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, weights: ModelWeights) -> "KvCache":
        d = weights.config.d_model
        dtype = nx.get_dtype()
        return cls([LayerCache(np.zeros((0, d), dtype), np.zeros((0, d), dtype))
                    for _ in range(weights.config.n_layers)])

    @property
    def length(self) -> int:
        return len(self.positions)


@dataclass
class ForwardResult:
    last_hidden: np.ndarray  # final-normed row at the guided position
    hidden: list[np.ndarray]  # per-layer outputs for the rows processed
    traces: list[AttentionTrace]


def forward(
    sequence: np.ndarray,
    weights: ModelWeights,
    layout: ContextLayout,
    cfg: GuidanceConfig,
    *,
    cache: KvCache | None = None,
    positions=None,
    observe_layers=frozenset(),
    guided_rows=None,
) -> ForwardResult:
    """Run the new rows ``sequence`` through every block.

    Counts as one forward pass. Layers in ``observe_layers`` are traced even
    when not guided.
    """
    w = weights.working()
    config = w.config
    cfg.validate(config.n_layers)
    h = nx.asarray(sequence)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ConfigError("forward needs a non-empty 2-D sequence")
    n_past = cache.length if cache is not None else 0
    if positions is None:
        positions = np.arange(n_past, n_past + h.shape[0])
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (h.shape[0],):
        raise ConfigError("one position per new row required")

    nx.record_forward_pass()
    hidden, traces = [], []
    for i, lw in enumerate(w.layers):
        layer = i + 1
        h, trace = guided_attention_block(
            h, lw, layout, cfg, layer, config,
            cache=cache.layers[i] if cache is not None else None,
            positions=positions,
            observe=layer in observe_layers,
            guided_rows=guided_rows,
        )
        hidden.append(h)
        if trace is not None:
            traces.append(trace)
    if cache is not None:
        cache.positions.extend(int(p) for p in positions)
    last = nx.rms_norm_rows(h[-1:], w.final_norm, config.norm_eps)[0]
    return ForwardResult(last, hidden, traces)


def logits(last_hidden: np.ndarray, weights: ModelWeights) -> np.ndarray:
    return nx.matmul(nx.asarray(last_hidden)[None, :], weights.working().head)[0]


def greedy_pick(row: np.ndarray) -> int:
    """Argmax with ties going to the lowest id."""
    return int(np.argmax(row))


@dataclass
class DecodeResult:
    tokens: list[int]
    chosen_logits: list[float]
    traces: list[list[AttentionTrace]]
    stop_reason: str
    hidden: list[list[np.ndarray]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "chosen_logits": self.chosen_logits,
            "stop_reason": self.stop_reason,
        }


class DecodeSession:
    """Incremental decoding over one prompt; owns its cache.

    ``positions`` overrides the absolute positions of the prompt rows, used
    by text-only oracles that keep the original positions of surviving tokens.
    """

    def __init__(self, inp: MultimodalInput, weights: ModelWeights, cfg: GuidanceConfig,
                 *, use_cache: bool = True, positions=None, observe_layers=frozenset()):
        self.inp = inp
        self.weights = weights
        self.cfg = cfg
        self.use_cache = use_cache
        self.observe_layers = frozenset(observe_layers)
        self.generated: list[int] = []
        prompt_len = inp.layout.total
        self.prompt_positions = (np.arange(prompt_len) if positions is None
                                 else np.asarray(positions, dtype=np.int64))
        if self.prompt_positions.shape != (prompt_len,):
            raise ConfigError("prompt positions must cover every prompt row")
        self.cache = KvCache.empty(weights) if use_cache else None

    def _positions_for(self, n_generated: int) -> np.ndarray:
        start = int(self.prompt_positions[-1]) + 1
        return np.concatenate([self.prompt_positions, np.arange(start, start + n_generated)])

    def step(self) -> tuple[np.ndarray, ForwardResult]:
        """Logits for the next token given everything generated so far."""
        all_positions = self._positions_for(len(self.generated))
        guided_rows = None
        if self.cache is None or self.cache.length == 0:
            seq, layout = assemble_context(self.inp, self.generated, self.weights)
            positions = all_positions
            if self.cache is None:
                # every response position was the guided query at its own step
                guided_rows = range(self.inp.layout.total - 1, layout.total)
        else:
            seq = embed_tokens(self.generated[-1:], self.weights)
            layout = self.inp.layout.extend(len(self.generated))
            positions = all_positions[-1:]
        result = forward(seq, self.weights, layout, self.cfg, cache=self.cache, positions=positions,
                         observe_layers=self.observe_layers, guided_rows=guided_rows)
        step_index = len(self.generated) + 1
        for t in result.traces:
            t.step = step_index
        return logits(result.last_hidden, self.weights), result

    def push(self, token: int) -> None:
        self.generated.append(int(token))


def decode_greedy(
    inp: MultimodalInput,
    weights: ModelWeights,
    cfg: GuidanceConfig,
    max_new_tokens: int,
    eos_id: int | None = None,
    *,
    use_cache: bool = True,
    observe_layers=frozenset(),
    keep_hidden: bool = False,
) -> DecodeResult:
    if max_new_tokens < 1:
        raise ConfigError("max_new_tokens must be at least 1")
    session = DecodeSession(inp, weights, cfg, use_cache=use_cache, observe_layers=observe_layers)
    tokens, chosen, traces, hidden = [], [], [], []
    stop = "max_tokens"
    for _ in range(max_new_tokens):
        row, result = session.step()
        token = greedy_pick(row)
        tokens.append(token)
        chosen.append(float(row[token]))
        traces.append(result.traces)
        if keep_hidden:
            hidden.append([h[-1].copy() for h in result.hidden])
        session.push(token)
        if eos_id is not None and token == eos_id:
            stop = "eos"
            break
    return DecodeResult(tokens, chosen, traces, stop, hidden)


def fast_layer_count(n_layers: int) -> int:
    """Leading layers guided in fast mode: a quarter of the stack, at least one."""
    return max(1, int(np.floor(n_layers / 4 + 0.5)))


def mode_preset(name: str, n_layers: int, gamma: float = 2.4, **kwargs) -> GuidanceConfig:
    """``off`` (no guidance), ``full`` (every layer), or ``fast`` (first quarter)."""
    if name == "off":
        return GuidanceConfig(gamma=0.0, target_layers=frozenset(), **kwargs)
    if name == "full":
        return GuidanceConfig(gamma=gamma, target_layers=frozenset(range(1, n_layers + 1)), **kwargs)
    if name == "fast":
        return GuidanceConfig(gamma=gamma, target_layers=frozenset(range(1, fast_layer_count(n_layers) + 1)), **kwargs)
    raise ConfigError(f"unknown mode {name!r}; choose from {MODES}")


def layer_blocks(n_layers: int, n_blocks: int = 4) -> dict[str, frozenset]:
    """Split the stack into contiguous early/early-mid/mid-late/late blocks."""
    names = ["early", "early-mid", "mid-late", "late"] if n_blocks == 4 else [f"block{i + 1}" for i in range(n_blocks)]
    edges = np.linspace(0, n_layers, n_blocks + 1).round().astype(int)
    return {names[i]: frozenset(range(edges[i] + 1, edges[i + 1] + 1)) for i in range(n_blocks)}
