"""Self-attention with single-pass contrastive guidance at the guided query row.

The block computes Q, K and V once. The conditional output for the last row
uses the ordinary causal softmax; the unconditional surrogate reuses the same
score row with visual keys masked out. Their difference, optionally stripped of
its component along the unconditional output, is scaled and added back before
the output projection. All other rows are untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import ConfigError, ContextLayout, LayerWeights, ModelConfig


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = 0.0
    epsilon: float = 1e-6
    target_layers: frozenset = frozenset()
    orthogonalize: bool = True
    per_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target_layers", frozenset(int(l) for l in self.target_layers))
        if not math.isfinite(self.gamma):
            raise ConfigError("gamma must be finite")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    def validate(self, n_layers: int) -> None:
        bad = sorted(l for l in self.target_layers if not 1 <= l <= n_layers)
        if bad:
            raise ConfigError(f"target layers {bad} outside 1..{n_layers}")

    def guides(self, layer: int) -> bool:
        return layer in self.target_layers

    def with_layers(self, layers) -> "GuidanceConfig":
        return GuidanceConfig(self.gamma, self.epsilon, frozenset(layers), self.orthogonalize, self.per_head)

    def with_gamma(self, gamma: float) -> "GuidanceConfig":
        return GuidanceConfig(gamma, self.epsilon, self.target_layers, self.orthogonalize, self.per_head)


OFF = GuidanceConfig()


@dataclass
class HeadTrace:
    head: int
    a_cond: np.ndarray
    a_uncond: np.ndarray
    o_cond: np.ndarray
    o_uncond: np.ndarray
    visual_mass: float


@dataclass
class Correction:
    """One contrastive correction: per head, or over the joint row when ``heads`` spans all."""

    heads: tuple
    delta: np.ndarray
    u: np.ndarray
    delta_used: np.ndarray
    o_final: np.ndarray
    gamma: float


@dataclass
class AttentionTrace:
    layer: int
    n_visual: int
    guided: bool
    heads: list[HeadTrace] = field(default_factory=list)
    corrections: list[Correction] = field(default_factory=list)
    attn_residual: np.ndarray | None = None
    step: int | None = None

    @property
    def visual_mass(self) -> float:
        return float(np.mean([h.visual_mass for h in self.heads]))

    def to_record(self) -> dict:
        def vec(a):
            return [float(x) for x in a]

        return {
            "step": self.step,
            "layer": self.layer,
            "guided": self.guided,
            "n_visual": self.n_visual,
            "visual_mass": self.visual_mass,
            "heads": [
                {
                    "head": h.head,
                    "visual_mass": h.visual_mass,
                    "a_cond": vec(h.a_cond),
                    "a_uncond": vec(h.a_uncond),
                    "o_cond": vec(h.o_cond),
                    "o_uncond": vec(h.o_uncond),
                }
                for h in self.heads
            ],
            "corrections": [
                {
                    "heads": list(c.heads),
                    "delta": vec(c.delta),
                    "u": vec(c.u),
                    "delta_used": vec(c.delta_used),
                    "o_final": vec(c.o_final),
                }
                for c in self.corrections
            ],
        }


@dataclass
class LayerCache:
    keys: np.ndarray  # rotated, (n, d_model)
    values: np.ndarray

    @property
    def length(self) -> int:
        return self.keys.shape[0]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        self.keys = np.concatenate([self.keys, k])
        self.values = np.concatenate([self.values, v])


# ---------------------------------------------------------------------------
# pieces

def apply_rope(x: np.ndarray, positions: np.ndarray, n_heads: int, theta: float) -> np.ndarray:
    """Rotate interleaved (even, odd) pairs of every head by absolute position."""
    n, d = x.shape
    d_head = d // n_heads
    inv_freq = theta ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = nx.asarray(np.cos(angles))[:, None, :]
    sin = nx.asarray(np.sin(angles))[:, None, :]
    xh = x.reshape(n, n_heads, d_head)
    even, odd = xh[..., 0::2], xh[..., 1::2]
    out = np.empty_like(xh)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out.reshape(n, d)


def attention_scores(q: np.ndarray, keys: np.ndarray, d_k: int) -> np.ndarray:
    """Scaled dot products of each query row against every key row."""
    q2 = np.atleast_2d(nx.asarray(q))
    if q2.shape[1] != keys.shape[1]:
        raise nx.NumericsError(f"query width {q2.shape[1]} != key width {keys.shape[1]}")
    scores = nx.matmul(q2, nx.asarray(keys.T)) / q2.dtype.type(math.sqrt(d_k))
    return scores[0] if np.ndim(q) == 1 else scores


def conditional_output(scores, values: np.ndarray, mask=None):
    """``(A, A @ V)`` for one score row under an optional additive mask."""
    scores = nx.asarray(scores)
    mask = np.zeros_like(scores) if mask is None else nx.asarray(mask)
    a = nx.masked_softmax_row(scores, mask)
    return a, nx.matmul(a[None, :], values)[0]


def masked_unconditional_output(scores, values: np.ndarray, layout: ContextLayout, mask=None):
    """Same score row with every visual key hidden: ``(A_uncond, O_uncond)``."""
    scores = nx.asarray(scores)
    hide = nx.visual_mask(scores.shape[0], layout.visual_start, layout.visual_stop)
    if mask is not None:
        hide = hide + nx.asarray(mask)
    return conditional_output(scores, values, hide)


def contrastive_correction(o_cond, o_uncond, cfg: GuidanceConfig, heads=()) -> Correction:
    """Guided output ``o_cond + gamma * correction``.

    With orthogonalization the correction is ``o_cond - o_uncond`` minus its
    projection onto the unconditional direction. The direction is
    ``o_uncond / max(|o_uncond|, eps)``: a unit vector whenever the norm
    clears ``eps`` and the zero vector when ``o_uncond`` vanishes.
    """
    o_cond = nx.asarray(o_cond)
    o_uncond = nx.asarray(o_uncond)
    if o_cond.shape != o_uncond.shape:
        raise nx.NumericsError("conditional and unconditional outputs differ in length")
    delta = o_cond - o_uncond
    u = o_uncond / o_uncond.dtype.type(max(float(nx.norm2(o_uncond)), cfg.epsilon))
    delta_used = nx.project_out(delta, u) if cfg.orthogonalize else delta
    o_final = o_cond + o_cond.dtype.type(cfg.gamma) * delta_used
    return Correction(tuple(heads), delta, u, delta_used, o_final, cfg.gamma)


def causal_mask(n_new: int, n_past: int) -> np.ndarray:
    """Additive mask for ``n_new`` query rows following ``n_past`` cached keys."""
    n_total = n_past + n_new
    rows = np.arange(n_new)[:, None] + n_past
    cols = np.arange(n_total)[None, :]
    return nx.asarray(np.where(cols <= rows, 0.0, nx.MASK_SENTINEL))


def feed_forward(h: np.ndarray, lw: LayerWeights, eps: float) -> np.ndarray:
    y = nx.rms_norm_rows(h, lw.ffn_norm, eps)
    gate = nx.matmul(y, lw.w_gate)
    up = nx.matmul(y, lw.w_up)
    return nx.matmul(nx.silu(gate) * up, lw.w_down)


# ---------------------------------------------------------------------------
# the block

def guided_attention_block(
    h_prev: np.ndarray,
    lw: LayerWeights,
    layout: ContextLayout,
    cfg: GuidanceConfig,
    layer_idx: int,
    config: ModelConfig,
    *,
    cache: LayerCache | None = None,
    positions=None,
    observe: bool = False,
    guided_rows=None,
):
    """One pre-norm decoder block over the new rows ``h_prev``.

    ``layer_idx`` is 1-based. Guidance touches only the final row (the guided
    query) and only when ``layer_idx`` is a target layer. ``observe`` records
    the conditional and masked paths without applying a correction, which is
    how diagnostics read attention on unguided layers.

    ``cache`` holds keys and values of earlier positions and is extended in
    place. ``positions`` are absolute rotary positions of the new rows.
    ``guided_rows`` adds earlier rows that also receive the correction, each
    against its own causal prefix; a full recompute uses it to replay the
    guidance every response position got when it was the last row.

    Returns ``(h_next, trace)``; ``trace`` is None for untouched layers.
    """
    h_prev = nx.asarray(h_prev)
    n_new, d = h_prev.shape
    n_heads, d_k = config.n_heads, config.d_head
    n_past = cache.length if cache is not None else 0
    n_total = n_past + n_new
    if layout.total != n_total:
        raise ConfigError(f"layout covers {layout.total} positions, sequence has {n_total}")
    if positions is None:
        positions = np.arange(n_past, n_total)

    x = nx.rms_norm_rows(h_prev, lw.attn_norm, config.norm_eps)
    q = nx.matmul(x, lw.wq)
    k = nx.matmul(x, lw.wk)
    v = nx.matmul(x, lw.wv)
    if config.rope_enabled:
        q = apply_rope(q, positions, n_heads, config.rope_theta)
        k = apply_rope(k, positions, n_heads, config.rope_theta)
    if cache is not None:
        cache.append(k, v)
        keys, values = cache.keys, cache.values
    else:
        keys, values = k, v

    guided = cfg.guides(layer_idx)
    traced = guided or observe
    if guided_rows is None:
        guided_rows = [n_new - 1]
    rows = sorted(set(int(r) for r in guided_rows) | {n_new - 1}) if guided else [n_new - 1]
    mask = causal_mask(n_new, n_past)
    out = np.empty((n_new, d), dtype=h_prev.dtype)
    trace = AttentionTrace(layer_idx, layout.n_visual, guided) if traced else None
    o_cond_rows = {r: [] for r in rows}
    o_uncond_rows = {r: [] for r in rows}
    for h in range(n_heads):
        cols = slice(h * d_k, (h + 1) * d_k)
        kh = nx.asarray(keys[:, cols])
        vh = nx.asarray(values[:, cols])
        scores = attention_scores(nx.asarray(q[:, cols]), kh, d_k)
        a = nx.masked_softmax_rows(scores, mask)
        out[:, cols] = nx.matmul(a, vh)
        if not traced:
            continue
        for r in rows:
            a_unc, o_unc = masked_unconditional_output(scores[r], vh, layout, mask[r])
            o_cond_rows[r].append(out[r, cols].copy())
            o_uncond_rows[r].append(o_unc)
            if r == n_new - 1:
                vis = float(np.sum(a[r, layout.visual_start:layout.visual_stop], dtype=np.float64))
                trace.heads.append(HeadTrace(h, a[r].copy(), a_unc, o_cond_rows[r][-1], o_unc, vis))

    if traced:
        for r in rows:
            if cfg.per_head:
                corrections = [contrastive_correction(o_cond_rows[r][h], o_uncond_rows[r][h], cfg, (h,))
                               for h in range(n_heads)]
            else:
                corrections = [contrastive_correction(np.concatenate(o_cond_rows[r]),
                                                      np.concatenate(o_uncond_rows[r]), cfg,
                                                      tuple(range(n_heads)))]
            if guided:
                out[r] = np.concatenate([c.o_final for c in corrections])
            if r == n_new - 1:
                trace.corrections = corrections

    h_attn = h_prev + nx.matmul(out, lw.wo)
    h_next = h_attn + feed_forward(h_attn, lw, config.norm_eps)
    if traced:
        trace.attn_residual = h_attn[-1].copy()
    return h_next, trace
