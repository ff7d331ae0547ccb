"""Two-pass reference paths: a true text-only forward and logit-level contrast.

These exist to measure how far the single-pass masked surrogate drifts from a
real image-free pass, and to give a 2-pass baseline for cost comparisons.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import OFF, GuidanceConfig
from .decoder import DecodeResult, DecodeSession, ForwardResult, forward, greedy_pick
from .model import ConfigError, ModelWeights, MultimodalInput, assemble_context

KEEP_POSITIONS = "keep_positions"
REMOVE_TOKENS = "remove_tokens"
VARIANTS = (KEEP_POSITIONS, REMOVE_TOKENS)


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown unconditional variant {variant!r}; choose from {VARIANTS}")


def text_only_positions(inp: MultimodalInput, variant: str) -> np.ndarray:
    """Absolute positions of the prompt rows that survive dropping the image."""
    _check_variant(variant)
    layout = inp.layout
    if variant == REMOVE_TOKENS:
        return np.arange(layout.total - layout.n_visual)
    keep = ~layout.visual_flags()
    return np.arange(layout.total)[keep]


def true_unconditional_forward(inp: MultimodalInput, weights: ModelWeights,
                               variant: str = KEEP_POSITIONS, generated=()) -> ForwardResult:
    """Full forward with the visual segment removed, traced at every layer.

    ``trace.heads[h].o_cond`` of the result is the genuine text-only attention
    output at the guided position.
    """
    generated = list(generated)
    prompt_positions = text_only_positions(inp, variant)
    start = int(prompt_positions[-1]) + 1
    positions = np.concatenate([prompt_positions, np.arange(start, start + len(generated))])
    seq, layout = assemble_context(inp.without_visual(), generated, weights)
    all_layers = frozenset(range(1, weights.config.n_layers + 1))
    return forward(seq, weights, layout, OFF, positions=positions, observe_layers=all_layers)


@dataclass
class BiasRow:
    layer: int
    head: int | str
    bias: float
    visual_mass: float


def masked_vs_true_bias(inp: MultimodalInput, weights: ModelWeights, cfg: GuidanceConfig = OFF,
                        variant: str = KEEP_POSITIONS, generated=()) -> list[BiasRow]:
    """Relative gap between masked and true unconditional outputs, per layer and head.

    Each layer also gets a ``head="mean"`` row averaging its heads.
    """
    generated = list(generated)
    all_layers = frozenset(range(1, weights.config.n_layers + 1))
    seq, layout = assemble_context(inp, generated, weights)
    masked = forward(seq, weights, layout, cfg, observe_layers=all_layers)
    true = true_unconditional_forward(inp, weights, variant, generated)
    rows = []
    for m_trace, t_trace in zip(masked.traces, true.traces):
        biases, masses = [], []
        for mh, th in zip(m_trace.heads, t_trace.heads):
            ref = np.asarray(th.o_cond, dtype=np.float64)
            gap = np.asarray(mh.o_uncond, dtype=np.float64) - ref
            b = float(np.linalg.norm(gap) / (np.linalg.norm(ref) + cfg.epsilon))
            biases.append(b)
            masses.append(mh.visual_mass)
            rows.append(BiasRow(m_trace.layer, mh.head, b, mh.visual_mass))
        rows.append(BiasRow(m_trace.layer, "mean", float(np.mean(biases)), float(np.mean(masses))))
    return rows


def layer_bias(rows: list[BiasRow]) -> dict[int, float]:
    return {r.layer: r.bias for r in rows if r.head == "mean"}


def logit_contrast_baseline(inp: MultimodalInput, weights: ModelWeights, gamma_logit: float,
                            max_new_tokens: int, eos_id: int | None = None,
                            variant: str = KEEP_POSITIONS) -> tuple[DecodeResult, int]:
    """Greedy decoding on ``l_cond + gamma * (l_cond - l_uncond)``.

    Two forward passes per token: one over the full context, one over the
    text-only context. Returns the decode result and the pass count.
    """
    if gamma_logit < 0:
        raise ConfigError("gamma_logit must be non-negative")
    if max_new_tokens < 1:
        raise ConfigError("max_new_tokens must be at least 1")
    cond = DecodeSession(inp, weights, OFF)
    uncond = DecodeSession(inp.without_visual(), weights, OFF,
                           positions=text_only_positions(inp, variant))
    tokens, chosen, traces = [], [], []
    stop = "max_tokens"
    with nx.count_ops() as counter:
        for _ in range(max_new_tokens):
            l_cond, res = cond.step()
            l_uncond, _ = uncond.step()
            combined = l_cond + l_cond.dtype.type(gamma_logit) * (l_cond - l_uncond)
            token = greedy_pick(combined)
            tokens.append(token)
            chosen.append(float(combined[token]))
            traces.append(res.traces)
            cond.push(token)
            uncond.push(token)
            if eos_id is not None and token == eos_id:
                stop = "eos"
                break
    return DecodeResult(tokens, chosen, traces, stop), counter.forward_passes
