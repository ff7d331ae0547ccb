"""Attention-ratio diagnostics, sweeps and the pass/matmul benchmark harness."""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import OFF, AttentionTrace, GuidanceConfig
from .baselines import BiasRow, layer_bias, logit_contrast_baseline, masked_vs_true_bias
from .decoder import decode_greedy, mode_preset
from .model import ConfigError, ModelWeights, MultimodalInput

DEFAULT_GAMMAS = (1.0, 1.5, 2.0, 2.4, 3.0)
METHODS = ("vanilla", "acg_full", "acg_fast", "logit_2pass")

# wall-clock columns; everything else in a CSV is deterministic
TIMING_COLUMNS = frozenset({"latency_s", "per_image_s", "per_token_s"})

GAMMA_COLUMNS = ["gamma", "n_tokens", "token_ids", "mean_delta_perp_norm",
                 "first_step_guidance_norm", "t2i_ratio", "latency_s"]
NOISE_COLUMNS = ["noise_step", "noise_std", "t2i_ratio", "mean_bias", "token_ids"]
BIAS_COLUMNS = ["layer", "head", "bias", "visual_mass"]
LATENCY_COLUMNS = ["method", "tokens", "forward_passes", "passes_per_token", "matmul_calls",
                   "matmul_flops", "matmul_overhead", "flops_overhead", "per_image_s", "per_token_s"]


def _flatten(traces) -> list[AttentionTrace]:
    flat = []
    for item in traces:
        if isinstance(item, AttentionTrace):
            flat.append(item)
        else:
            flat.extend(item)
    return flat


def t2i_ratio(traces) -> float:
    """Mean visual attention mass of the guided row over steps, layers and heads."""
    flat = _flatten(traces)
    if not flat:
        raise ValueError("t2i_ratio needs at least one trace")
    if any(t.n_visual == 0 for t in flat):
        raise ValueError("t2i_ratio is undefined without visual tokens")
    return float(np.mean([h.visual_mass for t in flat for h in t.heads]))


def all_layers(weights: ModelWeights) -> frozenset:
    return frozenset(range(1, weights.config.n_layers + 1))


# ---------------------------------------------------------------------------
# noise protocol

@dataclass(frozen=True)
class NoiseSpec:
    steps: tuple = (0, 100, 200, 300, 400, 500, 600, 700, 800, 900, 999)
    max_step: int = 999
    max_std: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not self.steps:
            raise ConfigError("noise spec needs at least one step")
        if any(s < 0 or s > self.max_step for s in self.steps):
            raise ConfigError(f"noise steps must lie in 0..{self.max_step}")

    def std(self, step: int) -> float:
        """Linear schedule from 0 at step 0 to ``max_std`` at ``max_step``."""
        return step / self.max_step * self.max_std


@dataclass
class NoisePoint:
    noise_step: int
    noise_std: float
    t2i_ratio: float
    mean_bias: float
    token_ids: list[int]


def noise_sweep(inp: MultimodalInput, weights: ModelWeights, spec: NoiseSpec = NoiseSpec(),
                cfg: GuidanceConfig = OFF, max_new_tokens: int = 8) -> list[NoisePoint]:
    """Perturb the visual embeddings with growing Gaussian noise and track attention.

    One base noise draw (from ``spec.seed``) is scaled by the scheduled std, so
    every step sees the same noise direction at a different magnitude.
    """
    if inp.layout.n_visual == 0:
        raise ConfigError("noise sweep needs visual tokens")
    base = np.random.default_rng(spec.seed).standard_normal(inp.visual.shape)
    points = []
    for step in spec.steps:
        std = spec.std(step)
        noisy = inp.with_visual(inp.visual + std * base)
        result = decode_greedy(noisy, weights, cfg, max_new_tokens, observe_layers=all_layers(weights))
        bias = layer_bias(masked_vs_true_bias(noisy, weights, cfg))
        points.append(NoisePoint(step, std, t2i_ratio(result.traces),
                                 float(np.mean(list(bias.values()))), result.tokens))
    return points


# ---------------------------------------------------------------------------
# gamma sweep

@dataclass
class GammaPoint:
    gamma: float
    n_tokens: int
    token_ids: list[int]
    mean_delta_perp_norm: float
    first_step_guidance_norm: float
    t2i_ratio: float | None
    latency_s: float


def gamma_sweep(inp: MultimodalInput, weights: ModelWeights, gammas=DEFAULT_GAMMAS,
                layers="full", max_new_tokens: int = 8, base: GuidanceConfig = GuidanceConfig()) -> list[GammaPoint]:
    """One greedy decode per guidance scale over a fixed layer set.

    ``layers`` is a mode name ("full", "fast") or an explicit set of layers.
    """
    gammas = list(gammas)
    if not gammas:
        raise ConfigError("gamma grid is empty")
    if isinstance(layers, str):
        layers = mode_preset(layers, weights.config.n_layers).target_layers
    observe = all_layers(weights)
    points = []
    for g in gammas:
        cfg = GuidanceConfig(g, base.epsilon, frozenset(layers), base.orthogonalize, base.per_head)
        t0 = time.perf_counter()
        result = decode_greedy(inp, weights, cfg, max_new_tokens, observe_layers=observe)
        elapsed = time.perf_counter() - t0
        guided = [t for t in _flatten(result.traces) if t.guided]
        perp = [float(np.linalg.norm(c.delta_used)) for t in guided for c in t.corrections]
        first = [t for t in result.traces[0] if t.guided]
        first_norm = (float(np.mean([np.linalg.norm(g * c.delta_used) for c in first[0].corrections]))
                      if first else 0.0)
        ratio = t2i_ratio(result.traces) if inp.layout.n_visual else None
        points.append(GammaPoint(g, len(result.tokens), result.tokens,
                                 float(np.mean(perp)) if perp else 0.0, first_norm, ratio, elapsed))
    return points


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class RunReport:
    method: str
    model_config: dict
    gamma: float
    layers: list[int]
    tokens: int
    token_ids: list[int]
    per_image_s: float
    per_token_s: float
    forward_passes: int
    passes_per_token: float
    matmul_calls: int
    matmul_flops: int
    t2i_ratio: float | None
    layer_bias: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def method_config(method: str, n_layers: int, gamma: float, **kwargs) -> GuidanceConfig:
    if method in ("vanilla", "logit_2pass"):
        return OFF
    if method == "acg_full":
        return mode_preset("full", n_layers, gamma, **kwargs)
    if method == "acg_fast":
        return mode_preset("fast", n_layers, gamma, **kwargs)
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


def run_method(method: str, inp: MultimodalInput, weights: ModelWeights, max_new_tokens: int,
               gamma: float = 2.4, eos_id: int | None = None):
    """Decode once with ``method``; returns the DecodeResult."""
    if method == "logit_2pass":
        result, _ = logit_contrast_baseline(inp, weights, gamma, max_new_tokens, eos_id)
        return result
    cfg = method_config(method, weights.config.n_layers, gamma)
    return decode_greedy(inp, weights, cfg, max_new_tokens, eos_id)


def latency_bench(method: str, inp: MultimodalInput, weights: ModelWeights, trials: int = 5,
                  max_new_tokens: int = 16, gamma: float = 2.4, eos_id: int | None = None) -> RunReport:
    """Median wall-clock over ``trials`` after one discarded warmup, plus exact op counts.

    Counters are reset every trial; the attention ratio and per-layer bias come
    from a separate untimed traced run.
    """
    if trials < 3:
        raise ConfigError("latency_bench needs at least 3 trials")
    cfg = method_config(method, weights.config.n_layers, gamma)
    run_method(method, inp, weights, max_new_tokens, gamma, eos_id)
    times, counts, result = [], None, None
    for _ in range(trials):
        with nx.count_ops() as counter:
            t0 = time.perf_counter()
            result = run_method(method, inp, weights, max_new_tokens, gamma, eos_id)
            times.append(time.perf_counter() - t0)
        if counts is not None and counts != counter.as_dict():
            raise RuntimeError("op counts changed between identical trials")
        counts = counter.as_dict()
    per_image = statistics.median(times)
    n_tokens = len(result.tokens)

    ratio, bias = None, {}
    if inp.layout.n_visual:
        traced = decode_greedy(inp, weights, cfg, max_new_tokens, eos_id, observe_layers=all_layers(weights))
        ratio = t2i_ratio(traced.traces)
        bias = {str(k): v for k, v in layer_bias(masked_vs_true_bias(inp, weights, cfg)).items()}
    return RunReport(
        method=method,
        model_config=weights.config.to_dict(),
        gamma=gamma if method != "vanilla" else 0.0,
        layers=sorted(cfg.target_layers),
        tokens=n_tokens,
        token_ids=result.tokens,
        per_image_s=per_image,
        per_token_s=per_image / n_tokens,
        forward_passes=counts["forward_passes"],
        passes_per_token=counts["forward_passes"] / n_tokens,
        matmul_calls=counts["matmul_calls"],
        matmul_flops=counts["matmul_flops"],
        t2i_ratio=ratio,
        layer_bias=bias,
    )


# ---------------------------------------------------------------------------
# CSV output

def _cell(value) -> str:
    if isinstance(value, (list, tuple)):
        return " ".join(str(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        data = row if isinstance(row, dict) else asdict(row)
        writer.writerow([_cell(data.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path: str | Path, rows, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_csv(rows, columns))
    return path


def latency_rows(reports: list[RunReport]) -> list[dict]:
    """Flatten reports; overheads are relative to a vanilla report if present."""
    vanilla = next((r for r in reports if r.method == "vanilla"), None)
    rows = []
    for r in reports:
        rows.append({
            "method": r.method,
            "tokens": r.tokens,
            "forward_passes": r.forward_passes,
            "passes_per_token": r.passes_per_token,
            "matmul_calls": r.matmul_calls,
            "matmul_flops": r.matmul_flops,
            "matmul_overhead": r.matmul_calls / vanilla.matmul_calls if vanilla else None,
            "flops_overhead": r.matmul_flops / vanilla.matmul_flops if vanilla else None,
            "per_image_s": r.per_image_s,
            "per_token_s": r.per_token_s,
        })
    return rows


def bias_rows(rows: list[BiasRow]) -> list[dict]:
    return [asdict(r) for r in rows]


def strip_timing(csv_text: str) -> str:
    """Drop wall-clock columns so CSVs can be compared byte for byte."""
    reader = list(csv.reader(io.StringIO(csv_text)))
    if not reader:
        return csv_text
    keep = [i for i, name in enumerate(reader[0]) if name not in TIMING_COLUMNS]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in reader:
        writer.writerow([row[i] for i in keep])
    return buf.getvalue()
