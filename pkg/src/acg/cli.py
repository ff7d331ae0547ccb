"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import GuidanceConfig
from .baselines import VARIANTS, masked_vs_true_bias
from .decoder import MODES, decode_greedy, mode_preset
from .diagnostics import (
    BIAS_COLUMNS, DEFAULT_GAMMAS, GAMMA_COLUMNS, LATENCY_COLUMNS, METHODS, NOISE_COLUMNS,
    NoiseSpec, bias_rows, gamma_sweep, latency_bench, latency_rows, noise_sweep, write_csv,
)
from .model import (
    DEFAULT_N_VISUAL, PRESETS, ConfigError, ModelConfig, MultimodalInput, WeightFormatError,
    byte_ids, init_weights, load_weights, preset, save_weights, synthetic_visual,
)

log = logging.getLogger("acg")

GAMMA_PROFILES = {"llava": 2.4, "minigpt4": 0.3, "qwen-vl": 1.4}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers

def parse_layers(text: str) -> frozenset:
    """``"a..b"`` (inclusive), ``"a"`` or a comma list of either."""
    layers = set()
    try:
        for part in text.split(","):
            part = part.strip()
            if ".." in part:
                lo, hi = part.split("..")
                layers.update(range(int(lo), int(hi) + 1))
            elif part:
                layers.add(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer range {text!r}; expected a..b") from None
    return frozenset(layers)


def parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


def load_config(spec: str) -> ModelConfig:
    if spec in PRESETS:
        return preset(spec)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"config {spec!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    return ModelConfig.from_json(path)


def load_model(args):
    if (args.weights is None) == (args.seed is None):
        raise UsageError("give exactly one of --weights or --seed")
    if args.weights is not None:
        return load_weights(args.weights)
    return init_weights(load_config(args.config), args.seed)


def _ids(data: dict, key: str, vocab: int) -> list[int]:
    if key in data:
        ids = data[key]
        if not isinstance(ids, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
            raise ConfigError(f"prompt field {key!r} must be a list of integers")
        return ids
    text = data.get(f"{key}_text")
    if text is None:
        return []
    if not isinstance(text, str):
        raise ConfigError(f"prompt field {key}_text must be a string")
    return byte_ids(text, vocab)


def parse_prompt(data, d_model: int, vocab: int) -> MultimodalInput:
    """Prompt JSON: ``system``/``query`` id lists (or ``*_text`` strings) and
    ``visual`` as a matrix or ``"synthetic:<seed>"`` with optional ``n_visual``."""
    if not isinstance(data, dict):
        raise ConfigError("prompt must be a JSON object")
    visual = data.get("visual", [])
    if isinstance(visual, str):
        if not visual.startswith("synthetic:"):
            raise ConfigError("visual must be a matrix or 'synthetic:<seed>'")
        try:
            seed = int(visual.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad synthetic seed in {visual!r}") from None
        n_visual = data.get("n_visual", DEFAULT_N_VISUAL)
        if not isinstance(n_visual, int) or n_visual < 0:
            raise ConfigError("n_visual must be a non-negative integer")
        visual = synthetic_visual(n_visual, d_model, seed)
    else:
        try:
            visual = np.asarray(visual, dtype=np.float64).reshape(-1, d_model)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"visual matrix does not fit d_model={d_model}: {exc}") from None
    return MultimodalInput(_ids(data, "system", vocab), visual, _ids(data, "query", vocab))


def default_prompt(d_model: int, vocab: int, seed: int = 0) -> MultimodalInput:
    return parse_prompt({"system": [1, 2, 3], "visual": f"synthetic:{seed}",
                         "query_text": "Describe the image."}, d_model, vocab)


def load_prompt(args, weights) -> MultimodalInput:
    c = weights.config
    if getattr(args, "prompt", None) is None:
        return default_prompt(c.d_model, c.vocab_size, args.image_seed)
    try:
        data = json.loads(Path(args.prompt).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read prompt {args.prompt}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"prompt {args.prompt} is not valid JSON: {exc}") from exc
    return parse_prompt(data, c.d_model, c.vocab_size)


def guidance_from_args(args, n_layers: int) -> GuidanceConfig:
    gamma = GAMMA_PROFILES[args.profile] if args.profile else args.gamma
    if gamma < 0:
        raise UsageError("--gamma must be non-negative")
    kwargs = dict(epsilon=args.epsilon, orthogonalize=not args.no_ortho, per_head=args.per_head)
    cfg = mode_preset(args.mode, n_layers, gamma, **kwargs)
    if args.layers is not None and args.mode != "off":
        cfg = cfg.with_layers(args.layers)
    cfg.validate(n_layers)
    return cfg


def out_dir(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands

def cmd_init(args) -> int:
    if args.seed is None:
        raise UsageError("init needs --seed")
    config = load_config(args.config)
    weights = init_weights(config, args.seed)
    out = out_dir(args)
    save_weights(weights, out / "weights.acgw")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    print(out / "weights.acgw")
    return 0


def cmd_decode(args) -> int:
    weights = load_model(args)
    inp = load_prompt(args, weights)
    cfg = guidance_from_args(args, weights.config.n_layers)
    result = decode_greedy(inp, weights, cfg, args.max_tokens, args.eos)
    print(" ".join(str(t) for t in result.tokens))
    if args.trace:
        path = out_dir(args) / "trace.jsonl"
        with path.open("w") as fh:
            for step in result.traces:
                for trace in step:
                    fh.write(json.dumps(trace.to_record()) + "\n")
        log.info("wrote %s", path)
    return 0


def cmd_sweep(args) -> int:
    weights = load_model(args)
    inp = load_prompt(args, weights)
    base = guidance_from_args(args, weights.config.n_layers)
    layers = args.layers if args.layers is not None else ("fast" if args.mode == "fast" else "full")
    points = gamma_sweep(inp, weights, args.gammas, layers, args.max_tokens, base)
    path = write_csv(out_dir(args) / "gamma_sweep.csv", points, GAMMA_COLUMNS)
    print(path)
    return 0


def cmd_bench(args) -> int:
    weights = load_model(args)
    inp = load_prompt(args, weights)
    gamma = GAMMA_PROFILES[args.profile] if args.profile else args.gamma
    if gamma < 0:
        raise UsageError("--gamma must be non-negative")
    methods = list(METHODS) if args.method == "all" else [args.method]
    out = out_dir(args)
    reports = []
    for method in methods:
        report = latency_bench(method, inp, weights, args.trials, args.max_tokens, gamma, args.eos)
        (out / f"report_{method}.json").write_text(report.to_json() + "\n")
        reports.append(report)
        print(f"{method}: tokens={report.tokens} passes={report.forward_passes} "
              f"matmuls={report.matmul_calls} per_image={report.per_image_s:.4f}s")
    write_csv(out / "latency.csv", latency_rows(reports), LATENCY_COLUMNS)
    return 0


def cmd_bias(args) -> int:
    weights = load_model(args)
    inp = load_prompt(args, weights)
    if inp.layout.n_visual == 0:
        raise UsageError("bias report needs visual tokens")
    cfg = guidance_from_args(args, weights.config.n_layers)
    rows = masked_vs_true_bias(inp, weights, cfg, args.variant)
    write_csv(out_dir(args) / "bias.csv", bias_rows(rows), BIAS_COLUMNS)
    for r in rows:
        if r.head == "mean":
            print(f"layer {r.layer}: bias={r.bias:.3e}")
    return 0


def cmd_noise(args) -> int:
    weights = load_model(args)
    inp = load_prompt(args, weights)
    cfg = guidance_from_args(args, weights.config.n_layers)
    spec = NoiseSpec(steps=tuple(args.steps), seed=args.noise_seed)
    points = noise_sweep(inp, weights, spec, cfg, args.max_tokens)
    path = write_csv(out_dir(args) / "noise_sweep.csv", points, NOISE_COLUMNS)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="desk", help=f"preset ({', '.join(PRESETS)}) or JSON file")
    common.add_argument("--weights", help="weight file written by init")
    common.add_argument("--seed", type=int, help="initialize weights from this seed instead of a file")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    def guidance_flags(mode: str = "full") -> argparse.ArgumentParser:
        guide = argparse.ArgumentParser(add_help=False)
        guide.add_argument("--prompt", help="prompt JSON file")
        guide.add_argument("--image-seed", type=int, default=0, help="seed of the default synthetic image")
        guide.add_argument("--mode", choices=MODES, default=mode)
        guide.add_argument("--gamma", type=float, default=2.4)
        guide.add_argument("--profile", choices=sorted(GAMMA_PROFILES), help="named guidance scale")
        guide.add_argument("--epsilon", type=float, default=1e-6)
        guide.add_argument("--layers", type=parse_layers, help="guided layers, e.g. 1..4")
        guide.add_argument("--no-ortho", action="store_true", help="skip textual orthogonalization")
        guide.add_argument("--per-head", type=parse_bool, default=True, metavar="{true,false}")
        guide.add_argument("--max-tokens", type=int, default=16)
        guide.add_argument("--eos", type=int, help="stop token id")
        return guide

    parser = argparse.ArgumentParser(prog="acg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="write seeded weights")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("decode", parents=[common, guidance_flags()], help="greedy decode one prompt")
    p.add_argument("--trace", action="store_true", help="write trace.jsonl to --out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sweep", parents=[common, guidance_flags()], help="guidance-scale sweep")
    p.add_argument("--gammas", type=parse_floats, default=list(DEFAULT_GAMMAS))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", parents=[common, guidance_flags()], help="pass/matmul/latency benchmark")
    p.add_argument("--method", choices=(*METHODS, "all"), default="all")
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("bias", parents=[common, guidance_flags("off")], help="masked vs. true unconditional bias")
    p.add_argument("--variant", choices=VARIANTS, default=VARIANTS[0])
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("noise", parents=[common, guidance_flags("off")], help="visual noise degradation sweep")
    p.add_argument("--steps", type=parse_ints, default=list(NoiseSpec().steps))
    p.add_argument("--noise-seed", type=int, default=0)
    p.set_defaults(func=cmd_noise)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    env_precision = os.environ.get("ACG_PRECISION")
    if env_precision:
        try:
            nx.set_precision(env_precision)
        except nx.NumericsError as exc:
            print(f"acg: error: ACG_PRECISION: {exc}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError, WeightFormatError) as exc:
        print(f"acg: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"acg: runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
