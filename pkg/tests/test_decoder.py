import json
from pathlib import Path

import numpy as np
import pytest

from acg import (ConfigError, GuidanceConfig, ModelConfig, MultimodalInput, assemble_context, decode_greedy,
                 forward, init_weights, mode_preset)
from acg import numerics as nx
from acg.decoder import DecodeSession, KvCache, layer_blocks, logits
from acg.model import synthetic_visual

from conftest import make_input
from test_attention import reference_block

GOLDEN = json.loads((Path(__file__).parent / "golden" / "decode_full_gamma2.4.json").read_text())


def golden_input():
    return MultimodalInput(GOLDEN["system"], synthetic_visual(16, 64, GOLDEN["visual_seed"]), GOLDEN["query"])


def test_off_equals_empty_layers_and_zero_gamma(strong_weights, prompt):
    seq, layout = assemble_context(prompt, [], strong_weights)
    configs = [mode_preset("off", 8), mode_preset("full", 8, gamma=0.0), GuidanceConfig(2.4, target_layers=())]
    results = [forward(seq, strong_weights, layout, c) for c in configs]
    for r in results[1:]:
        np.testing.assert_array_equal(r.last_hidden, results[0].last_hidden)
        for a, b in zip(r.hidden, results[0].hidden):
            np.testing.assert_array_equal(a, b)


def test_forward_matches_numpy_reference(f64):
    w = init_weights(ModelConfig(n_layers=3, rope_enabled=False), 2, proj_std=0.2)
    inp = make_input(1, n_visual=5)
    seq, layout = assemble_context(inp, [], w)
    result = forward(seq, w, layout, mode_preset("off", 3))
    h = seq
    for lw in w.working().layers:
        h = reference_block(h, lw, w.config, layout)
    last = h[-1] / np.sqrt(np.mean(h[-1] ** 2) + w.config.norm_eps)
    np.testing.assert_allclose(result.last_hidden, last, rtol=1e-9, atol=1e-12)


def test_single_text_token_ignores_guidance(strong_weights):
    inp = MultimodalInput([], np.zeros((0, 64)), [42])
    seq, layout = assemble_context(inp, [], strong_weights)
    off = forward(seq, strong_weights, layout, mode_preset("off", 8))
    full = forward(seq, strong_weights, layout, mode_preset("full", 8, gamma=3.0))
    np.testing.assert_array_equal(full.last_hidden, off.last_hidden)


@pytest.mark.parametrize("mode", ["off", "full", "fast"])
def test_cached_forward_matches_recompute(strong_weights, mode, f64):
    inp = make_input(3, n_system=2, n_visual=4, n_query=3)
    generated = [5, 17, 99]
    seq, layout = assemble_context(inp, generated, strong_weights)
    assert layout.total == 12
    cfg = mode_preset(mode, 8)
    # recompute: every response position replays its own guidance
    full = forward(seq, strong_weights, layout, cfg, guided_rows=range(inp.layout.total - 1, 12))
    cache = KvCache.empty(strong_weights)
    n_prompt = inp.layout.total
    out = forward(seq[:n_prompt], strong_weights, inp.layout, cfg, cache=cache)
    for k in range(len(generated)):
        out = forward(seq[n_prompt + k:n_prompt + k + 1], strong_weights, inp.layout.extend(k + 1), cfg, cache=cache)
    np.testing.assert_array_equal(out.last_hidden, full.last_hidden)
    assert cache.length == 12


def test_cached_forward_f32_close(strong_weights):
    inp = make_input(4)
    session_c = DecodeSession(inp, strong_weights, mode_preset("full", 8))
    session_r = DecodeSession(inp, strong_weights, mode_preset("full", 8), use_cache=False)
    for token in [3, 4, 5]:
        (lc, _), (lr, _) = session_c.step(), session_r.step()
        np.testing.assert_allclose(lc, lr, atol=1e-5)
        session_c.push(token)
        session_r.push(token)


def test_decode_one_token(strong_weights, prompt):
    cfg = mode_preset("full", 8)
    result = decode_greedy(prompt, strong_weights, cfg, 1)
    seq, layout = assemble_context(prompt, [], strong_weights)
    row = logits(forward(seq, strong_weights, layout, cfg).last_hidden, strong_weights)
    assert result.tokens == [int(np.argmax(row))]
    assert result.stop_reason == "max_tokens"


def test_decode_zero_gamma_matches_vanilla(strong_weights, prompt):
    a = decode_greedy(prompt, strong_weights, mode_preset("off", 8), 8)
    b = decode_greedy(prompt, strong_weights, mode_preset("full", 8, gamma=0.0), 8)
    assert a.tokens == b.tokens and a.chosen_logits == b.chosen_logits


def test_guidance_changes_tokens(strong_weights, prompt):
    a = decode_greedy(prompt, strong_weights, mode_preset("off", 8), 8)
    b = decode_greedy(prompt, strong_weights, mode_preset("full", 8, gamma=2.4), 8)
    assert a.tokens != b.tokens


def test_golden_sequence_default_init(desk_weights):
    result = decode_greedy(golden_input(), desk_weights, mode_preset("full", 8, gamma=2.4), 12)
    assert result.tokens == GOLDEN["tokens_default_init"]


def test_golden_sequence_strong_init():
    w = init_weights(ModelConfig(), 7, proj_std=0.2)
    result = decode_greedy(golden_input(), w, mode_preset("full", 8, gamma=2.4), 12)
    assert result.tokens == GOLDEN["tokens_proj_std_0.2"]


def test_eos_stops(strong_weights, prompt):
    first = decode_greedy(prompt, strong_weights, mode_preset("full", 8), 3).tokens
    result = decode_greedy(prompt, strong_weights, mode_preset("full", 8), 10, eos_id=first[1])
    assert result.tokens == first[:2]
    assert result.stop_reason == "eos"


def test_max_tokens_validated(strong_weights, prompt):
    with pytest.raises(ConfigError):
        decode_greedy(prompt, strong_weights, mode_preset("off", 8), 0)


def test_decode_is_deterministic(strong_weights, prompt):
    a = decode_greedy(prompt, strong_weights, mode_preset("fast", 8), 6)
    b = decode_greedy(prompt, strong_weights, mode_preset("fast", 8), 6)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_future_tokens_do_not_leak(strong_weights, prompt, f64):
    cfg = mode_preset("full", 8)
    seq, layout = assemble_context(prompt, [7, 8], strong_weights)
    longer, long_layout = assemble_context(prompt, [7, 8, 200, 201, 202], strong_weights)
    n_prompt = prompt.layout.total
    short = forward(seq, strong_weights, layout, cfg, guided_rows=range(n_prompt - 1, layout.total))
    long = forward(longer, strong_weights, long_layout, cfg, guided_rows=range(n_prompt - 1, long_layout.total))
    for a, b in zip(short.hidden, long.hidden):
        np.testing.assert_array_equal(a, b[:layout.total])


def test_traces_carry_step_numbers(strong_weights, prompt):
    result = decode_greedy(prompt, strong_weights, mode_preset("fast", 8), 3)
    assert [[t.step for t in step] for step in result.traces] == [[1, 1], [2, 2], [3, 3]]
    assert [t.layer for t in result.traces[0]] == [1, 2]


def test_one_pass_per_token(strong_weights, prompt):
    for mode in ("off", "full", "fast"):
        with nx.count_ops() as c:
            decode_greedy(prompt, strong_weights, mode_preset(mode, 8), 5)
        assert c.forward_passes == 5


@pytest.mark.parametrize("name, n_layers, expected", [
    ("full", 8, set(range(1, 9))),
    ("fast", 32, set(range(1, 9))),
    ("fast", 8, {1, 2}),
    ("fast", 1, {1}),
    ("off", 8, set()),
])
def test_mode_presets(name, n_layers, expected):
    assert mode_preset(name, n_layers).target_layers == expected


def test_unknown_mode():
    with pytest.raises(ConfigError):
        mode_preset("turbo", 8)


def test_layer_blocks_partition_32():
    blocks = layer_blocks(32)
    assert blocks["early"] == set(range(1, 9))
    assert blocks["late"] == set(range(25, 33))
    assert set().union(*blocks.values()) == set(range(1, 33))
