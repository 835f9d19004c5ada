import math

import numpy as np
import pytest

from arascript import numerics as nm
from arascript.errors import CheckpointError, ConfigError, RoutingError, UnknownScriptError
from arascript.model import (ModelConfig, ModelParameters, classify,
                             classify_tokens, forward_hidden,
                             forward_with_oca, fuse_embeddings,
                             init_parameters, load_checkpoint, mlm_logits,
                             parameter_names, predict, project_da,
                             save_checkpoint)
from arascript.orthography import LanguageId
from arascript.tokenization import AlignedTokens, encode_aligned

K = LanguageId.KURDISH
ALL_LANGS = {lang: 3 for lang in LanguageId}


def tiny_config(**kw):
    kw.setdefault("layers", 1)
    kw.setdefault("hidden", 4)
    kw.setdefault("heads", 2)
    kw.setdefault("proj", 2)
    kw.setdefault("adapter", 2)
    kw.setdefault("ffn", 8)
    kw.setdefault("max_len", 8)
    return ModelConfig(vocab_bpe=7, vocab_wp=9, classes=ALL_LANGS, **kw)


def tiny_tokens(n=3):
    # CLS + (n-1) content positions, surfaces unused by the model math
    return AlignedTokens(
        bpe_ids=[2] + [4 + i % 3 for i in range(n - 1)],
        surfaces=[""] + ["x"] * (n - 1),
        wp_ids=[[2]] + [[4 + i % 3, 5 + i % 4] for i in range(n - 1)])


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(hidden=5)            # not divisible by heads
    with pytest.raises(ConfigError):
        tiny_config(proj=4)              # proj must be < hidden
    with pytest.raises(ConfigError):
        ModelConfig(vocab_bpe=7, vocab_wp=9,
                    classes={K: 1}, layers=1, hidden=4, heads=2, proj=2)


def test_fuse_zero_wp_table_is_half_bpe():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=1)
    params["emb_wp"].values[...] = 0.0
    tokens = tiny_tokens(3)
    h0 = fuse_embeddings(tokens, params)
    expected = 0.5 * params["emb_bpe"].values[tokens.bpe_ids] \
        + params["emb_pos"].values[:3]
    assert np.allclose(h0.values, expected)


def test_fuse_equal_tables_single_piece():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=1)
    tokens = AlignedTokens(bpe_ids=[2, 4, 5], surfaces=["", "a", "b"],
                           wp_ids=[[2], [4], [5]])
    params["emb_wp"].values[...] = 0.0
    params["emb_wp"].values[:7] = params["emb_bpe"].values
    h0 = fuse_embeddings(tokens, params)
    expected = params["emb_bpe"].values[[2, 4, 5]] \
        + params["emb_pos"].values[:3]
    assert np.allclose(h0.values, expected)


def test_fuse_hand_computed_average():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=2)
    tokens = tiny_tokens(3)
    h0 = fuse_embeddings(tokens, params)
    for i, (bid, pieces) in enumerate(zip(tokens.bpe_ids, tokens.wp_ids)):
        wp_mean = params["emb_wp"].values[pieces].mean(axis=0)
        expected = 0.5 * (params["emb_bpe"].values[bid] + wp_mean) \
            + params["emb_pos"].values[i]
        assert np.allclose(h0.values[i], expected)


def test_fuse_single_tokenizer_mode():
    cfg = tiny_config(single_tokenizer=True)
    params = init_parameters(cfg, seed=3)
    tokens = tiny_tokens(4)
    h0 = fuse_embeddings(tokens, params)
    expected = params["emb_bpe"].values[tokens.bpe_ids] \
        + params["emb_pos"].values[:4]
    assert np.allclose(h0.values, expected)


def test_fuse_truncates_beyond_max_len(caplog):
    cfg = tiny_config(max_len=3)
    params = init_parameters(cfg, seed=0)
    with caplog.at_level("WARNING", logger="arascript.model"):
        h0 = fuse_embeddings(tiny_tokens(6), params)
    assert h0.shape == (3, cfg.hidden)
    assert any("truncated" in r.message for r in caplog.records)


def test_zero_adapter_is_exact_identity():
    cfg = tiny_config(layers=2)
    params = init_parameters(cfg, seed=4)  # adapter.up zero-initialized
    h0 = fuse_embeddings(tiny_tokens(4), params)
    with_adapters = forward_with_oca(h0, params)
    params.config.use_adapters = False
    plain = forward_with_oca(h0, params)
    params.config.use_adapters = True
    assert np.array_equal(with_adapters.values, plain.values)


def test_zero_layers_is_identity():
    cfg = tiny_config(layers=0)
    params = init_parameters(cfg, seed=4)
    h0 = fuse_embeddings(tiny_tokens(4), params)
    out = forward_with_oca(h0, params)
    assert np.array_equal(out.values, h0.values)


def _reference_forward(h0, params, cfg):
    """Straight-line numpy re-implementation of the encoder stack."""
    def softmax(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def gelu(x):
        c = math.sqrt(2 / math.pi)
        return 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x ** 3)))

    def ln(x, g, b, eps=1e-5):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return g * (x - mu) / np.sqrt(var + eps) + b

    h = h0.copy()
    n = h.shape[0]
    heads, dh = cfg.heads, cfg.hidden // cfg.heads
    p = {k: t.values for k, t in params.tensors.items()}
    for i in range(cfg.layers):
        q = h @ p[f"enc{i}.attn.wq"] + p[f"enc{i}.attn.bq"]
        k = h @ p[f"enc{i}.attn.wk"] + p[f"enc{i}.attn.bk"]
        v = h @ p[f"enc{i}.attn.wv"] + p[f"enc{i}.attn.bv"]
        ctx = np.zeros_like(h)
        for hd in range(heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            ctx[:, sl] = softmax(scores) @ v[:, sl]
        h = ln(h + ctx @ p[f"enc{i}.attn.wo"] + p[f"enc{i}.attn.bo"],
               p[f"enc{i}.ln1.gain"], p[f"enc{i}.ln1.bias"])
        ffn = gelu(h @ p[f"enc{i}.ffn.w1"] + p[f"enc{i}.ffn.b1"]) \
            @ p[f"enc{i}.ffn.w2"] + p[f"enc{i}.ffn.b2"]
        h = ln(h + ffn, p[f"enc{i}.ln2.gain"], p[f"enc{i}.ln2.bias"])
        down = gelu(h @ p[f"enc{i}.adapter.down"].T)
        h = h + down @ p[f"enc{i}.adapter.up"].T
    return h


def test_forward_matches_reference_implementation():
    cfg = tiny_config(layers=2)
    params = init_parameters(cfg, seed=5)
    rng = np.random.default_rng(6)
    for i in range(cfg.layers):
        params[f"enc{i}.adapter.up"].values[...] = \
            rng.standard_normal(params[f"enc{i}.adapter.up"].shape) * 0.3
    h0 = fuse_embeddings(tiny_tokens(5), params)
    ours = forward_with_oca(h0, params)
    ref = _reference_forward(h0.values, params, cfg)
    assert np.allclose(ours.values, ref, atol=1e-12)


def test_project_zero_weights_gives_zero():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=0)
    params["da.weight"].values[...] = 0.0
    h = nm.tensor(np.ones((1, cfg.hidden)))
    out = project_da(h, params)
    assert np.array_equal(out.values, np.zeros((1, cfg.proj)))


def test_project_hand_case():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=0)
    w = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, -2.0, 0.0, 0.0]])
    params["da.weight"].values[...] = w
    params["da.bias"].values[...] = np.array([0.5, 0.0])
    h = nm.tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
    out = project_da(h, params)
    z = np.array([1.5, -4.0])
    c = math.sqrt(2 / math.pi)
    expected = 0.5 * z * (1 + np.tanh(c * (z + 0.044715 * z ** 3)))
    assert np.allclose(out.values.reshape(-1), expected)
    assert out.shape == (1, cfg.proj)


def test_classify_zero_head_is_uniform():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=0)
    params[f"head.{K.value}.weight"].values[...] = 0.0
    out = classify(nm.tensor(np.ones((1, cfg.proj))), K, params)
    assert np.allclose(out.values, 1 / 3)
    assert abs(out.values.sum() - 1.0) <= 1e-12


def test_classify_bias_concentration():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=0)
    params[f"head.{K.value}.weight"].values[...] = 0.0
    params[f"head.{K.value}.bias"].values[...] = np.array([30.0, -30.0, -30.0])
    out = classify(nm.tensor(np.ones((1, cfg.proj))), K, params)
    assert out.values[0, 0] > 0.999


def test_classify_hand_softmax():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=0)
    params[f"head.{K.value}.weight"].values[...] = 0.0
    logits = np.array([0.2, -1.0, 3.0])
    params[f"head.{K.value}.bias"].values[...] = logits
    out = classify(nm.tensor(np.zeros((1, cfg.proj))), K, params)
    expected = np.exp(logits) / np.exp(logits).sum()
    assert np.allclose(out.values.reshape(-1), expected, atol=1e-12)


def test_classify_unknown_language_routing_error():
    cfg = ModelConfig(vocab_bpe=7, vocab_wp=9, classes={K: 3},
                      layers=1, hidden=4, heads=2, proj=2, max_len=8)
    params = init_parameters(cfg, seed=0)
    with pytest.raises(RoutingError):
        classify(nm.tensor(np.zeros((1, 2))), LanguageId.URDU, params)


def test_mlm_uniform_and_empty():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=0)
    h = nm.tensor(np.zeros((4, cfg.hidden)))
    params["emb_bpe"].values[...] = 0.0
    out = mlm_logits(h, [1, 2], params)
    assert np.allclose(out.values, 1 / cfg.vocab_bpe)
    empty = mlm_logits(h, [], params)
    assert empty.shape == (0, cfg.vocab_bpe)


def test_mlm_matches_reference():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=9)
    rng = np.random.default_rng(10)
    h = nm.tensor(rng.standard_normal((5, cfg.hidden)))
    out = mlm_logits(h, [0, 3], params)
    logits = h.values[[0, 3]] @ params["emb_bpe"].values.T \
        + params["mlm.bias"].values
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    assert np.allclose(out.values, e / e.sum(axis=-1, keepdims=True))


def test_predict_routes_by_script(desk_params, tokenizers, profile, table):
    bpe, wp = tokenizers
    lang, probs = predict("باران ڵێرە", desk_params, profile, table, bpe, wp)
    assert lang is K
    assert probs.shape == (3,)
    assert abs(probs.sum() - 1.0) <= 1e-12


def test_predict_ascii_raises(desk_params, tokenizers, profile, table):
    bpe, wp = tokenizers
    with pytest.raises(UnknownScriptError):
        predict("hello world", desk_params, profile, table, bpe, wp)


def test_predict_deterministic(desk_params, tokenizers, profile, table):
    bpe, wp = tokenizers
    _, p1 = predict("باران ڵێرە", desk_params, profile, table, bpe, wp)
    _, p2 = predict("باران ڵێرە", desk_params, profile, table, bpe, wp)
    assert np.array_equal(p1, p2)


def test_head_isolation(desk_params, tokenizers, profile, table):
    bpe, wp = tokenizers
    text = "ثصذ بتر"  # Arabic-exclusive letters
    lang, before = predict(text, desk_params, profile, table, bpe, wp)
    assert lang is LanguageId.ARABIC
    kurdish_w = desk_params[f"head.{K.value}.weight"]
    saved = kurdish_w.values.copy()
    kurdish_w.values[...] += 5.0
    try:
        _, after = predict(text, desk_params, profile, table, bpe, wp)
    finally:
        kurdish_w.values[...] = saved
    assert np.array_equal(before, after)


def test_parameter_names_cover_init():
    cfg = tiny_config(layers=2)
    params = init_parameters(cfg, seed=0)
    assert params.names() == parameter_names(cfg)
    backbone = set(params.backbone_names())
    assert "emb_bpe" in backbone and "mlm.bias" in backbone
    assert not any(n.startswith(("da.", "head.")) for n in backbone)


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config(layers=2)
    params = init_parameters(cfg, seed=11)
    save_checkpoint(params, tmp_path / "ck", extra={"seed": "11"})
    loaded, extra = load_checkpoint(tmp_path / "ck")
    assert extra["seed"] == "11"
    assert loaded.config == params.config
    for name in params.names():
        assert np.array_equal(loaded[name].values, params[name].values)


def test_checkpoint_detects_corruption(tmp_path):
    cfg = tiny_config()
    params = init_parameters(cfg, seed=12)
    save_checkpoint(params, tmp_path / "ck")
    target = tmp_path / "ck" / "da.weight.f64"
    raw = bytearray(target.read_bytes())
    raw[0] ^= 0xFF
    target.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_missing_file(tmp_path):
    cfg = tiny_config()
    params = init_parameters(cfg, seed=12)
    save_checkpoint(params, tmp_path / "ck")
    (tmp_path / "ck" / "da.bias.f64").unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nowhere")


def test_checkpoint_save_is_deterministic(tmp_path):
    cfg = tiny_config()
    params = init_parameters(cfg, seed=13)
    save_checkpoint(params, tmp_path / "a")
    save_checkpoint(params, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_forward_hidden_shapes(desk_params, tokenizers):
    bpe, wp = tokenizers
    enc = encode_aligned("بتر قلم", bpe, wp)
    h = forward_hidden(enc, desk_params)
    assert h.shape == (len(enc), desk_params.config.hidden)
    probs = classify_tokens(enc, K, desk_params)
    assert probs.shape == (1, 3)
