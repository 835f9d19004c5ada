"""The encoder network: fused dual embeddings, transformer layers each
followed by a bottleneck consistency adapter, CLS extraction, a projection
head, per-language classifiers, and a tied masked-token head.

Parameters live in a flat name -> Tensor map so checkpointing, freezing,
and optimizer grouping stay trivial.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import CheckpointError, ConfigError, RoutingError
from .numerics import Tensor
from .orthography import (LanguageId, ScriptProfile, VariantTable,
                          detect_script, normalize)
from .tokenization import AlignedTokens, BpeModel, WordPieceModel, encode_aligned

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    """Architecture sizes. Bare defaults match the full-scale encoder;
    :meth:`desk` is the small configuration everything is tested at."""

    vocab_bpe: int
    vocab_wp: int
    classes: dict[LanguageId, int]
    layers: int = 12
    hidden: int = 768
    heads: int = 12
    proj: int = 256
    adapter: int | None = None     # bottleneck width, default hidden // 4
    ffn: int | None = None         # default 4 * hidden
    max_len: int = 256
    single_tokenizer: bool = False
    use_adapters: bool = True
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")
        if self.adapter is None:
            self.adapter = max(1, self.hidden // 4)
        if self.ffn is None:
            self.ffn = 4 * self.hidden
        if self.hidden % self.heads:
            raise ConfigError(
                f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.proj >= self.hidden:
            raise ConfigError(
                f"projection size {self.proj} must be < hidden {self.hidden}")
        for lang, c in self.classes.items():
            if c < 2:
                raise ConfigError(f"{lang.value} needs >= 2 classes, got {c}")
        if self.max_len < 2:
            raise ConfigError("max_len must allow CLS plus one token")

    @classmethod
    def desk(cls, vocab_bpe: int, vocab_wp: int,
             classes: dict[LanguageId, int], **kw) -> "ModelConfig":
        """Small configuration for CPU-scale runs.

        The init scale is raised from the full-scale constant 0.02: at
        this width 0.02 leaves token content quadratically too weak to
        train from, while 1/sqrt(hidden) makes initial attention noisy;
        0.05 sits between and measures best end to end.
        """
        kw.setdefault("layers", 2)
        kw.setdefault("hidden", 64)
        kw.setdefault("heads", 4)
        kw.setdefault("proj", 32)
        kw.setdefault("adapter", 16)
        kw.setdefault("max_len", 64)
        kw.setdefault("init_std", 0.05)
        return cls(vocab_bpe=vocab_bpe, vocab_wp=vocab_wp,
                   classes=classes, **kw)


def _sorted_langs(classes: dict[LanguageId, int]) -> list[LanguageId]:
    return sorted(classes, key=lambda l: l.value)


class ModelParameters:
    """Flat named tensor store with backbone/head grouping helpers."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def backbone_names(self) -> list[str]:
        return [n for n in self.names()
                if not n.startswith(("da.", "head."))]

    def projection_names(self) -> list[str]:
        return [n for n in self.names() if n.startswith("da.")]

    def head_names(self, lang: LanguageId | None = None) -> list[str]:
        prefix = "head." if lang is None else f"head.{lang.value}."
        return [n for n in self.names() if n.startswith(prefix)]

    def set_trainable(self, names: list[str], flag: bool) -> None:
        for n in names:
            self.tensors[n].requires_grad = flag

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def clone_values(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            self.tensors[n].values[...] = v


def parameter_names(config: ModelConfig) -> list[str]:
    """Every tensor name the architecture defines, in sorted order."""
    names = ["emb_bpe", "emb_wp", "emb_pos", "mlm.bias", "da.weight", "da.bias"]
    for i in range(config.layers):
        names += [f"enc{i}.attn.{p}" for p in
                  ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")]
        names += [f"enc{i}.ln1.gain", f"enc{i}.ln1.bias",
                  f"enc{i}.ffn.w1", f"enc{i}.ffn.b1",
                  f"enc{i}.ffn.w2", f"enc{i}.ffn.b2",
                  f"enc{i}.ln2.gain", f"enc{i}.ln2.bias",
                  f"enc{i}.adapter.down", f"enc{i}.adapter.up"]
    for lang in _sorted_langs(config.classes):
        names += [f"head.{lang.value}.weight", f"head.{lang.value}.bias"]
    return sorted(names)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_parameters(config: ModelConfig, seed: int = 0) -> ModelParameters:
    """Fresh parameters: truncated-normal weights (std 0.02), zero biases,
    identity layer norms, and zeroed adapter up-projections so every
    adapter starts as the identity function."""
    rng = np.random.default_rng(seed)
    d, m, r, f = (config.hidden, config.proj, config.adapter, config.ffn)
    t: dict[str, Tensor] = {}

    def w(name: str, shape) -> None:
        t[name] = nm.parameter(_trunc_normal(rng, shape, config.init_std))

    def zeros(name: str, shape) -> None:
        t[name] = nm.parameter(np.zeros(shape))

    def ones(name: str, shape) -> None:
        t[name] = nm.parameter(np.ones(shape))

    w("emb_bpe", (config.vocab_bpe, d))
    w("emb_wp", (config.vocab_wp, d))
    w("emb_pos", (config.max_len, d))
    for i in range(config.layers):
        for part in ("wq", "wk", "wv", "wo"):
            w(f"enc{i}.attn.{part}", (d, d))
        for part in ("bq", "bk", "bv", "bo"):
            zeros(f"enc{i}.attn.{part}", (d,))
        ones(f"enc{i}.ln1.gain", (d,))
        zeros(f"enc{i}.ln1.bias", (d,))
        w(f"enc{i}.ffn.w1", (d, f))
        zeros(f"enc{i}.ffn.b1", (f,))
        w(f"enc{i}.ffn.w2", (f, d))
        zeros(f"enc{i}.ffn.b2", (d,))
        ones(f"enc{i}.ln2.gain", (d,))
        zeros(f"enc{i}.ln2.bias", (d,))
        w(f"enc{i}.adapter.down", (r, d))
        zeros(f"enc{i}.adapter.up", (d, r))
    zeros("mlm.bias", (config.vocab_bpe,))
    w("da.weight", (m, d))
    zeros("da.bias", (m,))
    for lang in _sorted_langs(config.classes):
        w(f"head.{lang.value}.weight", (config.classes[lang], m))
        zeros(f"head.{lang.value}.bias", (config.classes[lang],))
    return ModelParameters(config, t)


def fuse_embeddings(tokens: AlignedTokens, params: ModelParameters) -> Tensor:
    """Position-wise average of the two embedding tables plus positions.

    Each position's wordpiece contribution is the mean over its pieces;
    in single-tokenizer mode the fusion degenerates to the canonical
    table alone. Sequences beyond max_len are truncated with a warning.
    """
    cfg = params.config
    n = len(tokens)
    if n > cfg.max_len:
        log.warning("fuse: sequence of %d tokens truncated to %d", n, cfg.max_len)
        tokens = AlignedTokens(tokens.bpe_ids[:cfg.max_len],
                               tokens.surfaces[:cfg.max_len],
                               tokens.wp_ids[:cfg.max_len])
        n = cfg.max_len
    bpe = nm.embedding_lookup(params["emb_bpe"], tokens.bpe_ids)
    if cfg.single_tokenizer:
        fused = bpe
    else:
        flat = [p for pieces in tokens.wp_ids for p in pieces]
        averager = np.zeros((n, len(flat)))
        col = 0
        for row, pieces in enumerate(tokens.wp_ids):
            averager[row, col:col + len(pieces)] = 1.0 / len(pieces)
            col += len(pieces)
        looked = nm.embedding_lookup(params["emb_wp"], flat)
        wp = nm.matmul(nm.tensor(averager), looked)
        fused = nm.scale(nm.add(bpe, wp), 0.5)
    pos = nm.masked_select(params["emb_pos"], list(range(n)))
    return nm.add(fused, pos)


def _encoder_layer(h: Tensor, params: ModelParameters, i: int) -> Tensor:
    cfg = params.config
    n = h.shape[0]
    heads, dh = cfg.heads, cfg.hidden // cfg.heads
    p = params

    def linear(x: Tensor, part: str) -> Tensor:
        return nm.add(nm.matmul(x, p[f"enc{i}.attn.w{part}"]),
                      p[f"enc{i}.attn.b{part}"])

    def split(x: Tensor) -> Tensor:
        return nm.transpose(nm.reshape(x, (n, heads, dh)), (1, 0, 2))

    q, k, v = split(linear(h, "q")), split(linear(h, "k")), split(linear(h, "v"))
    scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 2, 1))),
                      1.0 / math.sqrt(dh))
    ctx = nm.matmul(nm.row_softmax(scores), v)
    ctx = nm.reshape(nm.transpose(ctx, (1, 0, 2)), (n, cfg.hidden))
    attn_out = nm.add(nm.matmul(ctx, p[f"enc{i}.attn.wo"]),
                      p[f"enc{i}.attn.bo"])
    h = nm.layer_norm(nm.add(h, attn_out),
                      p[f"enc{i}.ln1.gain"], p[f"enc{i}.ln1.bias"])
    ffn = nm.add(nm.matmul(nm.gelu(nm.add(nm.matmul(h, p[f"enc{i}.ffn.w1"]),
                                          p[f"enc{i}.ffn.b1"])),
                           p[f"enc{i}.ffn.w2"]),
                 p[f"enc{i}.ffn.b2"])
    return nm.layer_norm(nm.add(h, ffn),
                         p[f"enc{i}.ln2.gain"], p[f"enc{i}.ln2.bias"])


def _adapter(h: Tensor, params: ModelParameters, i: int) -> Tensor:
    down = nm.matmul(h, nm.transpose(params[f"enc{i}.adapter.down"]))
    up = nm.matmul(nm.gelu(down), nm.transpose(params[f"enc{i}.adapter.up"]))
    return nm.add(h, up)


def forward_with_oca(h0: Tensor, params: ModelParameters) -> Tensor:
    """Run the encoder stack, applying the consistency adapter after each
    layer's final residual norm. Raises with the layer index on any
    non-finite intermediate."""
    h = h0
    for i in range(params.config.layers):
        h = _encoder_layer(h, params, i)
        if params.config.use_adapters:
            h = _adapter(h, params, i)
        nm.check_finite(h, f"encoder layer {i}")
    return h


def project_da(h_cls: Tensor, params: ModelParameters) -> Tensor:
    """Nonlinear bottleneck projection of the CLS vector."""
    z = nm.add(nm.matmul(h_cls, nm.transpose(params["da.weight"])),
               params["da.bias"])
    return nm.gelu(z)


def classify(h_da: Tensor, lang: LanguageId, params: ModelParameters) -> Tensor:
    """Softmax over the given language's classes; touches only that head."""
    if lang not in params.config.classes:
        raise RoutingError(f"no classifier head for {lang.value}")
    logits = nm.add(nm.matmul(h_da, nm.transpose(params[f"head.{lang.value}.weight"])),
                    params[f"head.{lang.value}.bias"])
    return nm.row_softmax(logits)


def mlm_logits(h_final: Tensor, positions: list[int],
               params: ModelParameters) -> Tensor:
    """Per-position distributions over the canonical vocab via the tied
    output embedding plus bias. An empty position list yields an empty
    (0, V) result."""
    if not positions:
        return nm.tensor(np.zeros((0, params.config.vocab_bpe)))
    sel = nm.masked_select(h_final, sorted(positions))
    logits = nm.add(nm.matmul(sel, nm.transpose(params["emb_bpe"])),
                    params["mlm.bias"])
    return nm.row_softmax(logits)


def forward_hidden(tokens: AlignedTokens, params: ModelParameters) -> Tensor:
    return forward_with_oca(fuse_embeddings(tokens, params), params)


def classify_tokens(tokens: AlignedTokens, lang: LanguageId,
                    params: ModelParameters) -> Tensor:
    """Full classification pass over encoded tokens for a known language."""
    h = forward_hidden(tokens, params)
    h_cls = nm.masked_select(h, [0])
    return classify(project_da(h_cls, params), lang, params)


def predict(text: str, params: ModelParameters, profile: ScriptProfile,
            table: VariantTable, bpe: BpeModel, wp: WordPieceModel
            ) -> tuple[LanguageId, np.ndarray]:
    """Route raw text by script detection and classify with that head.

    Detection happens before normalization (normalization itself is
    language-parameterized); the shipped tables guarantee the two orders
    agree. Unknown-script errors propagate.
    """
    lang, _ = detect_script(text, profile)
    clean = normalize(text, lang, table)
    tokens = encode_aligned(clean, bpe, wp, max_len=params.config.max_len)
    probs = classify_tokens(tokens, lang, params)
    return lang, probs.values.reshape(-1).copy()


# ---------------------------------------------------------------------------
# Checkpoint format: one directory holding manifest.txt plus one raw
# little-endian float64 file per tensor. The manifest records config
# fields, tensor shapes, and content hashes; loading validates both.
# ---------------------------------------------------------------------------

def _content_hash(raw: bytes) -> str:
    return hashlib.sha256(b"blob %d\0" % len(raw) + raw).hexdigest()


def save_checkpoint(params: ModelParameters, out_dir: Path,
                    extra: dict[str, str] | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = params.config
    lines = []
    lines.append(f"config.vocab_bpe = {cfg.vocab_bpe}")
    lines.append(f"config.vocab_wp = {cfg.vocab_wp}")
    for lang in _sorted_langs(cfg.classes):
        lines.append(f"config.classes.{lang.value} = {cfg.classes[lang]}")
    for key in ("layers", "hidden", "heads", "proj", "adapter", "ffn",
                "max_len"):
        lines.append(f"config.{key} = {getattr(cfg, key)}")
    lines.append(f"config.init_std = {cfg.init_std!r}")
    lines.append(f"config.single_tokenizer = {int(cfg.single_tokenizer)}")
    lines.append(f"config.use_adapters = {int(cfg.use_adapters)}")
    for key in sorted(extra or {}):
        lines.append(f"extra.{key} = {(extra or {})[key]}")
    for name in params.names():
        t = params[name]
        raw = t.values.astype("<f8").tobytes()
        fname = f"{name}.f64"
        (out_dir / fname).write_bytes(raw)
        shape = ",".join(str(s) for s in t.values.shape)
        lines.append(f"tensor.{name}.shape = {shape}")
        lines.append(f"tensor.{name}.file = {fname}")
        lines.append(f"tensor.{name}.hash = {_content_hash(raw)}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n",
                                          encoding="utf-8")


def _parse_manifest(path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                  start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"{path}:{lineno}: expected 'key = value'")
        entries[key.strip()] = value.strip()
    return entries


def load_checkpoint(ckpt_dir: Path) -> tuple[ModelParameters, dict[str, str]]:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.txt"
    if not manifest_path.is_file():
        raise CheckpointError(f"no manifest at {manifest_path}")
    entries = _parse_manifest(manifest_path)

    def need(key: str) -> str:
        if key not in entries:
            raise CheckpointError(f"manifest missing {key}")
        return entries[key]

    classes = {}
    for key, value in entries.items():
        if key.startswith("config.classes."):
            classes[LanguageId.parse(key.rsplit(".", 1)[1])] = int(value)
    cfg = ModelConfig(
        vocab_bpe=int(need("config.vocab_bpe")),
        vocab_wp=int(need("config.vocab_wp")),
        classes=classes,
        layers=int(need("config.layers")),
        hidden=int(need("config.hidden")),
        heads=int(need("config.heads")),
        proj=int(need("config.proj")),
        adapter=int(need("config.adapter")),
        ffn=int(need("config.ffn")),
        max_len=int(need("config.max_len")),
        single_tokenizer=bool(int(entries.get("config.single_tokenizer", "0"))),
        use_adapters=bool(int(entries.get("config.use_adapters", "1"))),
        init_std=float(entries.get("config.init_std", "0.02")),
    )
    names = sorted({key.split(".", 1)[1].rsplit(".", 1)[0]
                    for key in entries if key.startswith("tensor.")})
    tensors: dict[str, Tensor] = {}
    for name in names:
        shape = tuple(int(s) for s in need(f"tensor.{name}.shape").split(","))
        fpath = ckpt_dir / need(f"tensor.{name}.file")
        if not fpath.is_file():
            raise CheckpointError(f"missing tensor file {fpath}")
        raw = fpath.read_bytes()
        if _content_hash(raw) != need(f"tensor.{name}.hash"):
            raise CheckpointError(f"hash mismatch for tensor {name}")
        flat = np.frombuffer(raw, dtype="<f8")
        expected_size = int(np.prod(shape)) if shape else 1
        if flat.size != expected_size:
            raise CheckpointError(
                f"tensor {name}: file has {flat.size} values, "
                f"manifest shape {shape}")
        tensors[name] = nm.parameter(flat.reshape(shape).astype(np.float64))
    params = ModelParameters(cfg, tensors)
    expected = set(parameter_names(cfg))
    if set(params.names()) != expected:
        missing = expected - set(params.names())
        surplus = set(params.names()) - expected
        raise CheckpointError(
            f"tensor set mismatch: missing {sorted(missing)}, "
            f"unexpected {sorted(surplus)}")
    extra = {k.split(".", 1)[1]: v for k, v in entries.items()
             if k.startswith("extra.")}
    return params, extra
