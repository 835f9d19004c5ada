"""Losses, masking, optimizer, schedules, and the two-stage driver.

Stage one masks random and orthographic-variant positions and minimizes the
combined token-recovery loss over the backbone. Stage two freezes the
backbone, re-initializes the projection and per-language heads, and
minimizes cross-entropy plus a consistency divergence against a
variant-substituted copy of each input.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .data import Document, holdout_validation
from .errors import ConfigError, DataFormatError, NumericError, RoutingError
from .model import (ModelParameters, classify_tokens, forward_hidden,
                    mlm_logits, save_checkpoint)
from .numerics import Tape, Tensor
from .orthography import (VariantTable, default_variant_table, normalize,
                          orth_variant_positions, transliterate)
from .tokenization import (AlignedTokens, BpeModel, Specials, WordPieceModel,
                           encode_aligned)

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    """Stage-one settings; the orthographic-mask weight defaults to 0.5."""

    orth_weight: float = 0.5
    mask_rate: float = 0.15
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 5
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.orth_weight < 0:
            raise ConfigError("orth_weight must be >= 0")
        if not 0 < self.mask_rate < 1:
            raise ConfigError("mask_rate must be in (0, 1)")


@dataclass
class FinetuneConfig:
    """Stage-two settings mirroring the fine-tuning protocol: 10 percent
    validation holdout, early stopping on validation loss, linear warmup
    over the first 10 percent of steps, and a doubled classifier LR."""

    kl_weight: float = 1.0
    lr: float = 2e-5
    batch_size: int = 16
    max_len: int = 256
    epochs: int = 3
    warmup_fraction: float = 0.10
    head_lr_multiplier: float = 2.0
    val_fraction: float = 0.10
    patience: int = 3
    weight_decay: float = 0.01
    seed: int = 0
    unfreeze_backbone: bool = False
    symmetric_kl: bool = False
    lr_decay: bool = False

    def __post_init__(self) -> None:
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must be in (0, 1)")


@dataclass
class MaskPlan:
    """Masked positions, variant positions, and the pre-corruption targets."""

    masked: list[int]
    orth: list[int]
    targets: dict[int, int]
    corrupted: AlignedTokens


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_masks(tokens: AlignedTokens, cfg: PretrainConfig,
               table: VariantTable, rng: np.random.Generator) -> MaskPlan:
    """Sample the random mask set and mark every variant position.

    |masked| = round(mask_rate * maskable); CLS and PAD are never touched;
    positions in both sets are corrupted once but appear in both lists.
    """
    bpe = tokens.bpe_ids
    specials = Specials()
    maskable = [i for i in range(1, len(tokens)) if bpe[i] != specials.pad]
    k = _round_half_up(cfg.mask_rate * len(maskable))
    masked: list[int] = []
    if k > 0 and maskable:
        masked = sorted(int(i) for i in rng.choice(
            maskable, size=min(k, len(maskable)), replace=False))
    orth = sorted(i for i in orth_variant_positions(tokens.surfaces, table)
                  if i != 0 and bpe[i] != specials.pad)
    targets = {i: bpe[i] for i in sorted(set(masked) | set(orth))}
    mask_bpe = mask_wp = specials.mask
    new_bpe = list(bpe)
    new_wp = [list(p) for p in tokens.wp_ids]
    for i in targets:
        new_bpe[i] = mask_bpe
        new_wp[i] = [mask_wp]
    corrupted = AlignedTokens(new_bpe, list(tokens.surfaces), new_wp)
    return MaskPlan(masked=masked, orth=orth, targets=targets,
                    corrupted=corrupted)


def _nll_over(h_final: Tensor, positions: list[int],
              targets: dict[int, int], params: ModelParameters) -> Tensor:
    if not positions:
        return nm.tensor(0.0)
    pos = sorted(positions)
    probs = mlm_logits(h_final, pos, params)
    picked = nm.gather_cols(probs, [targets[p] for p in pos])
    return nm.scale(nm.sum_all(nm.log(picked)), -1.0)


def loss_mlm(h_final: Tensor, plan: MaskPlan,
             params: ModelParameters) -> Tensor:
    """Sum of negative log probability of the originals at masked spots."""
    return _nll_over(h_final, plan.masked, plan.targets, params)


def loss_orth(h_final: Tensor, plan: MaskPlan,
              params: ModelParameters) -> Tensor:
    """Same objective restricted to orthographic-variant positions."""
    return _nll_over(h_final, plan.orth, plan.targets, params)


def loss_pretrain(mlm: Tensor, orth: Tensor, orth_weight: float) -> Tensor:
    return nm.add(mlm, nm.scale(orth, orth_weight))


def loss_ce(y_hat: Tensor, y: int) -> Tensor:
    """Negative log probability of the true class."""
    probs = y_hat if y_hat.values.ndim == 2 else nm.reshape(y_hat, (1, -1))
    picked = nm.gather_cols(probs, [y])
    return nm.scale(nm.sum_all(nm.log(picked)), -1.0)


_KL_FLOOR = 1e-12


def loss_kl(p: Tensor, q: Tensor) -> Tensor:
    """Divergence of q from reference p, entries clamped to 1e-12."""
    if p.values.shape != q.values.shape:
        raise ConfigError(
            f"KL operands must match, got {p.shape} vs {q.shape}")
    pc = nm.clamp_min(p, _KL_FLOOR)
    qc = nm.clamp_min(q, _KL_FLOOR)
    return nm.sum_all(nm.mul(pc, nm.sub(nm.log(pc), nm.log(qc))))


def loss_finetune(ce: Tensor, kl: Tensor, kl_weight: float) -> Tensor:
    return nm.add(ce, nm.scale(kl, kl_weight))


@dataclass
class OptimizerState:
    """First/second moment buffers and the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optimizer(named: dict[str, Tensor]) -> OptimizerState:
    return OptimizerState(
        m={n: np.zeros_like(t.values) for n, t in named.items()},
        v={n: np.zeros_like(t.values) for n, t in named.items()},
    )


def adamw_step(named: dict[str, Tensor], state: OptimizerState, lr: float,
               weight_decay: float = 0.01,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               lr_multipliers: dict[str, float] | None = None) -> None:
    """One decoupled-weight-decay Adam update with bias correction.

    Missing gradients count as zero (decay still applies); any non-finite
    gradient rejects the whole step before mutating anything.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    grads: dict[str, np.ndarray] = {}
    for name, t in named.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.values)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step rejected")
        grads[name] = g
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in named.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        step_lr = lr * (lr_multipliers or {}).get(name, 1.0)
        t.values -= step_lr * (m_hat / (np.sqrt(v_hat) + eps)
                               + weight_decay * t.values)


def lr_schedule(step: int, total_steps: int, base_lr: float,
                warmup_fraction: float, decay: bool = False) -> float:
    """Linear warmup to base over the first fraction of steps, then constant
    (or linear decay to zero when ``decay`` is set)."""
    warm = math.ceil(warmup_fraction * total_steps)
    if warm > 0 and step <= warm:
        return base_lr * step / warm
    if decay and total_steps > warm:
        return base_lr * max(0.0, (total_steps - step) / (total_steps - warm))
    return base_lr


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    extras: dict[str, float] = field(default_factory=dict)


def _epoch_batches(n: int, batch_size: int,
                   rng: np.random.Generator) -> list[list[int]]:
    order = [int(i) for i in rng.permutation(n)]
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain(docs: Sequence[Document], cfg: PretrainConfig,
             params: ModelParameters, bpe: BpeModel, wp: WordPieceModel,
             table: VariantTable | None = None,
             out_dir: Path | None = None) -> list[EpochRecord]:
    """Stage one: train the backbone on masked-token recovery.

    Deterministic given the seed; writes one checkpoint per epoch (plus the
    initialization when the epoch budget is zero) under ``out_dir``.
    """
    if not docs:
        raise DataFormatError("pretraining corpus is empty")
    table = table or default_variant_table()
    params.set_trainable(params.backbone_names(), True)
    params.set_trainable(params.projection_names() + params.head_names(), False)
    named = {n: params[n] for n in params.backbone_names()}
    state = init_optimizer(named)
    rng = np.random.default_rng(cfg.seed)
    texts = [normalize(d.text, d.language, table) for d in docs]
    encoded = [encode_aligned(t, bpe, wp, max_len=params.config.max_len)
               for t in texts]
    records: list[EpochRecord] = []
    if out_dir is not None and cfg.epochs == 0:
        save_checkpoint(params, Path(out_dir) / "epoch000",
                        extra={"stage": "pretrain", "epoch": "0"})
    for epoch in range(1, cfg.epochs + 1):
        epoch_mlm = epoch_orth = 0.0
        seen = 0
        empty_batches = 0
        for batch in _epoch_batches(len(texts), cfg.batch_size, rng):
            plans = []
            for di in batch:
                plans.append(make_masks(encoded[di], cfg, table, rng))
            if all(not p.masked and not p.orth for p in plans):
                empty_batches += 1
                continue
            params.zero_grads()
            with Tape():
                per_example = []
                mlm_total = orth_total = 0.0
                for plan in plans:
                    h = forward_hidden(plan.corrupted, params)
                    l_mlm = loss_mlm(h, plan, params)
                    l_orth = loss_orth(h, plan, params)
                    mlm_total += l_mlm.item()
                    orth_total += l_orth.item()
                    per_example.append(
                        loss_pretrain(l_mlm, l_orth, cfg.orth_weight))
                total = per_example[0]
                for piece in per_example[1:]:
                    total = nm.add(total, piece)
                batch_loss = nm.scale(total, 1.0 / len(per_example))
                nm.backward(batch_loss)
            adamw_step(named, state, cfg.lr, cfg.weight_decay)
            epoch_mlm += mlm_total
            epoch_orth += orth_total
            seen += len(plans)
        if empty_batches:
            log.info("epoch %d: %d batches had no maskable positions",
                     epoch, empty_batches)
        mean_mlm = epoch_mlm / max(1, seen)
        mean_orth = epoch_orth / max(1, seen)
        records.append(EpochRecord(
            epoch=epoch, split="train",
            loss=mean_mlm + cfg.orth_weight * mean_orth,
            extras={"mlm": mean_mlm, "orth": mean_orth}))
        log.info("pretrain epoch %d: mlm %.4f orth %.4f",
                 epoch, mean_mlm, mean_orth)
        if out_dir is not None:
            save_checkpoint(params, Path(out_dir) / f"epoch{epoch:03d}",
                            extra={"stage": "pretrain", "epoch": str(epoch)})
    return records


def _trunc(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _reinit_task_parameters(params: ModelParameters, seed: int,
                            cls_mean: np.ndarray | None = None,
                            cls_std: np.ndarray | None = None) -> None:
    """Fresh projection and head parameters for a fine-tuning run.

    When training-split CLS statistics are available, the whitening
    transform is folded into the projection's weight and bias (a
    data-dependent initialization of the same function class): the frozen
    CLS features carry a large document-independent offset that otherwise
    conditions the loss surface so badly the heads cannot train at this
    scale.
    """
    rng = np.random.default_rng(_stable_seed("task-init", seed))
    d = params.config.hidden
    m = params.config.proj
    base = _trunc(rng, (m, d), 1.0 / math.sqrt(d))
    if cls_mean is not None and cls_std is not None:
        scale = 1.0 / np.maximum(cls_std, 1e-6)
        params["da.weight"].values[...] = base * scale[None, :]
        params["da.bias"].values[...] = -(base * scale[None, :]) @ cls_mean
    else:
        params["da.weight"].values[...] = base
        params["da.bias"].values[...] = 0.0
    for lang_name in sorted(c.value for c in params.config.classes):
        w = params[f"head.{lang_name}.weight"]
        w.values[...] = _trunc(rng, w.values.shape, 1.0 / math.sqrt(m))
        params[f"head.{lang_name}.bias"].values[...] = 0.0


class _FrozenFeatures:
    """Cached CLS vectors for frozen-backbone fine-tuning.

    With the backbone and adapters frozen, every document's final CLS
    vector is a constant, as are the CLS vectors of its variant
    substitutions; caching them reduces each training step to the
    projection and head math. A small pool of variant draws per document
    keeps the consistency term stochastic across epochs.
    """

    VARIANT_POOL = 6

    def __init__(self, docs: Sequence[Document], texts: dict[str, str],
                 cfg: FinetuneConfig, params: ModelParameters,
                 bpe: BpeModel, wp: WordPieceModel, table: VariantTable):
        max_len = min(cfg.max_len, params.config.max_len)
        self.cls: dict[str, np.ndarray] = {}
        self.variant_cls: dict[str, list[np.ndarray]] = {}
        for doc in docs:
            tokens = encode_aligned(texts[doc.id], bpe, wp, max_len=max_len)
            h = forward_hidden(tokens, params)
            self.cls[doc.id] = h.values[0:1].copy()
            if cfg.kl_weight > 0.0:
                pool = []
                for k in range(self.VARIANT_POOL):
                    variant = transliterate(
                        texts[doc.id], table,
                        seed=_stable_seed("variant", k, doc.id))
                    vtokens = encode_aligned(variant, bpe, wp,
                                             max_len=max_len)
                    vh = forward_hidden(vtokens, params)
                    pool.append(vh.values[0:1].copy())
                self.variant_cls[doc.id] = pool


def _head_probs(h_cls: Tensor, lang, params: ModelParameters) -> Tensor:
    from .model import classify, project_da
    return classify(project_da(h_cls, params), lang, params)


def _example_loss_cached(doc: Document, feats: _FrozenFeatures,
                         cfg: FinetuneConfig, params: ModelParameters,
                         epoch: int) -> tuple[Tensor, float, float, np.ndarray]:
    y_hat = _head_probs(nm.tensor(feats.cls[doc.id]), doc.language, params)
    ce = loss_ce(y_hat, doc.label)
    probs = y_hat.values.reshape(-1)
    if cfg.kl_weight == 0.0:
        return ce, ce.item(), 0.0, probs
    pool = feats.variant_cls[doc.id]
    variant_cls = nm.tensor(pool[epoch % len(pool)])
    if cfg.symmetric_kl:
        y_variant = _head_probs(variant_cls, doc.language, params)
    else:
        y_variant = nm.tensor(
            _head_probs(variant_cls, doc.language, params).values)
    kl = loss_kl(y_hat, y_variant)
    return loss_finetune(ce, kl, cfg.kl_weight), ce.item(), kl.item(), probs


def _finetune_example_loss(doc: Document, text: str, cfg: FinetuneConfig,
                           params: ModelParameters, bpe: BpeModel,
                           wp: WordPieceModel, table: VariantTable,
                           translit_salt: str,
                           tokens: AlignedTokens | None = None
                           ) -> tuple[Tensor, float, float, np.ndarray]:
    """CE plus weighted KL for one example inside an active tape.

    The variant branch is treated as a constant unless symmetric_kl is set,
    so gradients flow only through the primary prediction. Returns the
    loss, its CE and KL parts, and the predicted distribution.
    """
    max_len = min(cfg.max_len, params.config.max_len)
    if tokens is None:
        tokens = encode_aligned(text, bpe, wp, max_len=max_len)
    y_hat = classify_tokens(tokens, doc.language, params)
    ce = loss_ce(y_hat, doc.label)
    probs = y_hat.values.reshape(-1)
    if cfg.kl_weight == 0.0:
        return ce, ce.item(), 0.0, probs
    variant_text = transliterate(text, table,
                                 seed=_stable_seed(translit_salt, doc.id))
    variant_tokens = encode_aligned(variant_text, bpe, wp, max_len=max_len)
    if cfg.symmetric_kl:
        y_variant = classify_tokens(variant_tokens, doc.language, params)
    else:
        y_variant = nm.tensor(
            classify_tokens(variant_tokens, doc.language, params).values)
    kl = loss_kl(y_hat, y_variant)
    return loss_finetune(ce, kl, cfg.kl_weight), ce.item(), kl.item(), probs


def _validation_metrics(val_docs: Sequence[Document], texts: dict[str, str],
                        encoded: dict[str, AlignedTokens],
                        cfg: FinetuneConfig, params: ModelParameters,
                        bpe: BpeModel, wp: WordPieceModel,
                        table: VariantTable,
                        feats: "_FrozenFeatures | None" = None
                        ) -> tuple[float, float]:
    """Mean fine-tuning loss and accuracy on the validation split.

    Variant draws are fixed per document (independent of the epoch) so the
    early-stopping signal is comparable across epochs.
    """
    total = 0.0
    correct = 0
    for doc in val_docs:
        if feats is not None:
            loss, _, _, probs = _example_loss_cached(doc, feats, cfg, params,
                                                     epoch=0)
        else:
            loss, _, _, probs = _finetune_example_loss(
                doc, texts[doc.id], cfg, params, bpe, wp, table,
                translit_salt="val", tokens=encoded[doc.id])
        total += loss.item()
        correct += int(np.argmax(probs)) == doc.label
    n = max(1, len(val_docs))
    return total / n, correct / n


def finetune(docs: Sequence[Document], cfg: FinetuneConfig,
             params: ModelParameters, bpe: BpeModel, wp: WordPieceModel,
             table: VariantTable | None = None,
             out_dir: Path | None = None) -> list[EpochRecord]:
    """Stage two: train the projection and per-language heads only.

    Re-initializes the task parameters from the fine-tune seed, holds out a
    stratified validation split, stops early on validation loss, and restores
    the best-validation parameters before returning.
    """
    if not docs:
        raise DataFormatError("labeled set is empty")
    table = table or default_variant_table()
    for doc in docs:
        if doc.language not in params.config.classes:
            raise RoutingError(
                f"no classifier head configured for {doc.language.value}")
        if doc.label is None:
            raise DataFormatError(f"document {doc.id} has no label")
    trainable = params.projection_names() + params.head_names()
    if cfg.unfreeze_backbone:
        trainable = trainable + params.backbone_names()
    params.set_trainable(params.names(), False)
    params.set_trainable(trainable, True)
    named = {n: params[n] for n in trainable}
    multipliers = {n: cfg.head_lr_multiplier for n in params.head_names()}
    state = init_optimizer(named)

    train_docs, val_docs = holdout_validation(docs, cfg.val_fraction, cfg.seed)
    texts = {d.id: normalize(d.text, d.language, table)
             for d in docs}
    max_len = min(cfg.max_len, params.config.max_len)
    encoded: dict[str, AlignedTokens] = {}
    feats: _FrozenFeatures | None = None
    if cfg.unfreeze_backbone:
        encoded = {d.id: encode_aligned(texts[d.id], bpe, wp, max_len=max_len)
                   for d in docs}
        train_cls = np.concatenate(
            [forward_hidden(encoded[d.id], params).values[0:1]
             for d in train_docs])
    else:
        feats = _FrozenFeatures(docs, texts, cfg, params, bpe, wp, table)
        train_cls = np.concatenate([feats.cls[d.id] for d in train_docs])
    _reinit_task_parameters(params, cfg.seed,
                            cls_mean=train_cls.mean(axis=0),
                            cls_std=train_cls.std(axis=0))
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_docs) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    best_loss = math.inf
    best_values = params.clone_values()
    best_epoch = 0
    since_best = 0
    records: list[EpochRecord] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        epoch_loss = epoch_ce = epoch_kl = 0.0
        seen = 0
        for batch in _epoch_batches(len(train_docs), cfg.batch_size, rng):
            params.zero_grads()
            step += 1
            lr = lr_schedule(step, total_steps, cfg.lr,
                             cfg.warmup_fraction, cfg.lr_decay)
            with Tape():
                pieces = []
                for di in batch:
                    doc = train_docs[di]
                    if feats is not None:
                        loss, ce_val, kl_val, _ = _example_loss_cached(
                            doc, feats, cfg, params, epoch)
                    else:
                        loss, ce_val, kl_val, _ = _finetune_example_loss(
                            doc, texts[doc.id], cfg, params, bpe, wp, table,
                            translit_salt=f"train:{epoch}",
                            tokens=encoded[doc.id])
                    pieces.append(loss)
                    epoch_ce += ce_val
                    epoch_kl += kl_val
                total = pieces[0]
                for piece in pieces[1:]:
                    total = nm.add(total, piece)
                batch_loss = nm.scale(total, 1.0 / len(pieces))
                nm.backward(batch_loss)
            if lr > 0:
                adamw_step(named, state, lr, cfg.weight_decay,
                           lr_multipliers=multipliers)
            epoch_loss += batch_loss.item() * len(batch)
            seen += len(batch)
        val_loss, val_acc = _validation_metrics(
            val_docs, texts, encoded, cfg, params, bpe, wp, table, feats)
        records.append(EpochRecord(
            epoch=epoch, split="train", loss=epoch_loss / max(1, seen),
            extras={"ce": epoch_ce / max(1, seen),
                    "kl": epoch_kl / max(1, seen)}))
        records.append(EpochRecord(
            epoch=epoch, split="val", loss=val_loss,
            extras={"accuracy": val_acc}))
        log.info("finetune epoch %d: train %.4f val %.4f acc %.3f",
                 epoch, epoch_loss / max(1, seen), val_loss, val_acc)
        if out_dir is not None:
            save_checkpoint(params, Path(out_dir) / f"epoch{epoch:03d}",
                            extra={"stage": "finetune", "epoch": str(epoch)})
        if val_loss < best_loss:
            best_loss = val_loss
            best_values = params.clone_values()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.info("early stop at epoch %d (best epoch %d)",
                         epoch, best_epoch)
                break
    params.load_values(best_values)
    if out_dir is not None:
        save_checkpoint(params, Path(out_dir) / "best",
                        extra={"stage": "finetune",
                               "best_epoch": str(best_epoch)})
    return records
