"""Metrics, confusion matrices, significance tests, and the ablation
harness contrasting scratch, single-tokenizer, no-orthographic-mask,
no-consistency, and full configurations.

Report rendering writes delimited CSV files plus one self-contained SVG
heatmap per confusion matrix; all file contents are deterministic.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nm
from .data import Document
from .errors import ConfigError, DataFormatError
from .model import (ModelConfig, ModelParameters, classify_tokens,
                    init_parameters)
from .orthography import (LanguageId, ScriptProfile, VariantTable,
                          default_script_profile, default_variant_table,
                          normalize, transliterate)
from .tokenization import BpeModel, WordPieceModel, encode_aligned
from .training import (EpochRecord, FinetuneConfig, PretrainConfig,
                       _stable_seed, finetune, loss_kl, pretrain)

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """Row-by-true, column-by-predicted count matrix."""

    counts: np.ndarray
    class_names: list[str]

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = self.counts.shape
        if len(c) != 2 or c[0] != c[1] or c[0] != len(self.class_names):
            raise ConfigError(f"bad confusion matrix shape {c}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass
class Metrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    log_loss: float

    def as_dict(self) -> dict[str, float]:
        return {"accuracy": self.accuracy,
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
                "log_loss": self.log_loss}


def _safe_ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def evaluate(preds: Iterable[tuple[np.ndarray, int]],
             class_names: list[str] | None = None
             ) -> tuple[ConfusionMatrix, Metrics]:
    """Fill a confusion matrix from argmax predictions and derive metrics.

    Log loss is the mean negative log probability of the true class;
    macro scores average per-class values with 0/0 defined as 0.
    """
    rows = list(preds)
    if not rows:
        raise DataFormatError("empty prediction stream")
    width = len(rows[0][0])
    for probs, true in rows:
        if len(probs) != width:
            raise DataFormatError("inconsistent class counts in predictions")
        if abs(float(np.sum(probs)) - 1.0) > 1e-6:
            raise ConfigError("prediction does not sum to 1")
        if not 0 <= true < width:
            raise DataFormatError(f"true class {true} out of range")
    names = class_names or [f"C{i + 1}" for i in range(width)]
    counts = np.zeros((width, width), dtype=np.int64)
    nll = 0.0
    for probs, true in rows:
        counts[true, int(np.argmax(probs))] += 1
        nll -= math.log(max(float(probs[true]), 1e-300))
    matrix = ConfusionMatrix(counts=counts, class_names=names)
    per_class_p = [_safe_ratio(counts[c, c], counts[:, c].sum())
                   for c in range(width)]
    per_class_r = [_safe_ratio(counts[c, c], counts[c, :].sum())
                   for c in range(width)]
    per_class_f1 = [_safe_ratio(2 * p * r, p + r)
                    for p, r in zip(per_class_p, per_class_r)]
    metrics = Metrics(
        accuracy=matrix.accuracy,
        macro_precision=float(np.mean(per_class_p)),
        macro_recall=float(np.mean(per_class_r)),
        macro_f1=float(np.mean(per_class_f1)),
        log_loss=nll / len(rows),
    )
    return matrix, metrics


# ---------------------------------------------------------------------------
# Paired t-test with a self-contained Student-t CDF
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)


def _t_pdf(x: np.ndarray, df: int) -> np.ndarray:
    log_norm = (math.lgamma((df + 1) / 2.0) - math.lgamma(df / 2.0)
                - 0.5 * math.log(df * math.pi))
    return np.exp(log_norm - 0.5 * (df + 1) * np.log1p(x * x / df))


def t_cdf(x: float, df: int) -> float:
    """Student-t CDF by composite Gauss-Legendre quadrature of the density.

    The integrand is smooth, so segments of unit width with 48 nodes reach
    well below 1e-12 absolute error for moderate ``x``.
    """
    if df < 1:
        raise ConfigError("degrees of freedom must be >= 1")
    if x == 0.0:
        return 0.5
    a = abs(x)
    segments = max(1, int(math.ceil(a)))
    edges = np.linspace(0.0, a, segments + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
        total += half * float(
            np.sum(_GL_WEIGHTS * _t_pdf(mid + half * _GL_NODES, df)))
    return 0.5 + total if x > 0 else 0.5 - total


@dataclass(frozen=True)
class TTestResult:
    t: float | None
    p: float | None
    n: int
    degenerate: bool = False
    note: str = ""


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on per-document scores.

    Zero-variance difference vectors are reported as degenerate (identical
    samples or an infinite statistic) instead of dividing by zero.
    """
    if len(a) != len(b):
        raise DataFormatError(
            f"paired samples must have equal length ({len(a)} vs {len(b)})")
    if len(a) < 2:
        raise DataFormatError("need at least two paired observations")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        note = "identical samples" if mean == 0.0 else \
            "zero-variance differences (infinite t)"
        return TTestResult(t=None, p=None, n=n, degenerate=True, note=note)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * (1.0 - t_cdf(abs(t), n - 1))
    return TTestResult(t=t, p=min(max(p, 0.0), 1.0), n=n)


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationVariant:
    """One training configuration to contrast."""

    name: str
    pretrained: bool = True
    orth_weight: float = 0.5
    kl_weight: float = 1.0
    single_tokenizer: bool = False


def standard_variants() -> list[AblationVariant]:
    return [
        AblationVariant("scratch", pretrained=False),
        AblationVariant("full"),
        AblationVariant("single-tokenizer", single_tokenizer=True),
        AblationVariant("no-orth-mask", orth_weight=0.0),
        AblationVariant("no-consistency", kl_weight=0.0),
    ]


@dataclass
class SeedResult:
    seed: int
    metrics: Metrics
    confusions: dict[LanguageId, ConfusionMatrix]
    perturbation_kl: float
    correctness: np.ndarray
    curves: list[EpochRecord] = field(default_factory=list)


@dataclass
class VariantResult:
    variant: AblationVariant
    per_seed: list[SeedResult]

    @property
    def mean_metrics(self) -> Metrics:
        ms = [r.metrics for r in self.per_seed]
        return Metrics(
            accuracy=float(np.mean([m.accuracy for m in ms])),
            macro_precision=float(np.mean([m.macro_precision for m in ms])),
            macro_recall=float(np.mean([m.macro_recall for m in ms])),
            macro_f1=float(np.mean([m.macro_f1 for m in ms])),
            log_loss=float(np.mean([m.log_loss for m in ms])),
        )

    @property
    def mean_perturbation_kl(self) -> float:
        return float(np.mean([r.perturbation_kl for r in self.per_seed]))


@dataclass
class EvalReport:
    variants: list[VariantResult]
    ttests: dict[tuple[str, str], TTestResult]
    test_doc_ids: list[str]
    pretrain_curves: dict[str, list[EpochRecord]] = field(default_factory=dict)

    def variant(self, name: str) -> VariantResult:
        for v in self.variants:
            if v.variant.name == name:
                return v
        raise KeyError(name)

    def mean_accuracy(self, name: str) -> float:
        return self.variant(name).mean_metrics.accuracy


def _pooled_metrics(per_lang: dict[LanguageId, tuple[ConfusionMatrix, Metrics]],
                    all_rows: list[tuple[np.ndarray, int]]) -> Metrics:
    """Accuracy/log-loss pooled over every document; macro scores averaged
    across the per-language matrices (class counts may differ)."""
    total = sum(m.total for m, _ in per_lang.values())
    correct = sum(int(np.trace(m.counts)) for m, _ in per_lang.values())
    nll = 0.0
    for probs, true in all_rows:
        nll -= math.log(max(float(probs[true]), 1e-300))
    return Metrics(
        accuracy=correct / total,
        macro_precision=float(np.mean(
            [met.macro_precision for _, met in per_lang.values()])),
        macro_recall=float(np.mean(
            [met.macro_recall for _, met in per_lang.values()])),
        macro_f1=float(np.mean(
            [met.macro_f1 for _, met in per_lang.values()])),
        log_loss=nll / len(all_rows),
    )


def evaluate_model(test_docs: Sequence[Document], params: ModelParameters,
                   bpe: BpeModel, wp: WordPieceModel, table: VariantTable,
                   perturb: bool = True
                   ) -> tuple[Metrics, dict[LanguageId, ConfusionMatrix],
                              np.ndarray, float]:
    """Run the classifier over labeled documents grouped by language.

    Returns pooled metrics, per-language confusion matrices, the
    per-document correctness vector (document order preserved), and the
    mean divergence between predictions on each text and on its
    variant-substituted copy.
    """
    max_len = params.config.max_len
    by_lang: dict[LanguageId, list[tuple[np.ndarray, int]]] = {}
    all_rows: list[tuple[np.ndarray, int]] = []
    correctness = np.zeros(len(test_docs))
    kl_values = []
    for i, doc in enumerate(test_docs):
        text = normalize(doc.text, doc.language, table)
        tokens = encode_aligned(text, bpe, wp, max_len=max_len)
        probs = classify_tokens(tokens, doc.language, params).values.reshape(-1)
        by_lang.setdefault(doc.language, []).append((probs, doc.label))
        all_rows.append((probs, doc.label))
        correctness[i] = float(int(np.argmax(probs)) == doc.label)
        if perturb:
            variant = transliterate(text, table,
                                    seed=_stable_seed("perturb", doc.id))
            vtokens = encode_aligned(variant, bpe, wp, max_len=max_len)
            vprobs = classify_tokens(vtokens, doc.language,
                                     params).values.reshape(-1)
            kl_values.append(loss_kl(nm.tensor(probs),
                                     nm.tensor(vprobs)).item())
    per_lang = {}
    for lang in sorted(by_lang, key=lambda l: l.value):
        per_lang[lang] = evaluate(by_lang[lang])
    metrics = _pooled_metrics(per_lang, all_rows)
    confusions = {lang: cm for lang, (cm, _) in per_lang.items()}
    mean_kl = float(np.mean(kl_values)) if kl_values else 0.0
    return metrics, confusions, correctness, mean_kl


def ablation_run(variants: Sequence[AblationVariant],
                 pretrain_docs: Sequence[Document],
                 train_docs: Sequence[Document],
                 test_docs: Sequence[Document],
                 model_cfg: ModelConfig,
                 pre_cfg: PretrainConfig,
                 fine_cfg: FinetuneConfig,
                 seeds: Sequence[int],
                 bpe: BpeModel, wp: WordPieceModel,
                 table: VariantTable | None = None,
                 backbone_cache: dict | None = None) -> EvalReport:
    """Train and evaluate every variant under identical data and seeds.

    Each variant reuses the same splits, tokenizers, and fine-tune seeds;
    backbones are pre-trained once per distinct pre-training configuration
    and shared across that variant's fine-tuning seeds. Pairwise t-tests
    compare per-document correctness pooled over seeds; the scratch /
    pre-trained direction is checked whenever both kinds are present.
    """
    if not variants:
        raise ConfigError("need at least one variant")
    if len({v.name for v in variants}) != len(variants):
        raise ConfigError("variant names must be unique")
    if not seeds:
        raise ConfigError("need at least one seed")
    table = table or default_variant_table()
    if backbone_cache is None:
        backbone_cache = {}
    init_cache: dict[bool, dict[str, np.ndarray]] = {}
    results: list[VariantResult] = []
    pretrain_curves: dict[str, list[EpochRecord]] = {}
    for variant in variants:
        cfg = replace(model_cfg, single_tokenizer=variant.single_tokenizer)
        init_key = variant.single_tokenizer
        if init_key not in init_cache:
            init_cache[init_key] = init_parameters(
                cfg, seed=pre_cfg.seed).clone_values()
        per_seed: list[SeedResult] = []
        base_values = init_cache[init_key]
        if variant.pretrained:
            key = (variant.orth_weight, variant.single_tokenizer)
            if key not in backbone_cache:
                params = init_parameters(cfg, seed=pre_cfg.seed)
                params.load_values(base_values)
                curves = pretrain(pretrain_docs,
                                  replace(pre_cfg,
                                          orth_weight=variant.orth_weight),
                                  params, bpe, wp, table)
                backbone_cache[key] = params.clone_values()
                pretrain_curves[variant.name] = curves
            base_values = backbone_cache[key]
        for seed in seeds:
            params = init_parameters(cfg, seed=pre_cfg.seed)
            params.load_values(base_values)
            curves = finetune(train_docs,
                              replace(fine_cfg, kl_weight=variant.kl_weight,
                                      seed=seed),
                              params, bpe, wp, table)
            metrics, confusions, correctness, mean_kl = evaluate_model(
                test_docs, params, bpe, wp, table)
            per_seed.append(SeedResult(
                seed=seed, metrics=metrics, confusions=confusions,
                perturbation_kl=mean_kl, correctness=correctness,
                curves=curves))
            log.info("variant %s seed %d: accuracy %.3f perturbation KL %.4f",
                     variant.name, seed, metrics.accuracy, mean_kl)
        results.append(VariantResult(variant=variant, per_seed=per_seed))

    doc_ids = [d.id for d in test_docs]
    ttests: dict[tuple[str, str], TTestResult] = {}
    for i, va in enumerate(results):
        for vb in results[i + 1:]:
            a = np.concatenate([r.correctness for r in va.per_seed])
            b = np.concatenate([r.correctness for r in vb.per_seed])
            if len(a) != len(b):
                raise DataFormatError(
                    "variants were evaluated on mismatched splits; paired "
                    "comparison impossible")
            ttests[(va.variant.name, vb.variant.name)] = paired_ttest(a, b)

    report = EvalReport(variants=results, ttests=ttests,
                        test_doc_ids=doc_ids,
                        pretrain_curves=pretrain_curves)
    scratch = [v for v in results if not v.variant.pretrained]
    full = [v for v in results if v.variant.pretrained
            and not v.variant.single_tokenizer]
    if scratch and full:
        best_pre = max(v.mean_metrics.accuracy for v in full)
        for s in scratch:
            if s.mean_metrics.accuracy > best_pre:
                log.warning(
                    "scratch variant %s (%.3f) beat every pre-trained "
                    "variant (best %.3f) on this run",
                    s.variant.name, s.mean_metrics.accuracy, best_pre)
    return report


# ---------------------------------------------------------------------------
# Report files: CSV tables plus an SVG heatmap per confusion matrix
# ---------------------------------------------------------------------------

def shade_for(count: int, max_count: int) -> str:
    """Monotone grayscale fill: zero counts are white, the maximum is
    near-black. Returns a #rrggbb hex string."""
    if max_count <= 0:
        return "#ffffff"
    level = 0.92 * (1.0 - count / max_count) + 0.05 * (count < max_count)
    value = int(round(238 * min(max(level, 0.0), 1.0)))
    return f"#{value:02x}{value:02x}{value:02x}"


def render_heatmap(matrix: ConfusionMatrix, title: str, out_path: Path) -> None:
    """Draw one confusion matrix as a deterministic, self-contained SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    plt.rcParams["svg.hashsalt"] = "arascript"
    c = len(matrix.class_names)
    max_count = int(matrix.counts.max())
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * c, 1.0 + 0.8 * c))
    for i in range(c):
        for j in range(c):
            count = int(matrix.counts[i, j])
            ax.add_patch(Rectangle((j, c - 1 - i), 1, 1,
                                   facecolor=shade_for(count, max_count),
                                   edgecolor="#888888", linewidth=0.5))
            ax.text(j + 0.5, c - 1 - i + 0.5, str(count),
                    ha="center", va="center", fontsize=9,
                    color="#000000" if count < 0.6 * max(max_count, 1)
                    else "#ffffff")
    ax.set_xlim(0, c)
    ax.set_ylim(0, c)
    ax.set_xticks([j + 0.5 for j in range(c)])
    ax.set_xticklabels(matrix.class_names, fontsize=8)
    ax.set_yticks([c - 1 - i + 0.5 for i in range(c)])
    ax.set_yticklabels(matrix.class_names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title, fontsize=10)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def report(result: EvalReport, out_dir: Path) -> list[Path]:
    """Write metrics, confusion, curve CSVs and per-matrix SVG heatmaps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    metrics_rows = []
    for vr in result.variants:
        for sr in vr.per_seed:
            m = sr.metrics.as_dict()
            metrics_rows.append(
                [vr.variant.name, sr.seed] +
                [f"{m[k]:.6f}" for k in ("accuracy", "precision", "recall",
                                         "f1", "log_loss")] +
                [f"{sr.perturbation_kl:.6f}"])
        mm = vr.mean_metrics.as_dict()
        metrics_rows.append(
            [vr.variant.name, "mean"] +
            [f"{mm[k]:.6f}" for k in ("accuracy", "precision", "recall",
                                      "f1", "log_loss")] +
            [f"{vr.mean_perturbation_kl:.6f}"])
    path = out_dir / "metrics.csv"
    _write_csv(path, ["variant", "seed", "accuracy", "precision", "recall",
                      "f1", "log_loss", "perturbation_kl"], metrics_rows)
    written.append(path)

    ttest_rows = []
    for (a, b), res in sorted(result.ttests.items()):
        ttest_rows.append([
            a, b, res.n,
            "" if res.t is None else f"{res.t:.6f}",
            "" if res.p is None else f"{res.p:.6g}",
            int(res.degenerate), res.note])
    path = out_dir / "ttests.csv"
    _write_csv(path, ["variant_a", "variant_b", "n", "t", "p",
                      "degenerate", "note"], ttest_rows)
    written.append(path)

    curve_rows = []
    for name, curves in sorted(result.pretrain_curves.items()):
        for rec in curves:
            curve_rows.append([name, "pretrain", rec.epoch, rec.split,
                               f"{rec.loss:.6f}",
                               ";".join(f"{k}={v:.6f}"
                                        for k, v in sorted(rec.extras.items()))])
    for vr in result.variants:
        for sr in vr.per_seed:
            for rec in sr.curves:
                curve_rows.append([vr.variant.name, f"seed{sr.seed}",
                                   rec.epoch, rec.split, f"{rec.loss:.6f}",
                                   ";".join(f"{k}={v:.6f}"
                                            for k, v in sorted(rec.extras.items()))])
    path = out_dir / "curves.csv"
    _write_csv(path, ["variant", "run", "epoch", "split", "loss", "extras"],
               curve_rows)
    written.append(path)

    for vr in result.variants:
        for sr in vr.per_seed:
            for lang in sorted(sr.confusions, key=lambda l: l.value):
                cm = sr.confusions[lang]
                stem = f"confusion_{vr.variant.name}_s{sr.seed}_{lang.value.lower()}"
                cpath = out_dir / f"{stem}.csv"
                _write_csv(cpath, ["true\\pred"] + cm.class_names,
                           [[cm.class_names[i]] + cm.counts[i].tolist()
                            for i in range(len(cm.class_names))])
                written.append(cpath)
                spath = out_dir / f"{stem}.svg"
                render_heatmap(cm, f"{vr.variant.name} / {lang.value} "
                                   f"(seed {sr.seed})", spath)
                written.append(spath)
    return written


def read_confusion_csv(path: Path) -> ConfusionMatrix:
    """Re-load a confusion matrix written by :func:`report`."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows) < 2:
        raise DataFormatError(f"{path}: not a confusion CSV")
    names = rows[0][1:]
    counts = np.array([[int(x) for x in row[1:]] for row in rows[1:]],
                      dtype=np.int64)
    return ConfusionMatrix(counts=counts, class_names=names)
