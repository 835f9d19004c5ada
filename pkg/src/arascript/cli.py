"""Batch command-line entry point.

Commands: clean, synth, train-tokenizers, pretrain, finetune, evaluate,
ablate, classify, report. Every run writes a manifest recording the
effective configuration, seeds, and input hashes, so artifacts can be
reproduced exactly. Flags override config-file values, which override the
built-in defaults.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Document, GeneratorConfig, SplitSpec, clean, read_corpus,
                   read_labeled, split, synth_corpus, write_corpus,
                   write_labeled)
from .errors import (ArascriptError, CheckpointError, ConfigError,
                     DataFormatError, NumericError, RoutingError, ShapeError,
                     TokenizerError, UnknownScriptError)
from .evaluation import (AblationVariant, EvalReport, SeedResult,
                         VariantResult, ablation_run, evaluate_model,
                         read_confusion_csv, render_heatmap, report,
                         standard_variants)
from .model import (ModelConfig, init_parameters, load_checkpoint, predict,
                    save_checkpoint)
from .orthography import (LanguageId, default_script_profile,
                          default_variant_table)
from .tokenization import (load_bpe, load_wordpiece, save_bpe, save_wordpiece,
                           train_bpe, train_wordpiece)
from .training import FinetuneConfig, PretrainConfig, finetune, pretrain

log = logging.getLogger("arascript")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_SCRIPT = 4
EXIT_DATA = 5
EXIT_NUMERIC = 6

_EXIT_BY_ERROR = (
    (UnknownScriptError, EXIT_SCRIPT),
    (CheckpointError, EXIT_MISSING),
    ((ConfigError, TokenizerError), EXIT_CONFIG),
    ((DataFormatError, RoutingError), EXIT_DATA),
    ((NumericError, ShapeError), EXIT_NUMERIC),
)

_SECTIONS = {
    "model": {"layers", "hidden", "heads", "proj", "adapter", "ffn",
              "max-len", "vocab-bpe", "vocab-wp", "classes",
              "single-tokenizer", "use-adapters", "init-std"},
    "pretrain": {"orth-weight", "mask-rate", "lr", "batch-size", "epochs",
                 "weight-decay", "seed"},
    "finetune": {"kl-weight", "lr", "batch-size", "max-len", "epochs",
                 "warmup-fraction", "head-lr-multiplier", "val-fraction",
                 "patience", "weight-decay", "seed", "unfreeze-backbone",
                 "symmetric-kl", "lr-decay"},
    "split": {"test-fraction", "val-fraction", "stratify", "seed"},
    "generator": {"languages", "classes", "docs-per-class", "doc-length-min",
                  "doc-length-max", "keyword-rate", "variant-rate",
                  "keywords-per-class", "seed"},
    "tokenizers": {"vocab-bpe", "vocab-wp", "seed"},
}


def _base_dir() -> Path:
    return Path(os.environ.get("ARASCRIPT_DATA_DIR", "."))


def _resolve(path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _base_dir() / p


def _load_config(path: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is not None:
        resolved = _resolve(path)
        if not resolved.is_file():
            raise CheckpointError(f"config file not found: {resolved}")
        cp.read(resolved, encoding="utf-8")
        for section in cp.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            unknown = set(cp[section]) - _SECTIONS[section]
            if unknown:
                raise ConfigError(
                    f"unknown keys in [{section}]: {sorted(unknown)}")
    return cp


def _get(cp: configparser.ConfigParser, section: str, key: str,
         cli_value, default, cast):
    """CLI flag > config file > default."""
    if cli_value is not None:
        return cli_value
    if cp.has_option(section, key):
        raw = cp.get(section, key)
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    return default


def _bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_classes(raw: str) -> dict[LanguageId, int]:
    out: dict[LanguageId, int] = {}
    for item in raw.split(","):
        name, sep, count = item.partition(":")
        if not sep:
            raise ConfigError(f"classes entry {item!r} must be Language:count")
        out[LanguageId.parse(name)] = int(count)
    return out


def _parse_languages(raw: str) -> tuple[LanguageId, ...]:
    return tuple(LanguageId.parse(n) for n in raw.split(","))


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(target: Path, command: str, settings: dict[str, object],
                    inputs: dict[str, Path]) -> None:
    lines = [f"command = {command}", f"version = {__version__}"]
    for key in sorted(settings):
        lines.append(f"{key} = {settings[key]}")
    for key in sorted(inputs):
        p = inputs[key]
        lines.append(f"input.{key}.path = {p}")
        if p.is_file():
            lines.append(f"input.{key}.sha256 = {_sha256_file(p)}")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _settings_from(prefix: str, cfg) -> dict[str, object]:
    out = {}
    for name, value in vars(cfg).items():
        if isinstance(value, dict):
            value = ",".join(f"{k.value}:{v}" for k, v in
                             sorted(value.items(), key=lambda kv: kv[0].value))
        elif isinstance(value, tuple):
            value = ",".join(getattr(v, "value", str(v)) for v in value)
        out[f"{prefix}.{name}"] = value
    return out


def _model_config(cp, args) -> ModelConfig:
    classes_raw = _get(cp, "model", "classes", getattr(args, "classes", None),
                       None, str)
    if classes_raw is None:
        raise ConfigError("model classes must be set "
                          "(e.g. Kurdish:3,Arabic:3,Persian:3,Urdu:3)")
    classes = classes_raw if isinstance(classes_raw, dict) \
        else _parse_classes(classes_raw)
    vocab_bpe = _get(cp, "model", "vocab-bpe",
                     getattr(args, "vocab_bpe", None), None, int)
    vocab_wp = _get(cp, "model", "vocab-wp",
                    getattr(args, "vocab_wp", None), None, int)
    if vocab_bpe is None or vocab_wp is None:
        raise ConfigError("model vocab-bpe and vocab-wp must be set")
    return ModelConfig(
        vocab_bpe=vocab_bpe, vocab_wp=vocab_wp, classes=classes,
        layers=_get(cp, "model", "layers", getattr(args, "layers", None), 12, int),
        hidden=_get(cp, "model", "hidden", getattr(args, "hidden", None), 768, int),
        heads=_get(cp, "model", "heads", getattr(args, "heads", None), 12, int),
        proj=_get(cp, "model", "proj", getattr(args, "proj", None), 256, int),
        adapter=_get(cp, "model", "adapter", getattr(args, "adapter", None), None,
                     int),
        ffn=_get(cp, "model", "ffn", None, None, int),
        max_len=_get(cp, "model", "max-len", getattr(args, "max_len", None), 256,
                     int),
        single_tokenizer=_get(cp, "model", "single-tokenizer",
                              getattr(args, "single_tokenizer", None) or None,
                              False, _bool),
        use_adapters=_get(cp, "model", "use-adapters", None, True, _bool),
        init_std=_get(cp, "model", "init-std",
                      getattr(args, "init_std", None), 0.02, float),
    )


def _pretrain_config(cp, args) -> PretrainConfig:
    return PretrainConfig(
        orth_weight=_get(cp, "pretrain", "orth-weight",
                         getattr(args, "orth_weight", None), 0.5, float),
        mask_rate=_get(cp, "pretrain", "mask-rate",
                       getattr(args, "mask_rate", None), 0.15, float),
        lr=_get(cp, "pretrain", "lr", getattr(args, "lr", None), 1e-4, float),
        batch_size=_get(cp, "pretrain", "batch-size",
                        getattr(args, "batch_size", None), 16, int),
        epochs=_get(cp, "pretrain", "epochs",
                    getattr(args, "epochs", None), 5, int),
        weight_decay=_get(cp, "pretrain", "weight-decay", None, 0.01, float),
        seed=_get(cp, "pretrain", "seed", getattr(args, "seed", None), 0, int),
    )


def _finetune_config(cp, args) -> FinetuneConfig:
    return FinetuneConfig(
        kl_weight=_get(cp, "finetune", "kl-weight",
                       getattr(args, "kl_weight", None), 1.0, float),
        lr=_get(cp, "finetune", "lr", getattr(args, "lr", None), 2e-5, float),
        batch_size=_get(cp, "finetune", "batch-size",
                        getattr(args, "batch_size", None), 16, int),
        max_len=_get(cp, "finetune", "max-len", None, 256, int),
        epochs=_get(cp, "finetune", "epochs",
                    getattr(args, "epochs", None), 3, int),
        warmup_fraction=_get(cp, "finetune", "warmup-fraction", None, 0.10,
                             float),
        head_lr_multiplier=_get(cp, "finetune", "head-lr-multiplier", None,
                                2.0, float),
        val_fraction=_get(cp, "finetune", "val-fraction", None, 0.10, float),
        patience=_get(cp, "finetune", "patience",
                      getattr(args, "patience", None), 3, int),
        weight_decay=_get(cp, "finetune", "weight-decay", None, 0.01, float),
        seed=_get(cp, "finetune", "seed", getattr(args, "seed", None), 0, int),
        unfreeze_backbone=_get(cp, "finetune", "unfreeze-backbone",
                               getattr(args, "unfreeze_backbone", None) or None,
                               False, _bool),
        symmetric_kl=_get(cp, "finetune", "symmetric-kl", None, False, _bool),
        lr_decay=_get(cp, "finetune", "lr-decay", None, False, _bool),
    )


def _generator_config(cp, args) -> tuple[GeneratorConfig, int]:
    langs = _get(cp, "generator", "languages",
                 getattr(args, "languages", None), None, _parse_languages)
    cfg = GeneratorConfig(
        languages=langs if langs else tuple(LanguageId),
        classes=_get(cp, "generator", "classes",
                     getattr(args, "classes", None), 3, int),
        docs_per_class=_get(cp, "generator", "docs-per-class",
                            getattr(args, "docs_per_class", None), 40, int),
        doc_length=(
            _get(cp, "generator", "doc-length-min", None, 8, int),
            _get(cp, "generator", "doc-length-max", None, 16, int)),
        keyword_rate=_get(cp, "generator", "keyword-rate", None, 0.35, float),
        variant_rate=_get(cp, "generator", "variant-rate",
                          getattr(args, "variant_rate", None), 0.3, float),
        keywords_per_class=_get(cp, "generator", "keywords-per-class", None,
                                6, int),
    )
    seed = _get(cp, "generator", "seed", getattr(args, "seed", None), 0, int)
    return cfg, seed


def _split_spec(cp, args) -> SplitSpec:
    return SplitSpec(
        test_fraction=_get(cp, "split", "test-fraction",
                           getattr(args, "test_fraction", None), 0.10, float),
        val_fraction=0.0,
        stratify=_get(cp, "split", "stratify", None, True, _bool),
        seed=_get(cp, "split", "seed", getattr(args, "split_seed", None), 0,
                  int),
    )


def _load_tokenizers(tok_dir: Path):
    tok_dir = _resolve(tok_dir)
    for fname in ("bpe.vocab", "bpe.merges", "wp.vocab"):
        if not (tok_dir / fname).is_file():
            raise CheckpointError(f"missing tokenizer file {tok_dir / fname}")
    return (load_bpe(tok_dir / "bpe.vocab", tok_dir / "bpe.merges"),
            load_wordpiece(tok_dir / "wp.vocab"))


def _read_documents(path: Path, labeled: bool,
                    lang: LanguageId | None) -> list[Document]:
    path = _resolve(path)
    if not path.is_file():
        raise CheckpointError(f"input file not found: {path}")
    if labeled:
        return read_labeled(path)
    if lang is None:
        raise ConfigError("--lang is required for unlabeled input")
    return [Document(text=t, language=lang, id=f"{path.stem}-{i + 1}")
            for i, t in enumerate(read_corpus(path))]


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------

def _cmd_clean(args) -> int:
    cp = _load_config(args.config)
    table = default_variant_table()
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.labeled:
        docs = read_labeled(_resolve(args.infile))
        cleaned = [replace(d, text=clean(d.text, d.language, table))
                   for d in docs]
        write_labeled(cleaned, out)
    else:
        lang = LanguageId.parse(args.lang) if args.lang else None
        if lang is None:
            raise ConfigError("--lang is required for unlabeled input")
        lines = [clean(t, lang, table) for t in read_corpus(_resolve(args.infile))]
        write_corpus(lines, out)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.txt"), "clean",
                    {"labeled": args.labeled, "lang": args.lang or ""},
                    {"infile": _resolve(args.infile)})
    del cp
    return EXIT_OK


def _cmd_synth(args) -> int:
    cp = _load_config(args.config)
    cfg, seed = _generator_config(cp, args)
    docs = synth_corpus(cfg, seed=seed)
    out_dir = _resolve(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_labeled(docs, out_dir / "labeled.tsv")
    write_corpus([d.text for d in docs], out_dir / "corpus.txt")
    settings = _settings_from("generator", cfg)
    settings["generator.seed"] = seed
    _write_manifest(out_dir / "manifest.txt", "synth", settings, {})
    log.info("wrote %d documents to %s", len(docs), out_dir)
    return EXIT_OK


def _cmd_train_tokenizers(args) -> int:
    cp = _load_config(args.config)
    vocab_bpe = _get(cp, "tokenizers", "vocab-bpe", args.vocab_bpe, 4000, int)
    vocab_wp = _get(cp, "tokenizers", "vocab-wp", args.vocab_wp, 4000, int)
    seed = _get(cp, "tokenizers", "seed", args.seed, 0, int)
    corpus_path = _resolve(args.corpus)
    if not corpus_path.is_file():
        raise CheckpointError(f"corpus not found: {corpus_path}")
    if args.labeled:
        texts = [d.text for d in read_labeled(corpus_path)]
    else:
        texts = read_corpus(corpus_path)
    bpe = train_bpe(texts, vocab_bpe, seed=seed)
    wp = train_wordpiece(texts, vocab_wp, seed=seed)
    out_dir = _resolve(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_bpe(bpe, out_dir / "bpe.vocab", out_dir / "bpe.merges")
    save_wordpiece(wp, out_dir / "wp.vocab")
    _write_manifest(out_dir / "manifest.txt", "train-tokenizers",
                    {"tokenizers.vocab_bpe": vocab_bpe,
                     "tokenizers.vocab_wp": vocab_wp,
                     "tokenizers.seed": seed,
                     "tokenizers.bpe_size": bpe.size,
                     "tokenizers.wp_size": wp.size},
                    {"corpus": corpus_path})
    log.info("trained tokenizers: bpe %d pieces, wp %d pieces",
             bpe.size, wp.size)
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cp = _load_config(args.config)
    bpe, wp = _load_tokenizers(args.tokenizers)
    if args.vocab_bpe is None:
        args.vocab_bpe = bpe.size
    if args.vocab_wp is None:
        args.vocab_wp = wp.size
    model_cfg = _model_config(cp, args)
    pre_cfg = _pretrain_config(cp, args)
    docs = _read_documents(args.corpus, args.labeled,
                           LanguageId.parse(args.lang) if args.lang else None)
    params = init_parameters(model_cfg, seed=pre_cfg.seed)
    out_dir = _resolve(args.out_dir)
    records = pretrain(docs, pre_cfg, params, bpe, wp, out_dir=out_dir)
    save_checkpoint(params, out_dir / "final",
                    extra={"stage": "pretrain", "seed": str(pre_cfg.seed),
                           "tokenizers": str(_resolve(args.tokenizers))})
    curve_lines = ["epoch,split,loss,mlm,orth"]
    for rec in records:
        curve_lines.append(
            f"{rec.epoch},{rec.split},{rec.loss:.6f},"
            f"{rec.extras.get('mlm', 0):.6f},{rec.extras.get('orth', 0):.6f}")
    (out_dir / "metrics.csv").write_text("\n".join(curve_lines) + "\n",
                                         encoding="utf-8")
    settings = _settings_from("pretrain", pre_cfg)
    settings.update(_settings_from("model", model_cfg))
    _write_manifest(out_dir / "run_manifest.txt", "pretrain", settings,
                    {"corpus": _resolve(args.corpus)})
    return EXIT_OK


def _cmd_finetune(args) -> int:
    cp = _load_config(args.config)
    bpe, wp = _load_tokenizers(args.tokenizers)
    fine_cfg = _finetune_config(cp, args)
    docs = read_labeled(_resolve(args.data))
    if args.scratch:
        if args.vocab_bpe is None:
            args.vocab_bpe = bpe.size
        if args.vocab_wp is None:
            args.vocab_wp = wp.size
        model_cfg = _model_config(cp, args)
        params = init_parameters(model_cfg, seed=fine_cfg.seed)
    else:
        params, _ = load_checkpoint(_resolve(args.checkpoint))
    out_dir = _resolve(args.out_dir)
    records = finetune(docs, fine_cfg, params, bpe, wp, out_dir=out_dir)
    curve_lines = ["epoch,split,loss,ce,kl,accuracy"]
    for rec in records:
        curve_lines.append(
            f"{rec.epoch},{rec.split},{rec.loss:.6f},"
            f"{rec.extras.get('ce', 0):.6f},{rec.extras.get('kl', 0):.6f},"
            f"{rec.extras.get('accuracy', 0):.6f}")
    (out_dir / "metrics.csv").write_text("\n".join(curve_lines) + "\n",
                                         encoding="utf-8")
    settings = _settings_from("finetune", fine_cfg)
    settings["finetune.scratch"] = args.scratch
    _write_manifest(out_dir / "run_manifest.txt", "finetune", settings,
                    {"data": _resolve(args.data)})
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    cp = _load_config(args.config)
    del cp
    bpe, wp = _load_tokenizers(args.tokenizers)
    params, _ = load_checkpoint(_resolve(args.checkpoint))
    docs = read_labeled(_resolve(args.data))
    table = default_variant_table()
    metrics, confusions, correctness, mean_kl = evaluate_model(
        docs, params, bpe, wp, table)
    result = EvalReport(
        variants=[VariantResult(
            variant=AblationVariant("eval"),
            per_seed=[SeedResult(seed=0, metrics=metrics,
                                 confusions=confusions,
                                 perturbation_kl=mean_kl,
                                 correctness=correctness)])],
        ttests={}, test_doc_ids=[d.id for d in docs])
    out_dir = _resolve(args.out_dir)
    report(result, out_dir)
    _write_manifest(out_dir / "run_manifest.txt", "evaluate", {},
                    {"data": _resolve(args.data)})
    print(f"accuracy\t{metrics.accuracy:.6f}")
    print(f"log_loss\t{metrics.log_loss:.6f}")
    print(f"macro_f1\t{metrics.macro_f1:.6f}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cp = _load_config(args.config)
    bpe, wp = _load_tokenizers(args.tokenizers)
    if args.vocab_bpe is None:
        args.vocab_bpe = bpe.size
    if args.vocab_wp is None:
        args.vocab_wp = wp.size
    model_cfg = _model_config(cp, args)
    pre_cfg = _pretrain_config(cp, args)
    fine_cfg = _finetune_config(cp, args)
    spec = _split_spec(cp, args)
    labeled = read_labeled(_resolve(args.data))
    pre_docs = _read_documents(args.pretrain_corpus, labeled=True, lang=None) \
        if args.pretrain_corpus else labeled
    train_docs, _, test_docs = split(labeled, spec)
    wanted = args.variants.split(",") if args.variants else \
        ["scratch", "full"]
    known = {v.name: v for v in standard_variants()}
    chosen = []
    for name in wanted:
        if name not in known:
            raise ConfigError(f"unknown variant {name!r}; choose from "
                              f"{sorted(known)}")
        chosen.append(known[name])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0, 1, 2]
    result = ablation_run(chosen, pre_docs, train_docs, test_docs, model_cfg,
                          pre_cfg, fine_cfg, seeds, bpe, wp)
    out_dir = _resolve(args.out_dir)
    report(result, out_dir)
    settings = _settings_from("pretrain", pre_cfg)
    settings.update(_settings_from("finetune", fine_cfg))
    settings.update(_settings_from("model", model_cfg))
    settings["ablate.variants"] = ",".join(v.name for v in chosen)
    settings["ablate.seeds"] = ",".join(str(s) for s in seeds)
    _write_manifest(out_dir / "run_manifest.txt", "ablate", settings,
                    {"data": _resolve(args.data)})
    for vr in result.variants:
        print(f"{vr.variant.name}\taccuracy\t{vr.mean_metrics.accuracy:.6f}"
              f"\tperturbation_kl\t{vr.mean_perturbation_kl:.6f}")
    return EXIT_OK


def _cmd_classify(args) -> int:
    bpe, wp = _load_tokenizers(args.tokenizers)
    params, _ = load_checkpoint(_resolve(args.checkpoint))
    profile = default_script_profile()
    table = default_variant_table()
    texts = [args.text] if args.text else read_corpus(_resolve(args.infile))
    for text in texts:
        lang, probs = predict(text, params, profile, table, bpe, wp)
        cls = int(np.argmax(probs))
        vector = ",".join(f"{p:.6f}" for p in probs)
        print(f"{lang.value}\t{cls}\t{vector}")
    return EXIT_OK


def _cmd_report(args) -> int:
    src = _resolve(args.source)
    if not src.is_dir():
        raise CheckpointError(f"report source directory not found: {src}")
    out_dir = _resolve(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rendered = 0
    for csv_path in sorted(src.glob("confusion_*.csv")):
        matrix = read_confusion_csv(csv_path)
        render_heatmap(matrix, csv_path.stem, out_dir / f"{csv_path.stem}.svg")
        rendered += 1
    if rendered == 0:
        raise DataFormatError(f"no confusion CSVs found under {src}")
    _write_manifest(out_dir / "run_manifest.txt", "report",
                    {"rendered": rendered}, {})
    log.info("re-rendered %d heatmaps into %s", rendered, out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arascript",
        description="Orthography-aware text classification for "
                    "Arabic-script languages")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("clean", help="clean and normalize a corpus")
    _add_common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lang", help="language for unlabeled input")
    p.add_argument("--labeled", action="store_true")
    p.set_defaults(func=_cmd_clean)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--languages")
    p.add_argument("--classes", type=int)
    p.add_argument("--docs-per-class", type=int)
    p.add_argument("--variant-rate", type=float)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-tokenizers", help="train both tokenizers")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--labeled", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--vocab-bpe", type=int)
    p.add_argument("--vocab-wp", type=int)
    p.set_defaults(func=_cmd_train_tokenizers)

    p = sub.add_parser("pretrain", help="stage-one masked pre-training")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--labeled", action="store_true", default=True)
    p.add_argument("--lang")
    p.add_argument("--tokenizers", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--classes")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--proj", type=int)
    p.add_argument("--adapter", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--vocab-bpe", type=int)
    p.add_argument("--vocab-wp", type=int)
    p.add_argument("--init-std", type=float)
    p.add_argument("--single-tokenizer", action="store_true", default=None)
    p.add_argument("--orth-weight", type=float)
    p.add_argument("--mask-rate", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="stage-two classifier training")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--scratch", action="store_true",
                   help="start from random initialization")
    p.add_argument("--tokenizers", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--classes")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--proj", type=int)
    p.add_argument("--adapter", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--vocab-bpe", type=int)
    p.add_argument("--vocab-wp", type=int)
    p.add_argument("--init-std", type=float)
    p.add_argument("--single-tokenizer", action="store_true", default=None)
    p.add_argument("--kl-weight", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--unfreeze-backbone", action="store_true", default=None)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate", help="score a checkpoint on labeled data")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizers", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare configurations")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrain-corpus")
    p.add_argument("--tokenizers", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--variants", help="comma list, e.g. scratch,full")
    p.add_argument("--seeds", help="comma list of fine-tune seeds")
    p.add_argument("--classes")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--proj", type=int)
    p.add_argument("--adapter", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--vocab-bpe", type=int)
    p.add_argument("--vocab-wp", type=int)
    p.add_argument("--init-std", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--split-seed", type=int)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("classify", help="classify raw text")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizers", required=True)
    p.add_argument("--text")
    p.add_argument("--in", dest="infile")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("report", help="re-render figures from report CSVs")
    _add_common(p)
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArascriptError as exc:
        for types, code in _EXIT_BY_ERROR:
            if isinstance(exc, types):
                print(f"error ({exc.__class__.__name__}): {exc}",
                      file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED
    except FileNotFoundError as exc:
        print(f"error (missing file): {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
