"""Corpus ingestion, cleaning, splitting, batching, and the synthetic
corpus generator that makes the whole pipeline testable on a CPU.

File formats are plain UTF-8: unlabeled corpora are one document per line,
labeled sets use ``label<TAB>language<TAB>text``.
"""

from __future__ import annotations

import html
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError
from .orthography import (LanguageId, VariantTable, default_variant_table,
                          normalize)

# Eastern Arabic-Indic digit forms used by Persian and Urdu text.
_EXTENDED_DIGITS = {chr(ord("0") + i): chr(0x06F0 + i) for i in range(10)}
_EXTENDED_DIGITS.update({chr(0x0660 + i): chr(0x06F0 + i) for i in range(10)})

_SCRIPT_BLOCK = re.compile(r"<\s*(script|style)\b.*?<\s*/\s*\1\s*>",
                           re.IGNORECASE | re.DOTALL)
_TAG = re.compile(r"<!--.*?-->|<[/!]?[a-zA-Z][^>]*>", re.DOTALL)


@dataclass(frozen=True)
class Document:
    """One text with an optional class label and its language."""

    text: str
    language: LanguageId
    label: int | None = None
    id: str = ""


@dataclass(frozen=True)
class SplitSpec:
    """Train/test fractions plus a validation share of the training pool."""

    test_fraction: float = 0.10
    val_fraction: float = 0.10
    stratify: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.test_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ConfigError("split fractions must lie in [0, 1)")


def clean(raw: str, lang: LanguageId,
          table: VariantTable | None = None) -> str:
    """Best-effort cleanup: drop markup, convert digits, then normalize.

    Script/style blocks disappear with their contents, remaining tags are
    stripped, entities are unescaped once, and Persian/Urdu text has its
    ASCII and Arabic-Indic digits rewritten to the extended forms.
    """
    text = _SCRIPT_BLOCK.sub(" ", raw)
    text = _TAG.sub(" ", text)
    text = html.unescape(text)
    if lang in (LanguageId.PERSIAN, LanguageId.URDU):
        text = "".join(_EXTENDED_DIGITS.get(ch, ch) for ch in text)
    return normalize(text, lang, table)


def _half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _allocate(sizes: list[int], total_take: int) -> list[int]:
    """Largest-remainder allocation of ``total_take`` across groups."""
    quotas = [s * total_take / sum(sizes) for s in sizes]
    base = [int(np.floor(q)) for q in quotas]
    remainders = sorted(range(len(sizes)),
                        key=lambda i: (base[i] + 1 > sizes[i],
                                       -(quotas[i] - base[i]), i))
    short = total_take - sum(base)
    for i in remainders[:short]:
        base[i] += 1
    return base


def split(dataset: Sequence[Document], spec: SplitSpec
          ) -> tuple[list[Document], list[Document], list[Document]]:
    """Disjoint train/val/test partition, stratified by (language, label).

    The test share comes off the whole set first, then the validation share
    comes off the remaining training pool. Totals use half-up rounding
    (minimum one document per requested part) and are spread over groups by
    largest remainder, so per-class proportions hold within one document.
    """
    if not dataset:
        raise DataFormatError("cannot split an empty dataset")
    if spec.stratify:
        groups: dict[tuple, list[Document]] = {}
        for doc in dataset:
            groups.setdefault((doc.language.value, doc.label), []).append(doc)
    else:
        groups = {("all", None): list(dataset)}
    parts_needed = 1 + (spec.test_fraction > 0) + (spec.val_fraction > 0)
    keys = sorted(groups, key=str)
    for key in keys:
        if len(groups[key]) < parts_needed:
            raise DataFormatError(
                f"group {key} has {len(groups[key])} documents, fewer than "
                f"the {parts_needed} partitions requested")
    rng = np.random.default_rng(spec.seed)
    shuffled = {key: [groups[key][int(i)]
                      for i in rng.permutation(len(groups[key]))]
                for key in keys}
    sizes = [len(shuffled[k]) for k in keys]
    total = sum(sizes)
    n_test = max(1, _half_up(total * spec.test_fraction)) \
        if spec.test_fraction > 0 else 0
    take_test = _allocate(sizes, n_test)
    rest_sizes = [s - t for s, t in zip(sizes, take_test)]
    n_val = max(1, _half_up(sum(rest_sizes) * spec.val_fraction)) \
        if spec.val_fraction > 0 else 0
    take_val = _allocate(rest_sizes, n_val)
    train: list[Document] = []
    val: list[Document] = []
    test: list[Document] = []
    for key, t_k, v_k in zip(keys, take_test, take_val):
        docs = shuffled[key]
        test.extend(docs[:t_k])
        val.extend(docs[t_k:t_k + v_k])
        train.extend(docs[t_k + v_k:])
    return train, val, test


def holdout_validation(docs: Sequence[Document], fraction: float,
                       seed: int) -> tuple[list[Document], list[Document]]:
    """Stratified train/validation partition used by fine-tuning."""
    train, val, _ = split(docs, SplitSpec(test_fraction=0.0,
                                          val_fraction=fraction,
                                          stratify=True, seed=seed))
    return train, val


def batches(items: Sequence, batch_size: int, seed: int,
            epoch: int = 0) -> list[list]:
    """Seeded shuffle into batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((seed, epoch)))
    order = rng.permutation(len(items))
    out = []
    for start in range(0, len(items), batch_size):
        out.append([items[int(i)] for i in order[start:start + batch_size]])
    return out


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

# Letters outside every variant class, shared by all four alphabets.
_CORE_LETTERS = list("بتجحخدرز"
                     "سشعغفقلمن")
# Letters shared by Kurdish, Persian, and Urdu but absent from Arabic.
_PERSO_LETTERS = list("پچژگ")
# Language-exclusive letters matching the shipped detection profile.
_EXCLUSIVE_LETTERS = {
    LanguageId.KURDISH: list("ڵڕۆێڤ"),
    LanguageId.URDU: list("ٹڈڑںے"),
    LanguageId.PERSIAN: list("ۀ"),
    LanguageId.ARABIC: list("ثذصضطظ"),
}


def _filler_alphabet(lang: LanguageId) -> list[str]:
    extra = [] if lang is LanguageId.ARABIC else _PERSO_LETTERS
    return _CORE_LETTERS + extra


@dataclass(frozen=True)
class GeneratorConfig:
    """Controls for the synthetic labeled corpus.

    Keyword pools are class-disjoint words over the shared class-free
    alphabet, so a bag-of-words count recovers every label. Filler and
    marker words come from small reusable per-language vocabularies, which
    gives masked-token pre-training real word structure to learn; the
    variant rate rewrites single codepoints of filler occurrences, yielding
    variant spellings of recurring words. Keywords are never mutated.
    """

    languages: tuple[LanguageId, ...] = tuple(LanguageId)
    classes: int = 3
    docs_per_class: int = 40
    doc_length: tuple[int, int] = (8, 16)
    keyword_rate: float = 0.35
    variant_rate: float = 0.3
    keywords_per_class: int = 6
    filler_vocab: int = 50
    marker_vocab: int = 8

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.doc_length[0] < 2 or self.doc_length[1] < self.doc_length[0]:
            raise ConfigError("bad doc_length range")
        if not 0 <= self.variant_rate <= 1:
            raise ConfigError("variant_rate must be in [0, 1]")
        if self.keywords_per_class < 1:
            raise ConfigError("keyword pool must not be empty")
        if self.filler_vocab < 2 or self.marker_vocab < 1:
            raise ConfigError("filler/marker vocabularies too small")


def keyword_pools(cfg: GeneratorConfig) -> list[list[str]]:
    """Deterministic, pairwise-disjoint keyword pools over core letters."""
    # Fixed stream: pools are part of the data contract, not the run seed.
    rng = np.random.default_rng(714)
    seen: set[str] = set()
    pools: list[list[str]] = []
    for _ in range(cfg.classes):
        pool: list[str] = []
        while len(pool) < cfg.keywords_per_class:
            length = int(rng.integers(4, 7))
            word = "".join(_CORE_LETTERS[int(i)] for i in
                           rng.integers(len(_CORE_LETTERS), size=length))
            if word not in seen:
                seen.add(word)
                pool.append(word)
        pools.append(pool)
    return pools


def _word_inventory(lang: LanguageId, cfg: GeneratorConfig,
                    forbidden: set[str],
                    rng: np.random.Generator) -> tuple[list[str], list[str]]:
    """Reusable filler and marker vocabularies for one language.

    Fillers use the class-free filler alphabet and never collide with a
    keyword; markers additionally carry two language-exclusive letters.
    """
    base = _filler_alphabet(lang)
    excl = _EXCLUSIVE_LETTERS[lang]
    fillers: list[str] = []
    seen = set(forbidden)
    while len(fillers) < cfg.filler_vocab:
        wlen = int(rng.integers(3, 8))
        word = "".join(base[int(i)] for i in rng.integers(len(base), size=wlen))
        if word not in seen:
            seen.add(word)
            fillers.append(word)
    markers: list[str] = []
    while len(markers) < cfg.marker_vocab:
        length = int(rng.integers(3, 6))
        chars = [base[int(i)] for i in rng.integers(len(base), size=length)]
        for _ in range(2):
            chars[int(rng.integers(len(chars)))] = \
                excl[int(rng.integers(len(excl)))]
        word = "".join(chars)
        if word not in seen:
            seen.add(word)
            markers.append(word)
    return fillers, markers


def synth_corpus(cfg: GeneratorConfig, seed: int = 0) -> list[Document]:
    """Generate labeled documents with recoverable classes.

    Every document carries at least one keyword from its class pool and at
    least one language-exclusive letter; filler occurrences receive
    variant-class codepoints at ``variant_rate`` so orthographic masking
    and variant substitution have something to act on.
    """
    table = default_variant_table()
    variant_members = sorted(table.variant_chars)
    pools = keyword_pools(cfg)
    all_keywords = {w for pool in pools for w in pool}
    rng = np.random.default_rng(seed)
    docs: list[Document] = []
    for lang in cfg.languages:
        fillers, markers = _word_inventory(lang, cfg, all_keywords, rng)
        for label in range(cfg.classes):
            pool = pools[label]
            for k in range(cfg.docs_per_class):
                length = int(rng.integers(cfg.doc_length[0],
                                          cfg.doc_length[1] + 1))
                words: list[str] = []
                has_keyword = False
                for _ in range(length):
                    if rng.random() < cfg.keyword_rate:
                        words.append(pool[int(rng.integers(len(pool)))])
                        has_keyword = True
                    else:
                        word = fillers[int(rng.integers(len(fillers)))]
                        if cfg.variant_rate > 0 and rng.random() < cfg.variant_rate:
                            chars = list(word)
                            pos = int(rng.integers(len(chars)))
                            chars[pos] = variant_members[
                                int(rng.integers(len(variant_members)))]
                            word = "".join(chars)
                        words.append(word)
                if not has_keyword:
                    words.insert(int(rng.integers(len(words) + 1)),
                                 pool[int(rng.integers(len(pool)))])
                words.insert(int(rng.integers(len(words) + 1)),
                             markers[int(rng.integers(len(markers)))])
                docs.append(Document(
                    text=" ".join(words), language=lang, label=label,
                    id=f"{lang.value.lower()}-{label}-{k}"))
    return docs


def bag_of_words_label(text: str, pools: list[list[str]]) -> int:
    """Oracle classifier: argmax of per-class keyword counts."""
    words = text.split()
    counts = [sum(w in pool for w in words) for pool in pools]
    return int(np.argmax(counts))


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------

def write_labeled(docs: Iterable[Document], path: Path) -> None:
    lines = [f"{d.label}\t{d.language.value}\t{d.text}" for d in docs]
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def read_labeled(path: Path) -> list[Document]:
    path = Path(path)
    docs: list[Document] = []
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: not valid UTF-8: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise DataFormatError(
                f"{path}:{lineno}: expected label<TAB>language<TAB>text")
        try:
            label = int(parts[0])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad label {parts[0]!r}") \
                from exc
        docs.append(Document(text=parts[2], language=LanguageId.parse(parts[1]),
                             label=label, id=f"{path.stem}-{lineno}"))
    return docs


def write_corpus(lines: Iterable[str], path: Path) -> None:
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def read_corpus(path: Path) -> list[str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: not valid UTF-8: {exc}") from exc
    return [line for line in text.splitlines() if line.strip()]


def upsample(docs: Sequence[Document], target: int,
             seed: int = 0) -> list[Document]:
    """Seeded repetition up to a target document count; ratio is logged by
    callers via the returned length."""
    if not docs:
        raise DataFormatError("cannot upsample an empty dataset")
    if target <= len(docs):
        return list(docs)
    rng = np.random.default_rng(seed)
    out = list(docs)
    while len(out) < target:
        out.append(docs[int(rng.integers(len(docs)))])
    return out
