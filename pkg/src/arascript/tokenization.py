"""Subword tokenizers and the aligned dual encoding.

Two independently trained tokenizers cover the same corpus: a byte-pair
model whose segmentation is canonical, and a wordpiece model used to
re-encode each canonical token's surface. Word-initial subwords carry the
marker codepoint ``▁`` so text round-trips exactly through
``decode(encode(x))``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataFormatError, TokenizerError

log = logging.getLogger(__name__)

WORD_MARKER = "▁"
CONTINUATION = "##"

PAD, UNK, CLS, MASK = "[PAD]", "[UNK]", "[CLS]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, MASK)


@dataclass(frozen=True)
class Specials:
    pad: int = 0
    unk: int = 1
    cls: int = 2
    mask: int = 3

    def as_set(self) -> frozenset[int]:
        return frozenset((self.pad, self.unk, self.cls, self.mask))


@dataclass
class BpeModel:
    """Byte-pair model: dense vocab plus the ordered merge list."""

    vocab: dict[str, int]
    merges: list[tuple[str, str]]
    specials: Specials = field(default_factory=Specials)

    def __post_init__(self) -> None:
        self.inv = [None] * len(self.vocab)
        for piece, idx in self.vocab.items():
            if not 0 <= idx < len(self.vocab) or self.inv[idx] is not None:
                raise DataFormatError("vocab ids must be dense in [0, V)")
            self.inv[idx] = piece
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._word_cache: dict[str, list[str]] = {}

    @property
    def size(self) -> int:
        return len(self.vocab)

    def symbols_of(self, word: str) -> list[str]:
        """Initial symbol sequence: a word-boundary marker, then one symbol
        per codepoint. Merges fuse the marker onto word-initial subwords."""
        return [WORD_MARKER] + list(word)

    def encode_word(self, word: str) -> list[str]:
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        symbols = self.symbols_of(word)
        while len(symbols) > 1:
            ranked = [
                (self.ranks[p], i)
                for i, p in enumerate(zip(symbols, symbols[1:]))
                if p in self.ranks
            ]
            if not ranked:
                break
            _, i = min(ranked)
            symbols = symbols[:i] + [symbols[i] + symbols[i + 1]] + symbols[i + 2:]
        self._word_cache[word] = symbols
        return symbols

    def encode(self, text: str) -> tuple[list[int], list[str]]:
        """Token ids and surface strings for normalized text."""
        ids: list[int] = []
        surfaces: list[str] = []
        for word in text.split():
            for sym in self.encode_word(word):
                ids.append(self.vocab.get(sym, self.specials.unk))
                surfaces.append(sym)
        return ids, surfaces


@dataclass
class WordPieceModel:
    """Wordpiece vocab with ``##``-marked continuation pieces."""

    vocab: dict[str, int]
    specials: Specials = field(default_factory=Specials)

    def __post_init__(self) -> None:
        self.inv = [None] * len(self.vocab)
        for piece, idx in self.vocab.items():
            if not 0 <= idx < len(self.vocab) or self.inv[idx] is not None:
                raise DataFormatError("vocab ids must be dense in [0, V)")
            self.inv[idx] = piece
        self._max_piece = max(
            (len(p) for p in self.vocab if p not in SPECIALS), default=1)
        self._surface_cache: dict[str, list[int]] = {}

    @property
    def size(self) -> int:
        return len(self.vocab)

    def encode_surface(self, surface: str) -> list[int]:
        """Greedy longest-match over the vocab; UNK swallows the whole
        surface when some character is out of alphabet."""
        cached = self._surface_cache.get(surface)
        if cached is not None:
            return list(cached)
        ids: list[int] = []
        start = 0
        while start < len(surface):
            end = min(len(surface), start + self._max_piece + 2)
            piece_id = None
            while start < end:
                sub = surface[start:end]
                if start > 0:
                    sub = CONTINUATION + sub
                if sub in self.vocab:
                    piece_id = self.vocab[sub]
                    break
                end -= 1
            if piece_id is None:
                ids = [self.specials.unk]
                break
            ids.append(piece_id)
            start = end
        if not ids:
            ids = [self.specials.unk]
        self._surface_cache[surface] = ids
        return list(ids)

    def surface_of(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            piece = self.inv[i]
            out.append(piece[2:] if piece.startswith(CONTINUATION) else piece)
        return "".join(out)


@dataclass
class AlignedTokens:
    """Canonical token sequence with both tokenizers' ids per position.

    Position 0 is always CLS. ``surfaces`` concatenate (marker included) to
    the normalized input; each position's wordpiece ids decode to exactly
    that position's surface.
    """

    bpe_ids: list[int]
    surfaces: list[str]
    wp_ids: list[list[int]]

    def __len__(self) -> int:
        return len(self.bpe_ids)

    def text(self) -> str:
        return "".join(self.surfaces).replace(WORD_MARKER, " ").strip()


def _word_counts(corpus: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for line in corpus:
        for word in line.split():
            counts[word] += 1
    if not counts:
        raise TokenizerError("empty corpus: nothing to train on")
    return counts


class _PairTracker:
    """Incrementally maintained pair statistics over a word list."""

    def __init__(self, words: list[tuple[list[str], int]]):
        self.words = words
        self.pair_counts: Counter = Counter()
        self.sym_freq: Counter = Counter()
        self.pair_words: dict[tuple[str, str], set[int]] = {}
        for wi, (syms, cnt) in enumerate(words):
            for s in syms:
                self.sym_freq[s] += cnt
            for pair in zip(syms, syms[1:]):
                self.pair_counts[pair] += cnt
                self.pair_words.setdefault(pair, set()).add(wi)

    def merge(self, pair: tuple[str, str]) -> str:
        new_sym = pair[0] + (pair[1][2:] if pair[1].startswith(CONTINUATION)
                             else pair[1])
        for wi in sorted(self.pair_words.get(pair, ())):
            syms, cnt = self.words[wi]
            for p in zip(syms, syms[1:]):
                self.pair_counts[p] -= cnt
                if self.pair_counts[p] <= 0:
                    del self.pair_counts[p]
                self.pair_words[p].discard(wi)
            merged: list[str] = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                    self.sym_freq[syms[i]] -= cnt
                    self.sym_freq[syms[i + 1]] -= cnt
                    self.sym_freq[new_sym] += cnt
                    merged.append(new_sym)
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            self.words[wi] = (merged, cnt)
            for p in zip(merged, merged[1:]):
                self.pair_counts[p] += cnt
                self.pair_words.setdefault(p, set()).add(wi)
        return new_sym

    def best_by_count(self) -> tuple[str, str] | None:
        if not self.pair_counts:
            return None
        return min(self.pair_counts, key=lambda p: (-self.pair_counts[p], p))

    def best_by_likelihood(self) -> tuple[str, str] | None:
        """Max of count/(freq(left)*freq(right)), ties lexicographic.

        Compared with integer cross-multiplication so ties are exact.
        """
        best = None
        best_num = best_den = 0
        for pair, c in self.pair_counts.items():
            den = self.sym_freq[pair[0]] * self.sym_freq[pair[1]]
            if best is None or c * best_den > best_num * den or (
                    c * best_den == best_num * den and pair < best):
                best, best_num, best_den = pair, c, den
        return best


def train_bpe(corpus: Iterable[str], vocab_size: int, seed: int = 0) -> BpeModel:
    """Learn byte-pair merges by descending pair frequency.

    Deterministic given the corpus and ``vocab_size``; ``seed`` is recorded
    by callers for manifests but the algorithm itself has no randomness.
    """
    del seed
    counts = _word_counts(corpus)
    words = []
    for word, cnt in sorted(counts.items()):
        words.append(([WORD_MARKER] + list(word), cnt))
    alphabet = sorted({s for syms, _ in words for s in syms})
    base = len(SPECIALS) + len(alphabet)
    if vocab_size <= base:
        raise TokenizerError(
            f"vocab_size {vocab_size} leaves no merge budget "
            f"(alphabet {len(alphabet)} + {len(SPECIALS)} specials)")
    vocab = {piece: i for i, piece in enumerate(SPECIALS)}
    for sym in alphabet:
        vocab[sym] = len(vocab)
    tracker = _PairTracker(words)
    merges: list[tuple[str, str]] = []
    while len(vocab) < vocab_size:
        pair = tracker.best_by_count()
        if pair is None:
            break
        new_sym = tracker.merge(pair)
        merges.append(pair)
        if new_sym not in vocab:
            vocab[new_sym] = len(vocab)
    return BpeModel(vocab=vocab, merges=merges)


def train_wordpiece(corpus: Iterable[str], vocab_size: int,
                    seed: int = 0) -> WordPieceModel:
    """Learn wordpiece merges by the pair-likelihood score.

    The alphabet seeds every corpus codepoint in both plain and ``##``
    forms (plus the word marker) so any in-alphabet surface is tokenizable
    without UNK.
    """
    del seed
    counts = _word_counts(corpus)
    words = []
    for word, cnt in sorted(counts.items()):
        syms = [word[0]] + [CONTINUATION + ch for ch in word[1:]]
        words.append((syms, cnt))
    chars = sorted({ch for w in counts for ch in w} | {WORD_MARKER})
    alphabet = chars + [CONTINUATION + ch for ch in chars]
    base = len(SPECIALS) + len(alphabet)
    if vocab_size <= base:
        raise TokenizerError(
            f"vocab_size {vocab_size} leaves no merge budget "
            f"(alphabet {len(alphabet)} + {len(SPECIALS)} specials)")
    vocab = {piece: i for i, piece in enumerate(SPECIALS)}
    for sym in alphabet:
        vocab[sym] = len(vocab)
    tracker = _PairTracker(words)
    while len(vocab) < vocab_size:
        pair = tracker.best_by_likelihood()
        if pair is None:
            break
        new_sym = tracker.merge(pair)
        if new_sym not in vocab:
            vocab[new_sym] = len(vocab)
    return WordPieceModel(vocab=vocab)


def encode_aligned(text: str, bpe: BpeModel, wp: WordPieceModel,
                   max_len: int | None = None,
                   pad_to: int | None = None) -> AlignedTokens:
    """Encode normalized text with CLS prepended and aligned wp ids.

    Sequences longer than ``max_len`` are truncated (tail dropped) with a
    warning; ``pad_to`` appends PAD positions up to a batch length.
    """
    bpe_ids, surfaces = bpe.encode(text)
    if max_len is not None and len(bpe_ids) + 1 > max_len:
        log.warning("sequence of %d tokens truncated to %d",
                    len(bpe_ids) + 1, max_len)
        bpe_ids = bpe_ids[:max_len - 1]
        surfaces = surfaces[:max_len - 1]
    ids = [bpe.specials.cls] + bpe_ids
    surf = [""] + surfaces
    wp_ids = [[wp.specials.cls]] + [wp.encode_surface(s) for s in surfaces]
    if pad_to is not None:
        while len(ids) < pad_to:
            ids.append(bpe.specials.pad)
            surf.append("")
            wp_ids.append([wp.specials.pad])
    return AlignedTokens(bpe_ids=ids, surfaces=surf, wp_ids=wp_ids)


def decode(ids: Sequence[int], model: BpeModel | WordPieceModel) -> str:
    """Text-level inverse of encode; specials other than UNK/MASK vanish."""
    pieces = []
    for i in ids:
        if not 0 <= i < model.size:
            raise TokenizerError(f"token id {i} out of range [0, {model.size})")
        piece = model.inv[i]
        if piece in (PAD, CLS):
            continue
        if piece.startswith(CONTINUATION):
            piece = piece[2:]
        pieces.append(piece)
    return "".join(pieces).replace(WORD_MARKER, " ").strip()


def _atoms(vocab: dict[str, int]) -> set[str]:
    out = set()
    for piece in vocab:
        if piece in SPECIALS:
            continue
        body = piece[2:] if piece.startswith(CONTINUATION) else piece
        if len(body) == 1:
            out.add(piece)
    return out


def save_bpe(model: BpeModel, vocab_path: Path, merges_path: Path) -> None:
    vocab_path.write_text(
        "".join(f"{i}\t{model.inv[i]}\n" for i in range(model.size)),
        encoding="utf-8")
    merges_path.write_text(
        "".join(f"{a}\t{b}\n" for a, b in model.merges), encoding="utf-8")


def load_bpe(vocab_path: Path, merges_path: Path) -> BpeModel:
    vocab = _read_vocab(vocab_path)
    merges: list[tuple[str, str]] = []
    for lineno, line in enumerate(
            merges_path.read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{merges_path}:{lineno}: bad merge line")
        merges.append((parts[0], parts[1]))
    available = _atoms(vocab)
    for a, b in merges:
        if a not in available or b not in available:
            raise DataFormatError(
                f"merge ({a!r}, {b!r}) references a symbol that does not "
                f"exist at its point in the derivation")
        merged = a + (b[2:] if b.startswith(CONTINUATION) else b)
        if merged in SPECIALS:
            raise DataFormatError("merges must never produce special tokens")
        available.add(merged)
    return BpeModel(vocab=vocab, merges=merges)


def save_wordpiece(model: WordPieceModel, vocab_path: Path) -> None:
    vocab_path.write_text(
        "".join(f"{i}\t{model.inv[i]}\n" for i in range(model.size)),
        encoding="utf-8")


def load_wordpiece(vocab_path: Path) -> WordPieceModel:
    return WordPieceModel(vocab=_read_vocab(vocab_path))


def _read_vocab(path: Path) -> dict[str, int]:
    vocab: dict[str, int] = {}
    for lineno, line in enumerate(
            path.read_text(encoding="utf-8").splitlines(), start=1):
        idx_s, sep, piece = line.partition("\t")
        if not sep:
            raise DataFormatError(f"{path}:{lineno}: expected id<TAB>piece")
        vocab[piece] = int(idx_s)
    for i, piece in enumerate(SPECIALS):
        if vocab.get(piece) != i:
            raise DataFormatError(f"{path}: special {piece} must have id {i}")
    return vocab
