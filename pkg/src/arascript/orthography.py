"""Unicode-level services for Arabic-script text.

Normalization, script/language detection, marking of orthographic-variant
token positions, and seeded variant substitution. All behaviour is driven
by two data files shipped under ``tables/``: the variant-class table and
the script-detection profile, so the linguistic inventory can be extended
without touching code.
"""

from __future__ import annotations

import enum
import logging
import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataFormatError, UnknownScriptError

log = logging.getLogger(__name__)


class LanguageId(enum.Enum):
    """The four supported Arabic-script languages."""

    KURDISH = "Kurdish"
    ARABIC = "Arabic"
    PERSIAN = "Persian"
    URDU = "Urdu"

    @classmethod
    def parse(cls, name: str) -> "LanguageId":
        for lang in cls:
            if lang.value.lower() == name.strip().lower():
                return lang
        raise DataFormatError(f"unknown language {name!r}; expected one of "
                              f"{[l.value for l in cls]}")


# Arabic-script Unicode blocks used for the detection denominator.
_ARABIC_BLOCKS = (
    (0x0600, 0x06FF),
    (0x0750, 0x077F),
    (0x08A0, 0x08FF),
    (0xFB50, 0xFDFF),
    (0xFE70, 0xFEFF),
)

# Punctuation variants collapsed to canonical ASCII forms.
_PUNCT_MAP = {
    "،": ",",   # arabic comma
    "؛": ";",   # arabic semicolon
    "؟": "?",   # arabic question mark
    "۔": ".",   # arabic full stop
    "٪": "%",   # arabic percent sign
    "‘": "'",
    "’": "'",
    "“": '"',
    "”": '"',
    "…": "...",
    "«": '"',
    "»": '"',
}

# Zero-width non-joiner is orthographically meaningful (Persian compounds)
# and is the only format character we keep.
_ZWNJ = "‌"


def is_arabic_script(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _ARABIC_BLOCKS)


@dataclass(frozen=True)
class VariantTable:
    """Orthographic equivalence classes plus per-language normalization maps.

    ``classes`` lists each variant class as (canonical codepoint, members);
    every codepoint belongs to at most one class and each class contains its
    canonical. ``per_language_maps`` hold codepoint-to-codepoint rewrites
    applied by :func:`normalize`. ``diacritics`` is the strip set.
    """

    classes: tuple[tuple[str, frozenset[str]], ...]
    per_language_maps: Mapping[LanguageId, Mapping[str, str]]
    diacritics: frozenset[str]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for canonical, members in self.classes:
            if canonical not in members:
                raise DataFormatError(
                    f"class canonical {canonical!r} not among its members")
            overlap = seen & members
            if overlap:
                raise DataFormatError(
                    f"codepoints {sorted(overlap)} appear in more than one class")
            seen |= members
        index: dict[str, frozenset[str]] = {}
        for _, members in self.classes:
            if len(members) >= 2:
                for ch in members:
                    index[ch] = members
        object.__setattr__(self, "_multi_index", index)

    def variant_class(self, ch: str) -> frozenset[str] | None:
        """Members of ``ch``'s class when that class has >= 2 members."""
        return self._multi_index.get(ch)

    @property
    def variant_chars(self) -> frozenset[str]:
        return frozenset(self._multi_index)


@dataclass(frozen=True)
class ScriptProfile:
    """Exclusive-codepoint sets per language plus the tie-break order."""

    exclusive: Mapping[LanguageId, frozenset[str]]
    shared: frozenset[str]
    priority: tuple[LanguageId, ...]

    def __post_init__(self) -> None:
        if set(self.priority) != set(LanguageId):
            raise DataFormatError("priority must cover all four languages")
        langs = list(self.exclusive)
        for i, a in enumerate(langs):
            for b in langs[i + 1:]:
                overlap = self.exclusive[a] & self.exclusive[b]
                if overlap:
                    raise DataFormatError(
                        f"exclusive sets of {a.value} and {b.value} overlap: "
                        f"{sorted(overlap)}")


def _parse_codepoint(token: str) -> str:
    token = token.strip()
    if not token.upper().startswith("U+"):
        raise DataFormatError(f"expected U+XXXX codepoint, got {token!r}")
    try:
        return chr(int(token[2:], 16))
    except ValueError as exc:
        raise DataFormatError(f"bad codepoint {token!r}") from exc


def _data_rows(path: Path) -> Iterable[list[str]]:
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: not valid UTF-8: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield line.split("\t")


def load_variant_table(classes_path: Path, diacritics_path: Path) -> VariantTable:
    """Load variant classes and the diacritic strip set from TSV files."""
    classes: list[tuple[str, frozenset[str]]] = []
    maps: dict[LanguageId, dict[str, str]] = {lang: {} for lang in LanguageId}
    for row in _data_rows(classes_path):
        if len(row) not in (2, 3):
            raise DataFormatError(f"variant class row needs 2-3 columns, got {row!r}")
        canonical = _parse_codepoint(row[0])
        members = frozenset(_parse_codepoint(m) for m in row[1].split(","))
        classes.append((canonical, members))
        if len(row) == 3 and row[2].strip():
            for entry in row[2].split(","):
                entry = entry.strip()
                lang_name, _, mapping = entry.partition(":")
                src_s, sep, dst_s = mapping.partition(">")
                if not sep:
                    raise DataFormatError(f"bad override entry {entry!r}")
                lang = LanguageId.parse(lang_name)
                maps[lang][_parse_codepoint(src_s)] = _parse_codepoint(dst_s)

    diacritics = frozenset(
        _parse_codepoint(row[0]) for row in _data_rows(diacritics_path))
    return VariantTable(
        classes=tuple(classes),
        per_language_maps={k: dict(v) for k, v in maps.items()},
        diacritics=diacritics,
    )


def load_script_profile(path: Path) -> ScriptProfile:
    exclusive: dict[LanguageId, frozenset[str]] = {}
    shared: frozenset[str] = frozenset()
    priority: tuple[LanguageId, ...] = ()
    for row in _data_rows(path):
        if len(row) != 3:
            raise DataFormatError(f"profile row needs 3 columns, got {row!r}")
        kind, label, payload = row
        if kind == "exclusive":
            exclusive[LanguageId.parse(label)] = frozenset(
                _parse_codepoint(c) for c in payload.split(","))
        elif kind == "shared":
            shared = frozenset(_parse_codepoint(c) for c in payload.split(","))
        elif kind == "priority":
            priority = tuple(LanguageId.parse(n) for n in payload.split(","))
        else:
            raise DataFormatError(f"unknown profile row kind {kind!r}")
    return ScriptProfile(exclusive=exclusive, shared=shared, priority=priority)


def _tables_dir() -> Path:
    return Path(resources.files("arascript") / "tables")  # type: ignore[arg-type]


def default_variant_table() -> VariantTable:
    d = _tables_dir()
    return load_variant_table(d / "variant_classes.tsv", d / "diacritics.tsv")


def default_script_profile() -> ScriptProfile:
    return load_script_profile(_tables_dir() / "script_profile.tsv")


def validate_tables(table: VariantTable, profile: ScriptProfile) -> None:
    """Check the cross-file contract between normalization and detection.

    A language's own map must never rewrite that language's exclusive
    codepoints, and no map may *produce* another language's exclusive
    codepoint; together these keep script detection stable under
    own-language normalization.
    """
    for lang, mapping in table.per_language_maps.items():
        own = profile.exclusive.get(lang, frozenset())
        bad_keys = own & set(mapping)
        if bad_keys:
            raise DataFormatError(
                f"{lang.value} map rewrites its own exclusive codepoints "
                f"{sorted(bad_keys)}")
        for other, excl in profile.exclusive.items():
            if other is lang:
                continue
            bad_targets = excl & set(mapping.values())
            if bad_targets:
                raise DataFormatError(
                    f"{lang.value} map produces {other.value}-exclusive "
                    f"codepoints {sorted(bad_targets)}")


def _reject_invalid_unicode(text: str) -> None:
    try:
        text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise DataFormatError(f"input is not valid Unicode: {exc}") from exc


def normalize(text: str, lang: LanguageId, table: VariantTable | None = None) -> str:
    """Normalize Arabic-script text for one language.

    Strips the diacritic set, applies the language's codepoint map,
    collapses punctuation variants, lowercases embedded cased-script runs,
    drops control/format characters, and collapses whitespace. Idempotent.
    """
    if table is None:
        table = default_variant_table()
    _reject_invalid_unicode(text)
    mapping = table.per_language_maps.get(lang, {})
    out: list[str] = []
    dropped = 0
    for ch in text:
        if ch in table.diacritics:
            continue
        cat = unicodedata.category(ch)
        if cat == "Cc" and ch not in "\t\n\r":
            dropped += 1
            continue
        if cat == "Cf" and ch != _ZWNJ:
            dropped += 1
            continue
        ch = mapping.get(ch, ch)
        ch = _PUNCT_MAP.get(ch, ch)
        out.append(ch)
    if dropped:
        log.debug("normalize: dropped %d control/format characters", dropped)
    return " ".join("".join(out).lower().split())


def detect_script(text: str, profile: ScriptProfile | None = None
                  ) -> tuple[LanguageId, float]:
    """Identify the language whose exclusive codepoints dominate ``text``.

    Returns the winner and a confidence in [0, 1]: exclusive hits of the
    winner divided by the total count of Arabic-script codepoints. Ties are
    broken by the profile's priority order.
    """
    if profile is None:
        profile = default_script_profile()
    if not text.strip():
        raise UnknownScriptError("empty text")
    total = sum(1 for ch in text if is_arabic_script(ch))
    if total == 0:
        raise UnknownScriptError(
            "no Arabic-script codepoints in input; cannot route")
    counts = {lang: 0 for lang in profile.priority}
    for ch in text:
        for lang, excl in profile.exclusive.items():
            if ch in excl:
                counts[lang] += 1
                break
    best = max(profile.priority, key=lambda l: (counts[l],
               -profile.priority.index(l)))
    return best, counts[best] / total


def orth_variant_positions(tokens: Sequence[str],
                           table: VariantTable | None = None) -> set[int]:
    """Indices of tokens containing a codepoint from a multi-member class."""
    if table is None:
        table = default_variant_table()
    chars = table.variant_chars
    return {i for i, tok in enumerate(tokens) if any(c in chars for c in tok)}


def transliterate(text: str, table: VariantTable | None = None,
                  seed: int = 0) -> str:
    """Rewrite each variant-class codepoint with a uniform draw from its class.

    Codepoints outside any multi-member class pass through unchanged; the
    output always has the same number of codepoints as the input and the
    same seed reproduces the same output.
    """
    if table is None:
        table = default_variant_table()
    rng = np.random.default_rng(seed)
    out: list[str] = []
    for ch in text:
        members = table.variant_class(ch)
        if members is None:
            out.append(ch)
        else:
            choices = sorted(members)
            out.append(choices[int(rng.integers(len(choices)))])
    return "".join(out)
