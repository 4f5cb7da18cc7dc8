"""Domain types shared by every stage, plus span algebra.

Offsets are Python string indices (code points). ``source[start:end]`` always
equals the occurrence text.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Sequence


class EntityCategory(str, Enum):
    PERSON = "person"
    LOCATION = "location"
    ORGANIZATION = "organization"
    UNKNOWN = "unknown"

    @property
    def rank(self) -> int:
        return _CATEGORY_RANK[self]

    @classmethod
    def parse(cls, value: str | EntityCategory) -> EntityCategory:
        """Lenient parse used for model answers and data files.

        Unrecognised labels map to ``UNKNOWN`` rather than raising.
        """
        if isinstance(value, EntityCategory):
            return value
        key = str(value).strip().lower()
        return _CATEGORY_ALIASES.get(key, cls.UNKNOWN)


_CATEGORY_RANK = {
    EntityCategory.PERSON: 0,
    EntityCategory.LOCATION: 1,
    EntityCategory.ORGANIZATION: 2,
    EntityCategory.UNKNOWN: 3,
}

_CATEGORY_ALIASES = {
    "person": EntityCategory.PERSON,
    "per": EntityCategory.PERSON,
    "people": EntityCategory.PERSON,
    "name": EntityCategory.PERSON,
    "location": EntityCategory.LOCATION,
    "loc": EntityCategory.LOCATION,
    "place": EntityCategory.LOCATION,
    "gpe": EntityCategory.LOCATION,
    "organization": EntityCategory.ORGANIZATION,
    "organisation": EntityCategory.ORGANIZATION,
    "org": EntityCategory.ORGANIZATION,
    "unknown": EntityCategory.UNKNOWN,
}


@dataclass(frozen=True)
class EntityOccurrence:
    text: str
    category: EntityCategory
    start: int
    end: int

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span ({self.start}, {self.end})")
        if self.end - self.start != len(self.text):
            raise ValueError("span length does not match occurrence text")

    @property
    def length(self) -> int:
        return self.end - self.start

    def overlaps(self, other: EntityOccurrence) -> bool:
        return self.start < other.end and other.start < self.end

    def to_dict(self) -> dict:
        return {"text": self.text, "category": self.category.value, "start": self.start, "end": self.end}

    @classmethod
    def from_dict(cls, data: dict) -> EntityOccurrence:
        return cls(data["text"], EntityCategory.parse(data["category"]), int(data["start"]), int(data["end"]))


@dataclass(frozen=True)
class EntitySet:
    """Detected privacy spans in document order."""

    occurrences: tuple[EntityOccurrence, ...] = ()
    source_len: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "occurrences", tuple(self.occurrences))

    def __iter__(self) -> Iterator[EntityOccurrence]:
        return iter(self.occurrences)

    def __len__(self) -> int:
        return len(self.occurrences)

    def __getitem__(self, index: int) -> EntityOccurrence:
        return self.occurrences[index]

    @property
    def texts(self) -> list[str]:
        return [occ.text for occ in self.occurrences]

    def unique_entities(self) -> list[tuple[str, EntityCategory]]:
        """Distinct (text, category) pairs in first-seen order."""
        seen: dict[str, EntityCategory] = {}
        for occ in self.occurrences:
            seen.setdefault(occ.text, occ.category)
        return list(seen.items())

    def category_counts(self) -> dict[str, int]:
        return dict(Counter(occ.category.value for occ in self.occurrences))

    def validate(self, source: str) -> None:
        """Check every invariant against ``source``; raises ``ValueError``."""
        if self.source_len != len(source):
            raise ValueError("source_len does not match source")
        previous = None
        for occ in self.occurrences:
            if occ.end > len(source) or source[occ.start:occ.end] != occ.text:
                raise ValueError(f"occurrence at {occ.start} does not match source")
            if previous is not None:
                if occ.start < previous.start:
                    raise ValueError("occurrences not sorted by start")
                if occ.overlaps(previous):
                    raise ValueError("overlapping occurrences")
            previous = occ

    def to_json(self) -> str:
        return json.dumps([occ.to_dict() for occ in self.occurrences], ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str, source_len: int) -> EntitySet:
        return cls(tuple(EntityOccurrence.from_dict(item) for item in json.loads(payload)), source_len)


@dataclass(frozen=True)
class ReplacementPair:
    original: str
    replacement: str
    category: EntityCategory = EntityCategory.UNKNOWN

    def __post_init__(self) -> None:
        if not self.original or not self.replacement:
            raise ValueError("replacement pair members must be non-empty")
        if self.original.casefold() == self.replacement.casefold():
            raise ValueError("replacement equals the original")

    def to_dict(self) -> dict:
        return {"original": self.original, "replacement": self.replacement, "category": self.category.value}

    @classmethod
    def from_dict(cls, data: dict) -> ReplacementPair:
        return cls(data["original"], data["replacement"], EntityCategory.parse(data.get("category", "unknown")))


@dataclass(frozen=True)
class ReplacementMapping:
    """Ordered, injective set of (original, replacement) pairs.

    Replacements are compared case-insensitively because restoration matches
    them case-insensitively.
    """

    pairs: tuple[ReplacementPair, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "pairs", tuple(self.pairs))
        originals = [p.original for p in self.pairs]
        replacements = [p.replacement.casefold() for p in self.pairs]
        if len(set(originals)) != len(originals):
            raise ValueError("duplicate original in mapping")
        if len(set(replacements)) != len(replacements):
            raise ValueError("duplicate replacement in mapping")
        folded_originals = {o.casefold() for o in originals}
        clash = folded_originals.intersection(replacements)
        if clash:
            raise ValueError(f"{len(clash)} replacement(s) equal an original")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[ReplacementPair]:
        return iter(self.pairs)

    def __contains__(self, original: object) -> bool:
        return any(p.original == original for p in self.pairs)

    def get(self, original: str) -> ReplacementPair | None:
        for pair in self.pairs:
            if pair.original == original:
                return pair
        return None

    @property
    def originals(self) -> list[str]:
        return [p.original for p in self.pairs]

    @property
    def replacements(self) -> list[str]:
        return [p.replacement for p in self.pairs]

    def forward(self) -> dict[str, str]:
        return {p.original: p.replacement for p in self.pairs}

    def extended(self, pairs: Iterable[ReplacementPair]) -> ReplacementMapping:
        """New mapping with ``pairs`` appended; pairs whose original is already mapped are skipped."""
        merged = list(self.pairs)
        known = {p.original for p in merged}
        for pair in pairs:
            if pair.original not in known:
                merged.append(pair)
                known.add(pair.original)
        return ReplacementMapping(tuple(merged))

    def to_list(self) -> list[dict]:
        return [p.to_dict() for p in self.pairs]

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> ReplacementMapping:
        return cls(tuple(ReplacementPair.from_dict(item) for item in items))


@dataclass(frozen=True)
class OffsetEntry:
    """One replaced region: ``src`` indexes the original text, ``dst`` the output."""

    src: tuple[int, int]
    dst: tuple[int, int]
    original: str
    replacement: str


@dataclass(frozen=True)
class PseudonymizedText:
    text: str
    offset_map: tuple[OffsetEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "offset_map", tuple(self.offset_map))

    def invert(self) -> str:
        """Undo every recorded substitution, right to left."""
        out = self.text
        for entry in sorted(self.offset_map, key=lambda e: e.dst[0], reverse=True):
            start, end = entry.dst
            out = out[:start] + entry.original + out[end:]
        return out


@dataclass
class Diagnostics:
    """Per-request counters. Holds counts and flags only, never entity text."""

    counts: Counter = field(default_factory=Counter)
    flags: set[str] = field(default_factory=set)

    def bump(self, key: str, amount: int = 1) -> None:
        self.counts[key] += amount

    def flag(self, name: str) -> None:
        self.flags.add(name)

    def to_dict(self) -> dict:
        return {"counts": dict(sorted(self.counts.items())), "flags": sorted(self.flags)}


def is_word_char(ch: str) -> bool:
    return ch.isalnum()


def at_word_boundary(text: str, start: int, end: int) -> bool:
    """True when ``text[start:end]`` is not glued to an alphanumeric neighbour."""
    if start > 0 and is_word_char(text[start - 1]):
        return False
    if end < len(text) and is_word_char(text[end]):
        return False
    return True


def iter_word_matches(text: str, needle: str, case_sensitive: bool = True) -> Iterator[tuple[int, int]]:
    """Yield (start, end) of every word-boundary occurrence of ``needle``.

    Overlapping occurrences are all reported.
    """
    if not needle or not text:
        return
    flags = 0 if case_sensitive else re.IGNORECASE
    pattern = re.compile(re.escape(needle), flags)
    pos = 0
    while True:
        match = pattern.search(text, pos)
        if match is None:
            return
        start, end = match.span()
        if end > start and at_word_boundary(text, start, end):
            yield start, end
        pos = start + 1


def contains_word(text: str, needle: str, case_sensitive: bool = True) -> bool:
    return next(iter_word_matches(text, needle, case_sensitive), None) is not None


def find_entity_occurrences(
    text: str,
    entities: Iterable[tuple[str, EntityCategory]],
    case_sensitive: bool = True,
) -> EntitySet:
    """Locate every word-boundary occurrence of every entity string.

    The result may contain overlapping spans; pass it through
    :func:`resolve_overlaps` before replacing.
    """
    found: set[EntityOccurrence] = set()
    for entity, category in entities:
        if not entity:
            raise ValueError("entity strings must be non-empty")
        category = EntityCategory.parse(category)
        for start, end in iter_word_matches(text, entity, case_sensitive):
            found.add(EntityOccurrence(text[start:end], category, start, end))
    ordered = sorted(found, key=lambda o: (o.start, -o.length, o.category.rank, o.text))
    return EntitySet(tuple(ordered), len(text))


def resolve_overlaps(spans: EntitySet) -> EntitySet:
    """Keep a maximal non-overlapping subset.

    Longer spans win; ties go to the leftmost start, then to category order
    person < location < organization < unknown.
    """
    priority = sorted(spans.occurrences, key=lambda o: (-o.length, o.start, o.category.rank, o.text))
    kept: list[EntityOccurrence] = []
    for occ in priority:
        if not any(occ.overlaps(other) for other in kept):
            kept.append(occ)
    kept.sort(key=lambda o: o.start)
    return EntitySet(tuple(kept), spans.source_len)


def substitute_spans(text: str, spans: Sequence[EntityOccurrence], replacements: dict[str, str]) -> PseudonymizedText:
    """Replace non-overlapping ``spans`` (sorted by start) using ``replacements``.

    Spans whose text has no replacement are left untouched.
    """
    pieces: list[str] = []
    entries: list[OffsetEntry] = []
    cursor = 0
    out_len = 0
    for occ in spans:
        new = replacements.get(occ.text)
        if new is None:
            continue
        chunk = text[cursor:occ.start]
        pieces.append(chunk)
        out_len += len(chunk)
        pieces.append(new)
        entries.append(OffsetEntry((occ.start, occ.end), (out_len, out_len + len(new)), occ.text, new))
        out_len += len(new)
        cursor = occ.end
    pieces.append(text[cursor:])
    return PseudonymizedText("".join(pieces), tuple(entries))
