"""Privacy entity detection: gazetteer lookup, prompt-based, and tag parsing."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

from .chat import ChatClient, assistant, user
from .errors import (
    AlignError,
    DetectionUpstreamError,
    MalformedDetectionError,
    ParseError,
    UpstreamError,
)
from .models import (
    Diagnostics,
    EntityCategory,
    EntityOccurrence,
    EntitySet,
    find_entity_occurrences,
    resolve_overlaps,
)

logger = logging.getLogger(__name__)

OPEN_TAG = "<ENT>"
CLOSE_TAG = "</ENT>"


def read_entity_tsv(lines: Iterable[str], source: str = "<memory>") -> list[tuple[str, EntityCategory]]:
    """Parse ``entity<TAB>category`` lines; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip():
            raise ValueError(f"{source}:{lineno}: expected 'entity<TAB>category'")
        rows.append((parts[0].strip(), EntityCategory.parse(parts[1])))
    return rows


@dataclass(frozen=True)
class Gazetteer:
    entries: dict[str, EntityCategory] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for key in self.entries:
            if not key:
                raise ValueError("gazetteer keys must be non-empty")

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, EntityCategory | str]]) -> Gazetteer:
        entries: dict[str, EntityCategory] = {}
        for text, category in pairs:
            entries.setdefault(text, EntityCategory.parse(category))
        return cls(entries)

    @classmethod
    def from_file(cls, path: str | Path) -> Gazetteer:
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            return cls.from_pairs(read_entity_tsv(fh, str(path)))

    @classmethod
    def default(cls) -> Gazetteer:
        text = resources.files("pseudogate.data").joinpath("gazetteer.tsv").read_text(encoding="utf-8")
        return cls.from_pairs(read_entity_tsv(text.splitlines(), "gazetteer.tsv"))


def detect_gazetteer(text: str, gazetteer: Gazetteer, case_sensitive: bool = True) -> EntitySet:
    if not gazetteer.entries:
        raise ValueError("gazetteer is empty")
    return resolve_overlaps(find_entity_occurrences(text, gazetteer.entries.items(), case_sensitive))


DEFAULT_DETECTION_TEMPLATE = (
    "Find every person, location and organization name in the text below.\n"
    'Answer with a JSON array of objects with keys "text" and "category", where category is one of '
    '"person", "location" or "organization". Copy each name exactly as written. '
    "Answer [] if there are none. Output JSON only.\n\n"
    "Text:\n{input}"
)

RETRY_NUDGE = "Your previous answer was not valid. Respond with valid JSON only: a JSON array of {\"text\", \"category\"} objects."


@dataclass(frozen=True)
class DetectionPromptTemplate:
    template: str = DEFAULT_DETECTION_TEMPLATE
    response_format: str = "json-array[{text, category}]"

    def __post_init__(self) -> None:
        if self.template.count("{input}") != 1:
            raise ValueError("detection template needs exactly one {input} placeholder")

    def render(self, text: str) -> str:
        return self.template.replace("{input}", text)


_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$", re.IGNORECASE)


def parse_detection_response(answer: str) -> list[tuple[str, EntityCategory]]:
    """Decode the model's JSON array answer; raises ``ValueError`` when malformed."""
    body = _FENCE.sub("", answer.strip())
    start, end = body.find("["), body.rfind("]")
    if start < 0 or end < start:
        raise ValueError("no JSON array in answer")
    items = json.loads(body[start:end + 1])
    if not isinstance(items, list):
        raise ValueError("answer is not a JSON array")
    out = []
    for item in items:
        if not isinstance(item, dict) or not isinstance(item.get("text"), str):
            raise ValueError("array items must be objects with a string 'text'")
        if item["text"].strip():
            out.append((item["text"].strip(), EntityCategory.parse(item.get("category", "unknown"))))
    return out


def detect_prompt(
    text: str,
    client: ChatClient,
    template: DetectionPromptTemplate | None = None,
    diagnostics: Diagnostics | None = None,
    case_sensitive: bool = True,
) -> EntitySet:
    """Ask a local instruction-tuned model for the entities in ``text``.

    Items the model reports that do not occur verbatim in ``text`` are
    dropped and counted under ``detect.dropped``. One malformed answer is
    retried with a nudge; a second is an error.
    """
    template = template or DetectionPromptTemplate()
    messages = [user(template.render(text))]
    items = None
    for attempt in range(2):
        try:
            answer = client.complete(messages)
        except UpstreamError as exc:
            raise DetectionUpstreamError(str(exc)) from exc
        try:
            items = parse_detection_response(answer)
            break
        except ValueError:
            if diagnostics is not None:
                diagnostics.bump("detect.malformed")
            messages = messages + [assistant(answer), user(RETRY_NUDGE)]
    if items is None:
        raise MalformedDetectionError("model answer was not a JSON entity array after one retry")

    found = find_entity_occurrences(text, items, case_sensitive)
    present = {occ.text for occ in found} if case_sensitive else {occ.text.casefold() for occ in found}
    dropped = sum(1 for item, _ in items if (item if case_sensitive else item.casefold()) not in present)
    if diagnostics is not None and dropped:
        diagnostics.bump("detect.dropped", dropped)
    return resolve_overlaps(found)


def strip_tags(tagged: str) -> str:
    return tagged.replace(OPEN_TAG, "").replace(CLOSE_TAG, "")


_TAG = re.compile(r"</?ENT>")


def parse_tag_marked(tagged: str, original: str) -> EntitySet:
    """Recover entities from ``<ENT>x</ENT>`` output.

    Offsets are trusted only when the tag-stripped output equals ``original``;
    otherwise the marks are collapsed and aligned like tag-replace output.
    """
    spans: list[tuple[int, int]] = []
    stripped: list[str] = []
    pos = 0
    out_len = 0
    open_at: int | None = None
    for match in _TAG.finditer(tagged):
        chunk = tagged[pos:match.start()]
        stripped.append(chunk)
        out_len += len(chunk)
        pos = match.end()
        if match.group() == OPEN_TAG:
            if open_at is not None:
                raise ParseError(f"nested {OPEN_TAG} at offset {match.start()}")
            open_at = out_len
        else:
            if open_at is None:
                raise ParseError(f"{CLOSE_TAG} without matching {OPEN_TAG} at offset {match.start()}")
            spans.append((open_at, out_len))
            open_at = None
    if open_at is not None:
        raise ParseError(f"unterminated {OPEN_TAG}")
    stripped.append(tagged[pos:])

    if "".join(stripped) != original:
        collapsed = re.sub(r"<ENT>.*?</ENT>", OPEN_TAG, tagged, flags=re.DOTALL)
        return align_tag_replaced(collapsed, original)

    occurrences = [
        EntityOccurrence(original[s:e], EntityCategory.UNKNOWN, s, e)
        for s, e in spans
        if e > s
    ]
    return EntitySet(tuple(occurrences), len(original))


def anchor_segment(original: str, segment: str, cursor: int, *, first: bool, last: bool) -> int:
    """Position at which ``segment`` anchors in ``original``.

    The first segment must be a prefix and the last a suffix; middle segments
    take the leftmost match that leaves a non-empty gap after ``cursor``.
    Returns -1 when no anchor exists.
    """
    if first:
        return 0 if original.startswith(segment) else -1
    if last:
        at = len(original) - len(segment)
        ok = at >= cursor + 1 and original.endswith(segment)
        return at if ok else -1
    return original.find(segment, cursor + 1)


def align_gaps(tagged: str, original: str) -> list[tuple[int, int]]:
    """Gap spans in ``original`` for each bare ``<ENT>`` in ``tagged``, in order."""
    if CLOSE_TAG in tagged:
        raise AlignError(f"tag-replace output must not contain {CLOSE_TAG}")
    segments = tagged.split(OPEN_TAG)
    if len(segments) == 1:
        if tagged != original:
            raise AlignError("untagged output differs from the source text")
        return []
    gaps = []
    cursor = 0
    last_index = len(segments) - 1
    for index, segment in enumerate(segments):
        at = anchor_segment(original, segment, cursor, first=index == 0, last=index == last_index)
        if at < 0:
            raise AlignError(f"context segment {index} could not be aligned")
        if index > 0:
            gaps.append((cursor, at))
        cursor = at + len(segment)
    return gaps


def align_tag_replaced(tagged: str, original: str) -> EntitySet:
    """Recover the erased entity strings from bare ``<ENT>`` output.

    The text between ``<ENT>`` placeholders is anchored left to right in
    ``original``; the gaps left over are the entities. Ambiguity resolves to
    the shortest gap.
    """
    occurrences = [
        EntityOccurrence(original[s:e], EntityCategory.UNKNOWN, s, e) for s, e in align_gaps(tagged, original)
    ]
    return EntitySet(tuple(occurrences), len(original))
