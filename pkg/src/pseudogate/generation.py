"""Replacement candidate generation: seeded random sampling and prompt-based."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

from .chat import ChatClient, assistant, user
from .detection import read_entity_tsv
from .errors import (
    GenerationUpstreamError,
    InvalidCandidateError,
    PoolExhaustedError,
    UpstreamError,
)
from .models import (
    EntityCategory,
    EntityOccurrence,
    ReplacementMapping,
    ReplacementPair,
    contains_word,
)

_WORD = re.compile(r"[^\W_]+")

_POOL_ORDER = (EntityCategory.PERSON, EntityCategory.LOCATION, EntityCategory.ORGANIZATION, EntityCategory.UNKNOWN)


def word_set(text: str) -> frozenset[str]:
    return frozenset(w.casefold() for w in _WORD.findall(text))


@dataclass(frozen=True)
class CandidatePool:
    by_category: dict[EntityCategory, tuple[str, ...]]

    def __post_init__(self) -> None:
        for category, candidates in self.by_category.items():
            if len(set(candidates)) != len(candidates):
                raise ValueError(f"duplicate candidate in {category.value} pool")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, EntityCategory | str]]) -> CandidatePool:
        grouped: dict[EntityCategory, list[str]] = {}
        for text, category in pairs:
            bucket = grouped.setdefault(EntityCategory.parse(category), [])
            if text not in bucket:
                bucket.append(text)
        return cls({cat: tuple(items) for cat, items in grouped.items()})

    @classmethod
    def from_file(cls, path: str | Path) -> CandidatePool:
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            return cls.from_pairs(read_entity_tsv(fh, str(path)))

    @classmethod
    def default(cls) -> CandidatePool:
        text = resources.files("pseudogate.data").joinpath("pool.tsv").read_text(encoding="utf-8")
        return cls.from_pairs(read_entity_tsv(text.splitlines(), "pool.tsv"))

    def candidates(self, category: EntityCategory) -> tuple[str, ...]:
        """Same-category candidates; ``UNKNOWN`` draws from every category."""
        if category is not EntityCategory.UNKNOWN:
            return self.by_category.get(category, ())
        merged: dict[str, None] = {}
        for cat in _POOL_ORDER:
            for cand in self.by_category.get(cat, ()):
                merged.setdefault(cand)
        return tuple(merged)


@dataclass
class GenerationSession:
    """Per-request generation state keeping the mapping injective.

    ``document`` is every text the replacements will be spliced into or sent
    alongside; ``protected`` holds all detected originals of the request.
    """

    document: str = ""
    seed: int = 0
    protected: set[str] = field(default_factory=set)
    assigned: dict[str, ReplacementPair] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.rng = random.Random(self.seed)

    @classmethod
    def resume(cls, mapping: ReplacementMapping, document: str, seed: int) -> GenerationSession:
        session = cls(document=document, seed=seed, protected={p.original for p in mapping})
        for pair in mapping:
            session.assigned[pair.original] = pair
        return session

    def protect(self, originals: Iterable[str]) -> None:
        self.protected.update(originals)

    def mapping(self) -> ReplacementMapping:
        return ReplacementMapping(tuple(self.assigned.values()))

    def violation(self, original: str, candidate: str) -> str | None:
        """Why ``candidate`` cannot stand in for ``original``, or ``None``."""
        if not candidate.strip():
            return "the replacement is empty"
        if candidate.casefold() == original.casefold():
            return "the replacement equals the original"
        if contains_word(self.document, candidate, case_sensitive=False):
            return "the replacement already occurs in the text"
        words = word_set(candidate)
        if not words:
            return "the replacement has no letters or digits"
        for other in self.protected | {original}:
            if words & word_set(other):
                return "the replacement shares a word with a protected entity"
        for pair in self.assigned.values():
            if words & word_set(pair.replacement):
                return "the replacement is already used for another entity"
        return None

    def assign(self, pair: ReplacementPair) -> ReplacementPair:
        self.assigned[pair.original] = pair
        self.protected.add(pair.original)
        return pair


def generate_random(entity: EntityOccurrence, pool: CandidatePool, session: GenerationSession) -> ReplacementPair:
    """Draw a same-category candidate uniformly with the session's seeded PRNG.

    Only ``entity.text`` and ``entity.category`` are read. Repeated originals
    return the cached pair.
    """
    cached = session.assigned.get(entity.text)
    if cached is not None:
        return cached
    eligible = [c for c in pool.candidates(entity.category) if session.violation(entity.text, c) is None]
    if not eligible:
        raise PoolExhaustedError(f"no eligible {entity.category.value} candidate left in the pool")
    choice = session.rng.choice(eligible)
    return session.assign(ReplacementPair(entity.text, choice, entity.category))


DEFAULT_GENERATION_TEMPLATE = (
    "Propose a replacement for the {category} name \"{entity}\" that appears in the text below.\n"
    "The replacement must be a real-sounding {category} name of the same kind "
    "(keep gender and language for people), but clearly different so the original "
    "cannot be guessed. Answer with the replacement name only.\n\n"
    "Text:\n{context}"
)


def _clean_candidate(answer: str) -> str:
    line = answer.strip().splitlines()[0] if answer.strip() else ""
    return line.strip().strip("\"'`*").strip().rstrip(".")


def generate_prompt(
    entity: EntityOccurrence,
    context: str,
    client: ChatClient,
    template: str = DEFAULT_GENERATION_TEMPLATE,
    session: GenerationSession | None = None,
) -> ReplacementPair:
    """Ask a local model for a replacement, validating and retrying once.

    With a ``session`` the answer must also keep the session mapping
    injective, and accepted pairs are cached in it.
    """
    if session is not None and entity.text in session.assigned:
        return session.assigned[entity.text]
    prompt = (
        template.replace("{entity}", entity.text)
        .replace("{category}", entity.category.value if entity.category is not EntityCategory.UNKNOWN else "entity")
        .replace("{context}", context)
    )
    messages = [user(prompt)]
    problem = None
    for _ in range(2):
        try:
            answer = client.complete(messages)
        except UpstreamError as exc:
            raise GenerationUpstreamError(str(exc)) from exc
        candidate = _clean_candidate(answer)
        problem = _check_prompt_candidate(entity.text, candidate, context, session)
        if problem is None:
            pair = ReplacementPair(entity.text, candidate, entity.category)
            return session.assign(pair) if session is not None else pair
        messages = messages + [assistant(answer), user(f"That is not acceptable: {problem}. Give a different name only.")]
    raise InvalidCandidateError(f"no valid replacement after retry: {problem}")


def _check_prompt_candidate(original: str, candidate: str, context: str, session: GenerationSession | None) -> str | None:
    if not candidate:
        return "the replacement is empty"
    if candidate.casefold() == original.casefold():
        return "the replacement equals the original"
    if candidate.casefold() in context.casefold():
        return "the replacement already occurs in the text"
    if session is not None:
        return session.violation(original, candidate)
    return None
