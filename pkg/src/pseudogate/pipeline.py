"""Detect -> generate -> replace orchestration, sessions, and restoration."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Literal, Sequence

from .chat import ChatClient
from .detection import (
    DEFAULT_DETECTION_TEMPLATE,
    DetectionPromptTemplate,
    Gazetteer,
    align_tag_replaced,
    detect_gazetteer,
    detect_prompt,
    parse_tag_marked,
)
from .errors import ConfigError, PseudoError
from .generation import (
    DEFAULT_GENERATION_TEMPLATE,
    CandidatePool,
    GenerationSession,
    generate_prompt,
    generate_random,
)
from .lm import TokenPredictor, greedy_decode, tokenize
from .metrics import EmbeddingProvider
from .models import (
    Diagnostics,
    EntitySet,
    PseudonymizedText,
    ReplacementMapping,
    contains_word,
)
from .replacement import (
    DEFAULT_G_TEMPLATE,
    DEFAULT_REPLACEMENT_TEMPLATE,
    GeneratorHandle,
    PromptTemplateG,
    SetMatch,
    TagMatch,
    replace_direct,
    replace_generative,
    replace_prompt,
    substitute,
)

logger = logging.getLogger(__name__)

Detector = Literal["gazetteer", "prompt", "tag_mark", "tag_rep"]
Generator = Literal["random", "prompt"]
Replacer = Literal["direct", "prompt", "generative"]

DETECTORS = ("gazetteer", "prompt", "tag_mark", "tag_rep")
GENERATORS = ("random", "prompt")
REPLACERS = ("direct", "prompt", "generative")


@dataclass(frozen=True)
class PipelineConfig:
    detector: Detector = "gazetteer"
    generator: Generator = "random"
    replacer: Replacer = "direct"
    seed: int = 0
    case_sensitive: bool = True
    detection_template: str = DEFAULT_DETECTION_TEMPLATE
    generation_template: str = DEFAULT_GENERATION_TEMPLATE
    replacement_template: str = DEFAULT_REPLACEMENT_TEMPLATE
    g_template: str = DEFAULT_G_TEMPLATE

    def __post_init__(self) -> None:
        for name, value, allowed in (
            ("detector", self.detector, DETECTORS),
            ("generator", self.generator, GENERATORS),
            ("replacer", self.replacer, REPLACERS),
        ):
            if value not in allowed:
                raise ConfigError(f"unknown {name} {value!r}; expected one of {', '.join(allowed)}")
        try:
            DetectionPromptTemplate(self.detection_template)
            PromptTemplateG(self.g_template)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def tag_style(self) -> Literal["mark", "replace"] | None:
        return {"tag_mark": "mark", "tag_rep": "replace"}.get(self.detector)  # type: ignore[return-value]


@dataclass
class BackendSet:
    """The models and resources a pipeline run may call.

    ``predictor`` is the token model used for constrained decoding (an
    echo model) or as the tagger behind the tag detectors. Runs lease it
    exclusively, so stateful predictors are safe under concurrency.
    ``upstream``, ``embedder`` and ``scorer`` are only used by evaluation.
    """

    gazetteer: Gazetteer | None = None
    pool: CandidatePool | None = None
    local_llm: ChatClient | None = None
    predictor: TokenPredictor | None = None
    upstream: ChatClient | None = None
    embedder: EmbeddingProvider | None = None
    scorer: TokenPredictor | None = None
    _lease: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


def check_backends(config: PipelineConfig, backends: BackendSet) -> None:
    """Raise :class:`ConfigError` when ``config`` needs a backend that is missing."""
    missing = []
    if config.detector == "gazetteer" and backends.gazetteer is None:
        missing.append("gazetteer (detector=gazetteer)")
    if config.tag_style and backends.predictor is None:
        missing.append(f"predictor (detector={config.detector})")
    if config.replacer == "generative" and backends.predictor is None:
        missing.append("predictor (replacer=generative)")
    if config.generator == "random" and backends.pool is None:
        missing.append("candidate pool (generator=random)")
    for stage, needs in (
        ("detector", config.detector == "prompt"),
        ("generator", config.generator == "prompt"),
        ("replacer", config.replacer == "prompt"),
    ):
        if needs and backends.local_llm is None:
            missing.append(f"local chat model ({stage}=prompt)")
    if missing:
        raise ConfigError("missing backends: " + "; ".join(missing))


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class MappingSession:
    session_id: str
    mapping: ReplacementMapping
    created_at: str
    source_digest: str

    @classmethod
    def create(cls, mapping: ReplacementMapping, source: str) -> MappingSession:
        now = datetime.now(timezone.utc).isoformat(timespec="seconds")
        return cls(uuid.uuid4().hex, mapping, now, digest(source))

    def extended(self, mapping: ReplacementMapping) -> MappingSession:
        """A new session (fresh id) holding ``mapping`` for the same conversation."""
        now = datetime.now(timezone.utc).isoformat(timespec="seconds")
        return MappingSession(uuid.uuid4().hex, mapping, now, self.source_digest)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "created_at": self.created_at,
            "source_digest": self.source_digest,
            "pairs": self.mapping.to_list(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> MappingSession:
        try:
            return cls(
                str(data["session_id"]),
                ReplacementMapping.from_list(data["pairs"]),
                str(data["created_at"]),
                str(data["source_digest"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed session document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    @classmethod
    def from_json(cls, text: str) -> MappingSession:
        return cls.from_dict(json.loads(text))


class PipelineError(PseudoError):
    """A stage failure, carrying the stage name and the underlying error."""

    def __init__(self, stage: str, cause: Exception) -> None:
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    texts: list[PseudonymizedText]
    session: MappingSession
    detected: list[EntitySet]
    diagnostics: Diagnostics


def _detect(text: str, config: PipelineConfig, backends: BackendSet, diagnostics: Diagnostics) -> EntitySet:
    if config.detector == "gazetteer":
        assert backends.gazetteer is not None
        return detect_gazetteer(text, backends.gazetteer, config.case_sensitive)
    if config.detector == "prompt":
        assert backends.local_llm is not None
        return detect_prompt(
            text, backends.local_llm, DetectionPromptTemplate(config.detection_template), diagnostics, config.case_sensitive
        )
    assert backends.predictor is not None
    conditioning = PromptTemplateG(config.g_template).render(text)
    with backends._lease:
        tagged = greedy_decode(backends.predictor, conditioning, 2 * len(tokenize(text)) + 64)
    if config.tag_style == "mark":
        return parse_tag_marked(tagged, text)
    return align_tag_replaced(tagged, text)


def _generator(
    config: PipelineConfig, backends: BackendSet, session: GenerationSession, context: str
) -> GeneratorHandle:
    if config.generator == "random":
        pool = backends.pool
        assert pool is not None
        return lambda entity: generate_random(entity, pool, session)
    client = backends.local_llm
    assert client is not None
    return lambda entity: generate_prompt(entity, context, client, config.generation_template, session)


def _relevant(mapping: ReplacementMapping, text: str, case_sensitive: bool) -> ReplacementMapping:
    return ReplacementMapping(tuple(p for p in mapping if contains_word(text, p.original, case_sensitive)))


def _leaks(text: str, mapping: ReplacementMapping, case_sensitive: bool) -> list[str]:
    return [p.original for p in mapping if contains_word(text, p.original, case_sensitive)]


def pseudonymize_many(
    texts: Sequence[str],
    config: PipelineConfig,
    backends: BackendSet,
    *,
    session: MappingSession | None = None,
    context: Sequence[str] = (),
    digest_source: str | None = None,
) -> PipelineResult:
    """Pseudonymize several texts with one consistent mapping.

    ``session`` seeds the mapping with pairs from earlier turns; when new
    entities appear the returned session is a new one extending it.
    ``context`` lists texts that travel alongside (for example other chat
    messages); replacements are chosen so they do not collide with them.
    """
    check_backends(config, backends)
    diagnostics = Diagnostics()
    prior = session.mapping if session is not None else ReplacementMapping(())
    document = "\n".join([*texts, *context])
    gen = GenerationSession.resume(prior, document, config.seed)
    generator = _generator(config, backends, gen, document)
    tag_generative = config.tag_style is not None and config.replacer == "generative"

    detected: list[EntitySet] = []
    for text in texts:
        if tag_generative:
            detected.append(EntitySet((), len(text)))
            continue
        try:
            spans = _detect(text, config, backends, diagnostics)
        except PseudoError as exc:
            raise PipelineError("detection", exc) from exc
        detected.append(spans)
        gen.protect(spans.texts)
    diagnostics.bump("detect.spans", sum(len(s) for s in detected))

    if not tag_generative:
        try:
            for spans in detected:
                for occ in spans:
                    generator(occ)
        except PseudoError as exc:
            raise PipelineError("generation", exc) from exc

    results: list[PseudonymizedText] = []
    for text, spans in zip(texts, detected):
        try:
            result = _replace(text, spans, config, backends, gen, generator, diagnostics)
        except PseudoError as exc:
            stage = "generation" if exc.stage == "generation" else "replacement"
            raise PipelineError(stage, exc) from exc
        results.append(result)

    mapping = gen.mapping()
    leaked = [i for i, r in enumerate(results) if _leaks(r.text, mapping, config.case_sensitive)]
    for i in leaked:
        diagnostics.flag("replace.leak_fallback")
        results[i] = replace_direct(texts[i], mapping, config.case_sensitive)
        if _leaks(results[i].text, mapping, config.case_sensitive):
            raise PipelineError("replacement", PseudoError("an original survived replacement"))

    if session is None:
        out_session = MappingSession.create(mapping, digest_source if digest_source is not None else "\n".join(texts))
    elif len(mapping) == len(prior):
        out_session = session
    else:
        out_session = session.extended(mapping)
    logger.debug("pseudonymized %d text(s): %s", len(texts), diagnostics.to_dict())
    return PipelineResult(results, out_session, detected, diagnostics)


def _replace(
    text: str,
    spans: EntitySet,
    config: PipelineConfig,
    backends: BackendSet,
    gen: GenerationSession,
    generator: GeneratorHandle,
    diagnostics: Diagnostics,
) -> PseudonymizedText:
    mapping = gen.mapping()
    if config.replacer == "direct":
        return replace_direct(text, mapping, config.case_sensitive)
    if config.replacer == "prompt":
        assert backends.local_llm is not None
        return replace_prompt(
            text,
            _relevant(mapping, text, config.case_sensitive),
            backends.local_llm,
            config.replacement_template,
            diagnostics,
            config.case_sensitive,
        )
    assert backends.predictor is not None
    if config.tag_style is not None:
        mode: SetMatch | TagMatch = TagMatch(config.tag_style)
    else:
        known = {p.original: p.category for p in mapping}
        for occ in spans:
            known.setdefault(occ.text, occ.category)
        mode = SetMatch(tuple(known.items()))
    with backends._lease:
        result, _ = replace_generative(
            text, mode, generator, backends.predictor, PromptTemplateG(config.g_template), diagnostics
        )
    return result


def pseudonymize(
    x: str,
    config: PipelineConfig,
    backends: BackendSet,
    session: MappingSession | None = None,
) -> tuple[PseudonymizedText, MappingSession]:
    """Run the configured detect, generate and replace stages on one text."""
    result = pseudonymize_many([x], config, backends, session=session)
    return result.texts[0], result.session


def restore_output(y_prime: str, session: MappingSession | ReplacementMapping) -> str:
    """Swap each replacement in ``y_prime`` back to its original.

    Matching is case-insensitive at word boundaries, longest replacement
    first; the original is inserted with its own casing. A suffix such as a
    possessive ``'s`` stays in place because only the stem matches.
    """
    mapping = session.mapping if isinstance(session, MappingSession) else session
    inverse = {p.replacement: p.original for p in mapping}
    categories = {p.replacement: p.category for p in mapping}
    return substitute(y_prime, inverse, categories, case_sensitive=False).text
