"""Entity replacement: direct substitution, prompt rewriting, and replacement
during constrained greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Protocol, Sequence

from .chat import ChatClient, user
from .detection import OPEN_TAG, CLOSE_TAG, anchor_segment
from .errors import (
    AlignError,
    BudgetExceededError,
    EchoDivergedError,
    ParseError,
    ReplacementUpstreamError,
    UpstreamError,
)
from .lm import TokenPredictor, argmax, split_lead, tokenize
from .models import (
    Diagnostics,
    EntityCategory,
    EntityOccurrence,
    EntitySet,
    OffsetEntry,
    PseudonymizedText,
    ReplacementMapping,
    ReplacementPair,
    contains_word,
    find_entity_occurrences,
    resolve_overlaps,
)


def substitute(
    text: str,
    table: dict[str, str],
    categories: dict[str, EntityCategory] | None = None,
    case_sensitive: bool = True,
) -> PseudonymizedText:
    """Replace word-boundary occurrences of the keys of ``table``, longest first.

    When ``case_sensitive`` is false, keys match regardless of case and the
    table value is inserted verbatim.
    """
    if not table:
        return PseudonymizedText(text, ())
    categories = categories or {}
    lookup = table if case_sensitive else {k.casefold(): v for k, v in table.items()}
    entities = [(k, categories.get(k, EntityCategory.UNKNOWN)) for k in table]
    spans = resolve_overlaps(find_entity_occurrences(text, entities, case_sensitive))
    pieces: list[str] = []
    entries: list[OffsetEntry] = []
    cursor = out_len = 0
    for occ in spans:
        new = lookup[occ.text if case_sensitive else occ.text.casefold()]
        chunk = text[cursor:occ.start]
        pieces.append(chunk)
        out_len += len(chunk)
        pieces.append(new)
        entries.append(OffsetEntry((occ.start, occ.end), (out_len, out_len + len(new)), occ.text, new))
        out_len += len(new)
        cursor = occ.end
    pieces.append(text[cursor:])
    return PseudonymizedText("".join(pieces), tuple(entries))


def replace_direct(text: str, mapping: ReplacementMapping, case_sensitive: bool = True) -> PseudonymizedText:
    """Swap every original for its replacement; everything else is left byte-identical."""
    return substitute(
        text,
        mapping.forward(),
        {p.original: p.category for p in mapping},
        case_sensitive,
    )


DEFAULT_REPLACEMENT_TEMPLATE = (
    "Rewrite the text below, replacing each name on the left with the name on the right.\n"
    "Adjust neighbouring words (articles, pronouns, agreement) only where grammar requires it "
    "and change nothing else. Output the rewritten text only.\n\n"
    "Replacements:\n{mapping}\n\nText:\n{input}"
)


def render_mapping(mapping: ReplacementMapping) -> str:
    return "\n".join(f"- {p.original} -> {p.replacement}" for p in mapping)


def _rewrite_problem(rewritten: str, mapping: ReplacementMapping) -> str | None:
    if not rewritten.strip():
        return "empty"
    for pair in mapping:
        if contains_word(rewritten, pair.original, case_sensitive=False):
            return "original left in output"
        if not contains_word(rewritten, pair.replacement, case_sensitive=False):
            return "replacement missing"
    return None


def replace_prompt(
    text: str,
    mapping: ReplacementMapping,
    client: ChatClient,
    template: str = DEFAULT_REPLACEMENT_TEMPLATE,
    diagnostics: Diagnostics | None = None,
    case_sensitive: bool = True,
) -> PseudonymizedText:
    """Let a local model rewrite ``text`` with the mapping applied.

    The rewrite is rejected if any original survives or any replacement is
    missing; the result then comes from :func:`replace_direct` and the
    ``replace.prompt_fallback`` flag is set. An accepted rewrite carries no
    offset map since the model may have edited around the splices.
    """
    if not len(mapping):
        return PseudonymizedText(text, ())
    prompt = template.replace("{mapping}", render_mapping(mapping)).replace("{input}", text)
    try:
        rewritten = client.complete([user(prompt)])
    except UpstreamError as exc:
        raise ReplacementUpstreamError(str(exc)) from exc
    rewritten = rewritten.strip("\n")
    if _rewrite_problem(rewritten, mapping) is None:
        return PseudonymizedText(rewritten, ())
    if diagnostics is not None:
        diagnostics.flag("replace.prompt_fallback")
    return replace_direct(text, mapping, case_sensitive)


# --- constrained decoding -----------------------------------------------------


@dataclass(frozen=True)
class SetMatch:
    """Compare generated tokens against a precomputed entity set."""

    entities: tuple[tuple[str, EntityCategory], ...]

    @classmethod
    def from_entity_set(cls, spans: EntitySet) -> SetMatch:
        return cls(tuple(spans.unique_entities()))


@dataclass(frozen=True)
class TagMatch:
    """React to ``<ENT>x</ENT>`` (mark) or bare ``<ENT>`` (replace) in the generated stream."""

    style: Literal["mark", "replace"] = "mark"


DetectionMode = SetMatch | TagMatch


class GeneratorHandle(Protocol):
    def __call__(self, entity: EntityOccurrence) -> ReplacementPair: ...


DEFAULT_G_TEMPLATE = "Repeat the following text exactly.\nText: {input}\nOutput: "


@dataclass(frozen=True)
class PromptTemplateG:
    template: str = DEFAULT_G_TEMPLATE

    def __post_init__(self) -> None:
        if self.template.count("{input}") != 1:
            raise ValueError("prompt template needs exactly one {input} placeholder")

    def render(self, text: str) -> str:
        return self.template.replace("{input}", text)


@dataclass
class _TrieNode:
    children: dict[str, _TrieNode] = field(default_factory=dict)
    entity: str | None = None
    category: EntityCategory = EntityCategory.UNKNOWN


def _build_trie(entities: Sequence[tuple[str, EntityCategory]]) -> tuple[_TrieNode, int]:
    root = _TrieNode()
    longest = 1
    for text, category in entities:
        toks = tokenize(text)
        if not toks or split_lead(toks[0])[0]:
            raise ValueError("entities must not start with whitespace")
        longest = max(longest, len(toks))
        node = root
        for tok in toks:
            node = node.children.setdefault(tok, _TrieNode())
        if node.entity is None:
            node.entity = text
            node.category = EntityCategory.parse(category)
    return root, longest


@dataclass
class _Splice:
    src: tuple[int, int]
    original: str
    replacement: str


@dataclass
class _Match:
    first: int
    last: int  # exclusive token index
    occurrence: EntityOccurrence


class _GenerativeRun:
    def __init__(self, text: str, generator: GeneratorHandle, predictor: TokenPredictor, g: PromptTemplateG) -> None:
        self.text = text
        self.generator = generator
        self.predictor = predictor
        self.vocab = predictor.vocab
        self.conditioning = g.render(text)
        self.source_tokens = tokenize(text)
        self.budget = 2 * len(self.source_tokens) + 64
        self.steps = 0
        self.pieces: list[tuple[list[str], _Splice | None]] = []
        self.ids: list[int] = []
        self.raw_len = 0
        self.raw_last = ""
        self.pairs: dict[str, ReplacementPair] = {}

    # shared plumbing

    def step(self, prefix: list[int]) -> int:
        self.steps += 1
        if self.steps > self.budget:
            raise BudgetExceededError(f"generation exceeded {self.budget} tokens")
        return argmax(self.predictor.next(prefix, self.conditioning))

    def emit(self, tokens: list[str], splice: _Splice | None = None) -> None:
        self.pieces.append((tokens, splice))
        self.ids.extend(self.vocab.encode(tokens))

    def emit_raw(self, token: str) -> None:
        self.emit([token])
        self.raw_len += len(token)
        if token:
            self.raw_last = token[-1]

    def splice(self, occurrence: EntityOccurrence, lead: str, trail: str = "") -> None:
        pair = self.generator(occurrence)
        self.pairs.setdefault(pair.original, pair)
        q_tokens = tokenize(pair.replacement)
        q_tokens[0] = lead + q_tokens[0]
        if trail:
            q_tokens.append(trail)
        self.emit(q_tokens, _Splice((occurrence.start, occurrence.end), occurrence.text, pair.replacement))

    def finish(self) -> tuple[PseudonymizedText, ReplacementMapping]:
        out: list[str] = []
        entries: list[OffsetEntry] = []
        pos = 0
        for tokens, splice in self.pieces:
            chunk = "".join(tokens)
            if splice is not None:
                start = pos + chunk.find(splice.replacement)
                entries.append(
                    OffsetEntry(splice.src, (start, start + len(splice.replacement)), splice.original, splice.replacement)
                )
            out.append(chunk)
            pos += len(chunk)
        return PseudonymizedText("".join(out), tuple(entries)), ReplacementMapping(tuple(self.pairs.values()))

    # set match

    def run_set(self, entities: Sequence[tuple[str, EntityCategory]]) -> None:
        root, window = _build_trie(entities)
        cursor = drift = 0
        pending: list[str] = []
        while True:
            tok_id = self.step(self.ids + self.vocab.encode(pending))
            final = tok_id == self.vocab.eos_id
            if final:
                if len(self.source_tokens) - cursor > window:
                    raise EchoDivergedError("generation stopped before the source was echoed")
            else:
                tok = self.vocab.token(tok_id)
                cursor, drift = self._track_echo(tok, cursor, drift, window)
                pending.append(tok)
            cut, kept = self._resolve(root, pending, final)
            self._commit(pending[:cut], kept)
            pending = pending[cut:]
            if final:
                return

    def _track_echo(self, tok: str, cursor: int, drift: int, window: int) -> tuple[int, int]:
        src = self.source_tokens
        if cursor < len(src) and tok == src[cursor]:
            return cursor + 1, 0
        ahead = src[cursor + 1:cursor + 1 + window]
        if tok in ahead:
            return cursor + ahead.index(tok) + 2, 0
        drift += 1
        if drift > window:
            raise EchoDivergedError(f"predictor left the source for more than {window} tokens")
        return cursor + 1, drift

    def _resolve(self, root: _TrieNode, pending: list[str], final: bool) -> tuple[int, list[_Match]]:
        """Split ``pending`` at the furthest point no live match crosses.

        Returns the cut index and the winning matches left of it, chosen by
        the same longest-first policy as :func:`resolve_overlaps`.
        """
        starts = []
        pos = self.raw_len
        for tok in pending:
            starts.append(pos)
            pos += len(tok)
        complete: list[_Match] = []
        open_at: list[int] = []
        for s, tok in enumerate(pending):
            lead, core = split_lead(tok)
            if not core:
                continue
            prev = lead[-1:] or (pending[s - 1][-1:] if s else self.raw_last)
            if prev.isalnum():
                continue
            node = root.children.get(core)
            k = s
            while node is not None:
                if node.entity is not None:
                    if k + 1 < len(pending):
                        if not pending[k + 1][:1].isalnum():
                            begin = starts[s] + len(lead)
                            occ = EntityOccurrence(node.entity, node.category, begin, begin + len(node.entity))
                            complete.append(_Match(s, k + 1, occ))
                    elif final:
                        begin = starts[s] + len(lead)
                        complete.append(_Match(s, k + 1, EntityOccurrence(node.entity, node.category, begin, begin + len(node.entity))))
                    else:
                        open_at.append(s)
                k += 1
                if k >= len(pending):
                    if node.children and not final:
                        open_at.append(s)
                    break
                node = node.children.get(pending[k])

        cut = min(open_at, default=len(pending))
        moved = True
        while moved:
            moved = False
            for m in complete:
                if m.first < cut < m.last:
                    cut = m.first
                    moved = True
        inside = [m for m in complete if m.last <= cut]
        winners = resolve_overlaps(EntitySet(tuple(m.occurrence for m in inside), pos))
        chosen = {occ for occ in winners}
        return cut, [m for m in inside if m.occurrence in chosen]

    def _commit(self, tokens: list[str], matches: list[_Match]) -> None:
        by_first = {m.first: m for m in matches}
        i = 0
        while i < len(tokens):
            match = by_first.get(i)
            if match is None:
                self.emit_raw(tokens[i])
                i += 1
                continue
            lead, _ = split_lead(tokens[i])
            self.splice(match.occurrence, lead)
            consumed = "".join(tokens[match.first:match.last])
            self.raw_len += len(consumed)
            self.raw_last = consumed[-1]
            i = match.last

    # tag mark

    def run_mark(self) -> None:
        capture: tuple[str, list[str]] | None = None
        while True:
            prefix = self.ids
            if capture is not None:
                prefix = self.ids + self.vocab.encode([capture[0] + OPEN_TAG] + capture[1])
            tok_id = self.step(prefix)
            if tok_id == self.vocab.eos_id:
                if capture is not None:
                    raise ParseError(f"unterminated {OPEN_TAG} at end of generation")
                return
            tok = self.vocab.token(tok_id)
            lead, core = split_lead(tok)
            if capture is None:
                if core == OPEN_TAG:
                    capture = (lead, [])
                elif core == CLOSE_TAG:
                    raise ParseError(f"{CLOSE_TAG} without matching {OPEN_TAG}")
                else:
                    self.emit_raw(tok)
                continue
            if core == OPEN_TAG:
                raise ParseError(f"nested {OPEN_TAG}")
            if core != CLOSE_TAG:
                capture[1].append(tok)
                continue
            outer, captured = capture
            capture = None
            inner = "".join(captured) + lead
            entity = inner.strip()
            if not entity:
                self.emit_raw(outer + inner)
                continue
            pre = inner[: len(inner) - len(inner.lstrip())]
            post = inner[len(inner.rstrip()):]
            begin = self.raw_len + len(outer) + len(pre)
            occ = EntityOccurrence(entity, EntityCategory.UNKNOWN, begin, begin + len(entity))
            self.splice(occ, outer + pre, post)
            self.raw_len += len(outer) + len(inner)
            self.raw_last = (outer + inner)[-1]

    # tag replace

    def run_replace(self) -> None:
        original = self.text
        segment = ""
        index = 0
        cursor = 0
        placeholder: int | None = None
        while True:
            tok_id = self.step(self.ids)
            final = tok_id == self.vocab.eos_id
            tok = "" if final else self.vocab.token(tok_id)
            lead, core = split_lead(tok)
            if core == CLOSE_TAG:
                raise AlignError(f"tag-replace output must not contain {CLOSE_TAG}")
            if not final and core != OPEN_TAG:
                segment += tok
                self.emit_raw(tok)
                continue
            segment += lead
            if final and index == 0:
                if segment != original:
                    raise AlignError("untagged output differs from the source text")
                return
            at = anchor_segment(original, segment, cursor, first=index == 0, last=final)
            if at < 0:
                raise AlignError(f"context segment {index} could not be aligned")
            if placeholder is not None:
                self._fill(placeholder, (cursor, at))
            if final:
                return
            cursor = at + len(segment)
            index += 1
            segment = ""
            placeholder = len(self.pieces)
            self.emit([tok])

    def _fill(self, index: int, gap: tuple[int, int]) -> None:
        placeholder = self.pieces.pop(index)
        tail = self.pieces[index:]
        del self.pieces[index:]
        lead, _ = split_lead(placeholder[0][0])
        text = self.text[gap[0]:gap[1]]
        self.splice(EntityOccurrence(text, EntityCategory.UNKNOWN, gap[0], gap[1]), lead)
        self.pieces.extend(tail)
        self.ids = self.vocab.encode([t for toks, _ in self.pieces for t in toks])


def replace_generative(
    text: str,
    detection: DetectionMode,
    generator: GeneratorHandle,
    predictor: TokenPredictor,
    g: PromptTemplateG | None = None,
    diagnostics: Diagnostics | None = None,
) -> tuple[PseudonymizedText, ReplacementMapping]:
    """Pseudonymize ``text`` while a predictor regenerates it token by token.

    Whenever the generated stream completes a privacy entity (a member of the
    set in :class:`SetMatch` mode, or a tagged span in :class:`TagMatch`
    mode) the entity's tokens are dropped, the replacement's tokens are
    emitted instead, and decoding continues conditioned on the replacement.
    Tags are never copied into the output.

    In set mode, tokens are held back while they could still be part of an
    entity, so overlaps are settled exactly as :func:`replace_direct` would.
    In tag-replace mode the entity hidden behind ``<ENT>`` is only known once
    the following context has been generated and aligned to ``text``, so the
    splice lands when that context segment ends.

    Raises:
        EchoDivergedError: set mode only, when the output drifts from the
            source for more tokens than the longest entity.
        BudgetExceededError: after ``2 * len(tokens(text)) + 64`` steps.
        ParseError / AlignError: malformed tag output in tag modes.
    """
    run = _GenerativeRun(text, generator, predictor, g or PromptTemplateG())
    if isinstance(detection, SetMatch):
        run.run_set(detection.entities)
    elif detection.style == "mark":
        run.run_mark()
    else:
        run.run_replace()
    result = run.finish()
    if diagnostics is not None:
        diagnostics.bump("replace.splices", len(result[0].offset_map))
        diagnostics.bump("replace.steps", run.steps)
    return result
