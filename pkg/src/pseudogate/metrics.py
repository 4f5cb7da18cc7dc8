"""Privacy and utility metrics, task scorers, and sentence embedders."""

from __future__ import annotations

import math
import re
import string
import zlib
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import httpx
import numpy as np

from .errors import (
    EmptyGoldError,
    EmptyInputError,
    LengthMismatchError,
    TooShortError,
    UpstreamError,
    UpstreamTimeout,
)
from .lm import TokenPredictor, tokenize
from .models import ReplacementPair

BLEU_EPSILON = 1e-9
TRIGRAM_DIM = 512


# --- embeddings ----------------------------------------------------------------


class EmbeddingProvider(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; 0.0 when either vector is all zeros."""
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def char_trigrams(text: str) -> list[str]:
    """Overlapping character trigrams; texts shorter than three characters are one gram."""
    if not text:
        return []
    if len(text) < 3:
        return [text]
    return [text[i:i + 3] for i in range(len(text) - 2)]


def trigram_bucket(gram: str, dim: int = TRIGRAM_DIM) -> int:
    return zlib.crc32(gram.encode("utf-8")) % dim


def embed_fallback(text: str, dim: int = TRIGRAM_DIM) -> np.ndarray:
    """Hashed character-trigram counts, L2-normalised; empty text gives the zero vector."""
    vec = np.zeros(dim, dtype=np.float64)
    for gram in char_trigrams(text):
        vec[trigram_bucket(gram, dim)] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm else vec


@dataclass(frozen=True)
class TrigramEmbedder:
    dim: int = TRIGRAM_DIM

    def embed(self, text: str) -> np.ndarray:
        return embed_fallback(text, self.dim)


class HttpEmbedder:
    """Client for an OpenAI-style ``/v1/embeddings`` endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 30.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.model = model
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport)
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        try:
            response = self._client.post("/v1/embeddings", json={"model": self.model, "input": text})
        except httpx.TimeoutException as exc:
            raise UpstreamTimeout("embedding endpoint timed out") from exc
        except httpx.HTTPError as exc:
            raise UpstreamError(f"embedding endpoint unreachable: {exc.__class__.__name__}") from exc
        if response.status_code >= 400:
            raise UpstreamError(f"embedding endpoint returned HTTP {response.status_code}", status=response.status_code)
        vec = np.asarray(response.json()["data"][0]["embedding"], dtype=np.float64)
        self._cache[text] = vec
        return vec


# --- privacy metrics ---------------------------------------------------------------


def _normalize_set(items: Iterable[str], casefold: bool) -> set[str]:
    out = set()
    for item in items:
        item = item.strip()
        if item:
            out.add(item.casefold() if casefold else item)
    return out


def privacy_removal_rate(detected: Iterable[str], gold: Iterable[str], casefold: bool = False) -> float:
    """Share of gold entities that were detected, in percent."""
    gold_set = _normalize_set(gold, casefold)
    if not gold_set:
        raise EmptyGoldError("privacy removal rate needs at least one gold entity")
    found = _normalize_set(detected, casefold)
    return len(found & gold_set) / len(gold_set) * 100.0


def privacy_preservation_score(pairs: Sequence[ReplacementPair], embedder: EmbeddingProvider) -> float:
    """Mean embedding dissimilarity between originals and replacements, in percent."""
    if not pairs:
        raise EmptyInputError("privacy preservation score needs at least one pair")
    total = sum(1.0 - cosine(embedder.embed(p.original), embedder.embed(p.replacement)) for p in pairs)
    return total / len(pairs) * 100.0


def semantic_correctness_score(x_prime: str, predictor: TokenPredictor, conditioning: str = "") -> float:
    """Mean negative log-likelihood of each token given the tokens before it.

    The first token has no prefix to condition on and is not scored.
    """
    tokens = tokenize(x_prime)
    if len(tokens) < 2:
        raise TooShortError("text must have at least two tokens")
    ids = predictor.vocab.encode(tokens)
    losses = [predictor.score(ids[:i], ids[i], conditioning) for i in range(1, len(ids))]
    return sum(losses) / len(losses)


def pseudonymization_distance(x: str, x_prime: str, embedder: EmbeddingProvider) -> float:
    if not x or not x_prime:
        raise EmptyInputError("distance needs two non-empty texts")
    return 1.0 - cosine(embedder.embed(x), embedder.embed(x_prime))


# --- task scorers ----------------------------------------------------------------


def _words(text: str) -> list[str]:
    return text.casefold().split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter[tuple[str, ...]]:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, candidate_total: int, reference_total: int) -> PRF:
        p = overlap / candidate_total if candidate_total else 0.0
        r = overlap / reference_total if reference_total else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(p, r, f)

    def to_dict(self) -> dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_scores(candidate: str, reference: str) -> dict[str, PRF]:
    """ROUGE-1, ROUGE-2 and ROUGE-L over case-folded whitespace tokens."""
    ref = _words(reference)
    if not ref:
        raise EmptyGoldError("reference is empty")
    cand = _words(candidate)
    scores = {}
    for n in (1, 2):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        overlap = sum((c & r).values())
        scores[f"rouge{n}"] = PRF.from_counts(overlap, sum(c.values()), sum(r.values()))
    scores["rougeL"] = PRF.from_counts(lcs_length(cand, ref), len(cand), len(ref))
    return scores


def bleu4(candidate: str, references: Sequence[str]) -> float:
    """Sentence BLEU-4 in percent, with epsilon smoothing of zero n-gram matches."""
    return corpus_bleu4([candidate], [references])


def corpus_bleu4(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """BLEU-4 with clipped counts pooled over the corpus.

    Tokens are whitespace-separated and case-sensitive. The brevity penalty
    uses, per segment, the reference length closest to the candidate
    (shorter wins ties). Zero matched counts are replaced by
    :data:`BLEU_EPSILON`.
    """
    if len(candidates) != len(references):
        raise LengthMismatchError("one reference list per candidate is required")
    if not candidates:
        raise EmptyGoldError("no segments to score")
    matched = [0] * 4
    totals = [0] * 4
    cand_len = ref_len = 0
    for candidate, refs in zip(candidates, references):
        if not refs:
            raise EmptyGoldError("reference set is empty")
        cand = candidate.split()
        ref_tokens = [r.split() for r in refs]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in ref_tokens)[1]
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            max_ref: Counter[tuple[str, ...]] = Counter()
            for r in ref_tokens:
                max_ref |= _ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return 0.0
    log_precision = 0.0
    for m, t in zip(matched, totals):
        if t == 0:
            return 0.0
        log_precision += math.log((m if m else BLEU_EPSILON) / t)
    brevity = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return 100.0 * brevity * math.exp(log_precision / 4)


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def squad_normalize(text: str) -> str:
    """Lower-case, drop punctuation and articles, squeeze whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _token_f1(prediction: str, gold: str) -> float:
    pred, ref = squad_normalize(prediction).split(), squad_normalize(gold).split()
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    p, r = common / len(pred), common / len(ref)
    return 2 * p * r / (p + r)


def qa_f1_em(prediction: str, golds: Sequence[str]) -> dict[str, float]:
    """Best token F1 and exact match of ``prediction`` against any gold answer."""
    if not golds:
        raise EmptyGoldError("at least one gold answer is required")
    em = float(any(squad_normalize(prediction) == squad_normalize(g) for g in golds))
    f1 = max(_token_f1(prediction, g) for g in golds)
    return {"f1": f1, "em": em}


NLI_LABELS = ("entailment", "neutral", "contradiction")


def classification_accuracy(predictions: Sequence[str], golds: Sequence[str]) -> float:
    if len(predictions) != len(golds):
        raise LengthMismatchError(f"{len(predictions)} predictions for {len(golds)} gold labels")
    if not golds:
        raise EmptyInputError("no labels to score")
    hits = sum(p.strip().casefold() == g.strip().casefold() for p, g in zip(predictions, golds))
    return hits / len(golds) * 100.0


def parse_nli_label(answer: str) -> str:
    """First NLI label mentioned in a free-text answer, or the trimmed answer."""
    lowered = answer.casefold()
    hits = [(lowered.find(label), label) for label in NLI_LABELS if label in lowered]
    return min(hits)[1] if hits else answer.strip()
