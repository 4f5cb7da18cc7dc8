"""Token-level interfaces for constrained decoding and scoring.

The in-process tokenizer splits text into runs of letters/digits and single
punctuation marks, each carrying the whitespace that precedes it (``"a b c"``
becomes ``["a", " b", " c"]``). ``<ENT>`` and ``</ENT>`` are single tokens.
Trailing whitespace forms its own token. Concatenating tokens always gives
back the input.
"""

from __future__ import annotations

import math
import re
from typing import Mapping, Protocol, Sequence

import httpx

from .errors import UpstreamError, UpstreamTimeout

TOKEN_PATTERN = re.compile(r"\s*(?:</?ENT>|[^\W_]+|\S)|\s+")
EOS = "<|eos|>"


def tokenize(text: str) -> list[str]:
    return TOKEN_PATTERN.findall(text)


def detokenize(tokens: Sequence[str]) -> str:
    return "".join(tokens)


def split_lead(token: str) -> tuple[str, str]:
    """Split a token into (leading whitespace, core)."""
    core = token.lstrip()
    return token[: len(token) - len(core)], core


class Vocabulary:
    """Growable token <-> id table. Id 0 is always end-of-sequence."""

    def __init__(self, tokens: Sequence[str] = ()) -> None:
        self._tokens: list[str] = [EOS]
        self._ids: dict[str, int] = {EOS: 0}
        for tok in tokens:
            self.id(tok)

    eos_id = 0

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def id(self, token: str) -> int:
        found = self._ids.get(token)
        if found is None:
            found = len(self._tokens)
            self._tokens.append(token)
            self._ids[token] = found
        return found

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self._tokens[i] for i in ids if i != self.eos_id)


class TokenPredictor(Protocol):
    """Next-token model ``f``.

    ``next`` returns a sparse distribution over ``vocab`` ids that sums to 1;
    ``score`` returns the negative log-probability (>= 0) of one token.
    Predictors may keep per-run state; a replacement run leases one exclusively.
    """

    vocab: Vocabulary

    def next(self, prefix: Sequence[int], conditioning: str) -> Mapping[int, float]: ...

    def score(self, prefix: Sequence[int], token_id: int, conditioning: str = "") -> float: ...


def argmax(distribution: Mapping[int, float]) -> int:
    """Greedy choice; ties go to the lowest id so decoding is deterministic."""
    if not distribution:
        return Vocabulary.eos_id
    return min(distribution.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def greedy_decode(predictor: TokenPredictor, conditioning: str, max_tokens: int) -> str:
    """Plain greedy decoding with no intervention, used to run a tagger."""
    ids: list[int] = []
    for _ in range(max_tokens):
        tok = argmax(predictor.next(ids, conditioning))
        if tok == predictor.vocab.eos_id:
            return predictor.vocab.decode(ids)
        ids.append(tok)
    raise UpstreamError(f"tagger did not stop within {max_tokens} tokens")


class RemoteCompletionPredictor:
    """Adapter over a completions endpoint that returns top-k logprobs.

    The top-k alternatives are renormalised into a distribution. ``score``
    uses the raw logprob when the token is among the alternatives and
    ``-log(floor)`` otherwise.
    """

    def __init__(
        self,
        base_url: str,
        model: str = "local",
        api_key: str | None = None,
        top_k: int = 5,
        floor: float = 1e-6,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.vocab = Vocabulary()
        self.model = model
        self.top_k = top_k
        self.floor = floor
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport)

    def _top_logprobs(self, prefix: Sequence[int], conditioning: str) -> dict[str, float]:
        body = {
            "model": self.model,
            "prompt": conditioning + self.vocab.decode(prefix),
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": self.top_k,
        }
        try:
            response = self._client.post("/v1/completions", json=body)
        except httpx.TimeoutException as exc:
            raise UpstreamTimeout("completion endpoint timed out") from exc
        except httpx.HTTPError as exc:
            raise UpstreamError(f"completion endpoint unreachable: {exc.__class__.__name__}") from exc
        if response.status_code >= 400:
            raise UpstreamError(f"completion endpoint returned HTTP {response.status_code}", status=response.status_code)
        choice = response.json()["choices"][0]
        if not choice.get("text") and choice.get("finish_reason") == "stop":
            return {EOS: 0.0}
        tops = (choice.get("logprobs") or {}).get("top_logprobs") or [{}]
        return {tok: float(lp) for tok, lp in (tops[0] or {}).items()}

    def next(self, prefix: Sequence[int], conditioning: str) -> dict[int, float]:
        logprobs = self._top_logprobs(prefix, conditioning)
        if not logprobs:
            return {self.vocab.eos_id: 1.0}
        weights = {self.vocab.id(tok): math.exp(lp) for tok, lp in logprobs.items()}
        total = sum(weights.values())
        return {tid: w / total for tid, w in weights.items()}

    def score(self, prefix: Sequence[int], token_id: int, conditioning: str = "") -> float:
        logprobs = self._top_logprobs(prefix, conditioning)
        lp = logprobs.get(self.vocab.token(token_id))
        return -lp if lp is not None else -math.log(self.floor)
