"""Deterministic test doubles for the chat endpoint and token predictors.

Everything here runs offline. Scripted chat endpoints are usable in-process
(:class:`ScriptedChatClient`, :meth:`ScriptedChat.transport`) or over a real
loopback socket (:func:`serve_loopback`) for wire-level tests.
"""

from __future__ import annotations

import contextlib
import copy
import json
import math
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Iterator, Sequence

import httpx

from .chat import Message, extract_content
from .detection import Gazetteer, detect_gazetteer
from .errors import MockExhausted, UpstreamError
from .lm import Vocabulary, tokenize
from .replacement import PromptTemplateG

Predicate = Callable[[dict], bool]


@dataclass(frozen=True)
class Reply:
    content: str
    predicate: Predicate | None = None
    delay: float = 0.0


@dataclass(frozen=True)
class Status:
    code: int
    body: dict | None = None
    predicate: Predicate | None = None
    delay: float = 0.0


@dataclass(frozen=True)
class Echo:
    predicate: Predicate | None = None
    delay: float = 0.0


ECHO = Echo()

Step = Reply | Status | Echo


def chat_body(content: str, model: str = "mock", index: int = 0) -> dict:
    return {
        "id": f"mock-{index}",
        "object": "chat.completion",
        "model": model,
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
    }


def last_user_content(request: dict) -> str:
    for message in reversed(request.get("messages") or []):
        if message.get("role") == "user":
            return message.get("content") or ""
    return ""


@dataclass
class Capture:
    request: dict
    raw: bytes
    headers: dict[str, str]


class ScriptedChat:
    """A chat-completions endpoint that plays a fixed script.

    Steps are consumed strictly in order; with ``loop=True`` the script
    restarts when it runs out, otherwise the next request raises
    :class:`MockExhausted`. Every request is captured exactly once, in
    arrival order.
    """

    def __init__(self, steps: Sequence[Step], loop: bool = False) -> None:
        self.steps = list(steps)
        self.loop = loop
        self.captures: list[Capture] = []
        self._next = 0
        self._lock = threading.Lock()

    @classmethod
    def echo(cls) -> ScriptedChat:
        return cls([ECHO], loop=True)

    @property
    def remaining(self) -> int:
        return len(self.steps) - self._next

    def respond(self, request: dict, raw: bytes = b"", headers: dict[str, str] | None = None) -> tuple[int, dict, float]:
        """Consume one step; returns (status, json body, delay seconds)."""
        with self._lock:
            self.captures.append(Capture(copy.deepcopy(request), raw, dict(headers or {})))
            if self._next >= len(self.steps):
                if not self.loop or not self.steps:
                    raise MockExhausted(f"script exhausted after {len(self.steps)} steps")
                self._next = 0
            step = self.steps[self._next]
            self._next += 1
            index = len(self.captures)
        if step.predicate is not None and not step.predicate(request):
            raise MockExhausted(f"request {index} does not match the scripted predicate")
        model = request.get("model", "mock")
        if isinstance(step, Status):
            return step.code, step.body or {"error": {"message": f"scripted {step.code}"}}, step.delay
        if isinstance(step, Echo):
            return 200, chat_body(last_user_content(request), model, index), step.delay
        return 200, chat_body(step.content, model, index), step.delay

    def transport(self, sleep: Callable[[float], None] = time.sleep) -> httpx.MockTransport:
        """httpx transport (sync or async clients) backed by this script."""

        def handler(request: httpx.Request) -> httpx.Response:
            raw = request.read()
            status, body, delay = self.respond(json.loads(raw or b"{}"), raw, dict(request.headers))
            if delay:
                sleep(delay)
            return httpx.Response(status, json=body)

        return httpx.MockTransport(handler)


def mock_chat_respond(request: dict, script: ScriptedChat) -> dict | int:
    """Next scripted answer: a chat body on success, the bare status otherwise."""
    status, body, _ = script.respond(request)
    return body if status == 200 else status


class ScriptedChatClient:
    """:class:`~pseudogate.chat.ChatClient` over a :class:`ScriptedChat`."""

    def __init__(self, script: ScriptedChat | Sequence[Step], model: str = "mock") -> None:
        self.script = script if isinstance(script, ScriptedChat) else ScriptedChat(script)
        self.model = model

    def complete(self, messages: list[Message]) -> str:
        status, body, _ = self.script.respond({"model": self.model, "messages": messages})
        if status >= 400:
            raise UpstreamError(f"scripted HTTP {status}", status=status)
        return extract_content(body)


def _handler_for(script: ScriptedChat) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self) -> None:  # noqa: N802
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length)
            try:
                status, body, delay = script.respond(json.loads(raw or b"{}"), raw, dict(self.headers.items()))
            except MockExhausted as exc:
                status, body, delay = 599, {"error": {"message": str(exc)}}, 0.0
            if delay:
                time.sleep(delay)
            payload = json.dumps(body).encode()
            try:
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)
            except (BrokenPipeError, ConnectionResetError):
                pass

        def log_message(self, format: str, *args: Any) -> None:
            pass

    return Handler


@contextlib.contextmanager
def serve_loopback(script: ScriptedChat) -> Iterator[str]:
    """Serve ``script`` on 127.0.0.1 for the duration of the block; yields the base URL."""
    server = ThreadingHTTPServer(("127.0.0.1", 0), _handler_for(script))
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        host, port = server.server_address[:2]
        yield f"http://{host}:{port}"
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)


# --- token predictors ---------------------------------------------------------


class ScriptedPredictor:
    """Plays a fixed token program, one token per ``next`` call.

    The position advances with every call and resets whenever ``next`` sees
    an empty prefix, so one instance serves consecutive runs. ``confidence``
    optionally gives the probability placed on the program token at each
    position; the remainder goes to end-of-sequence.
    """

    def __init__(
        self,
        program: Sequence[str] = (),
        vocab: Vocabulary | None = None,
        confidence: Sequence[float] | None = None,
    ) -> None:
        self.vocab = vocab or Vocabulary()
        self.confidence = list(confidence) if confidence is not None else None
        self._set_program(program)

    def _set_program(self, program: Sequence[str]) -> None:
        self.program = list(program)
        self.vocab.encode(self.program)
        self._cursor = 0

    def _program_for(self, conditioning: str) -> list[str]:
        return self.program

    def _target(self, position: int) -> int:
        if position < len(self.program):
            return self.vocab.id(self.program[position])
        return self.vocab.eos_id

    def _prob(self, position: int) -> float:
        if self.confidence is None or position >= len(self.confidence):
            return 1.0
        return self.confidence[position]

    def next(self, prefix: Sequence[int], conditioning: str) -> dict[int, float]:
        if not prefix:
            self._set_program(self._program_for(conditioning))
        position = self._cursor
        self._cursor += 1
        target = self._target(position)
        p = self._prob(position)
        if p >= 1.0 or target == self.vocab.eos_id:
            return {target: 1.0}
        return {target: p, self.vocab.eos_id: 1.0 - p}

    def score(self, prefix: Sequence[int], token_id: int, conditioning: str = "") -> float:
        position = len(prefix)
        if token_id == self._target(position):
            return -math.log(self._prob(position))
        if self._target(position) != self.vocab.eos_id and token_id == self.vocab.eos_id and self._prob(position) < 1.0:
            return -math.log(1.0 - self._prob(position))
        return math.inf


class EmitPredictor(ScriptedPredictor):
    """Replays a fixed token list regardless of the input."""


class EchoPredictor(ScriptedPredictor):
    """Faithful copy model: reads the input back out of the prompt and echoes it.

    The input is recovered by stripping the fixed parts of ``template``
    from the conditioning text.
    """

    def __init__(self, template: PromptTemplateG | None = None, vocab: Vocabulary | None = None) -> None:
        self.template = template or PromptTemplateG()
        super().__init__((), vocab)

    def _program_for(self, conditioning: str) -> list[str]:
        return tokenize(recover_input(self.template, conditioning))


def recover_input(template: PromptTemplateG, conditioning: str) -> str:
    head, tail = template.template.split("{input}")
    if not conditioning.startswith(head) or not conditioning.endswith(tail):
        raise ValueError("conditioning was not produced by this template")
    return conditioning[len(head):len(conditioning) - len(tail)]


class TaggingPredictor(ScriptedPredictor):
    """Stand-in for the fine-tuned Seq2Seq tagger.

    Detects entities with a gazetteer and emits the input with each entity
    wrapped in ``<ENT>...</ENT>`` (``style="mark"``) or collapsed to a bare
    ``<ENT>`` (``style="replace"``).
    """

    def __init__(
        self,
        gazetteer: Gazetteer,
        style: str = "mark",
        template: PromptTemplateG | None = None,
        vocab: Vocabulary | None = None,
    ) -> None:
        self.gazetteer = gazetteer
        self.style = style
        self.template = template or PromptTemplateG()
        super().__init__((), vocab)

    def _program_for(self, conditioning: str) -> list[str]:
        return tokenize(tag_text(recover_input(self.template, conditioning), self.gazetteer, self.style))


def tag_text(text: str, gazetteer: Gazetteer, style: str = "mark") -> str:
    out = []
    cursor = 0
    for occ in detect_gazetteer(text, gazetteer):
        out.append(text[cursor:occ.start])
        out.append(f"<ENT>{occ.text}</ENT>" if style == "mark" else "<ENT>")
        cursor = occ.end
    out.append(text[cursor:])
    return "".join(out)


@dataclass
class UniformPredictor:
    """Uniform distribution over the whole vocabulary (end-of-sequence included)."""

    vocab: Vocabulary = field(default_factory=Vocabulary)

    def next(self, prefix: Sequence[int], conditioning: str) -> dict[int, float]:
        size = len(self.vocab)
        return {i: 1.0 / size for i in range(size)}

    def score(self, prefix: Sequence[int], token_id: int, conditioning: str = "") -> float:
        return math.log(len(self.vocab))
