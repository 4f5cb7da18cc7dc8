"""Chat-completions proxy that pseudonymizes outbound content and restores replies."""

from __future__ import annotations

import asyncio
import contextlib
import copy
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, AsyncIterator, Awaitable, Callable, Protocol

import httpx
from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse, PlainTextResponse

from .errors import ConfigError, PseudoError, SessionConflict, SessionNotFound, UpstreamError, UpstreamTimeout
from .pipeline import BackendSet, MappingSession, PipelineConfig, check_backends, digest, pseudonymize_many, restore_output
from .replacement import replace_direct

logger = logging.getLogger(__name__)

SESSION_HEADER = "X-Pseudo-Session"
ROLES = ("system", "user", "assistant")


# --- sessions ------------------------------------------------------------------


class SessionStore(Protocol):
    def put(self, session: MappingSession) -> None: ...

    def get(self, session_id: str) -> MappingSession: ...


class InMemorySessionStore:
    def __init__(self) -> None:
        self._sessions: dict[str, str] = {}
        self._lock = threading.Lock()

    def put(self, session: MappingSession) -> None:
        document = session.to_json()
        with self._lock:
            if session.session_id in self._sessions:
                raise SessionConflict(f"session {session.session_id} already exists")
            self._sessions[session.session_id] = document

    def get(self, session_id: str) -> MappingSession:
        with self._lock:
            document = self._sessions.get(session_id)
        if document is None:
            raise SessionNotFound(session_id)
        return MappingSession.from_json(document)


_SESSION_ID = re.compile(r"^[A-Za-z0-9_-]{1,128}$")


class DirectorySessionStore:
    """One JSON file per session; files are created once and never rewritten."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, session_id: str) -> Path:
        if not _SESSION_ID.match(session_id):
            raise SessionNotFound(session_id)
        return self.root / f"{session_id}.json"

    def put(self, session: MappingSession) -> None:
        path = self._path(session.session_id)
        try:
            with path.open("x", encoding="utf-8") as fh:
                fh.write(session.to_json())
        except FileExistsError as exc:
            raise SessionConflict(f"session {session.session_id} already exists") from exc

    def get(self, session_id: str) -> MappingSession:
        try:
            return MappingSession.from_json(self._path(session_id).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise SessionNotFound(session_id) from exc


# --- upstream ------------------------------------------------------------------


@dataclass(frozen=True)
class UpstreamPolicy:
    base_url: str
    timeout_ms: int = 60_000
    max_retries: int = 2
    backoff_base_ms: int = 250

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ConfigError("upstream timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.backoff_base_ms < 0:
            raise ConfigError("backoff_base_ms must be >= 0")

    def delay_ms(self, attempt: int) -> int:
        """Pause before retry number ``attempt + 1``."""
        return self.backoff_base_ms * 2**attempt


@dataclass
class UpstreamReply:
    body: dict
    retries: int
    delays_ms: list[int] = field(default_factory=list)


Sleep = Callable[[float], Awaitable[None]]


async def call_upstream(
    body: dict,
    policy: UpstreamPolicy,
    client: httpx.AsyncClient,
    headers: dict[str, str] | None = None,
    sleep: Sleep = asyncio.sleep,
) -> UpstreamReply:
    """POST ``body`` to the upstream chat endpoint with retry on 5xx and timeouts.

    4xx answers are returned as errors immediately. After ``max_retries``
    retries the last failure is raised as :class:`UpstreamError`.
    """
    url = policy.base_url.rstrip("/") + "/v1/chat/completions"
    delays: list[int] = []
    last: UpstreamError | None = None
    for attempt in range(policy.max_retries + 1):
        if attempt:
            delay = policy.delay_ms(attempt - 1)
            delays.append(delay)
            await sleep(delay / 1000)
        try:
            response = await client.post(url, json=body, headers=headers, timeout=policy.timeout_ms / 1000)
        except httpx.TimeoutException:
            last = UpstreamTimeout("upstream timed out", attempts=attempt + 1)
            continue
        except httpx.HTTPError as exc:
            last = UpstreamError(f"upstream unreachable: {exc.__class__.__name__}", attempts=attempt + 1)
            continue
        if response.status_code >= 500:
            last = UpstreamError(f"upstream returned HTTP {response.status_code}", response.status_code, attempt + 1)
            continue
        if response.status_code >= 400:
            raise UpstreamError(f"upstream returned HTTP {response.status_code}", response.status_code, attempt + 1)
        try:
            payload = response.json()
        except ValueError as exc:
            raise UpstreamError("upstream answered with invalid JSON", response.status_code, attempt + 1) from exc
        return UpstreamReply(payload, attempt, delays)
    assert last is not None
    raise last


# --- app -------------------------------------------------------------------------


@dataclass
class GatewaySettings:
    config: PipelineConfig
    backends: BackendSet
    upstream: UpstreamPolicy
    store: SessionStore = field(default_factory=InMemorySessionStore)
    roles: tuple[str, ...] = ("user",)
    transport: httpx.AsyncBaseTransport | None = None
    sleep: Sleep = asyncio.sleep


def _error(http_status: int, kind: str, message: str, /, **extra: Any) -> JSONResponse:
    return JSONResponse({"error": {"type": kind, "message": message, **extra}}, status_code=http_status)


def _validate(body: Any) -> str | None:
    if not isinstance(body, dict):
        return "request body must be a JSON object"
    if not isinstance(body.get("model"), str):
        return "'model' must be a string"
    messages = body.get("messages")
    if not isinstance(messages, list) or not messages:
        return "'messages' must be a non-empty list"
    for i, message in enumerate(messages):
        if not isinstance(message, dict):
            return f"messages[{i}] must be an object"
        if message.get("role") not in ROLES:
            return f"messages[{i}].role must be one of {', '.join(ROLES)}"
        if not isinstance(message.get("content"), str):
            return f"messages[{i}].content must be a string"
    if body.get("stream"):
        return "streaming responses are not supported"
    return None


def _root_text(messages: list[dict]) -> str:
    for message in messages:
        if message["role"] == "user":
            return message["content"]
    return messages[0]["content"]


def create_app(settings: GatewaySettings) -> FastAPI:
    """Build the proxy app. The upstream HTTP client lives for the app's lifespan."""
    check_backends(settings.config, settings.backends)
    for role in settings.roles:
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}")

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI) -> AsyncIterator[None]:
        async with httpx.AsyncClient(transport=settings.transport) as client:
            app.state.client = client
            yield

    app = FastAPI(title="pseudogate", lifespan=lifespan)

    @app.get("/healthz")
    async def healthz() -> PlainTextResponse:
        return PlainTextResponse("ok")

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request) -> JSONResponse:
        try:
            body = json.loads(await request.body())
        except ValueError:
            return _error(400, "invalid_request", "request body is not valid JSON")
        problem = _validate(body)
        if problem:
            return _error(400, "invalid_request", problem)

        messages: list[dict] = body["messages"]
        root = _root_text(messages)
        prior = None
        session_id = request.headers.get(SESSION_HEADER)
        if session_id:
            try:
                prior = settings.store.get(session_id)
            except SessionNotFound:
                return _error(404, "session_not_found", "unknown session id")
            if prior.source_digest != digest(root):
                return _error(409, "session_mismatch", "session belongs to a different conversation")

        selected = [i for i, m in enumerate(messages) if m["role"] in settings.roles]
        others = [m["content"] for i, m in enumerate(messages) if i not in selected]
        try:
            result = await run_in_threadpool(
                pseudonymize_many,
                [messages[i]["content"] for i in selected],
                settings.config,
                settings.backends,
                session=prior,
                context=others,
                digest_source=root,
            )
        except PseudoError as exc:
            logger.warning("pipeline failed in stage %s (%s)", exc.stage, type(exc).__name__)
            return _error(500, "pipeline_error", "pseudonymization failed", stage=exc.stage)

        session = result.session
        if session is not prior:
            try:
                settings.store.put(session)
            except SessionConflict:
                return _error(500, "pipeline_error", "session id collision", stage="session")
        mapping = session.mapping

        outbound = copy.deepcopy(body)
        rewritten = dict(zip(selected, (r.text for r in result.texts)))
        for i, message in enumerate(outbound["messages"]):
            if i in rewritten:
                message["content"] = rewritten[i]
            else:
                message["content"] = replace_direct(message["content"], mapping, settings.config.case_sensitive).text

        headers = {}
        auth = request.headers.get("authorization") or (
            f"Bearer {os.environ['UPSTREAM_API_KEY']}" if os.environ.get("UPSTREAM_API_KEY") else None
        )
        if auth:
            headers["Authorization"] = auth
        try:
            reply = await call_upstream(outbound, settings.upstream, app.state.client, headers, settings.sleep)
        except UpstreamError as exc:
            logger.warning("upstream failed after %d attempt(s), status %s", exc.attempts, exc.status)
            return _error(
                502,
                "upstream_error",
                str(exc),
                status=exc.status,
                attempts=exc.attempts,
                timeout=isinstance(exc, UpstreamTimeout),
            )

        answer = reply.body
        for choice in answer.get("choices") or []:
            message = choice.get("message") if isinstance(choice, dict) else None
            if isinstance(message, dict) and isinstance(message.get("content"), str):
                message["content"] = restore_output(message["content"], session)
        logger.info(
            "proxied request: %d message(s), %d span(s), %d mapped entity(ies), %d retry(ies)",
            len(messages),
            sum(len(s) for s in result.detected),
            len(mapping),
            reply.retries,
        )
        return JSONResponse(answer, headers={SESSION_HEADER: session.session_id})

    return app
