"""Minimal chat-completions client used by the prompt-based stages."""

from __future__ import annotations

import logging
from typing import Protocol

import httpx

from .errors import UpstreamError, UpstreamTimeout

logger = logging.getLogger(__name__)

Message = dict[str, str]


class ChatClient(Protocol):
    """Anything that can answer a list of chat messages with assistant text.

    Implementations raise :class:`UpstreamError` on transport or HTTP failure
    and must be safe to call from several threads.
    """

    def complete(self, messages: list[Message]) -> str: ...


def user(content: str) -> Message:
    return {"role": "user", "content": content}


def assistant(content: str) -> Message:
    return {"role": "assistant", "content": content}


def extract_content(payload: dict) -> str:
    """Pull ``choices[0].message.content`` out of a chat-completions body."""
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise UpstreamError(f"unexpected chat response shape: {exc!r}") from exc
    return content if isinstance(content, str) else ""


class HttpChatClient:
    """Synchronous client for a locally deployed chat-completions endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str = "local",
        api_key: str | None = None,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        temperature: float = 0.0,
    ) -> None:
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.model = model
        self.temperature = temperature
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport)

    def complete(self, messages: list[Message]) -> str:
        body = {"model": self.model, "messages": messages, "temperature": self.temperature}
        try:
            response = self._client.post("/v1/chat/completions", json=body)
        except httpx.TimeoutException as exc:
            raise UpstreamTimeout("local model timed out") from exc
        except httpx.HTTPError as exc:
            raise UpstreamError(f"local model unreachable: {exc.__class__.__name__}") from exc
        if response.status_code >= 400:
            raise UpstreamError(f"local model returned HTTP {response.status_code}", status=response.status_code)
        return extract_content(response.json())

    def close(self) -> None:
        self._client.close()
