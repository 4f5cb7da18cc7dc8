"""YAML configuration shared by the CLI subcommands.

Example::

    pipeline:
      detector: gazetteer        # gazetteer | prompt | tag_mark | tag_rep
      generator: random          # random | prompt
      replacer: direct           # direct | prompt | generative
      seed: 13
    resources:
      gazetteer: gazetteer.tsv   # defaults to the bundled lists
      pool: pool.tsv
    local_llm:                   # needed by any prompt-based stage
      base_url: http://127.0.0.1:8081
      model: qwen2.5-1.5b-instruct
    predictor:
      kind: echo                 # echo | tagger | remote
    upstream:
      base_url: https://api.example.com
      timeout_ms: 60000
      max_retries: 2
      backoff_base_ms: 250
    gateway:
      roles: [user]
      session_dir: sessions      # omit for in-memory sessions
    eval:
      backend: echo              # echo | upstream
      embedder: fallback         # fallback | {base_url, model}
      templates: {qa: "{context}"}

Relative paths are resolved against the config file's directory. API keys
are read from the environment variable named by ``api_key_env``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .chat import HttpChatClient
from .detection import Gazetteer
from .errors import ConfigError
from .generation import CandidatePool
from .lm import RemoteCompletionPredictor
from .metrics import HttpEmbedder, TrigramEmbedder
from .mocks import EchoPredictor, ScriptedChat, ScriptedChatClient, TaggingPredictor
from .pipeline import BackendSet, PipelineConfig
from .replacement import PromptTemplateG

_TEMPLATE_KEYS = {
    "detection": "detection_template",
    "generation": "generation_template",
    "replacement": "replacement_template",
    "g": "g_template",
}


@dataclass
class AppConfig:
    pipeline: PipelineConfig
    backends: BackendSet
    upstream: dict[str, Any] = field(default_factory=dict)
    gateway: dict[str, Any] = field(default_factory=dict)
    eval: dict[str, Any] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def resolve(self, value: str) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path


def _section(data: dict, name: str) -> dict:
    value = data.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    return value


def _api_key(section: dict) -> str | None:
    env = section.get("api_key_env")
    return os.environ.get(env) if env else None


def parse_pipeline(section: dict) -> PipelineConfig:
    known = {"detector", "generator", "replacer", "seed", "case_sensitive", "templates"}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown pipeline keys: {', '.join(sorted(unknown))}")
    kwargs: dict[str, Any] = {k: section[k] for k in ("detector", "generator", "replacer", "seed", "case_sensitive") if k in section}
    for key, value in (section.get("templates") or {}).items():
        if key not in _TEMPLATE_KEYS:
            raise ConfigError(f"unknown template {key!r}")
        kwargs[_TEMPLATE_KEYS[key]] = value
    try:
        return PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> AppConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(data, path.parent)


def build_config(data: dict, base_dir: Path = Path(".")) -> AppConfig:
    pipeline = parse_pipeline(_section(data, "pipeline"))
    app = AppConfig(
        pipeline,
        BackendSet(),
        upstream=_section(data, "upstream"),
        gateway=_section(data, "gateway"),
        eval=_section(data, "eval"),
        base_dir=base_dir,
    )
    resources = _section(data, "resources")
    backends = app.backends
    backends.gazetteer = (
        Gazetteer.from_file(app.resolve(resources["gazetteer"])) if "gazetteer" in resources else Gazetteer.default()
    )
    backends.pool = CandidatePool.from_file(app.resolve(resources["pool"])) if "pool" in resources else CandidatePool.default()

    local = _section(data, "local_llm")
    if local:
        backends.local_llm = HttpChatClient(
            local["base_url"], local.get("model", "local"), _api_key(local), timeout=float(local.get("timeout_s", 60))
        )

    g = PromptTemplateG(pipeline.g_template)
    predictor = _section(data, "predictor")
    kind = predictor.get("kind")
    if kind == "echo":
        backends.predictor = EchoPredictor(g)
    elif kind == "tagger":
        style = "replace" if pipeline.detector == "tag_rep" else "mark"
        backends.predictor = TaggingPredictor(backends.gazetteer, style, g)
    elif kind == "remote":
        backends.predictor = RemoteCompletionPredictor(
            predictor["base_url"], predictor.get("model", "local"), _api_key(predictor), top_k=int(predictor.get("top_k", 5))
        )
    elif kind is not None:
        raise ConfigError(f"unknown predictor kind {kind!r}")

    scorer = _section(data, "scorer")
    if scorer:
        backends.scorer = RemoteCompletionPredictor(scorer["base_url"], scorer.get("model", "local"), _api_key(scorer))

    embedder = app.eval.get("embedder", "fallback")
    if isinstance(embedder, dict):
        backends.embedder = HttpEmbedder(embedder["base_url"], embedder.get("model", "embed"), _api_key(embedder))
    elif embedder == "fallback":
        backends.embedder = TrigramEmbedder()
    else:
        raise ConfigError(f"unknown embedder {embedder!r}")

    backend = app.eval.get("backend", "upstream")
    if backend == "echo":
        backends.upstream = ScriptedChatClient(ScriptedChat.echo())
    elif backend == "upstream":
        if app.upstream.get("base_url"):
            backends.upstream = HttpChatClient(
                app.upstream["base_url"],
                app.eval.get("model", app.upstream.get("model", "default")),
                os.environ.get("UPSTREAM_API_KEY"),
                timeout=int(app.upstream.get("timeout_ms", 60_000)) / 1000,
            )
    else:
        raise ConfigError(f"unknown eval backend {backend!r}")
    return app
