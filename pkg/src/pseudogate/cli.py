"""Command-line entry point: pseudonymize, restore, serve, eval."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .errors import PseudoError
from .pipeline import MappingSession, pseudonymize, restore_output

logger = logging.getLogger("pseudogate")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors raise instead of exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(self, message)


class _UsageError(Exception):
    def __init__(self, parser: argparse.ArgumentParser, message: str) -> None:
        super().__init__(message)
        self.parser = parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pseudogate", description="Reversible pseudonymization for prompts sent to hosted LLMs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress (counts only) to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pseudonymize", help="pseudonymize a text file and write its session")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--session", required=True, type=Path, help="where to write the session JSON")

    r = sub.add_parser("restore", help="restore originals in a text file using a session")
    r.add_argument("--session", required=True, type=Path)
    r.add_argument("--in", dest="input", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("serve", help="run the chat-completions gateway")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--listen", default="127.0.0.1:8080", help="HOST:PORT (default %(default)s)")

    e = sub.add_parser("eval", help="evaluate a method combination on a JSONL dataset")
    e.add_argument("--config", required=True, type=Path)
    e.add_argument("--dataset", required=True, type=Path)
    e.add_argument("--report", required=True, type=Path)
    return parser


def _read(path: Path) -> str:
    with path.open(encoding="utf-8", newline="") as fh:
        return fh.read()


def _write(path: Path, text: str) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _cmd_pseudonymize(args: argparse.Namespace) -> int:
    from .config import load_config

    app = load_config(args.config)
    result, session = pseudonymize(_read(args.input), app.pipeline, app.backends)
    _write(args.out, result.text)
    _write(args.session, session.to_json() + "\n")
    logger.info("replaced %d span(s) using %d mapping pair(s)", len(result.offset_map), len(session.mapping))
    return 0


def _cmd_restore(args: argparse.Namespace) -> int:
    session = MappingSession.from_json(_read(args.session))
    _write(args.out, restore_output(_read(args.input), session))
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .config import load_config
    from .gateway import DirectorySessionStore, GatewaySettings, InMemorySessionStore, UpstreamPolicy, create_app

    app = load_config(args.config)
    host, _, port = args.listen.rpartition(":")
    if not host or not port.isdigit():
        raise _UsageError(build_parser(), f"--listen expects HOST:PORT, got {args.listen!r}")
    if "base_url" not in app.upstream:
        raise PseudoError("config has no upstream.base_url")
    policy = UpstreamPolicy(
        app.upstream["base_url"],
        int(app.upstream.get("timeout_ms", 60_000)),
        int(app.upstream.get("max_retries", 2)),
        int(app.upstream.get("backoff_base_ms", 250)),
    )
    session_dir = app.gateway.get("session_dir")
    store = DirectorySessionStore(app.resolve(session_dir)) if session_dir else InMemorySessionStore()
    settings = GatewaySettings(app.pipeline, app.backends, policy, store, tuple(app.gateway.get("roles", ["user"])))
    uvicorn.run(create_app(settings), host=host, port=int(port), log_level="info")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from .config import load_config
    from .evaluation import run_eval

    app = load_config(args.config)
    report = run_eval(
        args.dataset,
        app.pipeline,
        app.backends,
        templates=app.eval.get("templates"),
        casefold_prr=bool(app.eval.get("casefold_prr", False)),
    )
    _write(args.report, report.to_json())
    logger.info("evaluated %d item(s), %d failed", report.counts["items"], report.counts["failed"])
    return 0


COMMANDS = {
    "pseudonymize": _cmd_pseudonymize,
    "restore": _cmd_restore,
    "serve": _cmd_serve,
    "eval": _cmd_eval,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; 0 on success, 1 on runtime failure, 2 on usage error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"{exc.parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"{exc.parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (PseudoError, OSError, ValueError) as exc:
        # Error messages never carry entity text; they name stages and files.
        stage = getattr(exc, "stage", None)
        prefix = f"{stage} stage: " if stage else ""
        print(f"pseudogate: error: {prefix}{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
