"""Batch evaluation: pseudonymize, query the upstream model, restore, score."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Any, Mapping

from .chat import user
from .errors import ConfigError, PseudoError, TooShortError
from .metrics import (
    TrigramEmbedder,
    classification_accuracy,
    corpus_bleu4,
    parse_nli_label,
    privacy_preservation_score,
    privacy_removal_rate,
    pseudonymization_distance,
    qa_f1_em,
    rouge_scores,
    semantic_correctness_score,
)
from .models import ReplacementPair
from .pipeline import BackendSet, PipelineConfig, pseudonymize_many, restore_output

logger = logging.getLogger(__name__)

TASKS = ("qa", "sum", "nli", "mt")

DEFAULT_TASK_TEMPLATES: dict[str, str] = {
    "qa": "Answer the question using the context. Reply with the answer only.\n\nContext: {context}\nQuestion: {question}",
    "sum": "Summarize the following document.\n\n{document}",
    "nli": (
        "Premise: {premise}\nHypothesis: {hypothesis}\n"
        "Does the premise entail the hypothesis? Answer entailment, neutral or contradiction."
    ),
    "mt": "Translate the following text into English. Reply with the translation only.\n\n{source}",
}


@dataclass(frozen=True)
class EvalItem:
    id: str
    task: str
    input: dict[str, str]
    gold: list[str]
    entities: list[str] | None


def load_dataset(path: str | Path) -> list[EvalItem]:
    """Read a JSONL evaluation set; raises ``OSError`` if unreadable and ``ConfigError`` if invalid."""
    items = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            items.append(_parse_item(row, f"{path}:{lineno}"))
    if not items:
        raise ConfigError(f"{path}: dataset is empty")
    return items


def _parse_item(row: Any, where: str) -> EvalItem:
    if not isinstance(row, dict):
        raise ConfigError(f"{where}: each line must be a JSON object")
    task = row.get("task")
    if task not in TASKS:
        raise ConfigError(f"{where}: unknown task {task!r}")
    fields = row.get("input")
    if not isinstance(fields, dict) or not all(isinstance(v, str) for v in fields.values()):
        raise ConfigError(f"{where}: 'input' must be an object of strings")
    gold = row.get("gold")
    golds = [gold] if isinstance(gold, str) else gold
    if not isinstance(golds, list) or not golds or not all(isinstance(g, str) for g in golds):
        raise ConfigError(f"{where}: 'gold' must be a string or a non-empty list of strings")
    entities = row.get("entities")
    texts = None
    if entities:
        texts = [e["text"] if isinstance(e, dict) else str(e) for e in entities]
    return EvalItem(str(row.get("id", where)), task, dict(fields), golds, texts)


def render_task(template: str, fields: Mapping[str, str]) -> str:
    out = template
    for name, value in fields.items():
        out = out.replace("{" + name + "}", value)
    return out


@dataclass
class EvalReport:
    config: dict
    tasks: dict[str, dict[str, float]]
    stages: dict[str, float | None]
    items: list[dict]
    counts: dict[str, int]
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "tasks": self.tasks,
            "stages": self.stages,
            "counts": self.counts,
            "diagnostics": self.diagnostics,
            "items": self.items,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _mean(values: list[float]) -> float | None:
    return fmean(values) if values else None


def run_eval(
    dataset_path: str | Path,
    config: PipelineConfig,
    backends: BackendSet,
    templates: Mapping[str, str] | None = None,
    casefold_prr: bool = False,
) -> EvalReport:
    """Evaluate one method combination over a JSONL dataset.

    Items are processed in file order with isolated sessions. A failing item
    is reported with its error stage and left out of the task metrics.
    """
    if backends.upstream is None:
        raise ConfigError("evaluation needs an upstream chat model")
    templates = {**DEFAULT_TASK_TEMPLATES, **(templates or {})}
    embedder = backends.embedder or TrigramEmbedder()
    items = load_dataset(dataset_path)

    per_task: dict[str, list[tuple[EvalItem, str]]] = {t: [] for t in TASKS}
    rows: list[dict] = []
    all_pairs: list[ReplacementPair] = []
    prr_values: list[float] = []
    scs_values: list[float] = []
    distances: list[float] = []
    counters: dict[str, int] = {}
    flags: set[str] = set()
    failed = 0

    for item in items:
        names = list(item.input)
        row: dict[str, Any] = {"id": item.id, "task": item.task}
        try:
            result = pseudonymize_many([item.input[n] for n in names], config, backends)
        except PseudoError as exc:
            failed += 1
            rows.append({**row, "error": {"stage": exc.stage, "type": type(exc).__name__}})
            continue
        for key, value in result.diagnostics.counts.items():
            counters[key] = counters.get(key, 0) + value
        flags |= result.diagnostics.flags
        mapping = result.session.mapping
        pseudo_fields = {n: r.text for n, r in zip(names, result.texts)}
        prompt = render_task(templates[item.task], item.input)
        pseudo_prompt = render_task(templates[item.task], pseudo_fields)
        try:
            answer = backends.upstream.complete([user(pseudo_prompt)])
        except PseudoError as exc:
            failed += 1
            rows.append({**row, "error": {"stage": "upstream", "type": type(exc).__name__}})
            continue
        restored = restore_output(answer, result.session)
        per_task[item.task].append((item, restored))

        detected = {occ.text for spans in result.detected for occ in spans} | set(mapping.originals)
        prr = privacy_removal_rate(detected, item.entities, casefold_prr) if item.entities else None
        if prr is not None:
            prr_values.append(prr)
        pairs = list(mapping)
        all_pairs.extend(pairs)
        distance = pseudonymization_distance(prompt, pseudo_prompt, embedder)
        distances.append(distance)
        scs = None
        if backends.scorer is not None:
            try:
                scs = semantic_correctness_score(pseudo_prompt, backends.scorer)
                scs_values.append(scs)
            except TooShortError:
                pass  # a single-token prompt has nothing to score
        rows.append(
            {
                **row,
                "entities_replaced": len(pairs),
                "prr": prr,
                "pps": privacy_preservation_score(pairs, embedder) if pairs else None,
                "scs": scs,
                "distance": distance,
                "score": _item_score(item, restored),
            }
        )

    task_scores = {task: _task_score(task, done) for task, done in per_task.items() if done}
    stages = {
        "prr": _mean(prr_values),
        "pps": privacy_preservation_score(all_pairs, embedder) if all_pairs else None,
        "scs": _mean(scs_values),
        "distance": _mean(distances),
    }
    counts = {
        "items": len(items),
        "scored": len(items) - failed,
        "failed": failed,
        "entities_replaced": len(all_pairs),
        **{f"task.{t}": len(done) for t, done in per_task.items() if done},
    }
    return EvalReport(
        config={"detector": config.detector, "generator": config.generator, "replacer": config.replacer, "seed": config.seed},
        tasks=task_scores,
        stages=stages,
        items=rows,
        counts=counts,
        diagnostics={"counts": dict(sorted(counters.items())), "flags": sorted(flags)},
    )


def _item_score(item: EvalItem, answer: str) -> dict[str, float]:
    if item.task == "qa":
        return {k: v * 100.0 for k, v in qa_f1_em(answer, item.gold).items()}
    if item.task == "sum":
        return {name: max(rouge_scores(answer, g)[name].f1 for g in item.gold) * 100.0 for name in ("rouge1", "rouge2", "rougeL")}
    if item.task == "nli":
        return {"accuracy": classification_accuracy([parse_nli_label(answer)], [item.gold[0]])}
    return {"bleu4": corpus_bleu4([answer], [item.gold])}


def _task_score(task: str, done: list[tuple[EvalItem, str]]) -> dict[str, float]:
    if task == "mt":
        return {"bleu4": corpus_bleu4([a for _, a in done], [i.gold for i, _ in done])}
    if task == "nli":
        return {"accuracy": classification_accuracy([parse_nli_label(a) for _, a in done], [i.gold[0] for i, _ in done])}
    scores = [_item_score(i, a) for i, a in done]
    return {key: fmean(s[key] for s in scores) for key in scores[0]}
