from __future__ import annotations

import json
import subprocess
import sys

import pytest

from pseudogate.cli import run

from corpus import BATES_SENTENCE, VINEYARD_PREMISE

VINEYARD_NAMES = ("Vosges", "Rhine Valley", "Marlenheim", "Strasbourg", "Thann", "Mulhouse")


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(
        "pipeline:\n  seed: 13\npredictor:\n  kind: echo\neval:\n  backend: echo\n  templates:\n    qa: '{context}'\n",
        encoding="utf-8",
    )
    return path


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "pseudonymize" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["restore", "--in", "x"]])
def test_usage_errors_exit_two(argv, capsys):
    assert run(argv) == 2
    assert "usage:" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pseudogate", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "restore" in proc.stdout


@pytest.mark.parametrize("text", [VINEYARD_PREMISE, VINEYARD_PREMISE + "\r\n" + BATES_SENTENCE + "\n"])
def test_pseudonymize_then_restore_is_byte_identical(tmp_path, config, text):
    src = tmp_path / "in.txt"
    src.write_bytes(text.encode("utf-8"))
    pseudo, session, back = tmp_path / "p.txt", tmp_path / "s.json", tmp_path / "back.txt"
    assert run(["pseudonymize", "--config", str(config), "--in", str(src), "--out", str(pseudo), "--session", str(session)]) == 0
    masked = pseudo.read_text(encoding="utf-8")
    for name in VINEYARD_NAMES:
        assert name not in masked
    assert len(json.loads(session.read_text(encoding="utf-8"))["pairs"]) >= 6
    assert run(["restore", "--session", str(session), "--in", str(pseudo), "--out", str(back)]) == 0
    assert back.read_bytes() == src.read_bytes()


def test_generative_config_round_trip(tmp_path):
    cfg = tmp_path / "gen.yaml"
    cfg.write_text("pipeline:\n  replacer: generative\npredictor:\n  kind: echo\n", encoding="utf-8")
    src = tmp_path / "in.txt"
    src.write_text(VINEYARD_PREMISE, encoding="utf-8")
    out, session, back = tmp_path / "o.txt", tmp_path / "s.json", tmp_path / "b.txt"
    assert run(["pseudonymize", "--config", str(cfg), "--in", str(src), "--out", str(out), "--session", str(session)]) == 0
    assert run(["restore", "--session", str(session), "--in", str(out), "--out", str(back)]) == 0
    assert back.read_text(encoding="utf-8") == VINEYARD_PREMISE


def test_runtime_errors_exit_one_without_entity_text(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("pipeline:\n  detector: prompt\n", encoding="utf-8")
    src = tmp_path / "in.txt"
    src.write_text(VINEYARD_PREMISE, encoding="utf-8")
    code = run(["pseudonymize", "--config", str(cfg), "--in", str(src), "--out", str(tmp_path / "o"), "--session", str(tmp_path / "s")])
    assert code == 1
    err = capsys.readouterr().err
    assert "error" in err
    for name in VINEYARD_NAMES:
        assert name not in err


def test_missing_input_file(tmp_path, config, capsys):
    code = run(["pseudonymize", "--config", str(config), "--in", str(tmp_path / "nope"), "--out", "o", "--session", "s"])
    assert code == 1 and "FileNotFoundError" in capsys.readouterr().err


def test_bad_session_file(tmp_path, capsys):
    session = tmp_path / "s.json"
    session.write_text("{}", encoding="utf-8")
    src = tmp_path / "in.txt"
    src.write_text("x", encoding="utf-8")
    assert run(["restore", "--session", str(session), "--in", str(src), "--out", str(tmp_path / "o")]) == 1


def test_eval_writes_report(tmp_path, config, capsys):
    data = tmp_path / "d.jsonl"
    data.write_text(
        json.dumps({"id": "a", "task": "qa", "input": {"context": BATES_SENTENCE, "question": "?"}, "gold": BATES_SENTENCE,
                    "entities": ["John Edward Bates", "Spalding", "London"]}) + "\n",
        encoding="utf-8",
    )
    report = tmp_path / "r.json"
    assert run(["-v", "eval", "--config", str(config), "--dataset", str(data), "--report", str(report)]) == 0
    doc = json.loads(report.read_text(encoding="utf-8"))
    assert doc["tasks"]["qa"]["f1"] == 100.0
    assert doc["stages"]["prr"] == 100.0
    err = capsys.readouterr().err
    for name in ("John Edward Bates", "Spalding", "London"):
        assert name not in err


def test_serve_rejects_bad_listen(config, capsys):
    assert run(["serve", "--config", str(config), "--listen", "nohost"]) == 2
