import json

import pytest

from cropzoom.cli import main
from conftest import FIXTURES

DATASET = str(FIXTURES / "dataset.jsonl")
TRANSCRIPTS = str(FIXTURES / "transcripts.jsonl")


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_eval_writes_identical_reports(capsys, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        code, out, _ = run(capsys, "eval", "--dataset", DATASET, "--transcripts", TRANSCRIPTS, "--report-json", str(path))
        assert code == 0 and "APO IoU" in out
    assert a.read_bytes() == b.read_bytes()
    report = json.loads(a.read_text())
    assert report["average_accuracy"] == pytest.approx(0.6)


def test_eval_parallel_matches_serial(capsys, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run(capsys, "eval", "--dataset", DATASET, "--transcripts", TRANSCRIPTS, "--results-jsonl", str(a))
    run(capsys, "eval", "--dataset", DATASET, "--transcripts", TRANSCRIPTS, "--results-jsonl", str(b), "--workers", "4")
    assert a.read_bytes() == b.read_bytes()


def test_eval_record_then_replay(capsys, tmp_path):
    rec = tmp_path / "rec.jsonl"
    r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
    run(capsys, "eval", "--dataset", DATASET, "--transcripts", TRANSCRIPTS, "--record", str(rec), "--report-json", str(r1))
    run(capsys, "eval", "--dataset", DATASET, "--transcripts", str(rec), "--report-json", str(r2))
    assert r1.read_bytes() == r2.read_bytes()


def test_eval_missing_dataset_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--dataset", str(tmp_path / "nope.jsonl"), "--transcripts", TRANSCRIPTS)
    assert code == 2 and "nope.jsonl" in err


def test_eval_backend_selectors_exclusive(capsys):
    assert run(capsys, "eval", "--dataset", DATASET, "--transcripts", TRANSCRIPTS, "--endpoint", "http://x")[0] == 1
    assert run(capsys, "eval", "--dataset", DATASET)[0] == 1


def test_eval_unreachable_backend_exit_3(capsys):
    code, _, err = run(capsys, "eval", "--dataset", DATASET, "--endpoint", "http://127.0.0.1:9/generate", "--retries", "0")
    assert code == 3 and "unreachable" in err


def test_unknown_flag_and_bad_values_exit_1(capsys):
    assert run(capsys, "eval", "--dataset", DATASET, "--transcripts", TRANSCRIPTS, "--bogus")[0] == 1
    assert run(capsys, "eval", "--dataset", DATASET, "--transcripts", TRANSCRIPTS, "--workers", "0")[0] == 1
    assert run(capsys, "simulate", "--steps", "-1")[0] == 1
    assert run(capsys, "simulate", "--steps", "1", "--ablate", "answer")[0] == 1
    assert run(capsys, "score", "--transcript", TRANSCRIPTS, "--sample", DATASET, "--alpha", "0")[0] == 1


def _score(capsys, *extra):
    code, out, _ = run(capsys, "score", "--transcript", TRANSCRIPTS, "--sample", DATASET, "--sample-id", "r1", *extra)
    assert code == 0
    return json.loads(out)


def test_score_breakdown_and_beta_override(capsys, tmp_path):
    base = _score(capsys)
    assert (base["r_iou"], base["r_answer"], base["r_pattern"]) == (1.0, 1.0, 1.0)
    assert base["total"] == pytest.approx(3.05)
    assert _score(capsys, "--beta", "0.5")["total"] == pytest.approx(3.5)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"beta": 1.0}))
    assert _score(capsys, "--config", str(cfg))["total"] == pytest.approx(4.0)
    assert _score(capsys, "--config", str(cfg), "--beta", "0")["total"] == pytest.approx(3.0)


def test_score_single_transcript_any_id(capsys, tmp_path):
    t = tmp_path / "t.jsonl"
    t.write_text(json.dumps({"sample_id": "whatever", "stage": 1, "text": "<think>x</think><answer>3</answer>"}) + "\n")
    code, out, _ = run(capsys, "score", "--transcript", str(t), "--sample", DATASET, "--sample-id", "g1")
    assert code == 0 and json.loads(out)["r_answer"] == 1.0


def test_config_unknown_key_exit_1(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"betaa": 1.0}))
    assert run(capsys, "score", "--transcript", TRANSCRIPTS, "--sample", DATASET, "--config", str(cfg))[0] == 1


def test_simulate_zero_steps(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    code, out, _ = run(capsys, "simulate", "--steps", "0", "--trace", str(trace))
    assert code == 0 and "empty trace" in out
    assert trace.read_text() == ""


def test_simulate_short_trace(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    code, _, _ = run(capsys, "simulate", "--steps", "3", "--scenes", "1", "--trace", str(trace))
    lines = trace.read_text().splitlines()
    assert code == 0 and len(lines) == 3
    assert json.loads(lines[0])["step"] == 0


def test_simulate_ablate_four_rows(capsys, tmp_path):
    table = tmp_path / "table.json"
    code, out, _ = run(capsys, "simulate", "--steps", "2", "--scenes", "1", "--tail", "1", "--ablate", "rg,iou", "--table-json", str(table))
    assert code == 0 and "simulation proxies" in out
    rows = json.loads(table.read_text())["rows"]
    assert [r["mask"] for r in rows] == ["none", "rg", "iou", "rg+iou"]


def test_simulate_non_finite_exit_4(capsys):
    code, _, err = run(capsys, "simulate", "--steps", "5", "--scenes", "1", "--policy", "gaussian", "--lr", "1e200")
    assert code == 4 and "NonFiniteGradient" in err


@pytest.mark.parametrize("name", ["cloud_removal", "segmentation", "denoise", "image_editing"])
def test_parse_check_tool_transcripts(capsys, name):
    code, out, _ = run(capsys, "parse-check", str(FIXTURES / "transcripts" / f"{name}.txt"), "--downstream")
    info = json.loads(out)
    assert code == 0 and info["tool_call"]["name"] == name and info["pattern_valid"]


def test_parse_check_missing_file(capsys, tmp_path):
    assert run(capsys, "parse-check", str(tmp_path / "none.txt"))[0] == 2
