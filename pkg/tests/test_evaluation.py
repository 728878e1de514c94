import json

import pytest

from cropzoom.backends import scripted_backend
from cropzoom.dataset import FileUnreadable, QASample, SchemaError, load_dataset, parse_dataset_lines, write_dataset
from cropzoom.evaluation import (
    EvalReport,
    IdMismatch,
    LevelMismatch,
    aggregate_report,
    apo_iou,
    is_correct,
    load_report,
    score_accuracy,
)
from cropzoom.geometry import BBox, Resolution
from cropzoom.orchestrator import EpisodeResult, run_batch
from cropzoom.rewards import LexicalOracle
from conftest import FIXTURES
from oracles import window_overlap_iou

RES = Resolution(4096, 4096)
ORACLE = LexicalOracle()


def obj(sid, bbox, answer="red", task="vqa"):
    return QASample(sid, "sim://e", RES, "q", "object", "color/pattern", answer, BBox(*bbox), task)


def test_apo_iou_missing_is_zero():
    assert apo_iou(EpisodeResult("a"), obj("a", (1000, 1000, 1100, 1100))) == 0.0


def test_apo_iou_coincident_centres():
    s = obj("a", (1000, 1000, 1100, 1100))
    r = EpisodeResult("a", predicted_bbox=BBox(1040, 1040, 1060, 1060))
    assert apo_iou(r, s) == 1.0


def test_apo_iou_256_offset_is_one_third():
    s = obj("a", (1000, 1000, 1100, 1100))
    r = EpisodeResult("a", predicted_bbox=BBox(1256, 1000, 1356, 1100))
    assert window_overlap_iou(256, 0, 512) == pytest.approx(1 / 3)
    assert apo_iou(r, s) == pytest.approx(1 / 3, abs=1e-9)


def test_apo_iou_rejects_global():
    g = QASample("g", "sim://e", RES, "q", "global", "counting", "1")
    with pytest.raises(LevelMismatch):
        apo_iou(EpisodeResult("g"), g)


def test_threshold_is_strict():
    fixed = lambda v: (lambda a, b: v)
    assert not is_correct("x", "y", fixed(0.8))
    assert is_correct("x", "y", fixed(0.8000001))
    assert not is_correct(None, "y", fixed(1.0))
    assert not is_correct("  ", "y", fixed(1.0))


def test_fixture_dataset_loads():
    samples = load_dataset(FIXTURES / "dataset.jsonl")
    assert [s.sample_id for s in samples] == ["g1", "g2", "r1", "o1", "o2", "d1"]
    assert samples[0].image == str(FIXTURES / "scene.png")
    assert samples[-1].task == "downstream"


def test_dataset_schema_errors_collected():
    lines = [
        json.dumps({"id": "a", "image": "sim://x", "width": 10, "height": 10, "question": "q", "level": "global", "answer": "1"}),
        json.dumps({"id": "b", "image": "sim://x", "width": 10, "height": 10, "question": "q", "level": "object", "answer": "1"}),
        "{not json",
        json.dumps({"id": "c", "image": "sim://x", "width": 10, "height": 10, "question": "q", "level": "region", "answer": "1", "bbox": [0, 0, 20, 20]}),
        json.dumps({"id": "a", "image": "sim://x", "width": 10, "height": 10, "question": "q", "level": "global", "answer": "1"}),
        json.dumps({"id": "d", "image": "sim://x", "width": 10, "height": 10, "question": "q", "level": "global", "category": "bogus", "answer": "1"}),
    ]
    errors = []
    samples = parse_dataset_lines(lines, errors=errors)
    assert [s.sample_id for s in samples] == ["a"]
    assert [e.line for e in errors] == [2, 3, 4, 5, 6]
    with pytest.raises(SchemaError):
        parse_dataset_lines(lines)


def test_dataset_missing_file(tmp_path):
    with pytest.raises(FileUnreadable):
        load_dataset(tmp_path / "none.jsonl")


def test_dataset_round_trip(tmp_path):
    samples = load_dataset(FIXTURES / "dataset.jsonl")
    path = tmp_path / "copy.jsonl"
    write_dataset(samples, path)
    assert load_dataset(path) == samples


def test_fixture_report_hand_tally():
    samples = load_dataset(FIXTURES / "dataset.jsonl")
    results = run_batch(samples, scripted_backend(str(FIXTURES / "transcripts.jsonl")))
    report = aggregate_report(results, samples, ORACLE)
    assert report.accuracy == {"global": 0.5, "region": 1.0, "object": 0.5}
    assert report.average_accuracy == pytest.approx(3 / 5)
    assert report.macro_accuracy == pytest.approx(2 / 3)
    # r1 and d1 match exactly, o1 is offset by 256 px, o2 proposes nothing.
    assert report.apo_iou == pytest.approx((1 + 1 / 3 + 0 + 1) / 4)
    assert report.n_apo == 4 and report.n_samples == 6 and report.n_errors == 0
    assert report.per_category["global/urban-rural"] == {"accuracy": 0.0, "correct": 0, "total": 1}


def test_report_round_trip(tmp_path):
    samples = load_dataset(FIXTURES / "dataset.jsonl")
    results = run_batch(samples, scripted_backend(str(FIXTURES / "transcripts.jsonl")))
    report = aggregate_report(results, samples, ORACLE)
    path = tmp_path / "r.json"
    path.write_text(report.to_json())
    assert load_report(path) == report
    assert "APO IoU" in report.format_table()


def test_downstream_excluded_from_accuracy():
    s = [obj("a", (0, 0, 10, 10)), obj("t", (0, 0, 10, 10), task="downstream")]
    r = [EpisodeResult("a", final_answer="red"), EpisodeResult("t")]
    acc = score_accuracy(r, s, ORACLE)
    assert acc["counts"]["object"] == 1 and acc["accuracy"]["object"] == 1.0


def test_id_alignment():
    s = [obj("a", (0, 0, 10, 10))]
    with pytest.raises(IdMismatch):
        score_accuracy([EpisodeResult("b")], s, ORACLE)
    with pytest.raises(IdMismatch):
        score_accuracy([EpisodeResult("a"), EpisodeResult("a")], s, ORACLE)


def test_empty_levels_report_none():
    s = [obj("a", (0, 0, 10, 10))]
    rep = aggregate_report([EpisodeResult("a", final_answer="blue")], s, ORACLE)
    assert rep.accuracy["global"] is None and rep.accuracy["object"] == 0.0
    assert EvalReport.from_json(rep.to_json()) == rep
