"""Benchmark scoring: thresholded answer accuracy and APO IoU.

An answer is correct when its similarity to the ground truth is strictly
greater than the threshold (0.8).  APO IoU compares the predicted and
ground-truth ROIs after both are widened to the same fixed-size window, and
counts a missing prediction as 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence

from . import defaults
from .dataset import QASample
from .geometry import expand_to_size, iou
from .orchestrator import EpisodeResult
from .protocol import Level
from .rewards import SimilarityOracle

LEVELS = tuple(level.value for level in Level)


class IdMismatch(ValueError):
    pass


class LevelMismatch(ValueError):
    pass


def _align(results: Sequence[EpisodeResult], samples: Sequence[QASample]) -> Dict[str, EpisodeResult]:
    by_id = {r.sample_id: r for r in results}
    if len(by_id) != len(results):
        raise IdMismatch("duplicate sample ids in results")
    ids = {s.sample_id for s in samples}
    if set(by_id) != ids:
        missing = sorted(ids - set(by_id))[:5]
        extra = sorted(set(by_id) - ids)[:5]
        raise IdMismatch(f"results/samples differ: missing={missing} extra={extra}")
    return by_id


def is_correct(answer: Optional[str], gt: str, oracle: SimilarityOracle, threshold: float = defaults.SIM_THRESHOLD) -> bool:
    if answer is None or not answer.strip():
        return False
    return oracle(answer, gt) > threshold


def apo_iou(result: EpisodeResult, sample: QASample, crop_size: int = defaults.CROP_SIZE) -> float:
    """IoU of the fixed-size windows around predicted and ground-truth ROIs."""
    if sample.level is Level.GLOBAL:
        raise LevelMismatch(f"{sample.sample_id}: APO IoU is undefined for global questions")
    if result.predicted_bbox is None:
        return 0.0
    res = sample.resolution
    size = min(crop_size, res.width, res.height)
    return iou(expand_to_size(result.predicted_bbox, size, res), expand_to_size(sample.bbox, size, res))


def score_accuracy(
    results: Sequence[EpisodeResult],
    samples: Sequence[QASample],
    oracle: SimilarityOracle,
    threshold: float = defaults.SIM_THRESHOLD,
) -> dict:
    """Per-level and overall accuracy over VQA samples.

    Returns a dict with ``accuracy`` (level -> fraction or None),
    ``average_accuracy`` (sample-weighted), ``macro_accuracy`` (mean of
    levels present), ``counts``, ``correct`` and ``per_category``.
    """
    by_id = _align(results, samples)
    correct = {lv: 0 for lv in LEVELS}
    counts = {lv: 0 for lv in LEVELS}
    per_cat: Dict[str, Dict[str, int]] = {}
    for s in samples:
        if s.task != "vqa":
            continue
        ok = is_correct(by_id[s.sample_id].final_answer, s.answer, oracle, threshold)
        lv = s.level.value
        counts[lv] += 1
        correct[lv] += ok
        cat = per_cat.setdefault(f"{lv}/{s.category or 'uncategorized'}", {"correct": 0, "total": 0})
        cat["total"] += 1
        cat["correct"] += ok
    accuracy = {lv: (correct[lv] / counts[lv] if counts[lv] else None) for lv in LEVELS}
    n = sum(counts.values())
    present = [a for a in accuracy.values() if a is not None]
    return {
        "accuracy": accuracy,
        "average_accuracy": sum(correct.values()) / n if n else None,
        "macro_accuracy": sum(present) / len(present) if present else None,
        "counts": counts,
        "correct": correct,
        "per_category": {
            k: {**v, "accuracy": v["correct"] / v["total"]} for k, v in sorted(per_cat.items())
        },
    }


@dataclass
class EvalReport:
    accuracy: Dict[str, Optional[float]]
    average_accuracy: Optional[float]
    macro_accuracy: Optional[float]
    apo_iou: Optional[float]
    counts: Dict[str, int]
    correct: Dict[str, int]
    per_category: Dict[str, dict] = field(default_factory=dict)
    n_samples: int = 0
    n_apo: int = 0
    n_errors: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def format_table(self) -> str:
        def pct(v):
            return "   -  " if v is None else f"{100 * v:6.2f}"

        lines = [
            "level     n      acc",
            *(f"{lv:<8}{self.counts[lv]:>4}  {pct(self.accuracy[lv])}" for lv in LEVELS),
            f"{'avg':<8}{sum(self.counts.values()):>4}  {pct(self.average_accuracy)}",
            f"{'macro':<8}{'':>4}  {pct(self.macro_accuracy)}",
            f"APO IoU ({self.n_apo} samples): {pct(self.apo_iou)}",
            f"errors: {self.n_errors}",
        ]
        if self.per_category:
            lines.append("")
            lines.append("category                         n      acc")
            for name, c in self.per_category.items():
                lines.append(f"{name:<30}{c['total']:>4}  {pct(c['accuracy'])}")
        return "\n".join(lines) + "\n"


def aggregate_report(
    results: Sequence[EpisodeResult],
    samples: Sequence[QASample],
    oracle: SimilarityOracle,
    threshold: float = defaults.SIM_THRESHOLD,
    crop_size: int = defaults.CROP_SIZE,
) -> EvalReport:
    acc = score_accuracy(results, samples, oracle, threshold)
    by_id = _align(results, samples)
    apo = [apo_iou(by_id[s.sample_id], s, crop_size) for s in samples if s.level is not Level.GLOBAL]
    return EvalReport(
        apo_iou=sum(apo) / len(apo) if apo else None,
        n_samples=len(samples),
        n_apo=len(apo),
        n_errors=sum(1 for r in results if r.error is not None),
        **acc,
    )


def load_report(path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_json(fh.read())
