"""Reward components for localization-driven VQA rollouts.

The composite reward is ``r_iou + r_rg + r_answer + beta * r_pattern`` where
``r_rg`` is the region-guided term ``sigmoid(alpha / (distance + eps))``.
Unlike IoU, ``r_rg`` stays informative for proposals that miss the target
entirely, which is what makes it useful on very large images.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

from . import defaults
from .geometry import BBox, center_distance, iou
from .protocol import ParsedResponse, TaskKind, TaskMode, validate_pattern

SimilarityOracle = Callable[[str, str], float]

COMPONENTS = ("r_iou", "r_rg", "r_answer", "r_pattern")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = defaults.ALPHA
    eps_rg: float = defaults.EPS_RG
    beta: float = defaults.BETA
    sim_threshold: float = defaults.SIM_THRESHOLD

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.eps_rg > 0:
            raise ValueError("eps_rg must be positive")
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if not 0 < self.sim_threshold <= 1:
            raise ValueError("sim_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class RewardBreakdown:
    r_iou: float
    r_rg: float
    r_answer: float
    r_pattern: float
    total: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "r_iou": self.r_iou,
            "r_rg": self.r_rg,
            "r_answer": self.r_answer,
            "r_pattern": self.r_pattern,
            "total": self.total,
        }


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def reward_iou(pred: Optional[BBox], gt: Optional[BBox]) -> float:
    """IoU with the target when a valid box was produced, else 0."""
    if pred is None or gt is None:
        return 0.0
    return iou(pred, gt)


def reward_region_guided(pred: Optional[BBox], gt: BBox, cfg: RewardConfig = RewardConfig()) -> float:
    """Dense localization reward, decreasing in centre distance.

    Lies in (0.5, 1] for any present prediction; 0 when no box was produced.
    ``pred`` and ``gt`` must be in the same pixel space (the one ``alpha`` is
    tuned for).
    """
    if pred is None:
        return 0.0
    return region_guided_from_distance(center_distance(pred, gt), cfg)


def region_guided_from_distance(distance: float, cfg: RewardConfig = RewardConfig()) -> float:
    return sigmoid(cfg.alpha / (distance + cfg.eps_rg))


def reward_answer(pred: Optional[str], gt: str, oracle: SimilarityOracle, threshold: float = defaults.SIM_THRESHOLD) -> float:
    if pred is None:
        return 0.0
    sim = float(oracle(pred, gt))
    sim = min(max(sim, 0.0), 1.0)
    return 1.0 if sim > threshold else sim


def reward_pattern(stages: Iterable[Tuple[ParsedResponse, int]], kind: TaskKind) -> float:
    """1 iff every produced ``(response, stage)`` pair satisfies the grammar."""
    stages = list(stages)
    if not stages:
        return 0.0
    return float(all(validate_pattern(p, kind, stage) for p, stage in stages))


def composite_reward(
    r_iou: float,
    r_rg: float,
    r_answer: float,
    r_pattern: float,
    cfg: RewardConfig = RewardConfig(),
    mask: Optional[Mapping[str, bool]] = None,
) -> RewardBreakdown:
    """Combine components; ``mask[name] = False`` zeroes that component first."""
    values = {"r_iou": r_iou, "r_rg": r_rg, "r_answer": r_answer, "r_pattern": r_pattern}
    if mask:
        unknown = set(mask) - set(COMPONENTS)
        if unknown:
            raise KeyError(f"unknown reward components: {sorted(unknown)}")
        values = {k: (v if mask.get(k, True) else 0.0) for k, v in values.items()}
    total = values["r_iou"] + values["r_rg"] + values["r_answer"] + cfg.beta * values["r_pattern"]
    return RewardBreakdown(total=total, **values)


# --- answer similarity ------------------------------------------------------

_WS = re.compile(r"\s+")
_PUNCT = re.compile(r"[^\w\s/-]")


def normalize_answer(text: str) -> str:
    text = _PUNCT.sub(" ", text.lower())
    return _WS.sub(" ", text).strip()


@dataclass
class SynonymLexicon:
    """Symmetric table of term-pair similarities."""

    pairs: Dict[Tuple[str, str], float] = field(default_factory=dict)

    def add(self, a: str, b: str, similarity: float) -> None:
        if not 0.0 <= similarity <= 1.0:
            raise ValueError(f"similarity out of range: {similarity}")
        a, b = normalize_answer(a), normalize_answer(b)
        self.pairs[(a, b)] = similarity
        self.pairs[(b, a)] = similarity

    def lookup(self, a: str, b: str) -> Optional[float]:
        return self.pairs.get((a, b))

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "SynonymLexicon":
        """Parse ``term_a<TAB>term_b<TAB>similarity`` records; ``#`` starts a comment."""
        lex = cls()
        for lineno, line in enumerate(lines, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"lexicon line {lineno}: expected 3 tab-separated fields")
            lex.add(parts[0], parts[1], float(parts[2]))
        return lex

    @classmethod
    def load(cls, path) -> "SynonymLexicon":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    @classmethod
    def bundled(cls) -> "SynonymLexicon":
        ref = resources.files("cropzoom.assets").joinpath("lexicon.tsv")
        return cls.from_lines(ref.read_text(encoding="utf-8").splitlines())


def lexical_similarity(a: str, b: str, lexicon: Optional[SynonymLexicon] = None) -> float:
    """Similarity in [0, 1]: exact match, then lexicon, then token Jaccard."""
    na, nb = normalize_answer(a), normalize_answer(b)
    if na == nb:
        return 1.0
    if lexicon is not None:
        hit = lexicon.lookup(na, nb)
        if hit is not None:
            return hit
    ta, tb = set(na.split()), set(nb.split())
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


class LexicalOracle:
    """Default :data:`SimilarityOracle` backed by a synonym lexicon."""

    def __init__(self, lexicon: Optional[SynonymLexicon] = None):
        self.lexicon = lexicon if lexicon is not None else SynonymLexicon.bundled()

    def __call__(self, a: str, b: str) -> float:
        return lexical_similarity(a, b, self.lexicon)


# --- whole-trajectory scoring -------------------------------------------------


def score_stages(
    kind: TaskKind,
    stage1: ParsedResponse,
    stage2: Optional[ParsedResponse],
    gt_answer: str,
    gt_bbox: Optional[BBox],
    oracle: SimilarityOracle,
    cfg: RewardConfig = RewardConfig(),
    mask: Optional[Mapping[str, bool]] = None,
    pred_bbox: Optional[BBox] = None,
) -> RewardBreakdown:
    """All four components and the composite for one rollout.

    Boxes are compared in whatever space ``pred_bbox``/``gt_bbox`` share;
    ``pred_bbox`` defaults to the first stage-1 proposal (or tool-call box).
    Localization terms apply only to tasks that require a box.
    """
    if pred_bbox is None:
        if kind.mode is TaskMode.DOWNSTREAM_TOOL and stage1.tool_call is not None:
            pred_bbox = stage1.tool_call.bbox
        else:
            pred_bbox = stage1.first_bbox
    needs_box = kind.mode is not TaskMode.GLOBAL_QA and gt_bbox is not None
    r_i = reward_iou(pred_bbox, gt_bbox) if needs_box else 0.0
    r_g = reward_region_guided(pred_bbox, gt_bbox, cfg) if needs_box else 0.0
    final = stage2 if stage2 is not None else stage1
    if kind.mode is TaskMode.DOWNSTREAM_TOOL:
        r_a = 0.0
    else:
        r_a = reward_answer(final.answer, gt_answer, oracle, cfg.sim_threshold)
    produced = [(stage1, 1)] + ([(stage2, 2)] if stage2 is not None else [])
    if kind.mode is TaskMode.CROPPING_QA and stage2 is None:
        # A cropping task that never reached stage 2 has no answer stage.
        r_p = 0.0
    else:
        r_p = reward_pattern(produced, kind)
    return composite_reward(r_i, r_g, r_a, r_p, cfg, mask)
