import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cropzoom.geometry import BBox
from cropzoom.protocol import TaskKind, parse_response
from cropzoom.rewards import (
    LexicalOracle,
    RewardConfig,
    SynonymLexicon,
    composite_reward,
    lexical_similarity,
    normalize_answer,
    region_guided_from_distance,
    reward_answer,
    reward_iou,
    reward_pattern,
    reward_region_guided,
    score_stages,
)
from oracles import sigmoid_scalar

CROP = TaskKind.for_level("object", "color/pattern")
GLOBAL = TaskKind.for_level("global", "counting")
TOOL = TaskKind.for_level("region", downstream=True)

# sigmoid(200 / 200.2), evaluated independently.
RG_AT_200 = 0.730862117780004


def test_rg_frozen_value_matches_oracle():
    assert sigmoid_scalar(200 / 200.2) == pytest.approx(RG_AT_200, abs=1e-15)
    assert region_guided_from_distance(200.0) == pytest.approx(RG_AT_200, abs=1e-12)


def test_rg_examples():
    assert region_guided_from_distance(0.0) == pytest.approx(1.0, abs=1e-9)
    gt = BBox(0, 0, 10, 10)
    assert reward_region_guided(gt, gt) == pytest.approx(1.0, abs=1e-9)
    assert reward_region_guided(None, gt) == 0.0
    far = BBox(1e6, 1e6, 1e6 + 10, 1e6 + 10)
    assert 0.5 < reward_region_guided(far, gt) < 0.5001


def test_rg_monotone_and_bounded():
    d = np.sort(np.random.default_rng(3).uniform(0, 5000, 1000))
    v = [region_guided_from_distance(x) for x in d]
    assert all(a > b for a, b in zip(v, v[1:]))
    assert all(0.5 < x <= 1.0 for x in v)


def test_rg_nonzero_where_iou_is_zero():
    gt = BBox(0, 0, 64, 64)
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, y = rng.uniform(100, 480, 2)
        pred = BBox(x, y, x + 32, y + 32)
        assert reward_iou(pred, gt) == 0.0
        assert reward_region_guided(pred, gt) > 0.5


@given(st.floats(0, 1e5), st.floats(1e-3, 1e4))
def test_rg_larger_alpha_rewards_more(d, alpha):
    lo = region_guided_from_distance(d, RewardConfig(alpha=alpha))
    hi = region_guided_from_distance(d, RewardConfig(alpha=alpha * 2))
    assert hi >= lo


def test_iou_reward_absent_is_zero():
    assert reward_iou(None, BBox(0, 0, 1, 1)) == 0.0
    assert reward_iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0


def test_answer_threshold_strict():
    oracle = lambda a, b: 0.8
    assert reward_answer("x", "y", oracle) == pytest.approx(0.8)
    assert reward_answer("x", "y", lambda a, b: 0.81) == 1.0
    assert reward_answer(None, "y", oracle) == 0.0
    assert reward_answer("x", "y", lambda a, b: 1.7) == 1.0
    assert reward_answer("x", "y", lambda a, b: -1.0) == 0.0


def test_lexical_oracle_examples():
    o = LexicalOracle()
    assert o("Car", "car.") == 1.0
    assert o("car", "automobile") == pytest.approx(0.95)
    assert o("Vessel", "ship") == pytest.approx(0.92)
    assert o("red roof", "red") == pytest.approx(0.5)
    assert o("", "x") == 0.0
    assert reward_answer("automobile", "car", o) == 1.0


def test_normalize_answer():
    assert normalize_answer("  Color/Pattern!! ") == "color/pattern"


def test_lexicon_parsing(tmp_path):
    path = tmp_path / "lex.tsv"
    path.write_text("# comment\nfoo\tbar\t0.7\n\n")
    lex = SynonymLexicon.load(path)
    assert lexical_similarity("bar", "foo", lex) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        SynonymLexicon.from_lines(["a\tb"])
    with pytest.raises(ValueError):
        SynonymLexicon.from_lines(["a\tb\t1.5"])


def test_pattern_reward():
    good1 = parse_response('<think>[{"bbox_2d": [1,1,4,4], "label": "t"}]</think>')
    good2 = parse_response("<think>ok</think><answer>red</answer>")
    assert reward_pattern([(good1, 1), (good2, 2)], CROP) == 1.0
    assert reward_pattern([(good1, 1), (parse_response("red"), 2)], CROP) == 0.0
    assert reward_pattern([], CROP) == 0.0


def test_composite_total_and_mask():
    b = composite_reward(0.5, 0.9, 1.0, 1.0)
    assert b.total == pytest.approx(0.5 + 0.9 + 1.0 + 0.05)
    m = composite_reward(0.5, 0.9, 1.0, 1.0, mask={"r_rg": False})
    assert m.r_rg == 0.0 and m.total == pytest.approx(1.55)
    assert composite_reward(0, 0, 0, 1, RewardConfig(beta=0.5)).total == pytest.approx(0.5)
    with pytest.raises(KeyError):
        composite_reward(0, 0, 0, 0, mask={"bogus": False})


@given(st.floats(0, 1), st.floats(0.5, 1), st.floats(0, 1), st.sampled_from([0.0, 1.0]))
def test_composite_is_sum(a, b, c, d):
    t = composite_reward(a, b, c, d).total
    assert t == pytest.approx(a + b + c + 0.05 * d)


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(alpha=0)
    with pytest.raises(ValueError):
        RewardConfig(beta=-1)
    with pytest.raises(ValueError):
        RewardConfig(sim_threshold=0)


def test_score_stages_cropping():
    s1 = parse_response('<think>[{"bbox_2d": [0, 0, 10, 10], "label": "t"}]</think>')
    s2 = parse_response("<think>ok</think><answer>red</answer>")
    gt = BBox(0, 0, 10, 10)
    b = score_stages(CROP, s1, s2, "red", gt, LexicalOracle())
    assert (b.r_iou, b.r_answer, b.r_pattern) == (1.0, 1.0, 1.0)
    assert b.r_rg == pytest.approx(1.0)
    assert b.total == pytest.approx(3.05)
    never = score_stages(CROP, parse_response("<think>x</think>"), None, "red", gt, LexicalOracle())
    assert never.total == 0.0


def test_score_stages_global_ignores_boxes():
    s1 = parse_response("<think>count</think><answer>3</answer>")
    b = score_stages(GLOBAL, s1, None, "3", None, LexicalOracle())
    assert (b.r_iou, b.r_rg, b.r_answer, b.r_pattern) == (0.0, 0.0, 1.0, 1.0)


def test_score_stages_downstream_uses_tool_box():
    s1 = parse_response('<think>x</think><tool_call>{"name": "denoise", "arguments": {"bbox_2d": [0,0,10,10]}}</tool_call>')
    b = score_stages(TOOL, s1, None, "", BBox(0, 0, 10, 10), LexicalOracle())
    assert b.r_iou == 1.0 and b.r_answer == 0.0 and b.r_pattern == 1.0


def test_score_stages_explicit_pred_overrides():
    s1 = parse_response('<think>[{"bbox_2d": [0, 0, 10, 10], "label": "t"}]</think>')
    s2 = parse_response("<answer>no</answer>")
    b = score_stages(CROP, s1, s2, "red", BBox(0, 0, 10, 10), LexicalOracle(), pred_bbox=BBox(100, 100, 110, 110))
    assert b.r_iou == 0.0
    assert b.r_rg == pytest.approx(sigmoid_scalar(200 / (math.hypot(100, 100) + 0.2)))
