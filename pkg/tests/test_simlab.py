import math

import numpy as np
import pytest

from cropzoom.backends import BackendRequest
from cropzoom.geometry import BBox, ImageRef, Resolution, iou
from cropzoom.protocol import Message
from cropzoom.rewards import reward_iou, reward_region_guided
from cropzoom import simlab


def test_scene_deterministic_and_disjoint():
    a, b = simlab.generate_scene(3), simlab.generate_scene(3)
    assert [o.bbox for o in a.objects] == [o.bbox for o in b.objects]
    assert [q.sample for q in a.questions] == [q.sample for q in b.questions]
    boxes = [o.bbox for o in a.objects] + [r.bbox for r in a.regions]
    for i, x in enumerate(boxes):
        for y in boxes[i + 1:]:
            assert iou(x, y) == 0.0
    assert simlab.generate_scene(4).objects != a.objects


def test_scene_question_mix():
    scene = simlab.generate_scene(0)
    levels = [q.sample.level.value for q in scene.questions]
    assert levels == ["global"] + ["region"] * 2 + ["object"] * 4
    for q in scene.questions[1:]:
        assert q.sample.bbox == q.target and q.answer != q.decoy
    assert all(o.bbox.width == 512 for o in scene.objects)
    assert len(simlab.cropping_questions(simlab.default_suite(0))) == 18


def test_placement_overflow():
    cfg = simlab.SceneConfig(resolution=Resolution(1024, 1024), n_objects=6, n_regions=0,
                             object_questions=1, region_questions=0, max_tries=50)
    with pytest.raises(simlab.PlacementOverflow):
        simlab.generate_scene(0, cfg)


def test_rng_stream_is_pcg64():
    assert simlab.make_rng(7).integers(0, 2**32, 3).tolist() == np.random.Generator(np.random.PCG64(7)).integers(0, 2**32, 3).tolist()


def _stage2_request(q, crop):
    return BackendRequest((Message("user", "q", (crop,)),), sample_id=q.sample.sample_id, stage=2)


def test_perception_stub_rule():
    scene = simlab.generate_scene(0)
    stub = simlab.PerceptionStub(scene)
    q = scene.questions[3]
    cx, cy = q.target.center
    hit = ImageRef(scene.uri, Resolution(512, 512), offset=(int(cx) - 100, int(cy) - 100), source_resolution=scene.resolution)
    far_x = 0 if cx > 2048 else 3584
    miss = ImageRef(scene.uri, Resolution(512, 512), offset=(far_x, 0), source_resolution=scene.resolution)
    assert f"<answer>{q.answer}</answer>" in stub.generate(_stage2_request(q, hit)).text
    assert f"<answer>{q.decoy}</answer>" in stub.generate(_stage2_request(q, miss)).text
    g = scene.questions[0]
    text = stub.generate(BackendRequest((), sample_id=g.sample.sample_id, stage=1)).text
    assert f"<answer>{g.answer}</answer>" in text


def test_rollout_hit_scores_full_answer():
    scene = simlab.generate_scene(0)
    q = scene.questions[4]
    policy = simlab.GaussianCenterPolicy(1)
    action = q.target.center
    breakdown, box = simlab.rollout(policy, q, 0, action, simlab.PerceptionStub(scene), simlab.SimConfig(), simlab.LexicalOracle())
    assert breakdown.r_answer == 1.0 and breakdown.r_pattern == 1.0
    assert breakdown.r_rg == pytest.approx(1.0, abs=1e-3)
    assert box.center == pytest.approx(q.target.center)


def test_grid_policy_shapes_and_sampling():
    p = simlab.GridSoftmaxPolicy(2, grid=4)
    assert p.probs(0) == pytest.approx(np.full(16, 1 / 16))
    acts = p.sample(1, simlab.make_rng(0), 5)
    assert len(acts) == 5 and all(0 <= a < 16 for a in acts)
    assert p.grad_log_prob(1, acts).shape == (5, 32)
    assert p.center(0) == (512.0, 512.0)
    assert p.proposal(15).within(p.resolution)


def test_gaussian_gradient_matches_fd():
    from oracles import central_difference

    rng = np.random.default_rng(1)
    p = simlab.GaussianCenterPolicy(2, params=rng.normal([0.5, 0.5, -1.5, -1.5, 0.3, 0.6, -2.0, -1.0], 0.05))
    acts = p.sample(1, rng, 3)
    jac = p.grad_log_prob(1, acts)
    fd = np.stack([central_difference(lambda th: p.log_prob(1, [a], th)[0], p.params) for a in acts])
    assert np.max(np.abs(jac - fd)) < 1e-6


@pytest.mark.parametrize("offset", [-400.0, -50.0, 75.0, 300.0])
def test_rg_expected_reward_gradient_points_to_target(offset):
    """d E[r_rg] / d mu_x has the opposite sign to the mean's offset from the target."""
    res, view = Resolution(4096, 4096), Resolution(512, 512)
    target = simlab.scale_bbox(BBox.from_center(2048, 2048, 512, 512), res, view)
    z = np.random.default_rng(0).standard_normal((4000, 2))
    sigma = 0.02

    def expected(mu_x):
        p = simlab.GaussianCenterPolicy(1, params=[mu_x, 0.5, math.log(sigma), math.log(sigma)])
        pts = (np.array([mu_x, 0.5]) + sigma * z) * 4096
        boxes = (simlab.scale_bbox(p.proposal(tuple(a)), res, view) for a in pts)
        return float(np.mean([reward_region_guided(b, target) for b in boxes]))

    mu = 0.5 + offset / 4096
    h = 1e-4
    grad = (expected(mu + h) - expected(mu - h)) / (2 * h)
    assert np.sign(grad) == -np.sign(offset)


def test_iou_reward_zero_for_disjoint_regardless_of_policy():
    target = BBox(2000, 2000, 2512, 2512)
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = simlab.GridSoftmaxPolicy(1, grid=16, params=rng.normal(0, 3, 256))
        for a in p.sample(0, rng, 20):
            box = p.proposal(a)
            if iou(box, target) == 0.0:
                assert reward_iou(box, target) == 0.0


def test_training_is_deterministic():
    scenes = simlab.default_suite(0, 1)
    n = len(simlab.cropping_questions(scenes))
    t1 = simlab.train_grpo(simlab.GridSoftmaxPolicy(n), scenes, steps=5, seed=9)
    t2 = simlab.train_grpo(simlab.GridSoftmaxPolicy(n), scenes, steps=5, seed=9)
    assert t1.to_jsonl() == t2.to_jsonl() and len(t1) == 5
    t3 = simlab.train_grpo(simlab.GridSoftmaxPolicy(n), scenes, steps=5, seed=10)
    assert t3.to_jsonl() != t1.to_jsonl()


def test_trace_round_trip(tmp_path):
    scenes = simlab.default_suite(0, 1)
    n = len(simlab.cropping_questions(scenes))
    tr = simlab.train_grpo(simlab.GaussianCenterPolicy(n), scenes, steps=3, seed=0)
    path = tmp_path / "trace.jsonl"
    tr.write(path)
    assert simlab.TrainingTrace.read(path).records == tr.records


def test_zero_steps_empty_trace():
    scenes = simlab.default_suite(0, 1)
    tr = simlab.train_grpo(simlab.GridSoftmaxPolicy(6), scenes, steps=0)
    assert len(tr) == 0 and tr.error is None
    assert math.isnan(tr.tail_mean("mean_center_distance", 5))


class _NanGrid(simlab.GridSoftmaxPolicy):
    def grad_log_prob(self, context, actions):
        return np.full((len(actions), self.params.size), np.nan)

    def copy(self):
        return _NanGrid(self.n_contexts, self.resolution, self.grid, self.box_size, self.params)


def test_non_finite_gradient_stops_training():
    scenes = simlab.default_suite(0, 1)
    tr = simlab.train_grpo(_NanGrid(6), scenes, steps=10)
    assert len(tr) == 1 and tr.error.startswith("NonFiniteGradient")


def test_policy_context_check():
    with pytest.raises(ValueError):
        simlab.train_grpo(simlab.GridSoftmaxPolicy(2), simlab.default_suite(0, 1), steps=1)


def test_ablation_structure_short():
    scenes = simlab.default_suite(0, 1)
    table = simlab.ablation_run(seed=0, steps=3, scenes=scenes, tail=2)
    assert [r.mask for r in table.rows] == ["none", "rg", "iou", "rg+iou"]
    assert table.row(("rg", "iou")).r_rg and table.row(()).r_iou is False
    inits = {r.initial_center_distance for r in table.rows}
    assert len(inits) == 1  # shared seed, same first-step samples
    assert "mean of last 2" in table.format_table()
    with pytest.raises(ValueError):
        simlab.mask_for(["answer"])
