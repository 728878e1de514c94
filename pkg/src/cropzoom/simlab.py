"""Synthetic very-large-image scenes and toy policies for the GRPO reward study.

A scene is a 4096 x 4096 virtual image (``sim://`` URI, no pixels) holding
non-overlapping objects and functional regions.  Questions about them are
answered by :class:`PerceptionStub`, which is right in stage 2 exactly when
the crop contains the target's centre, so answer reward depends on where the
policy chose to zoom.  The policies replace the VLM's box head with a
distribution over box centres and are trained with :mod:`cropzoom.grpo`
through the real episode loop and reward functions.

All randomness comes from one ``numpy.random.Generator`` over the PCG64
bit generator, seeded explicitly, which gives identical streams on every
platform.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .backends import BackendRequest, Completion
from .dataset import QASample
from .geometry import BBox, Resolution, center_distance, iou, scale_bbox
from .grpo import GroupBatch, GrpoConfig, Trajectory, grpo_gradient_step, surrogate_objective
from .orchestrator import EpisodeConfig, run_episode
from .protocol import Level, render_bbox_json
from .rewards import LexicalOracle, RewardConfig, SimilarityOracle, score_stages


class PlacementOverflow(RuntimeError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


OBJECT_CATEGORIES = ("ship", "airplane", "storage tank", "building", "vehicle")
COLORS = ("red", "blue", "green", "white", "gray", "yellow")
SHAPES = ("rectangular", "circular", "triangular", "cross-shaped")
STATUSES = ("operational", "under construction", "abandoned", "damaged")
FUNCTIONS = ("residential", "industrial", "commercial", "farmland", "airport", "port")

# Object question kinds: (dataset category, attribute name, question template).
_OBJECT_QUESTIONS = (
    ("color/pattern", "color", "What color is the {ref}?"),
    ("shape/structure", "shape", "What shape is the {ref}?"),
    ("state", "status", "What is the state of the {ref}?"),
)
_VOCAB = {"color": COLORS, "shape": SHAPES, "status": STATUSES, "function": FUNCTIONS}


@dataclass(frozen=True)
class SceneConfig:
    resolution: Resolution = Resolution(4096, 4096)
    n_objects: int = 6
    n_regions: int = 2
    object_size: Tuple[int, int] = (512, 512)
    region_size: Tuple[int, int] = (768, 1024)
    object_questions: int = 4
    region_questions: int = 2
    max_tries: int = 2000

    def __post_init__(self):
        if self.n_objects < 1:
            raise ValueError("a scene needs at least one object")
        if self.object_questions > self.n_objects or self.region_questions > max(self.n_regions, 0):
            raise ValueError("more questions than targets")


@dataclass(frozen=True)
class SceneObject:
    bbox: BBox
    category: str
    color: str
    shape: str
    status: str


@dataclass(frozen=True)
class SceneRegion:
    bbox: BBox
    function: str


@dataclass(frozen=True)
class SceneQuestion:
    sample: QASample
    target: Optional[BBox]
    answer: str
    decoy: str


@dataclass
class SyntheticScene:
    seed: int
    resolution: Resolution
    objects: List[SceneObject]
    regions: List[SceneRegion]
    questions: List[SceneQuestion] = field(default_factory=list)

    @property
    def uri(self) -> str:
        return f"sim://scene-{self.seed}"

    @property
    def samples(self) -> List[QASample]:
        return [q.sample for q in self.questions]


def _place(rng, res: Resolution, size_range, taken: List[BBox], max_tries: int) -> BBox:
    lo, hi = size_range
    for _ in range(max_tries):
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(0, res.width - w + 1))
        y = int(rng.integers(0, res.height - h + 1))
        box = BBox(x, y, x + w, y + h)
        if all(iou(box, t) == 0.0 for t in taken):
            return box
    raise PlacementOverflow(f"could not place a {lo}-{hi} px box after {max_tries} tries")


def _referent(target: SceneObject, objects: Sequence[SceneObject]) -> str:
    same = [o for o in objects if o.category == target.category]
    if len(same) == 1:
        return target.category
    cy = target.bbox.center[1]
    cx = target.bbox.center[0]
    if all(cy < o.bbox.center[1] for o in same if o is not target):
        return f"top-most {target.category}"
    if all(cy > o.bbox.center[1] for o in same if o is not target):
        return f"bottom-most {target.category}"
    if all(cx < o.bbox.center[0] for o in same if o is not target):
        return f"left-most {target.category}"
    if all(cx > o.bbox.center[0] for o in same if o is not target):
        return f"right-most {target.category}"
    return f"{target.category} centred near ({cx:.0f}, {cy:.0f})"


def _decoy(vocab: Sequence[str], answer: str) -> str:
    return vocab[(vocab.index(answer) + 1) % len(vocab)]


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> SyntheticScene:
    """Build a scene and its questions deterministically from ``seed``.

    Each scene carries one global counting question, ``region_questions``
    region-function questions and ``object_questions`` object-attribute
    questions, all answerable from the scene state.

    Raises:
        PlacementOverflow: objects cannot be placed without overlap.
    """
    rng = make_rng(seed)
    res = config.resolution
    taken: List[BBox] = []
    regions = []
    for _ in range(config.n_regions):
        box = _place(rng, res, config.region_size, taken, config.max_tries)
        taken.append(box)
        regions.append(SceneRegion(box, FUNCTIONS[int(rng.integers(len(FUNCTIONS)))]))
    objects = []
    for _ in range(config.n_objects):
        box = _place(rng, res, config.object_size, taken, config.max_tries)
        taken.append(box)
        objects.append(
            SceneObject(
                box,
                OBJECT_CATEGORIES[int(rng.integers(len(OBJECT_CATEGORIES)))],
                COLORS[int(rng.integers(len(COLORS)))],
                SHAPES[int(rng.integers(len(SHAPES)))],
                STATUSES[int(rng.integers(len(STATUSES)))],
            )
        )
    scene = SyntheticScene(seed, res, objects, regions)
    uri = scene.uri

    def sample(k, question, level, category, answer, bbox):
        return QASample(
            sample_id=f"scene{seed}-q{k}",
            image=uri,
            resolution=res,
            question=question,
            level=level,
            category=category,
            answer=answer,
            bbox=bbox,
        )

    questions = []
    counted = OBJECT_CATEGORIES[int(rng.integers(len(OBJECT_CATEGORIES)))]
    n = sum(o.category == counted for o in objects)
    questions.append(
        SceneQuestion(
            sample(0, f"How many {counted}s are in the image?", Level.GLOBAL, "counting", str(n), None),
            None,
            str(n),
            str(n + 1),
        )
    )
    for i in rng.permutation(len(regions))[: config.region_questions]:
        region = regions[int(i)]
        k = len(questions)
        questions.append(
            SceneQuestion(
                sample(
                    k,
                    f"What is the function of region {k}?",
                    Level.REGION,
                    "function",
                    region.function,
                    region.bbox,
                ),
                region.bbox,
                region.function,
                _decoy(FUNCTIONS, region.function),
            )
        )
    for i in rng.permutation(len(objects))[: config.object_questions]:
        obj = objects[int(i)]
        category, attr, template = _OBJECT_QUESTIONS[int(rng.integers(len(_OBJECT_QUESTIONS)))]
        answer = getattr(obj, attr)
        k = len(questions)
        questions.append(
            SceneQuestion(
                sample(k, template.format(ref=_referent(obj, objects)), Level.OBJECT, category, answer, obj.bbox),
                obj.bbox,
                answer,
                _decoy(_VOCAB[attr], answer),
            )
        )
    scene.questions = questions
    return scene


def default_suite(seed: int = 0, n_scenes: int = 3, config: SceneConfig = SceneConfig()) -> List[SyntheticScene]:
    return [generate_scene(seed * 1000 + i, config) for i in range(n_scenes)]


# --- perception stub ---------------------------------------------------------------


def _think(text: str) -> str:
    return f"<think>{text}</think>"


class PerceptionStub:
    """Backend that answers correctly iff the zoomed crop contains the target centre.

    Stage 1 for global questions answers from scene state.  Stage 1 for
    region/object questions comes from the policy under test (see
    :meth:`with_proposal`); without one the stub proposes nothing.
    """

    name = "perception-stub"

    def __init__(self, scenes: Iterable[SyntheticScene] | SyntheticScene):
        if isinstance(scenes, SyntheticScene):
            scenes = [scenes]
        self.questions: Dict[str, SceneQuestion] = {
            q.sample.sample_id: q for s in scenes for q in s.questions
        }

    def stage1_text(self, q: SceneQuestion, proposal: Optional[BBox] = None) -> str:
        if q.target is None:
            return _think("The whole scene is needed; no crop.") + f"<answer>{q.answer}</answer>"
        if proposal is None:
            return _think("I need to crop the image but cannot place the target.")
        return _think(
            "I need to crop the image to examine the surroundings of the target. "
            + render_bbox_json(proposal, "target")
        )

    def generate(self, request: BackendRequest, proposal: Optional[BBox] = None) -> Completion:
        q = self.questions[request.sample_id]
        if request.stage == 1:
            return Completion(self.stage1_text(q, proposal))
        crop = request.messages[-1].images[0]
        hit = q.target is None or crop.source_box.contains_point(*q.target.center)
        answer = q.answer if hit else q.decoy
        return Completion(_think("Reading the cropped region.") + f"<answer>{answer}</answer>")

    def with_proposal(self, proposal: Optional[BBox]) -> "_ProposalBackend":
        return _ProposalBackend(self, proposal)


class _ProposalBackend:
    def __init__(self, stub: PerceptionStub, proposal: Optional[BBox]):
        self.stub = stub
        self.proposal = proposal

    def generate(self, request: BackendRequest) -> Completion:
        return self.stub.generate(request, self.proposal)


def perception_stub(scene) -> PerceptionStub:
    return PerceptionStub(scene)


# --- toy policies --------------------------------------------------------------------


class GridSoftmaxPolicy:
    """Independent softmax over a ``grid x grid`` lattice of box centres per context.

    Contexts are integer question identities; an action is a cell index and
    proposes a ``box_size`` square centred on that cell (original pixels).
    """

    def __init__(self, n_contexts: int, resolution: Resolution = Resolution(4096, 4096), grid: int = 16, box_size: float = 256.0, params=None):
        self.n_contexts = n_contexts
        self.resolution = resolution
        self.grid = grid
        self.box_size = box_size
        n = n_contexts * grid * grid
        self.params = np.zeros(n) if params is None else np.asarray(params, dtype=float).copy()
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters")

    @property
    def n_cells(self) -> int:
        return self.grid * self.grid

    def _log_softmax(self, context: int, params=None) -> np.ndarray:
        p = self.params if params is None else params
        row = p[context * self.n_cells: (context + 1) * self.n_cells]
        z = row - row.max()
        return z - np.log(np.exp(z).sum())

    def probs(self, context: int) -> np.ndarray:
        return np.exp(self._log_softmax(context))

    def log_prob(self, context, actions, params=None) -> np.ndarray:
        return self._log_softmax(context, params)[np.asarray(actions, dtype=int)]

    def grad_log_prob(self, context, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=int)
        jac = np.zeros((len(actions), self.params.size))
        p = self.probs(context)
        lo = context * self.n_cells
        for t, a in enumerate(actions):
            jac[t, lo: lo + self.n_cells] = -p
            jac[t, lo + a] += 1.0
        return jac

    def sample(self, context: int, rng: np.random.Generator, size: int) -> List[int]:
        p = self.probs(context)
        return [int(a) for a in rng.choice(self.n_cells, size=size, p=p)]

    def center(self, action: int) -> Tuple[float, float]:
        cw = self.resolution.width / self.grid
        ch = self.resolution.height / self.grid
        return ((action % self.grid + 0.5) * cw, (action // self.grid + 0.5) * ch)

    def proposal(self, action: int) -> BBox:
        cx, cy = self.center(action)
        return BBox.from_center(cx, cy, self.box_size, self.box_size).clamp(self.resolution)

    def expected_distance(self, context: int, target: BBox) -> float:
        tx, ty = target.center
        d = [math.hypot(cx - tx, cy - ty) for cx, cy in map(self.center, range(self.n_cells))]
        return float(np.dot(self.probs(context), d))

    def copy(self) -> "GridSoftmaxPolicy":
        return GridSoftmaxPolicy(self.n_contexts, self.resolution, self.grid, self.box_size, self.params)


class GaussianCenterPolicy:
    """Diagonal Gaussian over the box centre with learnable mean and log-scale.

    Parameters per context are ``(mu_x, mu_y, log_sigma_x, log_sigma_y)`` in
    units of the image side, so initial values near 0.5 / log(0.25) are
    sensible.  Actions are ``(x, y)`` centres in original pixels.
    """

    def __init__(self, n_contexts: int, resolution: Resolution = Resolution(4096, 4096), box_size: float = 256.0, params=None):
        self.n_contexts = n_contexts
        self.resolution = resolution
        self.box_size = box_size
        if params is None:
            params = np.tile([0.5, 0.5, math.log(0.25), math.log(0.25)], n_contexts)
        self.params = np.asarray(params, dtype=float).copy()
        if self.params.shape != (4 * n_contexts,):
            raise ValueError(f"expected {4 * n_contexts} parameters")

    def _unpack(self, context, params=None):
        p = self.params if params is None else params
        mx, my, lsx, lsy = p[4 * context: 4 * context + 4]
        return np.array([mx, my]), np.array([lsx, lsy])

    def _norm(self, actions):
        a = np.asarray(actions, dtype=float).reshape(-1, 2)
        return a / np.array([self.resolution.width, self.resolution.height])

    def log_prob(self, context, actions, params=None) -> np.ndarray:
        mu, ls = self._unpack(context, params)
        u = (self._norm(actions) - mu) / np.exp(ls)
        # density over normalized coordinates
        return (-0.5 * u**2 - ls - 0.5 * math.log(2 * math.pi)).sum(axis=1)

    def grad_log_prob(self, context, actions) -> np.ndarray:
        mu, ls = self._unpack(context)
        sigma = np.exp(ls)
        u = (self._norm(actions) - mu) / sigma
        jac = np.zeros((len(u), self.params.size))
        jac[:, 4 * context: 4 * context + 2] = u / sigma
        jac[:, 4 * context + 2: 4 * context + 4] = u**2 - 1.0
        return jac

    def sample(self, context: int, rng: np.random.Generator, size: int) -> List[Tuple[float, float]]:
        mu, ls = self._unpack(context)
        z = rng.standard_normal((size, 2))
        pts = (mu + np.exp(ls) * z) * np.array([self.resolution.width, self.resolution.height])
        return [(float(x), float(y)) for x, y in pts]

    def center(self, action) -> Tuple[float, float]:
        x, y = action
        return (min(max(x, 0.0), self.resolution.width), min(max(y, 0.0), self.resolution.height))

    def proposal(self, action) -> BBox:
        cx, cy = self.center(action)
        return BBox.from_center(cx, cy, self.box_size, self.box_size).clamp(self.resolution)

    def copy(self) -> "GaussianCenterPolicy":
        return GaussianCenterPolicy(self.n_contexts, self.resolution, self.box_size, self.params)


# --- training ------------------------------------------------------------------------


@dataclass
class TraceRecord:
    step: int
    objective: float
    mean_reward: float
    mean_center_distance: float
    nonzero_iou_fraction: float
    answer_accuracy: float
    r_iou: float
    r_rg: float
    r_answer: float
    r_pattern: float


@dataclass
class TrainingTrace:
    records: List[TraceRecord] = field(default_factory=list)
    error: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainingTrace":
        with open(path, encoding="utf-8") as fh:
            return cls([TraceRecord(**json.loads(line)) for line in fh if line.strip()])

    def tail_mean(self, key: str, n: int) -> float:
        vals = [getattr(r, key) for r in self.records[-n:]]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings; ``grpo`` overrides the full-model learning rate."""

    grpo: GrpoConfig = GrpoConfig(learning_rate=5.0)
    reward: RewardConfig = RewardConfig()
    episode: EpisodeConfig = EpisodeConfig(temperature=0.7)
    mask: Optional[Mapping[str, bool]] = None


def cropping_questions(scenes: Sequence[SyntheticScene]) -> List[SceneQuestion]:
    return [q for s in scenes for q in s.questions if q.target is not None]


def rollout(policy, q: SceneQuestion, context: int, action, stub: PerceptionStub, cfg: SimConfig, oracle: SimilarityOracle):
    """Run one proposal through the real episode loop and score it.

    Returns ``(RewardBreakdown, proposal box in original pixels)``.
    """
    box = policy.proposal(action)
    res = q.sample.resolution
    view = res.fit_longest_side(cfg.episode.input_resolution)
    view_box = scale_bbox(box, res, view)
    result = run_episode(q.sample, stub.with_proposal(view_box), None, cfg.episode)
    gt_view = scale_bbox(q.target, res, view)
    breakdown = score_stages(
        q.sample.kind,
        result.stage1,
        result.stage2,
        q.answer,
        gt_view,
        oracle,
        cfg.reward,
        cfg.mask,
        pred_bbox=result.proposal_bbox,
    )
    return breakdown, box


def train_grpo(
    policy,
    scenes: Sequence[SyntheticScene],
    cfg: SimConfig = SimConfig(),
    steps: int = 100,
    seed: int = 0,
    oracle: Optional[SimilarityOracle] = None,
) -> TrainingTrace:
    """Train ``policy`` with GRPO on the cropping questions of ``scenes``.

    Each step samples ``group_size`` proposals per question from the current
    policy (which is also the old policy for that step), scores them through
    :class:`PerceptionStub`, and takes one gradient step.  The reference
    policy is the initial one.  A non-finite gradient stops training and the
    partial trace is returned with ``error`` set.
    """
    rng = make_rng(seed)
    oracle = oracle or LexicalOracle()
    questions = cropping_questions(scenes)
    if getattr(policy, "n_contexts", len(questions)) < len(questions):
        raise ValueError("policy has fewer contexts than questions")
    stub = PerceptionStub(scenes)
    ref = policy.copy()
    trace = TrainingTrace()
    G = cfg.grpo.group_size
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        _train_loop(policy, ref, questions, stub, cfg, oracle, rng, steps, G, trace)
    return trace


def _train_loop(policy, ref, questions, stub, cfg, oracle, rng, steps, G, trace):
    for step in range(steps):
        groups = []
        parts = []
        dists = []
        for ctx, q in enumerate(questions):
            actions = policy.sample(ctx, rng, G)
            trajs = []
            for a in actions:
                breakdown, box = rollout(policy, q, ctx, a, stub, cfg, oracle)
                lp = policy.log_prob(ctx, [a])
                trajs.append(
                    Trajectory(q.sample.sample_id, (a,), lp, lp.copy(), ref.log_prob(ctx, [a]), breakdown.total, ctx)
                )
                parts.append(breakdown)
                dists.append(center_distance(box, q.target))
            groups.append(GroupBatch(q.sample.sample_id, trajs))
        objective = surrogate_objective(policy, groups, cfg.grpo)
        trace.records.append(
            TraceRecord(
                step=step,
                objective=float(objective),
                mean_reward=float(np.mean([b.total for b in parts])),
                mean_center_distance=float(np.mean(dists)),
                nonzero_iou_fraction=float(np.mean([b.r_iou > 0 for b in parts])),
                answer_accuracy=float(np.mean([b.r_answer >= 1.0 for b in parts])),
                r_iou=float(np.mean([b.r_iou for b in parts])),
                r_rg=float(np.mean([b.r_rg for b in parts])),
                r_answer=float(np.mean([b.r_answer for b in parts])),
                r_pattern=float(np.mean([b.r_pattern for b in parts])),
            )
        )
        try:
            grpo_gradient_step(policy, groups, cfg.grpo)
        except FloatingPointError as exc:
            trace.error = f"{type(exc).__name__}: {exc}"
            break


# --- ablation ------------------------------------------------------------------------

ABLATION_GRID: Tuple[Tuple[str, ...], ...] = ((), ("rg",), ("iou",), ("rg", "iou"))


def mask_for(enabled: Sequence[str]) -> Dict[str, bool]:
    """Reward mask with only the named localization terms switched on."""
    unknown = set(enabled) - {"rg", "iou"}
    if unknown:
        raise ValueError(f"unknown localization rewards: {sorted(unknown)}")
    return {"r_iou": "iou" in enabled, "r_rg": "rg" in enabled}


@dataclass
class AblationRow:
    mask: str
    r_iou: bool
    r_rg: bool
    initial_center_distance: float
    final_center_distance: float
    nonzero_iou_fraction: float
    answer_accuracy: float


@dataclass
class AblationTable:
    rows: List[AblationRow]
    steps: int
    seed: int
    tail: int

    def row(self, enabled: Sequence[str]) -> AblationRow:
        m = mask_for(enabled)
        for r in self.rows:
            if r.r_iou == m["r_iou"] and r.r_rg == m["r_rg"]:
                return r
        raise KeyError(enabled)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def format_table(self) -> str:
        lines = [
            f"reward ablation: {self.steps} steps, seed {self.seed}, final = mean of last {self.tail} steps",
            "(center distance and IoU fraction are simulation proxies, not benchmark metrics)",
            f"{'mask':<10}{'r_iou':>6}{'r_rg':>6}{'dist@0':>10}{'dist@end':>10}{'iou>0':>8}{'acc':>8}",
        ]
        for r in self.rows:
            lines.append(
                f"{r.mask:<10}{'on' if r.r_iou else '-':>6}{'on' if r.r_rg else '-':>6}"
                f"{r.initial_center_distance:>10.1f}{r.final_center_distance:>10.1f}"
                f"{r.nonzero_iou_fraction:>8.3f}{r.answer_accuracy:>8.3f}"
            )
        return "\n".join(lines) + "\n"


def ablation_run(
    masks: Sequence[Sequence[str]] = ABLATION_GRID,
    seed: int = 0,
    steps: int = 2000,
    scenes: Optional[Sequence[SyntheticScene]] = None,
    cfg: SimConfig = SimConfig(),
    tail: int = 50,
    traces: Optional[dict] = None,
) -> AblationTable:
    """One :func:`train_grpo` run per mask, all from the same seed and scenes.

    Final metrics average the last ``tail`` trace records.  If ``traces`` is
    a dict it receives each run's trace keyed by mask name.
    """
    scenes = list(scenes) if scenes is not None else default_suite(seed)
    n = len(cropping_questions(scenes))
    rows = []
    for enabled in masks:
        name = "+".join(enabled) if enabled else "none"
        policy = GridSoftmaxPolicy(n, scenes[0].resolution)
        trace = train_grpo(policy, scenes, replace(cfg, mask=mask_for(enabled)), steps, seed)
        if traces is not None:
            traces[name] = trace
        first = trace.records[0] if trace.records else None
        rows.append(
            AblationRow(
                mask=name,
                r_iou="iou" in enabled,
                r_rg="rg" in enabled,
                initial_center_distance=first.mean_center_distance if first else float("nan"),
                final_center_distance=trace.tail_mean("mean_center_distance", tail),
                nonzero_iou_fraction=trace.tail_mean("nonzero_iou_fraction", tail),
                answer_accuracy=trace.tail_mean("answer_accuracy", tail),
            )
        )
    return AblationTable(rows, steps, seed, tail)
