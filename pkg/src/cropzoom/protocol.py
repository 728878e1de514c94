"""Parser and renderer for the structured reasoning grammar.

A model transcript may contain ``<think>`` blocks (with JSON bbox proposals
inside), ``<tool_call>`` blocks and ``<answer>`` blocks.  Parsing is total:
any text produces a :class:`ParsedResponse`, with unparseable pieces simply
absent.
"""

from __future__ import annotations

import enum
import json
import math
import re
import functools
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .geometry import BBox, ImageRef


class MissingCrop(ValueError):
    """Stage-2 prompt requested without a cropped image."""


class TaskMode(str, enum.Enum):
    GLOBAL_QA = "GlobalQA"
    CROPPING_QA = "CroppingQA"
    DOWNSTREAM_TOOL = "DownstreamTool"


class Level(str, enum.Enum):
    GLOBAL = "global"
    REGION = "region"
    OBJECT = "object"


CATEGORIES: Dict[Level, Tuple[str, ...]] = {
    Level.GLOBAL: ("counting", "season", "urban-rural", "scene type"),
    Level.REGION: (
        "counting",
        "existence",
        "status",
        "visual features",
        "function",
        "category",
    ),
    Level.OBJECT: (
        "function",
        "material/surface",
        "category",
        "state",
        "relative position",
        "shape/structure",
        "color/pattern",
    ),
}

TOOL_NAMES = ("cloud_removal", "segmentation", "denoise", "image_editing")


@dataclass(frozen=True)
class TaskKind:
    mode: TaskMode
    level: Level
    category: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mode", TaskMode(self.mode))
        object.__setattr__(self, "level", Level(self.level))
        if self.mode is TaskMode.CROPPING_QA and self.level is Level.GLOBAL:
            raise ValueError("CroppingQA requires a region or object level")

    @classmethod
    def for_level(cls, level, category: str = "", downstream: bool = False) -> "TaskKind":
        level = Level(level)
        if downstream:
            mode = TaskMode.DOWNSTREAM_TOOL
        elif level is Level.GLOBAL:
            mode = TaskMode.GLOBAL_QA
        else:
            mode = TaskMode.CROPPING_QA
        return cls(mode, level, category)


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: Dict[str, Any]

    @property
    def bbox(self) -> BBox:
        return BBox.from_corners(self.arguments["bbox_2d"])


@dataclass
class ParsedResponse:
    think_blocks: List[str] = field(default_factory=list)
    bbox_proposals: List[Tuple[BBox, str]] = field(default_factory=list)
    tool_call: Optional[ToolCall] = None
    answers: List[str] = field(default_factory=list)
    tool_call_blocks: int = 0
    raw: str = ""

    @property
    def answer(self) -> Optional[str]:
        return self.answers[0] if self.answers else None

    @property
    def first_bbox(self) -> Optional[BBox]:
        """The authoritative proposal for cropping; extras are kept but unused."""
        return self.bbox_proposals[0][0] if self.bbox_proposals else None


def _tag(name: str, closing: bool = False) -> str:
    return r"<\s*/\s*%s\s*>" % name if closing else r"<\s*%s\s*>" % name


_THINK_RE = re.compile(
    _tag("think") + r"(.*?)(?:" + _tag("think", True) + r"|(?=" + _tag("answer")
    + r"|" + _tag("tool_call") + r")|\Z)",
    re.DOTALL,
)
_ANSWER_RE = re.compile(_tag("answer") + r"(.*?)" + _tag("answer", True), re.DOTALL)
_TOOL_OPEN_RE = re.compile(_tag("tool_call"))
# A tool-call body ends at its closing tag, at a stray </think> (seen in real
# transcripts), at the next opener, or at end of text.
_TOOL_END_RE = re.compile(
    _tag("tool_call", True) + "|" + _tag("think", True) + "|" + _tag("tool_call")
)
_FENCE_RE = re.compile(r"```[A-Za-z]*")

_decoder = json.JSONDecoder()


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _as_box(value) -> Optional[BBox]:
    if not isinstance(value, list) or len(value) != 4 or not all(map(_is_number, value)):
        return None
    try:
        return BBox.from_corners(value)
    except (ValueError, OverflowError):
        return None


def _decode_at(text: str, i: int):
    try:
        return _decoder.raw_decode(text, i)
    except (ValueError, RecursionError):
        return None


def extract_bboxes(text: str) -> List[Tuple[BBox, str]]:
    """Every well-formed ``[{"bbox_2d": [...], "label": ...}]`` array in ``text``.

    Markdown code fences are ignored.  Reversed corners are swapped.  Objects
    violating the schema are skipped; the rest of their array is kept.
    """
    text = _FENCE_RE.sub(" ", text)
    found: List[Tuple[BBox, str]] = []
    i = text.find("[")
    while i != -1:
        decoded = _decode_at(text, i)
        if decoded is None:
            i = text.find("[", i + 1)
            continue
        value, end = decoded
        if isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
            for item in value:
                box = _as_box(item.get("bbox_2d"))
                label = item.get("label")
                if box is not None and isinstance(label, str):
                    found.append((box, label))
            i = text.find("[", end)
        else:
            i = text.find("[", i + 1)
    return found


def _check_tool_schema(obj) -> Optional[ToolCall]:
    if not isinstance(obj, dict):
        return None
    name, args = obj.get("name"), obj.get("arguments")
    if name not in TOOL_NAMES or not isinstance(args, dict):
        return None
    if _as_box(args.get("bbox_2d")) is None:
        return None
    if name in ("cloud_removal", "denoise"):
        if set(args) != {"bbox_2d"}:
            return None
    elif name == "segmentation":
        objects = args.get("objects")
        if not isinstance(objects, list) or not objects:
            return None
        if not all(isinstance(o, str) and o.strip() for o in objects):
            return None
    elif name == "image_editing":
        desc = args.get("description")
        if not isinstance(desc, str) or not desc.strip():
            return None
    return ToolCall(name, dict(args))


def _tool_bodies(text: str) -> List[str]:
    bodies = []
    for m in _TOOL_OPEN_RE.finditer(text):
        end = _TOOL_END_RE.search(text, m.end())
        bodies.append(text[m.end(): end.start() if end else len(text)])
    return bodies


def parse_tool_call(text: str) -> Optional[ToolCall]:
    """Decode and schema-check the first ``<tool_call>`` block, if any."""
    bodies = _tool_bodies(text)
    if not bodies:
        return None
    body = _FENCE_RE.sub(" ", bodies[0])
    start = body.find("{")
    if start == -1:
        return None
    decoded = _decode_at(body, start)
    if decoded is None or body[decoded[1]:].strip():
        return None
    return _check_tool_schema(decoded[0])


def parse_response(text) -> ParsedResponse:
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    elif not isinstance(text, str):
        text = str(text)
    thinks = [m.group(1).strip() for m in _THINK_RE.finditer(text)]
    proposals: List[Tuple[BBox, str]] = []
    for block in thinks:
        proposals.extend(extract_bboxes(block))
    return ParsedResponse(
        think_blocks=thinks,
        bbox_proposals=proposals,
        tool_call=parse_tool_call(text),
        answers=[m.group(1).strip() for m in _ANSWER_RE.finditer(text)],
        tool_call_blocks=len(_TOOL_OPEN_RE.findall(text)),
        raw=text,
    )


def validate_pattern(p: ParsedResponse, kind: TaskKind, stage: int) -> bool:
    """Whether ``p`` follows the output grammar required for ``kind`` at ``stage``.

    Stage-2 validity only requires a single answer block; a second think
    block is tolerated but not demanded.
    """
    if kind.mode is TaskMode.GLOBAL_QA:
        return len(p.think_blocks) >= 1 and len(p.answers) == 1
    if kind.mode is TaskMode.CROPPING_QA:
        if stage == 1:
            return len(p.think_blocks) >= 1 and len(p.bbox_proposals) >= 1
        return len(p.answers) == 1
    return p.tool_call_blocks == 1 and p.tool_call is not None


# --- prompt rendering -------------------------------------------------------


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    images: Tuple[ImageRef, ...] = ()

    def __post_init__(self):
        if len(self.images) > 1:
            raise ValueError("at most one image attachment per message")


@dataclass(frozen=True)
class InstructionTemplate:
    name: str
    text: str

    @classmethod
    @functools.lru_cache(maxsize=None)
    def load(cls, name: str) -> "InstructionTemplate":
        """Load a bundled template (``"vqa"`` or ``"downstream"``)."""
        ref = resources.files("cropzoom.assets").joinpath(f"{name}_instruction.txt")
        return cls(name, ref.read_text(encoding="utf-8"))


VQA_TEMPLATE = "vqa"
DOWNSTREAM_TEMPLATE = "downstream"

STAGE2_CUE = "Here is the cropped image of the region you selected."


def template_for(kind: TaskKind) -> InstructionTemplate:
    if kind.mode is TaskMode.DOWNSTREAM_TOOL:
        return InstructionTemplate.load(DOWNSTREAM_TEMPLATE)
    return InstructionTemplate.load(VQA_TEMPLATE)


def render_prompt(
    sample,
    stage: int,
    template: InstructionTemplate,
    image: Optional[ImageRef] = None,
    prior: Sequence[Message] = (),
    stage1_completion: Optional[str] = None,
    crop: Optional[ImageRef] = None,
) -> List[Message]:
    """Build the message sequence for one generation stage.

    Stage 1 is the system instruction plus the question with the downsampled
    global image; ``sample`` needs only a ``question`` attribute.  Stage 2 keeps the stage-1 messages and completion
    unchanged and appends a user turn carrying the crop.

    Raises:
        MissingCrop: for stage 2 without ``crop``.
    """
    if stage == 1:
        return [
            Message("system", template.text),
            Message("user", sample.question, (image,) if image is not None else ()),
        ]
    if stage != 2:
        raise ValueError(f"unknown stage {stage}")
    if crop is None:
        raise MissingCrop("stage 2 requires a cropped image")
    messages = list(prior)
    if stage1_completion is not None:
        messages.append(Message("assistant", stage1_completion))
    messages.append(Message("user", STAGE2_CUE, (crop,)))
    return messages


def render_bbox_json(box: BBox, label: str) -> str:
    return json.dumps([{"bbox_2d": box.as_list(), "label": label}])
