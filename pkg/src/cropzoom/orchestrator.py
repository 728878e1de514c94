"""Two-stage crop-zoom inference loop and downstream tool dispatch.

Stage 1 sees the image downsampled so its longest side is
``input_resolution``.  If the model proposes a box, it is mapped back to
original pixels, widened to a fixed ``crop_size`` window, cropped from the
original image and shown to the model in stage 2.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from . import defaults
from .backends import Backend, BackendRequest
from .dataset import QASample
from .geometry import BBox, ImageRef, crop_region, expand_to_size, scale_bbox
from .images import resolve_image
from .protocol import (
    TOOL_NAMES,
    Message,
    ParsedResponse,
    TaskMode,
    ToolCall,
    parse_response,
    render_prompt,
    template_for,
)

log = logging.getLogger(__name__)


class UnknownTool(LookupError):
    pass


class HandlerFailure(RuntimeError):
    def __init__(self, handler_id: str, message: str):
        super().__init__(f"{handler_id}: {message}")
        self.handler_id = handler_id


@dataclass(frozen=True)
class EpisodeConfig:
    input_resolution: int = defaults.INPUT_RESOLUTION
    crop_size: int = defaults.CROP_SIZE
    temperature: float = defaults.EVAL_TEMPERATURE
    max_new_tokens: int = defaults.MAX_NEW_TOKENS
    max_crops: int = defaults.MAX_CROPS
    want_logprobs: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.input_resolution < 1 or self.crop_size < 1:
            raise ValueError("resolutions must be positive")
        if self.max_crops < 0:
            raise ValueError("max_crops must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass(frozen=True)
class ToolResult:
    tool: str
    output: str
    backend: str
    status: str = "ok"

    def __post_init__(self):
        if self.tool not in TOOL_NAMES:
            raise ValueError(f"unknown tool {self.tool!r}")


@dataclass
class EpisodeResult:
    sample_id: str
    stage1: Optional[ParsedResponse] = None
    predicted_bbox: Optional[BBox] = None
    proposal_bbox: Optional[BBox] = None
    view_resolution: Optional[tuple] = None
    crop_used: Optional[BBox] = None
    stage2: Optional[ParsedResponse] = None
    final_answer: Optional[str] = None
    tool_result: Optional[ToolResult] = None
    timing: Dict[str, float] = field(default_factory=dict)
    logprobs: Dict[int, tuple] = field(default_factory=dict)
    prompts: Dict[int, List[Message]] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def summary(self) -> dict:
        """Deterministic JSON-ready record (timings excluded)."""
        box = lambda b: b.as_list() if b is not None else None  # noqa: E731
        return {
            "sample_id": self.sample_id,
            "predicted_bbox": box(self.predicted_bbox),
            "crop_used": box(self.crop_used),
            "stage2": self.stage2 is not None,
            "final_answer": self.final_answer,
            "tool": self.tool_result.tool if self.tool_result else None,
            "tool_output": self.tool_result.output if self.tool_result else None,
            "error": self.error,
        }


# --- tools -------------------------------------------------------------------

# A handler takes {"name", "arguments", "crop"} and returns {"status", "output"}.
ToolHandler = Callable[[dict], dict]


def ref_to_json(ref: ImageRef) -> dict:
    return {
        "uri": ref.uri,
        "offset": list(ref.offset),
        "width": ref.resolution.width,
        "height": ref.resolution.height,
    }


def _crop_uri(req: dict) -> str:
    c = req["crop"]
    x0, y0 = c["offset"]
    return f"{c['uri']}#crop={x0},{y0},{x0 + c['width']},{y0 + c['height']}"


def _identity_stub(req: dict) -> dict:
    return {"status": "ok", "output": _crop_uri(req)}


def _mask_stub(req: dict) -> dict:
    objects = ",".join(req["arguments"]["objects"])
    return {"status": "ok", "output": f"mask:{_crop_uri(req)};rect;objects={objects}"}


def _edit_stub(req: dict) -> dict:
    return {"status": "ok", "output": f"{_crop_uri(req)};edited=stub"}


class ToolRegistry:
    """Maps tool names to ``(handler_id, handler)`` pairs."""

    def __init__(self):
        self._handlers: Dict[str, tuple] = {}

    def register(self, name: str, handler: ToolHandler, handler_id: Optional[str] = None) -> None:
        if name not in TOOL_NAMES:
            raise ValueError(f"unknown tool {name!r}")
        self._handlers[name] = (handler_id or getattr(handler, "__name__", name), handler)

    def get(self, name: str) -> tuple:
        try:
            return self._handlers[name]
        except KeyError:
            raise UnknownTool(name) from None

    def __contains__(self, name) -> bool:
        return name in self._handlers

    @classmethod
    def with_stubs(cls) -> "ToolRegistry":
        reg = cls()
        reg.register("cloud_removal", _identity_stub, "cloud_removal-stub")
        reg.register("denoise", _identity_stub, "denoise-stub")
        reg.register("segmentation", _mask_stub, "segmentation-stub")
        reg.register("image_editing", _edit_stub, "image_editing-stub")
        return reg


def zoom_window(proposal: BBox, source: ImageRef, crop_size: int):
    """Map a view-space proposal to original pixels and its fixed-size crop window."""
    view = source.display_resolution
    original = scale_bbox(proposal, view, source.resolution)
    size = min(crop_size, source.resolution.width, source.resolution.height)
    return original, expand_to_size(original, size, source.resolution)


def dispatch_tool(
    call: ToolCall,
    source: ImageRef,
    registry: ToolRegistry,
    crop_size: int = defaults.CROP_SIZE,
) -> ToolResult:
    """Crop the call's ROI like a stage-2 zoom and hand it to the registered handler.

    ``source`` is the full image handle whose ``view`` is the space the
    call's ``bbox_2d`` was predicted in.

    Raises:
        UnknownTool: no handler for ``call.name``.
        HandlerFailure: the handler raised or reported a non-ok status.
    """
    handler_id, handler = registry.get(call.name)
    _, window = zoom_window(call.bbox, source, crop_size)
    crop = crop_region(source, window)
    request = {"name": call.name, "arguments": dict(call.arguments), "crop": ref_to_json(crop)}
    try:
        response = handler(request)
    except Exception as exc:
        raise HandlerFailure(handler_id, f"{type(exc).__name__}: {exc}") from exc
    if not isinstance(response, dict) or response.get("status") != "ok":
        raise HandlerFailure(handler_id, f"bad response {response!r}")
    return ToolResult(call.name, str(response.get("output")), handler_id)


# --- episodes ------------------------------------------------------------------


def run_episode(
    sample: QASample,
    backend: Backend,
    tools: Optional[ToolRegistry] = None,
    cfg: EpisodeConfig = EpisodeConfig(),
) -> EpisodeResult:
    """Run one sample through the crop-zoom loop.

    Whether to zoom is the model's choice: a stage-1 bbox proposal triggers a
    crop on any VQA sample.  Downstream samples dispatch their tool call
    instead.  Exceptions propagate; :func:`run_batch` turns them into records.
    """
    result = EpisodeResult(sample.sample_id)
    t0 = time.perf_counter()
    source = resolve_image(sample.image, sample.resolution).downsampled(cfg.input_resolution)
    result.view_resolution = source.display_resolution.as_tuple()
    kind = sample.kind
    template = template_for(kind)

    def generate(messages, stage):
        req = BackendRequest(
            tuple(messages),
            temperature=cfg.temperature,
            max_new_tokens=cfg.max_new_tokens,
            want_logprobs=cfg.want_logprobs,
            sample_id=sample.sample_id,
            stage=stage,
        )
        started = time.perf_counter()
        completion = backend.generate(req)
        result.timing[f"stage{stage}"] = time.perf_counter() - started
        result.prompts[stage] = list(messages)
        if completion.token_logprobs is not None:
            result.logprobs[stage] = completion.token_logprobs
        return completion

    messages = render_prompt(sample, 1, template, image=source)
    completion = generate(messages, 1)
    p1 = parse_response(completion.text)
    result.stage1 = p1

    if kind.mode is TaskMode.DOWNSTREAM_TOOL:
        if p1.tool_call is not None:
            result.proposal_bbox = p1.tool_call.bbox
            result.predicted_bbox, result.crop_used = zoom_window(
                p1.tool_call.bbox, source, cfg.crop_size
            )
            t = time.perf_counter()
            result.tool_result = dispatch_tool(p1.tool_call, source, tools or ToolRegistry.with_stubs(), cfg.crop_size)
            result.timing["tool"] = time.perf_counter() - t
        result.final_answer = p1.answer
        result.timing["total"] = time.perf_counter() - t0
        return result

    proposal = p1.first_bbox
    if proposal is not None:
        result.proposal_bbox = proposal
        result.predicted_bbox = zoom_window(proposal, source, cfg.crop_size)[0]
    last = p1
    stage = 1
    while proposal is not None and stage <= cfg.max_crops:
        _, window = zoom_window(proposal, source, cfg.crop_size)
        crop = crop_region(source, window)
        result.crop_used = window
        messages = render_prompt(
            sample, 2, template, prior=messages, stage1_completion=completion.text, crop=crop
        )
        stage += 1
        completion = generate(messages, stage)
        last = parse_response(completion.text)
        # Further zooms stay in global-view coordinates.
        proposal = last.first_bbox if last.answer is None else None
    if stage > 1:
        result.stage2 = last
    result.final_answer = result.stage2.answer if result.stage2 is not None else p1.answer
    result.timing["total"] = time.perf_counter() - t0
    return result


def _safe_episode(sample, backend, tools, cfg) -> EpisodeResult:
    try:
        return run_episode(sample, backend, tools, cfg)
    except Exception as exc:  # per-sample record; a batch never aborts
        log.warning("sample %s failed: %s: %s", sample.sample_id, type(exc).__name__, exc)
        return EpisodeResult(sample.sample_id, error=f"{type(exc).__name__}: {exc}")


def run_batch(
    samples: Sequence[QASample],
    backend: Backend,
    tools: Optional[ToolRegistry] = None,
    cfg: EpisodeConfig = EpisodeConfig(),
) -> List[EpisodeResult]:
    """Run every sample with at most ``cfg.workers`` in flight; results keep input order."""
    tools = tools if tools is not None else ToolRegistry.with_stubs()
    if cfg.workers == 1 or len(samples) <= 1:
        return [_safe_episode(s, backend, tools, cfg) for s in samples]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(lambda s: _safe_episode(s, backend, tools, cfg), samples))
