"""Bounding-box arithmetic and coordinate transforms.

Boxes are closed intervals in continuous pixel coordinates, ``x`` rightward and
``y`` downward, stored as ``[x_min, y_min, x_max, y_max]``.  The same box type is
used for both the downsampled global view and the original-resolution image;
:func:`scale_bbox` moves a box between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Tuple


class SizeExceedsImage(ValueError):
    """Requested window is larger than the image it must fit in."""


class EmptyCrop(ValueError):
    """A crop box has zero area after clamping to the image."""


@dataclass(frozen=True)
class Resolution:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError(f"resolution must be integral, got {self.width}x{self.height}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"resolution must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def longest_side(self) -> int:
        return max(self.width, self.height)

    def fit_longest_side(self, target: int) -> "Resolution":
        """Aspect-preserving resolution whose longest side is ``target``.

        Images already no larger than ``target`` are returned unchanged.
        """
        if self.longest_side <= target:
            return self
        scale = target / self.longest_side
        return Resolution(
            max(1, round(self.width * scale)), max(1, round(self.height * scale))
        )

    def as_tuple(self) -> Tuple[int, int]:
        return (self.width, self.height)

    def __str__(self) -> str:
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        x0, y0 = float(self.x_min), float(self.y_min)
        x1, y1 = float(self.x_max), float(self.y_max)
        if not (math.isfinite(x0 + y0 + x1 + y1) and x0 <= x1 and y0 <= y1):
            raise ValueError(f"bbox must be finite with min <= max, got {[x0, y0, x1, y1]}")
        object.__setattr__(self, "x_min", x0)
        object.__setattr__(self, "y_min", y0)
        object.__setattr__(self, "x_max", x1)
        object.__setattr__(self, "y_max", y1)

    @classmethod
    def from_corners(cls, coords: Sequence[float]) -> "BBox":
        """Build a box from four numbers, swapping reversed corners."""
        x0, y0, x1, y1 = (float(c) for c in coords)
        return cls(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))

    @classmethod
    def from_center(cls, cx: float, cy: float, width: float, height: float) -> "BBox":
        return cls(cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def clamp(self, bounds: Resolution) -> "BBox":
        if self.within(bounds):
            return self
        w, h = bounds.width, bounds.height
        return BBox(
            min(max(self.x_min, 0.0), w),
            min(max(self.y_min, 0.0), h),
            min(max(self.x_max, 0.0), w),
            min(max(self.y_max, 0.0), h),
        )

    def within(self, bounds: Resolution) -> bool:
        return (
            self.x_min >= 0
            and self.y_min >= 0
            and self.x_max <= bounds.width
            and self.y_max <= bounds.height
        )

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def __iter__(self) -> Iterable[float]:
        return iter(self.as_list())


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has no area."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def center_distance(a: BBox, b: BBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def scale_bbox(b: BBox, src: Resolution, dst: Resolution) -> BBox:
    """Map a box from ``src`` pixel space to ``dst`` pixel space.

    The box is clamped to ``src`` first and the result clamped to ``dst``.
    """
    b = b.clamp(src)
    sx = dst.width / src.width
    sy = dst.height / src.height
    scaled = BBox(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)
    return scaled.clamp(dst)


def expand_to_size(b: BBox, size: float, bounds: Resolution) -> BBox:
    """Square ``size`` window centred on ``b``, translated to lie inside ``bounds``.

    The window is shifted, never shrunk, so the output side is always ``size``.

    Raises:
        SizeExceedsImage: if ``size`` is larger than the shorter image side.
    """
    if size > min(bounds.width, bounds.height):
        raise SizeExceedsImage(f"window {size} does not fit in {bounds}")
    cx, cy = b.center
    x0 = min(max(cx - size / 2, 0.0), bounds.width - size)
    y0 = min(max(cy - size / 2, 0.0), bounds.height - size)
    return BBox(x0, y0, x0 + size, y0 + size)


@dataclass(frozen=True)
class ImageRef:
    """Handle to an image or a rectangular view of one.

    ``resolution`` is the size of this handle in source pixels and ``offset``
    is where its top-left corner sits in the root image at ``uri``.
    ``view`` is the resolution the handle is presented at (the downsampled
    global view); ``None`` means native.
    """

    uri: str
    resolution: Resolution
    offset: Tuple[int, int] = (0, 0)
    source_resolution: Optional[Resolution] = None
    view: Optional[Resolution] = field(default=None)

    def __post_init__(self):
        if self.source_resolution is None:
            object.__setattr__(self, "source_resolution", self.resolution)

    @property
    def display_resolution(self) -> Resolution:
        return self.view or self.resolution

    @property
    def source_box(self) -> BBox:
        """This handle's extent in root-image coordinates."""
        ox, oy = self.offset
        return BBox(ox, oy, ox + self.resolution.width, oy + self.resolution.height)

    def downsampled(self, longest_side: int) -> "ImageRef":
        return replace(self, view=self.resolution.fit_longest_side(longest_side))

    def to_source(self, x: float, y: float) -> Tuple[float, float]:
        """Map a point in this handle's native pixels to root-image pixels."""
        return (x + self.offset[0], y + self.offset[1])

    def from_source(self, x: float, y: float) -> Tuple[float, float]:
        return (x - self.offset[0], y - self.offset[1])


def crop_region(image: ImageRef, b: BBox) -> ImageRef:
    """Crop ``b`` (in ``image``'s native pixels) out of ``image``.

    The box is clamped and snapped to whole pixels; the returned handle
    records its offset in the root image so points map back exactly.

    Raises:
        EmptyCrop: if the clamped box covers no whole pixel.
    """
    b = b.clamp(image.resolution)
    x0 = int(round(b.x_min))
    y0 = int(round(b.y_min))
    x1 = min(x0 + int(round(b.width)), image.resolution.width)
    y1 = min(y0 + int(round(b.height)), image.resolution.height)
    if x1 <= x0 or y1 <= y0:
        raise EmptyCrop(f"crop {b.as_list()} is empty in {image.resolution}")
    if (x0, y0, x1, y1) == (0, 0, image.resolution.width, image.resolution.height):
        return replace(image, view=None)
    ox, oy = image.offset
    return ImageRef(
        uri=image.uri,
        resolution=Resolution(x1 - x0, y1 - y0),
        offset=(ox + x0, oy + y0),
        source_resolution=image.source_resolution,
    )
