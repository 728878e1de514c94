"""Benchmark samples and the line-delimited JSON dataset format.

One JSON object per line::

    {"id": "s1", "image": "scene.png", "width": 4096, "height": 4096,
     "question": "What color is the top-most ship?", "level": "object",
     "category": "color/pattern", "answer": "white",
     "bbox": [100, 200, 180, 260], "task": "vqa"}

``bbox`` (original-image pixels) is required for region and object levels.
``task`` is ``"vqa"`` (default) or ``"downstream"`` for tool-invocation items.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, List, Optional

from .geometry import BBox, Resolution
from .protocol import CATEGORIES, Level, TaskKind


class FileUnreadable(OSError):
    pass


class SchemaError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


TASKS = ("vqa", "downstream")


@dataclass(frozen=True)
class QASample:
    sample_id: str
    image: str
    resolution: Resolution
    question: str
    level: Level
    category: str
    answer: str
    bbox: Optional[BBox] = None
    task: str = "vqa"

    def __post_init__(self):
        object.__setattr__(self, "level", Level(self.level))
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.level is not Level.GLOBAL and self.bbox is None:
            raise ValueError(f"{self.level.value} sample requires a bbox")
        if self.bbox is not None and not self.bbox.within(self.resolution):
            raise ValueError(f"bbox {self.bbox.as_list()} outside {self.resolution}")

    @property
    def kind(self) -> TaskKind:
        return TaskKind.for_level(self.level, self.category, downstream=self.task == "downstream")

    def to_json(self) -> dict:
        return {
            "id": self.sample_id,
            "image": self.image,
            "width": self.resolution.width,
            "height": self.resolution.height,
            "question": self.question,
            "level": self.level.value,
            "category": self.category,
            "answer": self.answer,
            "bbox": self.bbox.as_list() if self.bbox is not None else None,
            "task": self.task,
        }

    @classmethod
    def from_json(cls, obj: dict, base_dir: Optional[str] = None) -> "QASample":
        """Validate one record.  Relative image paths resolve against ``base_dir``."""
        if not isinstance(obj, dict):
            raise ValueError("record must be a JSON object")
        required = ("id", "image", "width", "height", "question", "level", "answer")
        missing = [k for k in required if k not in obj]
        if missing:
            raise ValueError(f"missing fields: {', '.join(missing)}")
        try:
            level = Level(obj["level"])
        except ValueError:
            raise ValueError(f"invalid level {obj['level']!r}") from None
        category = str(obj.get("category", "")).strip().lower()
        if category and category not in CATEGORIES[level]:
            raise ValueError(f"category {category!r} not defined for level {level.value}")
        bbox = obj.get("bbox")
        if bbox is not None:
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise ValueError("bbox must be a list of four numbers")
            bbox = BBox.from_corners(bbox)
        image = str(obj["image"])
        if base_dir and "://" not in image and not os.path.isabs(image):
            image = os.path.join(base_dir, image)
        return cls(
            sample_id=str(obj["id"]),
            image=image,
            resolution=Resolution(obj["width"], obj["height"]),
            question=str(obj["question"]),
            level=level,
            category=category,
            answer=str(obj["answer"]),
            bbox=bbox,
            task=str(obj.get("task", "vqa")),
        )


def parse_dataset_lines(lines: Iterable[str], base_dir=None, errors: Optional[list] = None) -> List[QASample]:
    samples = []
    seen = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            sample = QASample.from_json(json.loads(line), base_dir)
            if sample.sample_id in seen:
                raise ValueError(f"duplicate id {sample.sample_id!r}")
        except (ValueError, TypeError) as exc:
            err = SchemaError(lineno, str(exc))
            if errors is None:
                raise err from exc
            errors.append(err)
            continue
        seen.add(sample.sample_id)
        samples.append(sample)
    return samples


def load_dataset(path, errors: Optional[list] = None) -> List[QASample]:
    """Load a JSONL dataset.

    Invalid lines become :class:`SchemaError` entries appended to ``errors``
    and are skipped; without an ``errors`` list the first one is raised.
    Image paths are resolved relative to the dataset file.

    Raises:
        FileUnreadable: ``path`` cannot be opened.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FileUnreadable(f"{path}: {exc}") from exc
    return parse_dataset_lines(lines, os.path.dirname(os.path.abspath(path)), errors)


def write_dataset(samples: Iterable[QASample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
