"""Image reference resolution and pixel materialization.

Three URI forms are understood:

* plain file paths (or ``file://`` URIs) to raster images readable by Pillow;
* ``mem://<name>`` for arrays registered with :func:`register_array`;
* ``sim://<name>`` for virtual images that carry a resolution but no pixels
  (the synthetic scenes in :mod:`cropzoom.simlab`).
"""

from __future__ import annotations

import base64
import io
import os
import threading
from typing import Dict, Optional

import numpy as np
from PIL import Image

from .geometry import ImageRef, Resolution


class ImageLoadError(OSError):
    pass


_MEMORY: Dict[str, np.ndarray] = {}
_LOCK = threading.Lock()


def register_array(name: str, pixels: np.ndarray) -> str:
    """Register ``pixels`` (H x W or H x W x C, uint8) and return its ``mem://`` URI."""
    pixels = np.asarray(pixels)
    if pixels.ndim not in (2, 3):
        raise ValueError(f"expected a 2-D or 3-D array, got shape {pixels.shape}")
    with _LOCK:
        _MEMORY[name] = pixels
    return f"mem://{name}"


def _path(uri: str) -> str:
    return uri[len("file://"):] if uri.startswith("file://") else uri


def resolve_image(uri: str, declared: Optional[Resolution] = None) -> ImageRef:
    """Return a full-image handle for ``uri``.

    ``declared`` is required for ``sim://`` images and, when given for real
    files, must agree with the file's actual size.
    """
    if uri.startswith("sim://"):
        if declared is None:
            raise ImageLoadError(f"{uri}: virtual image needs a declared resolution")
        return ImageRef(uri, declared)
    if uri.startswith("mem://"):
        with _LOCK:
            pixels = _MEMORY.get(uri[len("mem://"):])
        if pixels is None:
            raise ImageLoadError(f"{uri}: not registered")
        actual = Resolution(pixels.shape[1], pixels.shape[0])
    else:
        path = _path(uri)
        if not os.path.isfile(path):
            raise ImageLoadError(f"{uri}: no such file")
        try:
            with Image.open(path) as im:
                actual = Resolution(*im.size)
        except (OSError, ValueError) as exc:
            raise ImageLoadError(f"{uri}: {exc}") from exc
    if declared is not None and declared != actual:
        raise ImageLoadError(f"{uri}: declared {declared} but image is {actual}")
    return ImageRef(uri, actual)


def materialize(ref: ImageRef) -> Image.Image:
    """Load the pixels behind ``ref``: crop to its window, resize to its view."""
    if ref.uri.startswith("sim://"):
        raise ImageLoadError(f"{ref.uri}: virtual image has no pixels")
    if ref.uri.startswith("mem://"):
        with _LOCK:
            pixels = _MEMORY.get(ref.uri[len("mem://"):])
        if pixels is None:
            raise ImageLoadError(f"{ref.uri}: not registered")
        im = Image.fromarray(pixels)
    else:
        try:
            im = Image.open(_path(ref.uri))
            im.load()
        except (OSError, ValueError) as exc:
            raise ImageLoadError(f"{ref.uri}: {exc}") from exc
    ox, oy = ref.offset
    im = im.crop((ox, oy, ox + ref.resolution.width, oy + ref.resolution.height))
    if ref.view is not None and ref.view != ref.resolution:
        im = im.resize(ref.view.as_tuple(), Image.Resampling.BICUBIC)
    return im


def encode_png_base64(ref: ImageRef) -> str:
    buf = io.BytesIO()
    materialize(ref).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")
