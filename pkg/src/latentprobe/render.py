"""Tensor-to-PNG rendering for judged pairs and comparison grids."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

Array = np.ndarray


def png_info(metadata: Mapping[str, str] | None) -> PngInfo | None:
    if not metadata:
        return None
    info = PngInfo()
    for key, value in metadata.items():
        info.add_text(str(key), str(value))
    return info


def to_image(pixels: Array) -> Image.Image:
    """Render a (c, h, w) or (1, c, h, w) float tensor, clamped to [0, 1]."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, h, w) pixels, got {arr.shape}")
    clamped = np.clip(arr, 0.0, 1.0)
    bytes8 = (clamped * 255.0 + 0.5).astype(np.uint8)
    if bytes8.shape[0] == 1:
        return Image.fromarray(bytes8[0], mode="L")
    return Image.fromarray(bytes8.transpose(1, 2, 0), mode="RGB")


def difference_image(unperturbed: Array, perturbed: Array, scale: float = 1.0) -> Image.Image:
    """Mid-grey-centred difference, optionally scaled for visibility."""
    u = np.asarray(unperturbed, dtype=np.float32)
    p = np.asarray(perturbed, dtype=np.float32)
    diff = (p - u) * np.float32(scale)
    return to_image(0.5 + 0.5 * diff.reshape(u.shape))


def save_png(pixels: Array, path: str | Path, metadata: Mapping[str, str] | None = None) -> None:
    to_image(pixels).save(path, format="PNG", pnginfo=png_info(metadata))


def triple_grid(
    unperturbed: Array,
    perturbed: Array,
    diff_scale: float = 1.0,
    gap: int = 4,
) -> Image.Image:
    """Side-by-side unperturbed / perturbed / difference panel."""
    panels = [
        to_image(unperturbed),
        to_image(perturbed),
        difference_image(unperturbed, perturbed, scale=diff_scale),
    ]
    panels = [p.convert("RGB") for p in panels]
    h = max(p.height for p in panels)
    w = sum(p.width for p in panels) + gap * (len(panels) - 1)
    canvas = Image.new("RGB", (w, h), (255, 255, 255))
    x = 0
    for p in panels:
        canvas.paste(p, (x, 0))
        x += p.width + gap
    return canvas
