"""Annotated PNG output: boxes, class labels and parent -> child arrows."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from vmrn.detector import Detection
from vmrn.reltree import ManipulationTree

_COLORS = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230)]


def _arrow(draw: ImageDraw.ImageDraw, start, end, color, head: float = 8.0) -> None:
    draw.line([start, end], fill=color, width=2)
    angle = math.atan2(end[1] - start[1], end[0] - start[0])
    left = (end[0] - head * math.cos(angle - 0.4), end[1] - head * math.sin(angle - 0.4))
    right = (end[0] - head * math.cos(angle + 0.4), end[1] - head * math.sin(angle + 0.4))
    draw.polygon([end, left, right], fill=color)


def render_prediction(
    image: np.ndarray,
    detections: Sequence[Detection],
    classes: Sequence[str],
    tree: ManipulationTree | None = None,
    scale: int = 4,
) -> Image.Image:
    """Upscaled RGB image of a (3, H, W) float input with predictions drawn on."""
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    im = Image.fromarray(arr, mode="RGB")
    im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    centres = []
    for k, d in enumerate(detections):
        color = _COLORS[k % len(_COLORS)]
        box = [v * scale for v in d.bbox]
        draw.rectangle(box, outline=color, width=2)
        draw.text((box[0] + 2, box[1] + 1), f"{k}:{classes[d.cls]} {d.score:.2f}", fill=color)
        centres.append(((box[0] + box[2]) / 2, (box[1] + box[3]) / 2))
    if tree is not None:
        for parent, child in sorted(tree.edges):
            _arrow(draw, centres[parent], centres[child], (255, 255, 0))
    return im


def save_prediction_png(path, image, detections, classes, tree=None, scale: int = 4) -> None:
    render_prediction(image, detections, classes, tree, scale).save(path)
