"""Single-scale single-shot detector: default boxes, matching, loss, decoding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from vmrn.autodiff import ops
from vmrn.autodiff.tensor import Tensor
from vmrn.geometry import BBox, decode_array, encode_array, iou_array

BACKGROUND = 0


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    cls: int
    conf: tuple[float, ...]  # softmax over object classes, background excluded

    @property
    def score(self) -> float:
        return self.conf[self.cls]


@dataclass(frozen=True)
class DefaultBoxSet:
    boxes: np.ndarray  # (D, 4)
    grid: tuple[int, int]
    boxes_per_cell: int

    def __len__(self) -> int:
        return len(self.boxes)


def gen_default_boxes(
    grid: tuple[int, int],
    image_size: tuple[int, int] | int,
    scales: Sequence[float] = (0.2, 0.32, 0.45),
    aspect_ratios: Sequence[float] = (1.0, 2.0, 0.5),
) -> DefaultBoxSet:
    """Centered boxes per cell, ordered row-major, then scale, then ratio.

    ``scales`` are fractions of the image side; ratio is width / height.
    """
    gh, gw = grid
    if gh < 1 or gw < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid}")
    img_h, img_w = (image_size, image_size) if isinstance(image_size, int) else image_size
    out = []
    for i in range(gh):
        cy = (i + 0.5) * img_h / gh
        for j in range(gw):
            cx = (j + 0.5) * img_w / gw
            for s in scales:
                for r in aspect_ratios:
                    w = s * img_w * math.sqrt(r)
                    h = s * img_h / math.sqrt(r)
                    out.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    boxes = np.array(out, dtype=np.float64)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, img_w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, img_h)
    return DefaultBoxSet(boxes, (gh, gw), len(scales) * len(aspect_ratios))


def match_defaults(defaults: np.ndarray, gt_boxes: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Assign each default a ground-truth index, or -1 for background.

    Every gt first claims a distinct default greedily by highest IoU (ties to
    the lower gt, then lower default index). Remaining defaults take their
    best gt when the IoU reaches ``threshold``.
    """
    defaults = np.asarray(defaults, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    assign = np.full(len(defaults), -1, dtype=np.intp)
    if len(gt_boxes) == 0:
        return assign
    table = iou_array(gt_boxes, defaults)  # (G, D)
    best_gt = table.argmax(axis=0)
    best_iou = table[best_gt, np.arange(len(defaults))]
    assign[best_iou >= threshold] = best_gt[best_iou >= threshold]
    work = table.copy()
    for _ in range(min(len(gt_boxes), len(defaults))):
        flat = int(work.argmax())
        g, d = divmod(flat, work.shape[1])
        assign[d] = g
        work[g, :] = -1.0
        work[:, d] = -1.0
    return assign


@dataclass
class DetectionTargets:
    assign: np.ndarray  # (N, D) gt index or -1
    labels: np.ndarray  # (N, D) class target, 0 = background
    offsets: np.ndarray  # (N, D, 4) encoded regression targets (0 on negatives)


def build_targets(defaults: np.ndarray, gt_boxes: Sequence[np.ndarray], gt_classes: Sequence[np.ndarray]) -> DetectionTargets:
    """Match every image and encode targets; object class k becomes label k + 1."""
    n, d = len(gt_boxes), len(defaults)
    assign = np.full((n, d), -1, dtype=np.intp)
    labels = np.zeros((n, d), dtype=np.intp)
    offsets = np.zeros((n, d, 4))
    for k, (boxes, classes) in enumerate(zip(gt_boxes, gt_classes)):
        a = match_defaults(defaults, boxes)
        assign[k] = a
        pos = a >= 0
        if pos.any():
            labels[k, pos] = np.asarray(classes)[a[pos]] + 1
            offsets[k, pos] = encode_array(np.asarray(boxes, dtype=np.float64)[a[pos]], defaults[pos])
    return DetectionTargets(assign, labels, offsets)


def mine_negatives(conf_logits: np.ndarray, labels: np.ndarray, ratio: int = 3) -> np.ndarray:
    """Positive rows plus the hardest background rows at ``ratio``:1.

    Images without positives still keep ``ratio`` negatives. Returns a
    boolean (N, D) selection mask.
    """
    n, d, _ = conf_logits.shape
    keep = labels > 0
    for k in range(n):
        neg = np.flatnonzero(labels[k] == BACKGROUND)
        if len(neg) == 0:
            continue
        npos = int(keep[k].sum())
        take = min(ratio * max(npos, 1), len(neg))
        losses = ops.cross_entropy_rows(conf_logits[k, neg], np.zeros(len(neg), dtype=np.intp))
        order = np.argsort(-losses, kind="stable")
        keep[k, neg[order[:take]]] = True
    return keep


def detection_loss(
    loc: Tensor,
    conf: Tensor,
    targets: DetectionTargets,
    alpha: float = 1.0,
    neg_ratio: int = 3,
) -> tuple[Tensor, Tensor, Tensor]:
    """``(L_loc, L_conf, L_loc + alpha * L_conf)``, normalised by positives.

    ``loc`` is (N, D, 4) offsets, ``conf`` is (N, D, K + 1) logits.
    """
    n, d, kk = conf.shape
    pos = targets.labels > 0
    norm = max(int(pos.sum()), 1)
    selected = mine_negatives(conf.data, targets.labels, neg_ratio)
    loc_w = (pos.astype(loc.dtype) / norm)[..., None]
    l_loc = ops.smooth_l1(loc, targets.offsets.astype(loc.dtype), loc_w)
    conf_w = selected.reshape(-1).astype(conf.dtype) / norm
    l_conf = ops.softmax_cross_entropy(ops.reshape(conf, (n * d, kk)), targets.labels.reshape(-1), conf_w)
    total = ops.add(l_loc, ops.mul(l_conf, alpha))
    return l_loc, l_conf, total


def _nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], *boxes[k]))
    keep: list[int] = []
    for k in order:
        if keep and np.any(iou_array(boxes[k], boxes[keep])[0] > iou_threshold):
            continue
        keep.append(k)
    return keep


def decode_detections(
    loc: np.ndarray,
    conf_logits: np.ndarray,
    defaults: np.ndarray,
    image_size: tuple[int, int] | int,
    conf_threshold: float = 0.5,
    nms_iou: float = 0.45,
    top_k: int = 10,
) -> list[Detection]:
    """Turn one image's raw outputs into at most ``top_k`` detections.

    A default can only emit its top object class. Per class: threshold,
    greedy NMS; then a global sort by score with coordinates as tiebreak.
    """
    img_h, img_w = (image_size, image_size) if isinstance(image_size, int) else image_size
    probs = ops.softmax(np.asarray(conf_logits, dtype=np.float64))
    obj = probs[:, 1:]
    top = obj.argmax(axis=1)
    boxes = decode_array(np.asarray(loc, dtype=np.float64), defaults)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, img_w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, img_h)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    found = []
    for c in range(obj.shape[1]):
        cand = np.flatnonzero(valid & (top == c) & (obj[:, c] >= conf_threshold))
        if len(cand) == 0:
            continue
        for k in _nms(boxes[cand], obj[cand, c], nms_iou):
            found.append((int(cand[k]), c))
    found.sort(key=lambda kc: (-obj[kc[0], kc[1]], *boxes[kc[0]], kc[1]))
    return [
        Detection(BBox(*(float(v) for v in boxes[k])), c, tuple(float(v) for v in obj[k]))
        for k, c in found[:top_k]
    ]


def detection_records(image_id: str, detections: Iterable[Detection]) -> list[dict]:
    return [
        {"image_id": image_id, "cls": d.cls, "conf": d.score, "bbox": [float(v) for v in d.bbox]}
        for d in detections
    ]


def dump_detections(records: Iterable[dict], fh) -> None:
    for r in records:
        fh.write(json.dumps(r) + "\n")
