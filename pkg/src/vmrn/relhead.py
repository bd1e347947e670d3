"""Relationship predictor over pair blocks, its losses, and online labelling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vmrn.autodiff import ops
from vmrn.autodiff.tensor import ShapeError, Tensor, as_tensor
from vmrn.geometry import iou_array
from vmrn.reltree import RelationLabel, tree_to_labels

ONLINE = "online"
OFFLINE = "offline"

# conv 3C->C, fc C*H*W -> hidden, fc hidden -> 3; keys prefixed "rel."
RelHeadParams = dict[str, np.ndarray]


@dataclass
class RelSample:
    subject: int
    object: int
    label: RelationLabel
    source: str = ONLINE


def init_params(channels: int, pool: tuple[int, int] = (7, 7), hidden: int = 64, rng=None, dtype=np.float32) -> dict[str, np.ndarray]:
    """One 3x3 conv (3C -> C), then fc (C*H*W -> hidden) and fc (hidden -> 3)."""
    rng = rng or np.random.default_rng(0)
    ph, pw = pool
    fan_conv = 3 * channels * 9
    fan_fc = channels * ph * pw

    def he(shape, fan):
        return (rng.standard_normal(shape) * math.sqrt(2.0 / fan)).astype(dtype)

    return {
        "rel.conv.weight": he((channels, 3 * channels, 3, 3), fan_conv),
        "rel.conv.bias": np.zeros(channels, dtype),
        "rel.fc1.weight": he((hidden, fan_fc), fan_fc),
        "rel.fc1.bias": np.zeros(hidden, dtype),
        "rel.fc2.weight": (rng.standard_normal((3, hidden)) * math.sqrt(1.0 / hidden)).astype(dtype),
        "rel.fc2.bias": np.zeros(3, dtype),
    }


def logits(params: dict[str, Tensor], pair_features) -> Tensor:
    x = as_tensor(pair_features)
    w = params["rel.conv.weight"]
    if x.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"pair features {x.shape} do not fit a head expecting {w.shape[1]} channels")
    h = ops.relu(ops.conv2d(x, w, params["rel.conv.bias"], padding=1))
    h = ops.reshape(h, (h.shape[0], -1))
    if h.shape[1] != params["rel.fc1.weight"].shape[1]:
        raise ShapeError(f"pooled size gives {h.shape[1]} features, head expects {params['rel.fc1.weight'].shape[1]}")
    h = ops.relu(ops.linear(h, params["rel.fc1.weight"], params["rel.fc1.bias"]))
    return ops.linear(h, params["rel.fc2.weight"], params["rel.fc2.bias"])


def predict(params, pair_features) -> np.ndarray:
    """(P, 3) probabilities over (parent-of, child-of, no-relation)."""
    params = {k: as_tensor(v) for k, v in params.items()}
    x = as_tensor(pair_features)
    single = x.data.ndim == 3
    if single:
        x = ops.reshape(x, (1,) + x.shape)
    p = ops.softmax(logits(params, x).data.astype(np.float64))
    return p[0] if single else p


def rel_loss(prob3, label) -> float:
    """Negative log-likelihood of the labelled class."""
    p = float(np.asarray(prob3, dtype=np.float64)[int(label) - 1])
    return math.inf if p <= 0 else -math.log(p)


def image_rel_loss(online_losses, offline_losses, lam: float = 0.5):
    """``lam * sum(online) + (1 - lam) * sum(offline)``; works on floats or tensors."""
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    on = _total(online_losses)
    off = _total(offline_losses)
    if isinstance(on, Tensor) or isinstance(off, Tensor):
        return ops.add(ops.mul(on, lam), ops.mul(off, 1.0 - lam))
    return lam * on + (1.0 - lam) * off


def _total(losses):
    if isinstance(losses, Tensor):
        return ops.sum(losses) if losses.data.ndim else losses
    items = list(losses)
    if any(isinstance(v, Tensor) for v in items):
        out = Tensor(0.0)
        for v in items:
            out = ops.add(out, v)
        return out
    return float(math.fsum(float(v) for v in items))


def match_to_gt(det_boxes: np.ndarray, gt_boxes: np.ndarray, threshold: float = 0.5, det_scores: Sequence[float] | None = None) -> np.ndarray:
    """gt index per detection, or -1 when dropped.

    Each detection takes the gt of maximal IoU (ties to the lowest gt index)
    and is dropped below ``threshold``. When several detections land on one
    gt only the best survives: higher IoU, then higher score, then smaller
    coordinates, so the result does not depend on detection order.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    out = np.full(len(det_boxes), -1, dtype=np.intp)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return out
    scores = np.zeros(len(det_boxes)) if det_scores is None else np.asarray(det_scores, dtype=np.float64)
    table = iou_array(det_boxes, gt_boxes)
    best = table.argmax(axis=1)
    best_iou = table[np.arange(len(det_boxes)), best]
    winner: dict[int, int] = {}
    for d in range(len(det_boxes)):
        if best_iou[d] < threshold:
            continue
        g = int(best[d])
        key = (-best_iou[d], -scores[d], *det_boxes[d])
        if g not in winner or key < (-best_iou[winner[g]], -scores[winner[g]], *det_boxes[winner[g]]):
            winner[g] = d
    for g, d in winner.items():
        out[d] = g
    return out


def assign_online_labels(detections, gt, threshold: float = 0.5) -> list[RelSample]:
    """Label ordered detection pairs by the relation of their matched gt objects.

    ``detections`` are :class:`~vmrn.detector.Detection` objects or raw boxes;
    ``gt`` is a :class:`~vmrn.dataio.SceneAnnotation`.
    """
    boxes, scores = [], []
    for d in detections:
        if hasattr(d, "bbox"):
            boxes.append(tuple(d.bbox))
            scores.append(d.score)
        else:
            boxes.append(tuple(d))
            scores.append(0.0)
    # gt sorted by node index so IoU ties go to the lowest node index
    by_node = sorted(gt.objects, key=lambda o: o.node_index)
    gt_boxes = np.array([tuple(o.bbox) for o in by_node], dtype=np.float64).reshape(-1, 4)
    matched = match_to_gt(np.array(boxes).reshape(-1, 4), gt_boxes, threshold, scores)
    nodes = [o.node_index for o in by_node]
    labels = tree_to_labels(gt.tree())
    kept = [k for k in range(len(boxes)) if matched[k] >= 0]
    out = []
    for a in kept:
        for b in kept:
            if a != b:
                lab = labels[(nodes[matched[a]], nodes[matched[b]])]
                out.append(RelSample(a, b, lab, ONLINE))
    return out


def offline_samples(gt) -> list[RelSample]:
    """Every ordered gt pair with its tree label."""
    labels = tree_to_labels(gt.tree())
    nodes = [o.node_index for o in gt.objects]
    return [
        RelSample(a, b, labels[(nodes[a], nodes[b])], OFFLINE)
        for a in range(len(nodes))
        for b in range(len(nodes))
        if a != b
    ]
