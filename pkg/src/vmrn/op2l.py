"""Object pairing pooling.

Every ordered pair of boxes gets a ``3C x H x W`` feature block: the pooled
subject crop, the pooled object crop and the pooled crop of their union box,
concatenated along channels. Crops come from the shared feature map, so
boxes reused across pairs accumulate gradient into the same cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vmrn.autodiff import ops
from vmrn.autodiff.ops import InvalidInputError
from vmrn.autodiff.tensor import ShapeError, Tensor, as_tensor
from vmrn.geometry import BBox, as_box, union_box


@dataclass(frozen=True)
class ObjectPair:
    i: int
    j: int
    subject: BBox
    object: BBox
    union: BBox


@dataclass
class PairBatch:
    features: Tensor  # (P, 3C, H, W)
    pairs: list[ObjectPair]
    labels: np.ndarray | None = None


def enumerate_pairs(boxes: Sequence) -> list[ObjectPair]:
    """All ordered pairs ``(i, j)``, ``i != j``, i-major."""
    boxes = [as_box(b).validate() for b in boxes]
    return [
        ObjectPair(i, j, a, b, union_box(a, b))
        for i, a in enumerate(boxes)
        for j, b in enumerate(boxes)
        if i != j
    ]


def _size2(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def project_box(box, image_size, feature_size) -> tuple[int, int, int, int]:
    """Feature-cell window ``(r0, r1, c0, c1)`` covering an image box.

    Starts floor, ends ceil, and every window keeps at least one cell.
    """
    img_h, img_w = _size2(image_size)
    fh, fw = _size2(feature_size)
    b = as_box(box)
    clipped = b.clip(img_w, img_h)
    if not (clipped.x_max > clipped.x_min and clipped.y_max > clipped.y_min):
        raise InvalidInputError(f"box {tuple(b)} lies outside the {img_w}x{img_h} image")
    sy, sx = fh / img_h, fw / img_w
    r0 = min(int(math.floor(clipped.y_min * sy)), fh - 1)
    c0 = min(int(math.floor(clipped.x_min * sx)), fw - 1)
    r1 = min(max(r0 + 1, int(math.ceil(clipped.y_max * sy))), fh)
    c1 = min(max(c0 + 1, int(math.ceil(clipped.x_max * sx))), fw)
    return r0, r1, c0, c1


def crop_pool(features, box, image_size, out_size=(7, 7)) -> Tensor:
    """Crop one box from a C x h x w map and adaptively max-pool it."""
    features = as_tensor(features)
    if features.data.ndim != 3:
        raise ShapeError(f"crop_pool expects C x h x w features, got {features.shape}")
    c, h, w = features.shape
    r0, r1, c0, c1 = project_box(box, image_size, (h, w))
    pooled = ops.roi_maxpool(ops.reshape(features, (1, c, h, w)), [(0, r0, r1, c0, c1)], _size2(out_size))
    return ops.reshape(pooled, (c,) + _size2(out_size))


def pool_pairs(
    features,
    image_pairs: Sequence[Sequence[ObjectPair]],
    image_size,
    out_size=(7, 7),
) -> tuple[Tensor, list[tuple[int, ObjectPair]]]:
    """Pair blocks for a batch of images in one pooling call.

    ``features`` is (N, C, h, w); ``image_pairs[n]`` lists the pairs of image
    n. Identical windows are pooled once. Rows come out image-major, then in
    the given pair order.
    """
    features = as_tensor(features)
    if features.data.ndim != 4:
        raise ShapeError(f"pool_pairs expects N x C x h x w features, got {features.shape}")
    if len(image_pairs) != features.shape[0]:
        raise ShapeError(f"{len(image_pairs)} pair lists for {features.shape[0]} feature maps")
    fsize = features.shape[2:]
    windows: dict[tuple[int, ...], int] = {}
    rows: list[list[int]] = [[], [], []]
    provenance: list[tuple[int, ObjectPair]] = []
    for n, pairs in enumerate(image_pairs):
        for p in pairs:
            for slot, box in enumerate((p.subject, p.object, p.union)):
                key = (n,) + project_box(box, image_size, fsize)
                rows[slot].append(windows.setdefault(key, len(windows)))
            provenance.append((n, p))
    if not provenance:
        raise InvalidInputError("pool_pairs needs at least one pair")
    pooled = ops.roi_maxpool(features, list(windows), _size2(out_size))
    blocks = [ops.take_rows(pooled, r) for r in rows]
    return ops.concat(blocks, axis=1), provenance


def assemble_batch(features, pairs: Sequence[ObjectPair], image_size, out_size=(7, 7), labels=None) -> PairBatch:
    """``[subject | object | union]`` blocks for one image's pairs."""
    features = as_tensor(features)
    if not pairs:
        raise InvalidInputError("assemble_batch needs at least one pair")
    if features.data.ndim != 3:
        raise ShapeError(f"assemble_batch expects C x h x w features, got {features.shape}")
    batched = ops.reshape(features, (1,) + features.shape)
    block, _ = pool_pairs(batched, [pairs], image_size, out_size)
    return PairBatch(block, list(pairs), None if labels is None else np.asarray(labels))


def accumulate_gradients(features: np.ndarray, pair_grads: np.ndarray, pairs: Sequence[ObjectPair], image_size, out_size=(7, 7)) -> np.ndarray:
    """Gradient on the shared C x h x w map from per-pair block gradients.

    Max pooling routes gradient by argmax, so the forward feature values are
    needed. Contributions from every crop touching a cell are summed in pair
    order.
    """
    features = np.asarray(features)
    c = features.shape[0]
    oh, ow = _size2(out_size)
    pair_grads = np.asarray(pair_grads)
    expected = (len(pairs), 3 * c, oh, ow)
    if pair_grads.shape != expected:
        raise ShapeError(f"pair gradients {pair_grads.shape} do not match batch shape {expected}")
    leaf = Tensor(features, requires_grad=True)
    batch = assemble_batch(leaf, pairs, image_size, out_size)
    batch.features.backward(pair_grads.astype(features.dtype))
    return leaf.grad if leaf.grad is not None else np.zeros_like(features)
