"""The full network: shared backbone, detector head, relationship head.

Parameters live in one flat ``name -> float32 array`` dict. The prefix says
who owns a tensor: ``backbone.`` (shared features), ``det.`` (detector) and
``rel.`` (relationship head).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from vmrn import relhead
from vmrn.autodiff import ops
from vmrn.autodiff.tensor import Tensor
from vmrn.dataio import DEFAULT_CLASSES
from vmrn.detector import Detection, decode_detections, gen_default_boxes
from vmrn.op2l import enumerate_pairs, pool_pairs
from vmrn.reltree import ManipulationTree, build_tree

GROUPS = ("backbone.", "det.", "rel.")


@dataclass
class ModelConfig:
    image_size: int = 64
    widths: tuple[int, ...] = (16, 32)
    channels: int = 32
    pool: int = 7
    hidden: int = 64
    classes: tuple[str, ...] = DEFAULT_CLASSES
    scales: tuple[float, ...] = (0.15, 0.25, 0.35, 0.5)
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    conf_threshold: float = 0.5
    nms_iou: float = 0.45
    top_k: int = 10
    rel_out_scale: float = 0.0
    # ranked detections for mAP keep low-confidence boxes
    map_threshold: float = 0.01
    map_top_k: int = 50

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def feature_size(self) -> int:
        # one 2x2 pool after each of the first len(widths) stages
        return self.image_size // (2 ** len(self.widths))

    @property
    def boxes_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


def _he(rng, shape, fan):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan)).astype(np.float32)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 17])
    params: dict[str, np.ndarray] = {}
    cin = 3
    for k, cout in enumerate(list(cfg.widths) + [cfg.channels]):
        params[f"backbone.conv{k + 1}.weight"] = _he(rng, (cout, cin, 3, 3), cin * 9)
        params[f"backbone.conv{k + 1}.bias"] = np.zeros(cout, np.float32)
        cin = cout
    k_box = cfg.boxes_per_cell
    c = cfg.channels
    params["det.loc.weight"] = (rng.standard_normal((4 * k_box, c, 3, 3)) * 0.01).astype(np.float32)
    params["det.loc.bias"] = np.zeros(4 * k_box, np.float32)
    params["det.conf.weight"] = (rng.standard_normal((k_box * (cfg.num_classes + 1), c, 3, 3)) * 0.01).astype(np.float32)
    conf_bias = np.zeros((k_box, cfg.num_classes + 1), np.float32)
    # start out predicting mostly background so mining sees sane losses
    conf_bias[:, 0] = math.log(cfg.num_classes * 20.0)
    params["det.conf.bias"] = conf_bias.reshape(-1)
    params.update(relhead.init_params(c, (cfg.pool, cfg.pool), cfg.hidden, rng))
    # a near-silent relation output keeps its first gradients from swamping the
    # freshly pretrained shared features
    params["rel.fc2.weight"] *= np.float32(cfg.rel_out_scale)
    return params


def group_of(name: str) -> str:
    for g in GROUPS:
        if name.startswith(g):
            return g
    raise KeyError(f"parameter {name!r} has no known owner prefix")


def backbone(params: dict[str, Tensor], x) -> Tensor:
    """Conv+relu stages; every stage but the last is followed by 2x2 max pooling."""
    k = 1
    h = x
    while f"backbone.conv{k}.weight" in params:
        h = ops.relu(ops.conv2d(h, params[f"backbone.conv{k}.weight"], params[f"backbone.conv{k}.bias"], padding=1))
        if f"backbone.conv{k + 1}.weight" in params:
            h = ops.maxpool2d(h, 2)
        k += 1
    return h


def detector_head(params: dict[str, Tensor], feats, num_classes: int) -> tuple[Tensor, Tensor]:
    """(N, D, 4) offsets and (N, D, K + 1) logits, defaults ordered row-major."""
    n, _, gh, gw = feats.shape
    loc = ops.conv2d(feats, params["det.loc.weight"], params["det.loc.bias"], padding=1)
    conf = ops.conv2d(feats, params["det.conf.weight"], params["det.conf.bias"], padding=1)
    loc = ops.reshape(ops.transpose(loc, (0, 2, 3, 1)), (n, -1, 4))
    conf = ops.reshape(ops.transpose(conf, (0, 2, 3, 1)), (n, -1, num_classes + 1))
    return loc, conf


@dataclass
class Prediction:
    detections: list[Detection]
    rel_probs: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    tree: ManipulationTree | None = None


class VMRN:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        fs = cfg.feature_size
        self.defaults = gen_default_boxes((fs, fs), cfg.image_size, cfg.scales, cfg.aspect_ratios).boxes

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def features(self, images: np.ndarray) -> np.ndarray:
        return backbone(self.tensors(), Tensor(np.asarray(images, np.float32))).data

    def detect(self, feats: np.ndarray, ranked: bool = False) -> list[list[Detection]]:
        """Detections per image; ``ranked`` uses the low mAP threshold instead."""
        c = self.cfg
        th, k = (c.map_threshold, c.map_top_k) if ranked else (c.conf_threshold, c.top_k)
        loc, conf = detector_head(self.tensors(), Tensor(feats), c.num_classes)
        return [self.decode(loc.data[n], conf.data[n], th, k) for n in range(len(feats))]

    def decode(self, loc: np.ndarray, conf: np.ndarray, threshold: float | None = None, top_k: int | None = None):
        c = self.cfg
        th = c.conf_threshold if threshold is None else threshold
        return decode_detections(loc, conf, self.defaults, c.image_size, th, c.nms_iou, top_k or c.top_k)

    def relation_probs(self, feats: np.ndarray, boxes_per_image) -> list[dict[tuple[int, int], np.ndarray]]:
        """Ordered-pair probabilities for the given boxes of each image."""
        pairs = [enumerate_pairs(b) if len(b) > 1 else [] for b in boxes_per_image]
        out: list[dict] = [{} for _ in pairs]
        if not any(pairs):
            return out
        t = self.tensors()
        block, prov = pool_pairs(Tensor(feats), pairs, self.cfg.image_size, (self.cfg.pool, self.cfg.pool))
        probs = ops.softmax(relhead.logits(t, block).data.astype(np.float64))
        for (n, p), pr in zip(prov, probs):
            out[n][(p.i, p.j)] = pr
        return out

    def predict(self, image: np.ndarray) -> Prediction:
        feats = self.features(np.asarray(image)[None])
        dets = self.detect(feats)[0]
        probs = self.relation_probs(feats, [[d.bbox for d in dets]])[0]
        tree = build_tree(list(range(len(dets))), probs)
        return Prediction(dets, probs, tree)
