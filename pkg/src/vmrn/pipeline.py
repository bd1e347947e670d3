"""Joint training of backbone, detector and relationship head.

Gradient routing per step:

* detector parameters get the gradient of the detection loss only,
* relationship-head parameters get the gradient of the relation loss only,
* the backbone gets ``mu * dL_OD/dF + (1 - mu) * dL_RP/dF`` pushed back
  from the shared feature map ``F``.

For the first ``pretrain_iters`` steps the relation branch is skipped and
the backbone gets the plain detection gradient.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vmrn import relhead
from vmrn.autodiff import checkpoint, ops
from vmrn.autodiff.optim import SgdConfig, sgd_step
from vmrn.autodiff.tensor import Tensor
from vmrn.dataio import DEFAULT_CLASSES, SceneAnnotation, load_corpus, split_indices
from vmrn.detector import build_targets, detection_loss
from vmrn.geometry import BBox
from vmrn.model import VMRN, ModelConfig, backbone, detector_head, group_of
from vmrn.op2l import ObjectPair, pool_pairs
from vmrn.geometry import union_box

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iteration", "L_OD", "L_loc", "L_conf", "L_RP_on", "L_RP_off", "total")


@dataclass
class TrainConfig:
    # optimiser; the rate drops once, at lr_drop_iter
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 8
    lr_drop_iter: int = 190_000
    lr_after_drop: float = 1e-3
    # loss mixing
    lam: float = 0.5
    mu: float = 0.5
    alpha: float = 1.0
    rel_reduction: str = "sum"  # or "mean"
    # run length; full-scale counts multiplied by iter_scale
    pretrain_iters: int = 10_000
    max_iters: int = 210_000
    iters_per_epoch: int = 1000
    iter_scale: float = 0.01
    seed: int = 0
    flip: bool = True
    split_ratio: float = 0.9
    # model
    image_size: int = 64
    channels: int = 32
    widths: tuple[int, ...] = (16, 32)
    pool: int = 7
    hidden: int = 64
    classes: tuple[str, ...] = DEFAULT_CLASSES
    scales: tuple[float, ...] = (0.15, 0.25, 0.35, 0.5)
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)

    def __post_init__(self):
        self.widths = tuple(int(v) for v in self.widths)
        self.classes = tuple(self.classes)
        self.scales = tuple(float(v) for v in self.scales)
        self.aspect_ratios = tuple(float(v) for v in self.aspect_ratios)
        for name in ("lam", "mu"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.rel_reduction not in ("sum", "mean"):
            raise ValueError(f"rel_reduction must be 'sum' or 'mean', got {self.rel_reduction!r}")
        if not self.scaled(self.pretrain_iters) < self.scaled(self.max_iters):
            raise ValueError("pretrain_iters must be smaller than max_iters")
        self.sgd()  # validates optimiser fields

    def scaled(self, iters: int) -> int:
        return int(round(iters * self.iter_scale))

    @property
    def pretrain_steps(self) -> int:
        return self.scaled(self.pretrain_iters)

    @property
    def max_steps(self) -> int:
        return self.scaled(self.max_iters)

    @property
    def epoch_steps(self) -> int:
        return max(1, self.scaled(self.iters_per_epoch))

    def sgd(self) -> SgdConfig:
        return SgdConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            nesterov=self.nesterov,
            batch_size=self.batch_size,
            schedule={0: self.learning_rate, self.scaled(self.lr_drop_iter): self.lr_after_drop},
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            widths=self.widths,
            channels=self.channels,
            pool=self.pool,
            hidden=self.hidden,
            classes=self.classes,
            scales=self.scales,
            aspect_ratios=self.aspect_ratios,
        )

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """The same run with unscaled iteration counts."""
        return cls(iter_scale=1.0, **overrides)


def combined_loss(l_od, l_rp, mu: float = 0.5):
    """Loss seen by the shared layers: ``mu * L_OD + (1 - mu) * L_RP``."""
    if not 0 <= mu <= 1:
        raise ValueError(f"mu must be in [0, 1], got {mu}")
    return mu * l_od + (1.0 - mu) * l_rp


# -- flat key = value config files -----------------------------------------------


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def parse_config(text: str, base: TrainConfig | None = None, source: str = "<config>") -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, lists are comma separated."""
    base = base or TrainConfig()
    types = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {f: getattr(base, f) for f in types}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        current = values[key]
        try:
            if isinstance(current, bool):
                if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {val!r}")
                values[key] = val.lower() in ("true", "1", "yes")
            elif isinstance(current, int):
                values[key] = int(float(val)) if "e" in val.lower() else int(val)
            elif isinstance(current, float):
                values[key] = float(val)
            elif isinstance(current, tuple):
                items = [s.strip() for s in val.split(",") if s.strip()]
                if current and isinstance(current[0], str):
                    values[key] = tuple(items)
                elif current and isinstance(current[0], int) and not isinstance(current[0], bool):
                    values[key] = tuple(int(s) for s in items)
                else:
                    values[key] = tuple(float(s) for s in items)
            else:
                values[key] = val
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from exc


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


# -- state ------------------------------------------------------------------------


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def copy(self) -> "ModelState":
        return ModelState(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.momentum.items()},
            self.iteration,
        )


def init_state(cfg: TrainConfig) -> ModelState:
    return ModelState(VMRN(cfg.model_config(), seed=cfg.seed).params)


def save_state(state: ModelState, path) -> None:
    arrays: dict[str, np.ndarray] = dict(state.params)
    for k, v in state.momentum.items():
        arrays[f"momentum/{k}"] = v
    arrays["meta/iteration"] = np.array([state.iteration], dtype=np.float32)
    checkpoint.save(path, arrays)


def load_state(path) -> ModelState:
    arrays = checkpoint.load(path)
    it = arrays.pop("meta/iteration", np.zeros(1, np.float32))
    momentum = {k[len("momentum/") :]: arrays.pop(k) for k in list(arrays) if k.startswith("momentum/")}
    return ModelState(arrays, momentum, int(it[0]))


# -- one step ---------------------------------------------------------------------


class NonFiniteLossError(FloatingPointError):
    pass


def flip_scene(image: np.ndarray, scene: SceneAnnotation) -> tuple[np.ndarray, SceneAnnotation]:
    """Horizontal flip; support relations are unchanged."""
    w = scene.width
    objects = tuple(
        dataclasses.replace(o, bbox=BBox(w - o.bbox.x_max, o.bbox.y_min, w - o.bbox.x_min, o.bbox.y_max))
        for o in scene.objects
    )
    return np.ascontiguousarray(image[:, :, ::-1]), dataclasses.replace(scene, objects=objects)


def _pairs(boxes: Sequence[BBox], samples: Sequence[relhead.RelSample]) -> list[ObjectPair]:
    return [
        ObjectPair(s.subject, s.object, boxes[s.subject], boxes[s.object], union_box(boxes[s.subject], boxes[s.object]))
        for s in samples
    ]


def train_step(
    state: ModelState,
    images: np.ndarray,
    scenes: Sequence[SceneAnnotation],
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    update: bool = True,
) -> dict:
    """One optimisation step on a batch; mutates ``state`` and returns losses.

    With ``update=False`` nothing is changed and the report carries the
    per-group gradients under ``"grads"`` (used by tests).
    """
    mcfg = model_cfg or cfg.model_config()
    model = VMRN(mcfg, state.params)
    joint = state.iteration >= cfg.pretrain_steps
    n = len(scenes)
    if n == 0:
        raise ValueError("train_step needs a non-empty batch")

    params = model.tensors(requires_grad=True)
    x = Tensor(np.asarray(images, dtype=np.float32))
    feats = backbone(params, x)
    shared = Tensor(feats.data, requires_grad=True)

    loc, conf = detector_head(params, shared, mcfg.num_classes)
    targets = build_targets(
        model.defaults, [s.boxes() for s in scenes], [s.class_indices(mcfg.classes) for s in scenes]
    )
    l_loc, l_conf, l_od = detection_loss(loc, conf, targets, cfg.alpha)
    l_od.backward()
    g_od = shared.grad.copy()
    shared.zero_grad()

    report = {
        "iteration": state.iteration,
        "L_OD": float(l_od.data),
        "L_loc": float(l_loc.data),
        "L_conf": float(l_conf.data),
        "L_RP_on": 0.0,
        "L_RP_off": 0.0,
    }

    g_rp = np.zeros_like(g_od)
    if joint:
        online_dets = [model.decode(loc.data[k], conf.data[k]) for k in range(n)]
        image_pairs, labels, weights, source = [], [], [], []
        for k, scene in enumerate(scenes):
            on = relhead.assign_online_labels(online_dets[k], scene)
            off = relhead.offline_samples(scene)
            on_boxes = [d.bbox for d in online_dets[k]]
            off_boxes = list(scene.boxes())
            image_pairs.append(_pairs(on_boxes, on) + _pairs([BBox(*b) for b in off_boxes], off))
            w_on = cfg.lam / n
            w_off = (1.0 - cfg.lam) / n
            if cfg.rel_reduction == "mean":
                w_on /= max(len(on), 1)
                w_off /= max(len(off), 1)
            for s in on:
                labels.append(int(s.label) - 1)
                weights.append(w_on)
                source.append(True)
            for s in off:
                labels.append(int(s.label) - 1)
                weights.append(w_off)
                source.append(False)
        if labels:
            block, _ = pool_pairs(shared, image_pairs, mcfg.image_size, (mcfg.pool, mcfg.pool))
            z = relhead.logits(params, block)
            w = np.asarray(weights, dtype=np.float64)
            lab = np.asarray(labels, dtype=np.intp)
            src = np.asarray(source)
            l_rp = ops.softmax_cross_entropy(z, lab, w)
            rows = ops.cross_entropy_rows(z.data.astype(np.float64), lab) * w
            report["L_RP_on"] = float(rows[src].sum())
            report["L_RP_off"] = float(rows[~src].sum())
            l_rp.backward()
            g_rp = shared.grad.copy()

    l_rp_total = report["L_RP_on"] + report["L_RP_off"]
    report["total"] = combined_loss(report["L_OD"], l_rp_total, cfg.mu) if joint else report["L_OD"]
    for key in ("L_loc", "L_conf", "L_RP_on", "L_RP_off"):
        if not math.isfinite(report[key]):
            raise NonFiniteLossError(f"non-finite {key} = {report[key]} at iteration {state.iteration}")

    g_shared = combined_loss(g_od, g_rp, cfg.mu) if joint else g_od
    feats.backward(g_shared.astype(feats.dtype))

    grads = {}
    for name, t in params.items():
        g = group_of(name)
        if g == "rel." and not joint:
            continue
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    if not update:
        report["grads"] = grads
        report["shared_grads"] = {"od": g_od, "rp": g_rp}
        return report
    sgd_step(state.params, grads, state.momentum, cfg.sgd(), state.iteration)
    state.iteration += 1
    return report


# -- full run -------------------------------------------------------------------


def batch_indices(n: int, iteration: int, batch_size: int, seed: int) -> np.ndarray:
    """Deterministic epoch-wise shuffling; a pure function of the iteration."""
    start = iteration * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset : offset + take].tolist())
    return np.asarray(out, dtype=np.intp)


def make_batch(images, scenes, iteration: int, cfg: TrainConfig):
    idx = batch_indices(len(scenes), iteration, cfg.batch_size, cfg.seed)
    flips = np.random.default_rng([cfg.seed, 2, iteration]).random(len(idx)) < 0.5
    ims, scs = [], []
    for k, f in zip(idx, flips):
        im, sc = images[k], scenes[k]
        if cfg.flip and f:
            im, sc = flip_scene(im, sc)
        ims.append(im)
        scs.append(sc)
    return np.stack(ims), scs


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict]
    metrics: dict | None = None


def run_training(
    images: Sequence[np.ndarray],
    scenes: Sequence[SceneAnnotation],
    cfg: TrainConfig,
    state: ModelState | None = None,
    steps: int | None = None,
    on_epoch=None,
) -> TrainResult:
    """Train in memory from ``state`` (fresh if None) up to ``max_steps``."""
    state = state or init_state(cfg)
    mcfg = cfg.model_config()
    stop = cfg.max_steps if steps is None else min(cfg.max_steps, state.iteration + steps)
    history = []
    t0 = time.perf_counter()
    while state.iteration < stop:
        batch_images, batch_scenes = make_batch(images, scenes, state.iteration, cfg)
        rep = train_step(state, batch_images, batch_scenes, cfg, mcfg)
        history.append(rep)
        if state.iteration % cfg.epoch_steps == 0:
            log.info(
                "iter %d  L_OD %.4f  L_RP on %.4f off %.4f  (%.1fs)",
                rep["iteration"],
                rep["L_OD"],
                rep["L_RP_on"],
                rep["L_RP_off"],
                time.perf_counter() - t0,
            )
            if on_epoch is not None:
                on_epoch(state)
    return TrainResult(state, history)


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r["iteration"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])


def train(data_dir, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Train on a corpus directory and evaluate on its held-out split.

    Writes ``checkpoint.vmrn`` every epoch, ``model.vmrn`` and ``config.txt``
    at the end, ``history.csv`` and ``metrics.json`` into ``out_dir``.
    """
    from vmrn.evaluation import evaluate

    corpus = load_corpus(data_dir)
    if tuple(corpus.classes) != tuple(cfg.classes):
        cfg = dataclasses.replace(cfg, classes=tuple(corpus.classes))
    train_idx, test_idx = split_indices(len(corpus.scenes), cfg.split_ratio, cfg.seed)
    images = [corpus.load_image(k) for k in range(len(corpus.scenes))]
    for k in range(len(images)):
        if images[k].shape[1:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"{corpus.image_path(k)}: image is {images[k].shape[1:]}, config expects {cfg.image_size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))

    def save_epoch(state):
        if out is not None:
            save_state(state, out / "checkpoint.vmrn")

    result = run_training(
        [images[k] for k in train_idx], [corpus.scenes[k] for k in train_idx], cfg, on_epoch=save_epoch
    )
    model = VMRN(cfg.model_config(), result.state.params)
    report, det_rows, rel_rows = evaluate(model, [images[k] for k in test_idx], [corpus.scenes[k] for k in test_idx])
    result.metrics = report.to_dict()
    if out is not None:
        save_state(result.state, out / "model.vmrn")
        write_history(result.history, out / "history.csv")
        (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2) + "\n")
    return result


def load_model(path) -> VMRN:
    """Model from a checkpoint file (or a training output dir) plus its config.txt."""
    path = Path(path)
    if path.is_dir():
        path = path / "model.vmrn"
    cfg_path = path.parent / "config.txt"
    cfg = load_config(cfg_path) if cfg_path.exists() else TrainConfig()
    state = load_state(path)
    return VMRN(cfg.model_config(), state.params)
