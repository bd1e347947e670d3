"""Relationship and detection metrics.

Triplets are counted over unordered object pairs with an oriented label,
so ``(a, PARENT_OF, b)`` and ``(b, CHILD_OF, a)`` are the same unit. Pairs
without a relation are triplets too (``NO_REL``): an image is right only if
every pair is right.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from vmrn.detector import Detection
from vmrn.geometry import BBox, iou_array
from vmrn.reltree import RelationLabel, reconcile, tree_to_labels

log = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class TripletPrediction:
    subject: Detection
    object: Detection
    label: RelationLabel
    confidence: float


@dataclass(frozen=True)
class GtTriplet:
    subject_box: BBox
    subject_cls: int
    object_box: BBox
    object_cls: int
    label: RelationLabel


@dataclass
class MetricReport:
    rel_accuracy: float = 0.0
    obj_recall: float = 0.0
    obj_precision: float = 0.0
    img_accuracy: float = 0.0
    map: float = 0.0
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _rate(num: int, den: int) -> float:
    # nothing asked and nothing claimed counts as perfect
    return 1.0 if den == 0 else num / den


def gt_triplets(scene, classes: Sequence[str]) -> list[GtTriplet]:
    labels = tree_to_labels(scene.tree())
    cls = scene.class_indices(classes)
    objs = scene.objects
    out = []
    for a in range(len(objs)):
        for b in range(a + 1, len(objs)):
            lab = labels[(objs[a].node_index, objs[b].node_index)]
            out.append(GtTriplet(objs[a].bbox, int(cls[a]), objs[b].bbox, int(cls[b]), lab))
    return out


def triplets_from_prediction(detections: Sequence[Detection], rel_probs: Mapping, tree=None) -> list[TripletPrediction]:
    """One triplet per unordered detected pair.

    Labels come from ``tree`` when given (so cycle repair is respected),
    otherwise from reconciling the two directional predictions. Confidence
    is the reconciled relation probability times both detection scores.
    """
    labels = tree_to_labels(tree) if tree is not None else None
    out = []
    for a in range(len(detections)):
        for b in range(a + 1, len(detections)):
            lab, conf = reconcile(rel_probs[(a, b)], rel_probs[(b, a)])
            if labels is not None:
                lab = labels[(a, b)]
            score = conf * detections[a].score * detections[b].score
            out.append(TripletPrediction(detections[a], detections[b], lab, float(score)))
    return out


def _box_ok(det: Detection, box: BBox, cls: int) -> float:
    """IoU when class matches and IoU clears the threshold, else -1."""
    if det.cls != cls:
        return -1.0
    v = float(iou_array(tuple(det.bbox), tuple(box))[0, 0])
    return v if v > IOU_THRESHOLD else -1.0


def _triplet_score(p: TripletPrediction, g: GtTriplet) -> float:
    """Best matching quality of ``p`` against ``g`` over both orientations, or -1."""
    best = -1.0
    s1 = _box_ok(p.subject, g.subject_box, g.subject_cls)
    o1 = _box_ok(p.object, g.object_box, g.object_cls)
    if s1 >= 0 and o1 >= 0 and p.label == g.label:
        best = max(best, s1 + o1)
    s2 = _box_ok(p.subject, g.object_box, g.object_cls)
    o2 = _box_ok(p.object, g.subject_box, g.subject_cls)
    if s2 >= 0 and o2 >= 0 and p.label == g.label.inverse():
        best = max(best, s2 + o2)
    return best


def match_triplets(preds: Sequence[TripletPrediction], gts: Sequence[GtTriplet]) -> list[int]:
    """gt index credited to each prediction (-1 for false positives).

    Predictions go in descending confidence (ties by input position); each
    takes the unclaimed compatible gt with the best IoU sum, ties to the
    lower gt index.
    """
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].confidence, k))
    claimed = [False] * len(gts)
    out = [-1] * len(preds)
    for k in order:
        best, best_g = -1.0, -1
        for g, gt in enumerate(gts):
            if claimed[g]:
                continue
            s = _triplet_score(preds[k], gt)
            if s > best:
                best, best_g = s, g
        if best_g >= 0:
            claimed[best_g] = True
            out[k] = best_g
    return out


def eval_object(pred_triplets: Sequence[Sequence[TripletPrediction]], scenes, classes) -> tuple[float, float, dict]:
    tp = n_gt = n_pred = 0
    for preds, scene in zip(pred_triplets, scenes):
        gts = gt_triplets(scene, classes)
        tp += sum(1 for g in match_triplets(preds, gts) if g >= 0)
        n_gt += len(gts)
        n_pred += len(preds)
    counts = {"tp": tp, "fp": n_pred - tp, "fn": n_gt - tp}
    return _rate(tp, n_gt), _rate(tp, n_pred), counts


def eval_image(pred_triplets: Sequence[Sequence[TripletPrediction]], scenes, classes) -> tuple[float, dict]:
    if len(scenes) == 0:
        raise ValueError("eval_image needs at least one image")
    right = 0
    for preds, scene in zip(pred_triplets, scenes):
        gts = gt_triplets(scene, classes)
        tp = sum(1 for g in match_triplets(preds, gts) if g >= 0)
        right += int(tp == len(gts) == len(preds))
    return right / len(scenes), {"correct": right, "images": len(scenes)}


def rel_accuracy(score_maps: Sequence[Mapping[tuple[int, int], np.ndarray]], scenes) -> tuple[float, dict]:
    """Reconciled accuracy on ground-truth pairs.

    ``score_maps[n][(a, b)]`` holds the prediction for objects at positions
    a and b of scene n.
    """
    if len(scenes) == 0:
        raise ValueError("rel_accuracy needs a non-empty test set")
    right = total = 0
    for probs, scene in zip(score_maps, scenes):
        labels = tree_to_labels(scene.tree())
        nodes = [o.node_index for o in scene.objects]
        for a in range(len(nodes)):
            for b in range(a + 1, len(nodes)):
                lab, _ = reconcile(probs[(a, b)], probs[(b, a)])
                right += int(lab == labels[(nodes[a], nodes[b])])
                total += 1
    return _rate(right, total), {"correct": right, "pairs": total}


def eval_rel(model, images: Sequence[np.ndarray], scenes, batch: int = 16) -> tuple[float, dict]:
    """Relationship accuracy with features pooled from ground-truth boxes."""
    if len(scenes) == 0:
        raise ValueError("eval_rel needs a non-empty test set")
    maps = []
    for lo in range(0, len(scenes), batch):
        feats = model.features(np.stack(images[lo : lo + batch]))
        maps.extend(model.relation_probs(feats, [s.boxes() for s in scenes[lo : lo + batch]]))
    return rel_accuracy(maps, scenes)


def average_precision_11(recall: np.ndarray, precision: np.ndarray) -> float:
    ap = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        above = precision[recall >= t - 1e-12]
        ap += (above.max() if above.size else 0.0) / 11.0
    return float(ap)


def eval_map(records: Sequence[Mapping], scenes, classes) -> tuple[float, dict]:
    """Mean over classes present in gt of 11-point AP at IoU > 0.5.

    ``records`` are detection dump rows ``{image_id, cls, conf, bbox}``.
    """
    by_image = {s.image_id: s for s in scenes}
    gt: dict[int, dict[str, list]] = {}
    for s in scenes:
        for o, c in zip(s.objects, s.class_indices(classes)):
            gt.setdefault(int(c), {}).setdefault(s.image_id, []).append(tuple(o.bbox))
    for r in records:
        if r["image_id"] not in by_image:
            raise ValueError(f"detection for unknown image {r['image_id']!r}")
    aps: dict[str, float] = {}
    for c in range(len(classes)):
        if c not in gt:
            log.warning("class %r has no ground truth; skipped in mAP", classes[c])
            continue
        dets = sorted(
            (r for r in records if int(r["cls"]) == c),
            key=lambda r: (-float(r["conf"]), str(r["image_id"]), tuple(r["bbox"])),
        )
        n_gt = sum(len(v) for v in gt[c].values())
        used = {img: [False] * len(v) for img, v in gt[c].items()}
        tp = np.zeros(len(dets))
        for k, r in enumerate(dets):
            boxes = gt[c].get(r["image_id"], [])
            if not boxes:
                continue
            ious = iou_array(r["bbox"], boxes)[0]
            g = int(ious.argmax())
            if ious[g] > IOU_THRESHOLD and not used[r["image_id"]][g]:
                used[r["image_id"]][g] = True
                tp[k] = 1
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(dets) + 1)
        aps[classes[c]] = average_precision_11(recall, precision) if len(dets) else 0.0
    if not aps:
        log.warning("no ground-truth objects; mAP is 0")
        return 0.0, {"per_class": {}}
    return float(np.mean(list(aps.values()))), {"per_class": aps}


def evaluate(model, images: Sequence[np.ndarray], scenes, batch: int = 16) -> tuple[MetricReport, list[dict], list[dict]]:
    """All metrics on a held-out set plus detection and relation dump rows.

    Dumped detections are the thresholded ones the relation rows index into;
    mAP ranks the larger low-threshold set instead.
    """
    from vmrn.detector import detection_records
    from vmrn.reltree import build_tree

    classes = model.cfg.classes
    det_rows: list[dict] = []
    ranked_rows: list[dict] = []
    rel_rows: list[dict] = []
    triplets = []
    for lo in range(0, len(scenes), batch):
        chunk = scenes[lo : lo + batch]
        feats = model.features(np.stack(images[lo : lo + batch]))
        dets = model.detect(feats)
        probs = model.relation_probs(feats, [[d.bbox for d in ds] for ds in dets])
        ranked = model.detect(feats, ranked=True)
        for scene, ds, rk, pr in zip(chunk, dets, ranked, probs):
            det_rows.extend(detection_records(scene.image_id, ds))
            ranked_rows.extend(detection_records(scene.image_id, rk))
            for (i, j), p in sorted(pr.items()):
                rel_rows.append({"image_id": scene.image_id, "subj_idx": i, "obj_idx": j, "probs": [float(v) for v in p]})
            tree = build_tree(list(range(len(ds))), pr)
            triplets.append(triplets_from_prediction(ds, pr, tree))
    rel, rel_counts = eval_rel(model, images, scenes, batch)
    rec, prec, obj_counts = eval_object(triplets, scenes, classes)
    img, img_counts = eval_image(triplets, scenes, classes)
    mean_ap, ap_info = eval_map(ranked_rows, scenes, classes)
    report = MetricReport(
        rel_accuracy=rel,
        obj_recall=rec,
        obj_precision=prec,
        img_accuracy=img,
        map=mean_ap,
        counts={"rel": rel_counts, "obj": obj_counts, "img": img_counts, "map": ap_info},
    )
    return report, det_rows, rel_rows


# -- prediction dumps -----------------------------------------------------------


class DumpError(ValueError):
    pass


_DET_KEYS = {"image_id", "cls", "conf", "bbox"}
_REL_KEYS = {"image_id", "subj_idx", "obj_idx", "probs"}


def write_dump(fh, det_rows: Sequence[Mapping], rel_rows: Sequence[Mapping] = ()) -> None:
    """JSON lines: detection rows first, then relation rows."""
    for r in list(det_rows) + list(rel_rows):
        fh.write(json.dumps(dict(r)) + "\n")


def read_dump(path) -> tuple[list[dict], list[dict]]:
    """Split a dump back into detection and relation rows, checking each line."""
    det_rows, rel_rows = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DumpError(f"{path}:{lineno}: {exc.msg}") from exc
            keys = set(row) if isinstance(row, dict) else set()
            if keys == _DET_KEYS and len(row["bbox"]) == 4:
                det_rows.append(row)
            elif keys == _REL_KEYS and len(row["probs"]) == 3:
                rel_rows.append(row)
            else:
                raise DumpError(f"{path}:{lineno}: neither a detection nor a relation row: {line.strip()[:80]}")
    return det_rows, rel_rows
