"""Scene annotations, the synthetic stacked-object generator and corpus IO.

Annotation files are JSON, one per image::

    {
      "image_id": "000003",
      "image": "../images/000003.png",
      "width": 64,
      "height": 64,
      "objects": [
        {"name": "book", "bbox": [4.0, 6.0, 40.0, 30.0],
         "node_index": 0, "parent_indexes": [], "child_indexes": [1]},
        ...
      ]
    }

``parent_indexes``/``child_indexes`` refer to ``node_index`` values. A
corpus directory holds ``index.txt`` (one annotation path per line, relative
to the corpus root), ``classes.txt``, ``annotations/`` and ``images/``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from vmrn.geometry import BBox, as_box, intersection_area
from vmrn.reltree import ManipulationTree, validate

DEFAULT_CLASSES = (
    "book",
    "remote",
    "pen",
    "apple",
    "stapler",
    "box",
    "phone",
    "cup",
    "wallet",
    "tape",
)

# RGB in [0, 1]; one per class, cycled if there are more classes
_PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.70, 0.20],
        [0.15, 0.25, 0.90],
        [0.95, 0.85, 0.10],
        [0.80, 0.20, 0.80],
        [0.10, 0.80, 0.85],
        [0.95, 0.55, 0.10],
        [0.95, 0.95, 0.95],
        [0.45, 0.25, 0.10],
        [0.05, 0.05, 0.05],
    ]
)
_TABLE = np.array([0.50, 0.55, 0.50])


class AnnotationError(ValueError):
    """Malformed annotation; carries the file path and line when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class AnnotationValidationError(AnnotationError):
    pass


@dataclass(frozen=True)
class ObjectAnnotation:
    name: str
    bbox: BBox
    node_index: int
    parent_indexes: tuple[int, ...] = ()
    child_indexes: tuple[int, ...] = ()


@dataclass(frozen=True)
class SceneAnnotation:
    image_id: str
    width: int
    height: int
    objects: tuple[ObjectAnnotation, ...] = ()
    image: str | None = None

    def tree(self) -> ManipulationTree:
        edges = {(o.node_index, c) for o in self.objects for c in o.child_indexes}
        return ManipulationTree(tuple(o.node_index for o in self.objects), frozenset(edges))

    def boxes(self) -> np.ndarray:
        return np.array([tuple(o.bbox) for o in self.objects], dtype=np.float64).reshape(-1, 4)

    def names(self) -> list[str]:
        return [o.name for o in self.objects]

    def class_indices(self, classes: Sequence[str]) -> np.ndarray:
        lookup = {c: k for k, c in enumerate(classes)}
        return np.array([lookup[o.name] for o in self.objects], dtype=np.intp)


def check_scene(scene: SceneAnnotation, path=None) -> SceneAnnotation:
    by_index = {}
    for o in scene.objects:
        if o.node_index in by_index:
            raise AnnotationValidationError(f"duplicate node_index {o.node_index}", path)
        by_index[o.node_index] = o
    for o in scene.objects:
        for c in o.child_indexes:
            if c not in by_index:
                raise AnnotationValidationError(f"node {o.node_index} lists unknown child {c}", path)
            if o.node_index not in by_index[c].parent_indexes:
                raise AnnotationValidationError(
                    f"node {o.node_index} lists {c} as child but node {c} does not list {o.node_index} as parent",
                    path,
                )
        for p in o.parent_indexes:
            if p not in by_index:
                raise AnnotationValidationError(f"node {o.node_index} lists unknown parent {p}", path)
            if o.node_index not in by_index[p].child_indexes:
                raise AnnotationValidationError(
                    f"node {o.node_index} lists {p} as parent but node {p} does not list {o.node_index} as child",
                    path,
                )
    problems = validate(scene.tree())
    if problems:
        raise AnnotationValidationError("invalid manipulation tree: " + "; ".join(map(str, problems)), path)
    return scene


def scene_to_dict(scene: SceneAnnotation) -> dict:
    out: dict = {"image_id": scene.image_id}
    if scene.image is not None:
        out["image"] = scene.image
    out["width"] = scene.width
    out["height"] = scene.height
    out["objects"] = [
        {
            "name": o.name,
            "bbox": [float(v) for v in o.bbox],
            "node_index": o.node_index,
            "parent_indexes": list(o.parent_indexes),
            "child_indexes": list(o.child_indexes),
        }
        for o in scene.objects
    ]
    return out


def dumps_annotation(scene: SceneAnnotation) -> str:
    return json.dumps(scene_to_dict(scene), indent=2) + "\n"


def emit_annotation(scene: SceneAnnotation, path) -> Path:
    path = Path(path)
    path.write_text(dumps_annotation(scene))
    return path


def _line_of(text: str, key: str, occurrence: int) -> int | None:
    hits = [m.start() for m in re.finditer(re.escape(f'"{key}"'), text)]
    if occurrence < len(hits):
        return text.count("\n", 0, hits[occurrence]) + 1
    return None


def _int_list(value, what: str) -> tuple[int, ...]:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise TypeError(f"{what} must be a list of integers, got {value!r}")
    return tuple(value)


def loads_annotation(text: str, path=None) -> SceneAnnotation:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(exc.msg, path, exc.lineno) from exc
    if not isinstance(raw, dict):
        raise AnnotationError("top level must be an object", path, 1)
    for key in ("image_id", "width", "height", "objects"):
        if key not in raw:
            raise AnnotationError(f"missing field {key!r}", path)
    try:
        width, height = int(raw["width"]), int(raw["height"])
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"bad image size: {exc}", path, _line_of(text, "width", 0)) from exc
    if not isinstance(raw["objects"], list):
        raise AnnotationError("'objects' must be a list", path, _line_of(text, "objects", 0))
    objects = []
    for k, o in enumerate(raw["objects"]):
        field_name = "name"
        try:
            name = o["name"]
            if not isinstance(name, str):
                raise TypeError(f"name must be a string, got {name!r}")
            field_name = "bbox"
            bb = o["bbox"]
            if not isinstance(bb, list) or len(bb) != 4:
                raise TypeError(f"bbox must be a list of 4 numbers, got {bb!r}")
            box = as_box(bb).validate()
            field_name = "node_index"
            node = o["node_index"]
            if not isinstance(node, int) or isinstance(node, bool):
                raise TypeError(f"node_index must be an integer, got {node!r}")
            field_name = "parent_indexes"
            parents = _int_list(o.get("parent_indexes", []), "parent_indexes")
            field_name = "child_indexes"
            children = _int_list(o.get("child_indexes", []), "child_indexes")
        except (KeyError, TypeError, ValueError) as exc:
            msg = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
            raise AnnotationError(f"objects[{k}].{field_name}: {msg}", path, _line_of(text, field_name, k)) from exc
        objects.append(ObjectAnnotation(name, box, node, parents, children))
    scene = SceneAnnotation(str(raw["image_id"]), width, height, tuple(objects), raw.get("image"))
    return check_scene(scene, path)


def parse_annotation(path) -> SceneAnnotation:
    path = Path(path)
    return loads_annotation(path.read_text(), path)


# -- synthetic scenes ---------------------------------------------------------


@dataclass
class SynthConfig:
    min_objects: int = 2
    max_objects: int = 5
    classes: tuple[str, ...] = DEFAULT_CLASSES
    image_size: int = 64
    stack_prob: float = 0.5
    max_depth: int = 2
    table_size: tuple[int, int] = (16, 30)
    stack_scale: tuple[float, float] = (0.5, 0.8)
    min_size: int = 10
    min_overlap: float = 0.6
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError(f"bad object count range [{self.min_objects}, {self.max_objects}]")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if not self.classes:
            raise ValueError("need at least one class")


@dataclass
class _Placed:
    cls: int
    box: tuple[int, int, int, int]
    parent: int | None
    depth: int
    children: list[int] = field(default_factory=list)


def _ancestors(placed: list[_Placed], k: int) -> set[int]:
    out = set()
    while placed[k].parent is not None:
        k = placed[k].parent
        out.add(k)
    return out


def _overlaps_any(box, placed: list[_Placed], allowed: set[int]) -> bool:
    b = BBox(*box)
    return any(k not in allowed and intersection_area(b, BBox(*p.box)) > 0 for k, p in enumerate(placed))


def _layout(cfg: SynthConfig, rng: np.random.Generator) -> list[_Placed]:
    s = cfg.image_size
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    k_cls = len(cfg.classes)
    classes = rng.choice(k_cls, size=n, replace=n > k_cls)
    placed: list[_Placed] = []
    for cls in classes:
        supports = [k for k, p in enumerate(placed) if p.depth < cfg.max_depth]
        want_stack = bool(supports) and rng.random() < cfg.stack_prob
        obj = None
        if want_stack:
            for _ in range(50):
                sup = int(supports[int(rng.integers(len(supports)))])
                sx0, sy0, sx1, sy1 = placed[sup].box
                w = max(cfg.min_size, int(round((sx1 - sx0) * rng.uniform(*cfg.stack_scale))))
                h = max(cfg.min_size, int(round((sy1 - sy0) * rng.uniform(*cfg.stack_scale))))
                x0 = int(rng.integers(sx0 - w // 3, sx1 - w + w // 3 + 1))
                y0 = int(rng.integers(sy0 - h // 3, sy1 - h + h // 3 + 1))
                box = (x0, y0, x0 + w, y0 + h)
                if x0 < 0 or y0 < 0 or box[2] > s or box[3] > s:
                    continue
                if intersection_area(BBox(*box), BBox(*placed[sup].box)) < cfg.min_overlap * w * h:
                    continue
                allowed = {sup} | _ancestors(placed, sup)
                if _overlaps_any(box, placed, allowed):
                    continue
                obj = _Placed(int(cls), box, sup, placed[sup].depth + 1)
                break
        if obj is None:
            lo, hi = cfg.table_size
            for _ in range(100):
                w = int(rng.integers(lo, hi + 1))
                h = int(rng.integers(lo, hi + 1))
                x0 = int(rng.integers(0, s - w + 1))
                y0 = int(rng.integers(0, s - h + 1))
                box = (x0, y0, x0 + w, y0 + h)
                if not _overlaps_any(box, placed, set()):
                    obj = _Placed(int(cls), box, None, 0)
                    break
        if obj is None:
            continue
        if obj.parent is not None:
            placed[obj.parent].children.append(len(placed))
        placed.append(obj)
    return placed


def _render(cfg: SynthConfig, placed: list[_Placed], rng: np.random.Generator) -> np.ndarray:
    s = cfg.image_size
    img = np.empty((3, s, s))
    img[:] = _TABLE[:, None, None]
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    for p in placed:
        x0, y0, x1, y1 = p.box
        if p.cls % 2 == 0:
            mask = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
            inner = (xx >= x0 + 1) & (xx < x1 - 1) & (yy >= y0 + 1) & (yy < y1 - 1)
        else:
            cx, cy, rx, ry = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2
            r = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
            mask = r <= 1.0
            inner = ((xx - cx) / max(rx - 1, 0.5)) ** 2 + ((yy - cy) / max(ry - 1, 0.5)) ** 2 <= 1.0
        color = _PALETTE[p.cls % len(_PALETTE)]
        texture = rng.normal(0.0, cfg.noise, size=(3, s, s))
        fill = color[:, None, None] + texture
        edge = 0.5 * color[:, None, None] + texture
        img = np.where(inner, fill, np.where(mask, edge, img))
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def gen_synthetic_scene(cfg: SynthConfig, index: int) -> tuple[np.ndarray, SceneAnnotation]:
    """Render scene ``index``; a pure function of ``(cfg, index)``.

    Objects either lie on the table without touching anything, or rest on an
    earlier object covering at least ``min_overlap`` of their own area. The
    supporting object is the parent.
    """
    rng = np.random.default_rng([cfg.seed, index])
    placed = _layout(cfg, rng)
    image = _render(cfg, placed, rng)
    objects = tuple(
        ObjectAnnotation(
            cfg.classes[p.cls],
            BBox(*(float(v) for v in p.box)),
            k,
            () if p.parent is None else (p.parent,),
            tuple(p.children),
        )
        for k, p in enumerate(placed)
    )
    image_id = f"{index:06d}"
    scene = SceneAnnotation(image_id, cfg.image_size, cfg.image_size, objects, f"../images/{image_id}.png")
    return image, scene


# -- images and corpora --------------------------------------------------------


def save_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_corpus(out_dir, cfg: SynthConfig, count: int, start: int = 0) -> list[SceneAnnotation]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    scenes = []
    lines = []
    for index in range(start, start + count):
        image, scene = gen_synthetic_scene(cfg, index)
        save_png(image, out / "images" / f"{scene.image_id}.png")
        emit_annotation(scene, out / "annotations" / f"{scene.image_id}.json")
        lines.append(f"annotations/{scene.image_id}.json")
        scenes.append(scene)
    (out / "index.txt").write_text("\n".join(lines) + "\n")
    (out / "classes.txt").write_text("\n".join(cfg.classes) + "\n")
    return scenes


@dataclass
class Corpus:
    root: Path
    classes: tuple[str, ...]
    scenes: list[SceneAnnotation]
    paths: list[Path]

    def image_path(self, k: int) -> Path:
        scene = self.scenes[k]
        if scene.image is None:
            raise AnnotationError("annotation has no image reference", self.paths[k])
        return (self.paths[k].parent / scene.image).resolve()

    def load_image(self, k: int) -> np.ndarray:
        return load_png(self.image_path(k))


def load_corpus(root) -> Corpus:
    root = Path(root)
    index = root / "index.txt"
    if not index.exists():
        raise FileNotFoundError(f"{index}: corpus index not found")
    paths = []
    for lineno, line in enumerate(index.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        p = root / line
        if not p.exists():
            raise AnnotationError(f"listed annotation {line!r} does not exist", index, lineno)
        paths.append(p)
    scenes = [parse_annotation(p) for p in paths]
    classes_file = root / "classes.txt"
    if classes_file.exists():
        classes = tuple(c.strip() for c in classes_file.read_text().splitlines() if c.strip())
    else:
        classes = tuple(sorted({o.name for s in scenes for o in s.objects}))
    return Corpus(root, classes, scenes, paths)


def split_dataset(scenes: Sequence, ratio: float = 0.9, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle, then the first ``floor(ratio * n)`` go to training."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    n = len(scenes)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratio * n + 1e-9))
    return [scenes[k] for k in order[:n_train]], [scenes[k] for k in order[n_train:]]


def split_indices(n: int, ratio: float = 0.9, seed: int = 0) -> tuple[list[int], list[int]]:
    return split_dataset(list(range(n)), ratio, seed)


def relation_histogram(scenes: Iterable[SceneAnnotation]) -> dict[str, int]:
    """Class counts plus edge count; used to check corpus stability."""
    hist: dict[str, int] = {}
    for s in scenes:
        for o in s.objects:
            hist[o.name] = hist.get(o.name, 0) + 1
        hist["__edges__"] = hist.get("__edges__", 0) + len(s.tree().edges)
    return dict(sorted(hist.items()))
