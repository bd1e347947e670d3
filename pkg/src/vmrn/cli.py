"""Command line entry point: ``vmrn synth|train|eval|predict|gradcheck``.

Exit codes: 0 success, 1 validation failure (bad input, failed check),
2 I/O error (missing or unwritable files).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def cmd_synth(args) -> int:
    from vmrn.dataio import SynthConfig, relation_histogram, write_corpus

    cfg = SynthConfig(seed=args.seed, stack_prob=args.stack_prob, image_size=args.image_size)
    scenes = write_corpus(args.out, cfg, args.count)
    hist = relation_histogram(scenes)
    print(json.dumps({"scenes": len(scenes), "out": str(args.out), "histogram": hist}, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    from vmrn.pipeline import TrainConfig, load_config, train

    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.paper_scale:
        cfg = dataclasses.replace(cfg, iter_scale=1.0)
    result = train(args.data, cfg, args.out)
    print(json.dumps({k: v for k, v in result.metrics.items() if k != "counts"}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    from vmrn.dataio import load_corpus, split_indices
    from vmrn.evaluation import evaluate, write_dump
    from vmrn.pipeline import load_model

    model = load_model(args.model)
    corpus = load_corpus(args.data)
    if tuple(corpus.classes) != tuple(model.cfg.classes):
        raise ValueError(f"corpus classes {corpus.classes} differ from the model's {model.cfg.classes}")
    if args.split == "test":
        _, idx = split_indices(len(corpus.scenes), args.ratio, args.seed)
    else:
        idx = list(range(len(corpus.scenes)))
    report, det_rows, rel_rows = evaluate(model, [corpus.load_image(k) for k in idx], [corpus.scenes[k] for k in idx])
    out = report.to_dict()
    if args.metric != "all":
        keys = {"rel": ["rel_accuracy"], "obj": ["obj_recall", "obj_precision"], "img": ["img_accuracy"], "map": ["map"]}
        out = {k: out[k] for k in keys[args.metric]}
    if args.dump:
        with open(args.dump, "w") as fh:
            write_dump(fh, det_rows, rel_rows)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_predict(args) -> int:
    from vmrn.dataio import load_png
    from vmrn.pipeline import load_model
    from vmrn.reltree import leaf_nodes, to_dot, tree_to_labels

    model = load_model(args.model)
    image = load_png(args.image)
    if image.shape[1:] != (model.cfg.image_size, model.cfg.image_size):
        raise ValueError(f"{args.image}: image is {image.shape[1:]}, model expects {model.cfg.image_size}")
    pred = model.predict(image)
    classes = model.cfg.classes
    labels = tree_to_labels(pred.tree)
    doc = {
        "image": str(args.image),
        "detections": [
            {"index": k, "cls": d.cls, "name": classes[d.cls], "conf": d.score, "bbox": [float(v) for v in d.bbox]}
            for k, d in enumerate(pred.detections)
        ],
        "relations": [
            {"subj_idx": i, "obj_idx": j, "probs": [float(v) for v in p], "label": labels[(i, j)].name}
            for (i, j), p in sorted(pred.rel_probs.items())
        ],
        "edges": sorted([list(e) for e in pred.tree.edges]),
        "leaves": sorted(leaf_nodes(pred.tree)),
    }
    Path(args.out_json).write_text(json.dumps(doc, indent=2) + "\n")
    if args.out_dot:
        names = {k: f"{k}:{classes[d.cls]}" for k, d in enumerate(pred.detections)}
        Path(args.out_dot).write_text(to_dot(pred.tree, names))
    if args.out_png:
        from vmrn.render import save_prediction_png

        save_prediction_png(args.out_png, image, pred.detections, classes, pred.tree)
    print(json.dumps({"detections": len(pred.detections), "edges": len(pred.tree.edges)}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from vmrn.gradsuite import LAYERS, THRESHOLD, run_suite

    names = [args.layer] if args.layer else list(LAYERS)
    unknown = [n for n in names if n not in LAYERS]
    if unknown:
        raise ValueError(f"unknown layer {unknown[0]!r}; choose from {', '.join(LAYERS)}")
    results = run_suite(names, range(args.seeds))
    for name, r in results.items():
        status = "ok" if r["ok"] else "FAIL"
        print(f"{name:24s} max rel err {r['max_rel_error']:.3e}  {r['seconds']:6.2f}s  {status}")
    failed = [n for n, r in results.items() if not r["ok"]]
    if failed:
        print(f"{len(failed)} layer(s) above {THRESHOLD:g}: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmrn", description="Desk-scale visual manipulation relationship network.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic stacked-object corpus")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--stack-prob", type=float, default=0.5)
    s.add_argument("--image-size", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="pretrain the detector, then train jointly")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--config", type=Path, help="key = value file; defaults when omitted")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--paper-scale", action="store_true", help="use the full iteration counts")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model on a corpus")
    e.add_argument("--model", type=Path, required=True, help="model file or training output directory")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--metric", choices=["rel", "obj", "img", "map", "all"], default="all")
    e.add_argument("--dump", type=Path, help="write detection and relation rows as JSON lines")
    e.add_argument("--split", choices=["all", "test"], default="all", help="'test' uses the held-out split")
    e.add_argument("--ratio", type=float, default=0.9)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="detect, relate and build the tree for one image")
    r.add_argument("--model", type=Path, required=True)
    r.add_argument("--image", type=Path, required=True)
    r.add_argument("--out-json", type=Path, required=True)
    r.add_argument("--out-dot", type=Path)
    r.add_argument("--out-png", type=Path)
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    g.add_argument("--layer")
    g.add_argument("--seeds", type=int, default=20)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"vmrn: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, ArithmeticError) as exc:
        print(f"vmrn: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
