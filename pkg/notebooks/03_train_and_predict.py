"""
Training, evaluation and prediction
===================================

A deliberately small run so the script finishes in a couple of minutes on
one core. The acceptance run uses 500 scenes and the default TrainConfig;
see ``vmrn train`` for that.
"""

import dataclasses
import tempfile
from pathlib import Path

from vmrn.dataio import SynthConfig, gen_synthetic_scene, write_corpus
from vmrn.evaluation import evaluate
from vmrn.pipeline import TrainConfig, load_model, train
from vmrn.reltree import leaf_nodes

root = Path(tempfile.mkdtemp())
write_corpus(root / "data", SynthConfig(seed=0), 60)

# same architecture as the defaults, with a shorter schedule
cfg = dataclasses.replace(TrainConfig(), pretrain_iters=10_000, max_iters=40_000, lr_drop_iter=30_000)
print(cfg.pretrain_steps, "detector-only steps, then", cfg.max_steps - cfg.pretrain_steps, "joint steps")
result = train(root / "data", cfg, root / "run")

# loss per step is kept in history.csv
first, last = result.history[0], result.history[-1]
print("L_OD", round(first["L_OD"], 3), "->", round(last["L_OD"], 3))
print({k: round(v, 3) for k, v in result.metrics.items() if k != "counts"})

# the saved model reloads bit-exactly and predicts on new scenes
model = load_model(root / "run")
image, scene = gen_synthetic_scene(SynthConfig(seed=99), 0)
pred = model.predict(image)
for k, d in enumerate(pred.detections):
    print(k, model.cfg.classes[d.cls], round(d.score, 2), [round(v) for v in d.bbox])
print("edges", sorted(pred.tree.edges), "grasp first", sorted(leaf_nodes(pred.tree)))
print("truth", sorted(scene.tree().edges))

report, _, _ = evaluate(model, [image], [scene])
print(report.to_dict()["rel_accuracy"])
