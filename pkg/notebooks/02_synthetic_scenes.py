"""
Synthetic stacked-object scenes
===============================

The generator places flat-coloured objects on a table and stacks some of
them. An object rests on another when at least 60 percent of its box lies
on the support, and that support becomes its parent in the tree.
"""

import tempfile

import numpy as np

from vmrn.dataio import SynthConfig, gen_synthetic_scene, load_corpus, relation_histogram, split_indices, write_corpus
from vmrn.geometry import intersection_area

cfg = SynthConfig(seed=7)
image, scene = gen_synthetic_scene(cfg, 0)
print(image.shape, image.dtype, image.min(), image.max())
for o in scene.objects:
    print(o.node_index, o.name, tuple(round(v) for v in o.bbox), "parents", o.parent_indexes)

# every parent covers most of its child
by_node = {o.node_index: o for o in scene.objects}
for o in scene.objects:
    for p in o.parent_indexes:
        print(o.name, "on", by_node[p].name, intersection_area(o.bbox, by_node[p].bbox) / o.bbox.area)

# the same (seed, index) always gives the same scene
again, _ = gen_synthetic_scene(cfg, 0)
print("deterministic:", np.array_equal(image, again))

# a small corpus on disk and the 9:1 split used for training
with tempfile.TemporaryDirectory() as root:
    write_corpus(root, cfg, 40)
    corpus = load_corpus(root)
    print(relation_histogram(corpus.scenes))
    train, test = split_indices(len(corpus.scenes), 0.9, seed=0)
    print(len(train), "train /", len(test), "test")
