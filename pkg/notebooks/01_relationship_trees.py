"""
Manipulation relationship trees
===============================

A desk scene with a pen on a remote, and a remote, an apple and a stapler
on a book. We build the tree from pairwise scores, read off what can be
grasped first, and look at how the two directions of one pair are merged.
"""

from pathlib import Path

import numpy as np

from vmrn.dataio import parse_annotation
from vmrn.reltree import build_tree, leaf_nodes, reconcile, to_dot, tree_to_labels

# the annotation lists each object's node index, parents and children
scene = parse_annotation(Path(__file__).resolve().parents[1] / "tests" / "data" / "stacked_desk.json")
names = {o.node_index: o.name for o in scene.objects}
tree = scene.tree()
print("edges:", sorted((names[p], names[c]) for p, c in tree.edges))

# leaves have nothing resting on them, so they can be picked up right away
print("graspable now:", sorted(names[n] for n in leaf_nodes(tree)))

# ground-truth labels cover every ordered pair; the pen and the book are
# not directly related even though the pen sits two levels above the book
labels = tree_to_labels(tree)
ids = {v: k for k, v in names.items()}
print("pen/book:", labels[(ids["pen"], ids["book"])].name)

# a network predicts (i, j) and (j, i) separately; reconcile averages the two
print(reconcile((0.8, 0.1, 0.1), (0.2, 0.7, 0.1)))
print(reconcile((0.6, 0.2, 0.2), (0.2, 0.2, 0.6)))

# noisy scores can form a cycle; the weakest edge in it is dropped
scores = {}
for i, j, p in [(0, 1, 0.9), (1, 2, 0.8), (2, 0, 0.7)]:
    scores[(i, j)] = np.array([p, 0.0, 1 - p])
    scores[(j, i)] = np.array([0.0, p, 1 - p])
print("repaired:", sorted(build_tree([0, 1, 2], scores).edges))

# DOT text for graphviz
print(to_dot(tree, names))
