"""Visual manipulation relationship network at desk scale.

Detector, object pairing pooling and relationship head trained jointly on a
from-scratch numpy autodiff core.
"""

from vmrn.geometry import BBox, iou, union_box, encode_offsets, decode_offsets
from vmrn.reltree import (
    RelationLabel,
    ManipulationTree,
    build_tree,
    leaf_nodes,
    reconcile,
    tree_to_labels,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "iou",
    "union_box",
    "encode_offsets",
    "decode_offsets",
    "RelationLabel",
    "ManipulationTree",
    "build_tree",
    "leaf_nodes",
    "reconcile",
    "tree_to_labels",
    "validate",
]
