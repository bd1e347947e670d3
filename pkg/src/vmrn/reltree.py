"""Manipulation relationship trees.

A tree is a set of object ids plus directed ``parent -> child`` edges. A
parent rests under its children, so it can only be grasped once every child
is gone; leaves are graspable right away. Two parents may share a child, so
the structure is a DAG rather than a strict tree.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

NodeId = Hashable
Edge = tuple[NodeId, NodeId]
# ordered pair (i, j) -> probabilities of (PARENT_OF, CHILD_OF, NO_REL)
PairwiseScores = Mapping[tuple[NodeId, NodeId], np.ndarray]

_TIE_TOL = 1e-12
_NORM_TOL = 1e-6


class RelationLabel(enum.IntEnum):
    """Relation of an ordered pair ``(i, j)``."""

    PARENT_OF = 1
    CHILD_OF = 2
    NO_REL = 3

    def inverse(self) -> "RelationLabel":
        if self is RelationLabel.PARENT_OF:
            return RelationLabel.CHILD_OF
        if self is RelationLabel.CHILD_OF:
            return RelationLabel.PARENT_OF
        return self


@dataclass(frozen=True)
class ManipulationTree:
    nodes: tuple[NodeId, ...]
    edges: frozenset[Edge] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", frozenset(self.edges))

    def children(self, node: NodeId) -> list[NodeId]:
        return [c for c in self.nodes if (node, c) in self.edges]

    def parents(self, node: NodeId) -> list[NodeId]:
        return [p for p in self.nodes if (p, node) in self.edges]

    def sorted_edges(self) -> list[Edge]:
        pos = {n: k for k, n in enumerate(self.nodes)}
        return sorted(self.edges, key=lambda e: (pos.get(e[0], -1), pos.get(e[1], -1)))


@dataclass(frozen=True)
class Violation:
    kind: str  # "self-edge" | "cycle" | "dangling"
    nodes: tuple[NodeId, ...]

    def __str__(self) -> str:
        return f"{self.kind}: {' -> '.join(map(str, self.nodes))}"


class InvalidProbabilityError(ValueError):
    pass


def _check_prob3(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise InvalidProbabilityError(f"expected 3 probabilities, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > _NORM_TOL:
        raise InvalidProbabilityError(f"not a probability vector: {p.tolist()}")
    return p


def swap_direction(p) -> np.ndarray:
    """Re-express a (j, i) prediction from the point of view of (i, j)."""
    p = np.asarray(p, dtype=np.float64)
    return p[[1, 0, 2]]


# argmax preference on ties: NO_REL, then PARENT_OF, then CHILD_OF
_TIE_ORDER = (2, 0, 1)


def reconcile(p_ij, p_ji) -> tuple[RelationLabel, float]:
    """Merge the two directional predictions for one unordered pair.

    Returns the label for ``(i, j)`` and its averaged probability.
    """
    s = 0.5 * (_check_prob3(p_ij) + swap_direction(_check_prob3(p_ji)))
    best = max(s)
    for k in _TIE_ORDER:
        if s[k] >= best - _TIE_TOL:
            return RelationLabel(k + 1), float(s[k])
    raise AssertionError("unreachable")


def _reachable(start: NodeId, edges: Iterable[Edge]) -> set[NodeId]:
    adj: dict[NodeId, list[NodeId]] = {}
    for u, v in edges:
        adj.setdefault(u, []).append(v)
    seen: set[NodeId] = set()
    stack = [start]
    while stack:
        u = stack.pop()
        for v in adj.get(u, ()):
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def cyclic_edges(edges: Iterable[Edge]) -> list[Edge]:
    """Edges lying on at least one directed cycle (u->v with v reaching u)."""
    edges = list(edges)
    reach: dict[NodeId, set[NodeId]] = {}
    out = []
    for u, v in edges:
        if v not in reach:
            reach[v] = _reachable(v, edges)
        if u == v or u in reach[v]:
            out.append((u, v))
    return out


def remove_cycles(edge_conf: Mapping[Edge, float], order: Sequence[NodeId]) -> set[Edge]:
    """Drop the least confident cyclic edge until the graph is acyclic.

    Ties on confidence go to the edge that sorts first by node position,
    which keeps the result independent of dict ordering.
    """
    pos = {n: k for k, n in enumerate(order)}
    edges = set(edge_conf)
    while True:
        bad = cyclic_edges(edges)
        if not bad:
            return edges
        victim = min(bad, key=lambda e: (edge_conf[e], pos[e[0]], pos[e[1]]))
        edges.discard(victim)


def build_tree(objects: Sequence[NodeId], scores: Mapping[tuple[NodeId, NodeId], object]) -> ManipulationTree:
    """Assemble a tree from complete ordered-pair probability vectors."""
    objects = list(objects)
    edge_conf: dict[Edge, float] = {}
    for a in range(len(objects)):
        for b in range(a + 1, len(objects)):
            i, j = objects[a], objects[b]
            label, conf = reconcile(scores[(i, j)], scores[(j, i)])
            if label is RelationLabel.PARENT_OF:
                edge_conf[(i, j)] = conf
            elif label is RelationLabel.CHILD_OF:
                edge_conf[(j, i)] = conf
    return ManipulationTree(tuple(objects), frozenset(remove_cycles(edge_conf, objects)))


def leaf_nodes(t: ManipulationTree) -> set[NodeId]:
    """Objects with no children, i.e. the ones that can be grasped now."""
    has_child = {p for p, _ in t.edges}
    return {n for n in t.nodes if n not in has_child}


def tree_to_labels(t: ManipulationTree) -> dict[tuple[NodeId, NodeId], RelationLabel]:
    """Direct-edge labels for every ordered pair; ancestors stay NO_REL."""
    labels = {}
    for i in t.nodes:
        for j in t.nodes:
            if i == j:
                continue
            if (i, j) in t.edges:
                labels[(i, j)] = RelationLabel.PARENT_OF
            elif (j, i) in t.edges:
                labels[(i, j)] = RelationLabel.CHILD_OF
            else:
                labels[(i, j)] = RelationLabel.NO_REL
    return labels


def labels_to_scores(labels: Mapping[tuple[NodeId, NodeId], RelationLabel]) -> dict:
    """One-hot probability vectors for a label map."""
    out = {}
    for pair, lab in labels.items():
        v = np.zeros(3)
        v[int(lab) - 1] = 1.0
        out[pair] = v
    return out


def validate(t: ManipulationTree) -> list[Violation]:
    """Structural problems of ``t``; an empty list means the tree is valid."""
    out: list[Violation] = []
    known = set(t.nodes)
    for u, v in t.sorted_edges():
        if u not in known or v not in known:
            out.append(Violation("dangling", (u, v)))
        if u == v:
            out.append(Violation("self-edge", (u, v)))
    proper = [(u, v) for u, v in t.edges if u != v]
    cyc = cyclic_edges(proper)
    if cyc:
        seen: set[NodeId] = set()
        for u, v in sorted(cyc, key=repr):
            if u in seen:
                continue
            comp = {u} | (_reachable(u, cyc) & {x for x in _reachable_rev(u, cyc)})
            seen |= comp
            out.append(Violation("cycle", tuple(sorted(comp, key=repr))))
    return out


def _reachable_rev(start: NodeId, edges: Iterable[Edge]) -> set[NodeId]:
    return _reachable(start, [(v, u) for u, v in edges])


def to_dot(t: ManipulationTree, names: Mapping[NodeId, str] | None = None, graph_name: str = "manipulation") -> str:
    names = names or {}
    lines = [f"digraph {graph_name} {{"]
    for n in t.nodes:
        label = str(names.get(n, n)).replace('"', r"\"")
        lines.append(f'  "{n}" [label="{label}"];')
    for u, v in t.sorted_edges():
        lines.append(f'  "{u}" -> "{v}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
