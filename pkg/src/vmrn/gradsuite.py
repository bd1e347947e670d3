"""Finite-difference checks for every differentiable layer.

Each case builds ``(op, inputs)`` for a seed; :func:`run_suite` reports the
worst relative error per layer over all seeds. Inputs are drawn so that no
element sits within ``eps`` of a relu, max or smooth-L1 kink.
"""

from __future__ import annotations

import time
from typing import Callable, Iterable

import numpy as np

from vmrn import relhead
from vmrn.autodiff import ops
from vmrn.autodiff.gradcheck import grad_check
from vmrn.autodiff.tensor import Tensor
from vmrn.geometry import BBox
from vmrn.op2l import enumerate_pairs, pool_pairs

THRESHOLD = 1e-4


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _distinct(rng, shape, step=0.01):
    # distinct values keep every pooling argmax stable under perturbation
    return rng.permutation(int(np.prod(shape))).reshape(shape) * step


def _conv(rng, seed):
    stride, pad = [(1, 0), (1, 1), (2, 1)][seed % 3]
    x, w, b = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    return (lambda x, w, b: ops.conv2d(x, w, b, stride, pad)), [x, w, b]


def _linear(rng, seed):
    return ops.linear, [rng.standard_normal((4, 6)), rng.standard_normal((5, 6)), rng.standard_normal(5)]


def _relu(rng, seed):
    return ops.relu, [_away_from_zero(rng, (3, 4, 5))]


def _maxpool(rng, seed):
    return (lambda t: ops.maxpool2d(t, 2)), [_distinct(rng, (2, 3, 6, 6))]


def _adaptive(rng, seed):
    h, w = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    return (lambda t: ops.adaptive_maxpool(t, (3, 4))), [_distinct(rng, (2, h, w))]


def _softmax_ce(rng, seed):
    target = rng.integers(0, 4, 5)
    weights = rng.uniform(0.1, 2.0, 5)
    return (lambda z: ops.softmax_cross_entropy(z, target, weights)), [rng.standard_normal((5, 4)) * 3]


def _smooth_l1(rng, seed):
    pred = rng.standard_normal((6, 4)) * 2
    target = pred + _away_from_zero(rng, (6, 4)) * 1.5
    target = np.where(np.abs(np.abs(target - pred) - 1) < 0.05, pred + 2.0, target)
    w = rng.uniform(0, 1, (6, 1))
    return (lambda p: ops.smooth_l1(p, target, w)), [pred]


def _random_boxes(rng, n, size=64):
    xy = rng.uniform(0, size - 4, (n, 2))
    wh = rng.uniform(1, size, (n, 2))
    return [BBox(x, y, min(size, x + w), min(size, y + h)) for (x, y), (w, h) in zip(xy, wh)]


def _op2l_path(rng, seed):
    # shared features -> crop/pool/concat -> relation head -> loss
    c = 3
    head = {k: Tensor(v) for k, v in relhead.init_params(c, (7, 7), hidden=8, rng=rng, dtype=np.float64).items()}
    pairs = enumerate_pairs(_random_boxes(rng, 2))
    labels = rng.integers(0, 3, len(pairs))

    def path(feats):
        block, _ = pool_pairs(ops.reshape(feats, (1, c, 8, 8)), [pairs], 64)
        return ops.softmax_cross_entropy(relhead.logits(head, block), labels)

    return path, [rng.standard_normal((c, 8, 8))]


def _relation_head(rng, seed):
    # head parameters with the pair block held fixed
    c = 2
    params = relhead.init_params(c, (3, 3), hidden=6, rng=rng, dtype=np.float64)
    x = rng.standard_normal((4, 3 * c, 3, 3))
    labels = rng.integers(0, 3, 4)
    names = sorted(params)

    def head(*arrays):
        return ops.softmax_cross_entropy(relhead.logits(dict(zip(names, arrays)), Tensor(x)), labels)

    return head, [params[k] for k in names]


LAYERS: dict[str, Callable] = {
    "conv2d": _conv,
    "linear": _linear,
    "relu": _relu,
    "maxpool2d": _maxpool,
    "adaptive_maxpool": _adaptive,
    "softmax_cross_entropy": _softmax_ce,
    "smooth_l1": _smooth_l1,
    "relation_head": _relation_head,
    "op2l_path": _op2l_path,
}


def check_layer(name: str, seeds: Iterable[int] = range(20)) -> float:
    if name not in LAYERS:
        raise KeyError(f"unknown layer {name!r}; choose from {', '.join(LAYERS)}")
    worst = 0.0
    for seed in seeds:
        op, inputs = LAYERS[name](np.random.default_rng(seed), seed)
        worst = max(worst, grad_check(op, inputs, seed=seed))
    return worst


def run_suite(names: Iterable[str] | None = None, seeds: Iterable[int] = range(20)) -> dict[str, dict]:
    """``{layer: {"max_rel_error", "seconds", "ok"}}`` for each requested layer."""
    seeds = list(seeds)
    out = {}
    for name in names or LAYERS:
        t0 = time.perf_counter()
        err = check_layer(name, seeds)
        out[name] = {"max_rel_error": err, "seconds": time.perf_counter() - t0, "ok": err < THRESHOLD}
    return out
