"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from vmrn.autodiff.tensor import Tensor


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    return _central(f, x, eps)[0]


def _central(f: Callable[[], float], x: np.ndarray, eps: float, kink_tol: float = 1e-2):
    """Central differences plus a mask of elements sitting on a kink.

    Near a relu/max/smooth-L1 corner the forward and backward one-sided
    slopes disagree by O(1); on smooth stretches only by O(eps).
    """
    g = np.zeros_like(x)
    kink = np.zeros(x.shape, dtype=bool)
    f0 = f()
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
        right, left = (fp - f0) / eps, (f0 - fm) / eps
        kink[i] = abs(right - left) > kink_tol * max(1.0, abs(right), abs(left))
    return g, kink


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8, scale_floor: float = 1e-2) -> float:
    """Elementwise ``|a-b| / max(|a|, |b|, d)``, maximised.

    ``d`` is ``scale_floor`` times the largest magnitude in either array (and
    at least ``floor``): near-zero entries are judged against the size of the
    whole gradient, since finite-difference round-off there is absolute.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    d = max(floor, scale_floor * max(np.abs(a).max(), np.abs(b).max()))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), d)
    return float(np.max(np.abs(a - b) / denom))


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and numerical input gradients.

    ``op`` maps tensors to a tensor of any shape; it is contracted with a
    fixed random projection so every output element is exercised.
    Elements within ``eps`` of a relu / max / smooth-L1 kink are skipped.
    """
    arrays = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    probe_shape = op(*[Tensor(a) for a in arrays]).shape
    probe = np.random.default_rng(seed).standard_normal(probe_shape)

    def scalar() -> float:
        return float((op(*[Tensor(a) for a in arrays]).data * probe).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*leaves)
    out.backward(probe)
    worst = 0.0
    for leaf, a in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(a)
        numeric, kink = _central(scalar, a, eps)
        keep = ~kink
        worst = max(worst, relative_error(analytic[keep], numeric[keep]))
    return worst
