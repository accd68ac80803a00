"""Central finite-difference checks for every differentiable tensor op."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

STEP = 1e-5
THRESHOLD = 1e-5


@dataclass
class OpCase:
    fn: Callable  # (*Tensor) -> Tensor
    make_inputs: Callable  # rng -> list[np.ndarray]


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _mask(shape):
    return np.triu(np.ones(shape, dtype=bool), k=1)


_TARGETS = np.array([0, 2, 1, 3])
_EMB_IDX = np.array([[0, 2, 2], [4, 1, 0]])


def _teacher_rows():
    rng = np.random.default_rng(123)
    p = rng.random((4, 5))
    return p / p.sum(axis=1, keepdims=True)


_TEACHER = _teacher_rows()

OPS: dict[str, OpCase] = {
    "add": OpCase(lambda a, b: a + b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))]),
    "sub": OpCase(lambda a, b: a - b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
    "mul": OpCase(lambda a, b: a * b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "div": OpCase(
        lambda a, b: a / b,
        lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(3, 4))],
    ),
    "neg": OpCase(lambda a: -a, lambda r: [r.normal(size=(5,))]),
    "pow": OpCase(lambda a: a**3, lambda r: [r.normal(size=(2, 3))]),
    "exp": OpCase(T.exp, lambda r: [r.normal(size=(2, 3))]),
    "log": OpCase(T.log, lambda r: [r.uniform(0.2, 3.0, size=(2, 3))]),
    "tanh": OpCase(T.tanh, lambda r: [r.normal(size=(2, 3))]),
    "relu": OpCase(T.relu, lambda r: [_away_from_zero(r, (3, 4))]),
    "gelu": OpCase(T.gelu, lambda r: [r.normal(size=(3, 4)) * 2]),
    "masked_fill": OpCase(
        lambda a: T.masked_fill(a, _mask((4, 4)), -3.0),
        lambda r: [r.normal(size=(4, 4))],
    ),
    "sum": OpCase(lambda a: a.sum(axis=1), lambda r: [r.normal(size=(3, 4))]),
    "mean": OpCase(lambda a: a.mean(axis=0, keepdims=True), lambda r: [r.normal(size=(3, 4))]),
    "reshape": OpCase(lambda a: a.reshape(4, 3), lambda r: [r.normal(size=(3, 4))]),
    "transpose": OpCase(lambda a: a.transpose(2, 0, 1), lambda r: [r.normal(size=(2, 3, 4))]),
    "slice": OpCase(lambda a: a[1:, ::2], lambda r: [r.normal(size=(3, 4))]),
    "gather": OpCase(
        lambda a: a[np.array([0, 2, 2]), np.array([1, 0, 1])], lambda r: [r.normal(size=(3, 4))]
    ),
    "concat": OpCase(
        lambda a, b: T.concat([a, b], axis=1),
        lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))],
    ),
    "stack": OpCase(
        lambda a, b: T.stack([a, b], axis=0),
        lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))],
    ),
    "matmul": OpCase(T.matmul, lambda r: [r.normal(size=(4, 5)), r.normal(size=(5, 3))]),
    "batched_matmul": OpCase(
        T.matmul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]
    ),
    "embedding": OpCase(lambda w: T.embedding(w, _EMB_IDX), lambda r: [r.normal(size=(5, 3))]),
    "layer_norm": OpCase(T.layer_norm, lambda r: [r.normal(size=(3, 6))]),
    "tempered_softmax": OpCase(
        lambda a: T.tempered_softmax(a, 2.5), lambda r: [r.normal(size=(3, 5))]
    ),
    "tempered_softmax_per_row": OpCase(
        lambda a: T.tempered_softmax(a, np.array([[0.5], [1.0], [3.0]])),
        lambda r: [r.normal(size=(3, 5))],
    ),
    "log_softmax": OpCase(lambda a: T.log_softmax(a, 1.5), lambda r: [r.normal(size=(3, 5))]),
    "cross_entropy": OpCase(
        lambda a: T.cross_entropy(a, _TARGETS), lambda r: [r.normal(size=(4, 5))]
    ),
    # Student side must stay a distribution under perturbation, so it is fed through softmax.
    "kl_divergence": OpCase(
        lambda a: T.kl_divergence(_TEACHER, T.softmax(a), reduction="none"),
        lambda r: [r.normal(size=(4, 5))],
    ),
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(diff / scale)


def check_case(case: OpCase, rng, step: float = STEP) -> float:
    """Max relative error over the inputs of one random point."""
    arrays = case.make_inputs(rng)
    out_shape = case.fn(*[T.Tensor(a) for a in arrays]).shape
    weights = rng.normal(size=out_shape)

    def scalar(*arrs):
        with T.no_grad():
            return float((case.fn(*[T.Tensor(a) for a in arrs]).data * weights).sum())

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = (case.fn(*leaves) * weights).sum()
    loss.backward()

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        numeric = np.zeros_like(arrays[k])
        flat = numeric.reshape(-1)
        for j in range(arrays[k].size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].reshape(-1)[j] += step
            minus[k].reshape(-1)[j] -= step
            flat[j] = (scalar(*plus) - scalar(*minus)) / (2 * step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def run_gradcheck(ops=None, points: int = 10, seed: int = 0, threshold: float = THRESHOLD):
    """Returns ``[(op_name, max_relative_error, passed)]``, one entry per op."""
    ops = OPS if ops is None else ops
    results = []
    for i, (name, case) in enumerate(ops.items()):
        rng = np.random.default_rng([seed, i])
        err = max(check_case(case, rng) for _ in range(points))
        results.append((name, err, bool(err <= threshold)))
    return results
