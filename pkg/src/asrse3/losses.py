"""TD and imitation losses over one row of action values.

Every function returns ``(loss, grad)`` where ``grad`` is the derivative of
the loss with respect to its value input(s).  Margin losses take an optional
feasibility ``mask``; infeasible actions are dropped from the row before the
loss is evaluated and receive zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class MarginFn:
    """Constant-offset margin: 0 for the expert action, ``value`` otherwise."""

    value: float = 0.1

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("margin must be non-negative")

    def row(self, n: int, expert: int) -> np.ndarray:
        out = np.full(n, self.value)
        out[expert] = 0.0
        return out


def _check_row(q_row: np.ndarray, expert: int, mask: np.ndarray | None) -> np.ndarray:
    q = np.asarray(q_row, dtype=float)
    if q.ndim != 1:
        raise LossError("expected a 1-d row of action values")
    if not 0 <= expert < q.size:
        raise LossError(f"expert index {expert} outside row of width {q.size}")
    if mask is None:
        if not np.isfinite(q).all():
            raise LossError("non-finite action values")
        return np.ones(q.size, dtype=bool)
    feasible = np.asarray(mask, dtype=bool)
    if not feasible.any():
        raise LossError("no feasible actions in row")
    if not feasible[expert]:
        raise LossError("expert action is masked out")
    if not np.isfinite(q[feasible]).all():
        raise LossError("non-finite action values")
    return feasible


def td_loss(q_pred: float, y: float, delta: float = 1.0) -> tuple[float, float]:
    """Huber loss on ``q_pred - y`` with transition point ``delta``."""
    if not (np.isfinite(q_pred) and np.isfinite(y)):
        raise LossError("non-finite TD inputs")
    d = float(q_pred) - float(y)
    if abs(d) <= delta:
        return 0.5 * d * d, d
    return delta * (abs(d) - 0.5 * delta), delta * float(np.sign(d))


def huber(d: np.ndarray, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised Huber on residuals ``d``; returns (elementwise loss, derivative)."""
    if not np.all(np.isfinite(d)):
        raise LossError("non-finite TD inputs")
    a = np.abs(d)
    quad = a <= delta
    loss = np.where(quad, 0.5 * d * d, delta * (a - 0.5 * delta))
    grad = np.where(quad, d, delta * np.sign(d))
    return loss, grad


def violation_set(q_row: np.ndarray, expert: int, margin: MarginFn, mask: np.ndarray | None = None) -> np.ndarray:
    """Indices ``a`` with ``Q(a) > Q(expert) - l(expert, a)`` among feasible actions."""
    feasible = _check_row(q_row, expert, mask)
    q = np.asarray(q_row, dtype=float)
    # l is constant off the expert, and the expert never qualifies against itself
    hit = feasible & (q > q[expert] - margin.value)
    hit[expert] = False
    return np.flatnonzero(hit)


def slm_loss(
    q_row: np.ndarray, expert: int, margin: MarginFn = MarginFn(), mask: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Strict large-margin loss: mean margin violation over every violating action."""
    q = np.asarray(q_row, dtype=float)
    viol = violation_set(q, expert, margin, mask)
    grad = np.zeros(q.size)
    if viol.size == 0:
        return 0.0, grad
    terms = q[viol] + margin.value - q[expert]
    grad[viol] = 1.0 / viol.size
    grad[expert] = -1.0
    return float(terms.mean()), grad


def lm_loss(
    q_row: np.ndarray, expert: int, margin: MarginFn = MarginFn(), mask: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """DQfD large-margin loss ``max_a [Q(a) + l(expert, a)] - Q(expert)``."""
    feasible = _check_row(q_row, expert, mask)
    q = np.asarray(q_row, dtype=float)
    scores = np.where(feasible, q + margin.row(q.size, expert), -np.inf)
    top = int(np.argmax(scores))
    grad = np.zeros(q.size)
    grad[top] += 1.0
    grad[expert] -= 1.0
    return float(scores[top] - q[expert]), grad


def ce_loss(
    q_row: np.ndarray, expert: int, beta: float = 10.0, mask: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Cross-entropy of ``softmax(beta * q)`` against the expert action."""
    feasible = _check_row(q_row, expert, mask)
    q = np.asarray(q_row, dtype=float)
    z = np.where(feasible, beta * q, -np.inf)
    z = z - z[feasible].max()
    p = np.exp(z)
    total = p.sum()
    p /= total
    loss = float(np.log(total) - z[expert])
    onehot = np.zeros(q.size)
    onehot[expert] = 1.0
    return loss, beta * (p - onehot)
