"""Reward signal, exploration schedule, and the three training loss terms.

The objective is an unweighted sum of a squared reward-regression term (the
value head against the 0/1 per-sample reward), a cross-entropy term that
treats frozen generated labels exactly like ground-truth ones, and an
InfoNCE-style contrastive term pulling together the two fused group views
of each sample. All batch losses are means, so values are comparable across
batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateVectorError
from .tensor import Tensor

PROB_FLOOR = 1e-12  # probabilities are clamped to [floor, 1-floor] inside logs


def epsilon(step: int, total: int, eps_min: float) -> float:
    """Linearly decaying exploration rate: 1 at step 0, eps_min at step >= total."""
    if total < 1:
        raise ConfigError("iteration budget must be >= 1")
    if not 0.0 <= eps_min <= 1.0:
        raise ConfigError(f"eps_min must be in [0, 1], got {eps_min}")
    return max(eps_min, 1.0 - (1.0 - eps_min) * step / total)


def select_class(probs: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Explore uniformly with probability eps, otherwise take the argmax.

    Ties in the probability vector resolve to the lowest class index.
    """
    probs = np.asarray(probs)
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(probs.shape[0]))
    return int(np.argmax(probs))


def reward(chosen: int, reference: int) -> int:
    """1 if the chosen class agrees with the reference label, else 0."""
    return 1 if chosen == reference else 0


def td_loss(values, rewards) -> Tensor:
    """Mean of 0.5 * (value - reward)^2 over the batch."""
    values = T.as_tensor(values)
    rewards = T.constant(np.asarray(rewards, dtype=np.float64))
    diff = T.sub(values, rewards)
    return T.mul(T.tensor_mean(T.mul(diff, diff)), 0.5)


def ce_loss(probs: Tensor, labels: Sequence[int | None]) -> Tensor:
    """Mean cross-entropy over samples that have a reference label.

    labels holds one entry per batch row: a class index (ground truth or
    frozen generated label, weighted identically) or None to exclude the
    row. With no labeled rows the loss is exactly 0.
    """
    if probs.data.ndim != 2:
        raise ConfigError(f"probabilities must be 2-D, got shape {probs.data.shape}")
    n, c = probs.data.shape
    if len(labels) != n:
        raise ConfigError(f"{len(labels)} labels for {n} rows")
    rows = [i for i, y in enumerate(labels) if y is not None]
    if not rows:
        return T.constant(0.0)
    picked = [labels[i] for i in rows]
    if any(y < 0 or y >= c for y in picked):
        raise ConfigError(f"label out of range for {c} classes: {picked}")
    chosen = T.take_per_row(T.take_rows(probs, rows), picked)
    return -T.tensor_mean(T.log(T.clamp(chosen, PROB_FLOOR, 1.0 - PROB_FLOOR)))


def _normalize_rows(x: Tensor) -> Tensor:
    norms_sq = T.tensor_sum(T.mul(x, x), axis=1, keepdims=True)
    if np.any(np.sqrt(norms_sq.data) < 1e-12):
        raise DegenerateVectorError("contrastive loss received a (near-)zero vector")
    return T.div(x, T.power(norms_sq, 0.5))


def contrastive_loss(views_a, views_b, tau: float = 2.0) -> Tensor:
    """InfoNCE over cosine similarities of paired view vectors.

    Each sample's first view is scored against every sample's second view;
    the temperature-scaled softmax over those scores should concentrate on
    the matching pair.
    """
    a = T.stack([T.as_tensor(v) for v in views_a], axis=0) if isinstance(views_a, (list, tuple)) else T.as_tensor(views_a)
    b = T.stack([T.as_tensor(v) for v in views_b], axis=0) if isinstance(views_b, (list, tuple)) else T.as_tensor(views_b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ConfigError(f"paired views must share a (n, d) shape, got {a.data.shape} and {b.data.shape}")
    n = a.data.shape[0]
    scores = T.mul(T.matmul(_normalize_rows(a), T.swap_last_axes(_normalize_rows(b))), 1.0 / tau)
    # constant per-row shift: stabilises exp without touching gradients
    shift = scores.data.max(axis=1, keepdims=True)
    log_denom = T.add(T.log(T.tensor_sum(T.exp(T.sub(scores, T.constant(shift))), axis=1)),
                      T.constant(shift[:, 0]))
    paired = T.take_per_row(scores, np.arange(n))
    return T.tensor_mean(T.sub(log_denom, paired))


@dataclass
class LossBreakdown:
    """The three loss terms and their sum, kept as graph nodes for backward."""

    td: Tensor
    ce: Tensor
    ss: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"td": self.td.item(), "ce": self.ce.item(),
                "ss": self.ss.item(), "total": self.total.item()}


def total_loss(td: Tensor | None = None, ce: Tensor | None = None,
               ss: Tensor | None = None) -> LossBreakdown:
    """Unweighted sum of the enabled terms; a disabled term contributes exactly 0."""
    zero = T.constant(0.0)
    td = zero if td is None else td
    ce = zero if ce is None else ce
    ss = zero if ss is None else ss
    return LossBreakdown(td, ce, ss, T.add(T.add(td, ce), ss))
