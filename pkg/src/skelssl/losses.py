"""Pretext, classification and combined objectives (all batch-summed)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Value


@dataclass
class LossBundle:
    L_m: float = 0.0
    L_j: float = 0.0
    L_c: float = 0.0
    L_cls: float = 0.0

    @property
    def L_self(self) -> float:
        return self.L_m + self.L_j + self.L_c


def _frames_of(x) -> list[Value]:
    if isinstance(x, Value):
        return [x]
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], Value):
        return list(x)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 4:
        arr = arr.reshape(arr.shape[0], arr.shape[1], -1)
    return [nx.const(arr[:, t]) for t in range(arr.shape[1])]


def motion_loss(pred, truth) -> Value:
    """Sum over batch, frames and coordinates of squared prediction error.

    ``pred`` and ``truth`` are either a list of per-frame ``(N, D)`` values or
    an ``(N, S, D)`` / ``(N, S, J, 3)`` array.
    """
    p, t = _frames_of(pred), _frames_of(truth)
    if len(p) != len(t):
        raise nx.DimensionError(f"motion_loss: {len(p)} predicted frames vs {len(t)} targets")
    terms = []
    for a, b in zip(p, t):
        if a.shape != b.shape:
            raise nx.DimensionError(f"motion_loss: frame shapes {a.shape} and {b.shape} differ")
        terms.append(nx.sum_squares(nx.sub(a, b)))
    return _sum(terms)


def masked_motion_loss(pred: Sequence[Value], truth: np.ndarray, mask: np.ndarray) -> Value:
    """Squared error restricted to coordinates where ``mask`` is 1.

    ``truth`` and ``mask`` are ``(N, T, D)``.
    """
    terms = []
    for t, a in enumerate(pred):
        m = nx.const(mask[:, t])
        terms.append(nx.sum_squares(nx.mul(nx.sub(a, nx.const(truth[:, t])), m)))
    return _sum(terms)


def _sum(terms: Sequence[Value]) -> Value:
    out = terms[0]
    for t in terms[1:]:
        out = nx.add(out, t)
    return out


def cross_entropy(logits: Value, targets) -> Value:
    """Batch-summed negative log-likelihood of integer targets."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    C = logits.shape[1]
    if targets.shape[0] != logits.shape[0]:
        raise nx.DimensionError(f"{logits.shape[0]} logit rows vs {targets.shape[0]} targets")
    if (targets < 0).any() or (targets >= C).any():
        raise ValueError(f"target outside [0, {C})")
    return nx.scale(nx.total(nx.pick(nx.log_softmax(logits), targets)), -1.0)


def jigsaw_loss(logits: Value, permutation_ids) -> Value:
    return cross_entropy(logits, permutation_ids)


def classification_loss(logits: Value, labels) -> Value:
    return cross_entropy(logits, labels)


def group_mean_matrix(N: int, M: int) -> np.ndarray:
    """(N, N*M) averaging operator over consecutive groups of M rows."""
    A = np.zeros((N, N * M))
    for k in range(N):
        A[k, k * M : (k + 1) * M] = 1.0 / M
    return A


def contrastive_loss(z: Value, M: int, temperature: float = 1.0) -> Value:
    """Mean-feature contrastive loss over N groups of M consecutive rows.

    Row ``(k-1)M`` of ``z`` is an original sample and the next ``M-1`` rows
    its transformed views. Every row is scored by cosine similarity against
    each group's mean feature; the target is its own group. The denominator
    runs over the N group means only.
    """
    NM = z.shape[0]
    if M < 1 or NM % M:
        raise nx.DimensionError(f"contrastive_loss: {NM} rows do not split into groups of {M}")
    N = NM // M
    zbar = nx.matmul(nx.const(group_mean_matrix(N, M)), z)
    sims = nx.matmul(nx.normalize_rows(z), nx.transpose(nx.normalize_rows(zbar)))
    if temperature != 1.0:
        sims = nx.scale(sims, 1.0 / temperature)
    return cross_entropy(sims, np.repeat(np.arange(N), M))


def combine_moving(L_cls: Value | float, L_self: Value | float, theta: float):
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must be in [0, 1], got {theta}")
    return _weighted(L_cls, theta, L_self, 1.0 - theta)


def combine_joint(L_cls: Value | float, L_self: Value | float, omega: float = 1.0):
    if omega < 0:
        raise ValueError(f"omega must be non-negative, got {omega}")
    return _weighted(L_cls, 1.0, L_self, omega)


def _weighted(a, wa: float, b, wb: float):
    if isinstance(a, Value) or isinstance(b, Value):
        return nx.add(nx.scale(nx.as_value(a), wa), nx.scale(nx.as_value(b), wb))
    return wa * a + wb * b
