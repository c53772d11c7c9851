"""Pretext-task input constructions.

All functions work on plain ``(T, J, 3)`` arrays (or :class:`SkeletonSequence`)
and take either an integer seed or a ``numpy.random.Generator``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .data import SkeletonSequence

MAX_SEGMENTS = 6
NUM_BODY_PARTS = 5


class TransformConfigError(ValueError):
    pass


def _frames(seq) -> np.ndarray:
    if isinstance(seq, SkeletonSequence):
        return seq.frames
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected a T x J x 3 array, got {arr.shape}")
    return arr


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class MaskedSample:
    noisy_prefix: np.ndarray  # (T', J, 3)
    target_suffix: np.ndarray  # (T - T', J, 3)
    T_prime: int

    def padded(self) -> np.ndarray:
        """Noisy prefix followed by zero frames, back to full length."""
        return np.concatenate([self.noisy_prefix, np.zeros_like(self.target_suffix)], axis=0)


@dataclass(frozen=True)
class JigsawSample:
    shuffled: np.ndarray
    permutation_id: int
    P: int


@dataclass(frozen=True)
class SpatialMaskSample:
    masked: np.ndarray  # input with masked joints zeroed
    joints: np.ndarray  # indices of masked joints
    target: np.ndarray  # (T, len(joints), 3) original values

    def joint_mask(self, J: int) -> np.ndarray:
        m = np.zeros(J, dtype=bool)
        m[self.joints] = True
        return m


def mask_and_noise(seq, T_prime: int, noise_std: float, seed) -> MaskedSample:
    x = _frames(seq)
    T = x.shape[0]
    if not 1 <= T_prime < T:
        raise ValueError(f"T_prime must satisfy 1 <= T_prime < T={T}, got {T_prime}")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    prefix = x[:T_prime].copy()
    if noise_std > 0:
        prefix += _rng(seed).normal(0.0, noise_std, size=prefix.shape)
    return MaskedSample(prefix, x[T_prime:].copy(), T_prime)


@lru_cache(maxsize=None)
def _perm_table(P: int) -> tuple[tuple[int, ...], ...]:
    return tuple(itertools.permutations(range(P)))


def enumerate_permutations(P: int) -> list[tuple[int, ...]]:
    """All orderings of ``range(P)`` in lexicographic order; index 0 is identity."""
    if not 1 <= P <= MAX_SEGMENTS:
        raise ValueError(f"P must be in [1, {MAX_SEGMENTS}], got {P}")
    return list(_perm_table(P))


def segment_bounds(T: int, P: int) -> list[tuple[int, int]]:
    """Contiguous segments; the first ``T mod P`` are one frame longer."""
    if P > T:
        raise ValueError(f"cannot cut {T} frames into {P} segments")
    base, extra = divmod(T, P)
    bounds, start = [], 0
    for k in range(P):
        n = base + (1 if k < extra else 0)
        bounds.append((start, start + n))
        start += n
    return bounds


def apply_segment_order(x: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Output segment ``k`` is input segment ``order[k]``."""
    bounds = segment_bounds(x.shape[0], len(order))
    return np.concatenate([x[slice(*bounds[i])] for i in order], axis=0)


def invert_jigsaw(sample: JigsawSample) -> np.ndarray:
    order = _perm_table(sample.P)[sample.permutation_id]
    T = sample.shuffled.shape[0]
    bounds = segment_bounds(T, sample.P)
    # segment k of the output has the length of original segment order[k]
    lengths = [bounds[i][1] - bounds[i][0] for i in order]
    pieces = np.split(sample.shuffled, np.cumsum(lengths)[:-1])
    restored = [None] * sample.P
    for k, src in enumerate(order):
        restored[src] = pieces[k]
    return np.concatenate(restored, axis=0)


def temporal_jigsaw(seq, P: int, seed, permutation_id: int | None = None) -> JigsawSample:
    x = _frames(seq)
    perms = enumerate_permutations(P)
    if permutation_id is None:
        permutation_id = int(_rng(seed).integers(len(perms)))
    elif not 0 <= permutation_id < len(perms):
        raise ValueError(f"permutation_id {permutation_id} outside [0, {len(perms)})")
    return JigsawSample(apply_segment_order(x, perms[permutation_id]), permutation_id, P)


def default_body_parts(J: int) -> list[list[int]]:
    """Five contiguous joint groups of near-equal size."""
    if J < NUM_BODY_PARTS:
        raise TransformConfigError(f"need at least {NUM_BODY_PARTS} joints for a body-part partition, got {J}")
    return [list(map(int, g)) for g in np.array_split(np.arange(J), NUM_BODY_PARTS)]


def validate_body_parts(parts: Sequence[Sequence[int]], J: int) -> None:
    if len(parts) != NUM_BODY_PARTS:
        raise TransformConfigError(f"expected {NUM_BODY_PARTS} body parts, got {len(parts)}")
    flat = [j for part in parts for j in part]
    if any(len(p) == 0 for p in parts):
        raise TransformConfigError("body parts must be nonempty")
    if sorted(flat) != list(range(J)):
        missing = sorted(set(range(J)) - set(flat))
        dup = sorted({j for j in flat if flat.count(j) > 1})
        raise TransformConfigError(f"body parts must cover joints 0..{J - 1} exactly once (missing {missing}, repeated {dup})")


def spatial_jigsaw(
    seq, parts: Sequence[Sequence[int]], seed, permutation_id: int | None = None
) -> JigsawSample:
    """Reorder the joint groups; output group slot ``k`` holds part ``order[k]``.

    Parts may differ in size, so the joint columns are concatenated in the
    permuted part order.
    """
    x = _frames(seq)
    validate_body_parts(parts, x.shape[1])
    perms = _perm_table(NUM_BODY_PARTS)
    if permutation_id is None:
        permutation_id = int(_rng(seed).integers(len(perms)))
    cols = [j for k in perms[permutation_id] for j in parts[k]]
    return JigsawSample(x[:, cols], permutation_id, NUM_BODY_PARTS)


def spatial_mask(seq, mask_fraction: float, seed) -> SpatialMaskSample:
    x = _frames(seq)
    if not 0.0 < mask_fraction < 1.0:
        raise ValueError(f"mask_fraction must be in (0, 1), got {mask_fraction}")
    J = x.shape[1]
    k = int(round(mask_fraction * J))
    joints = np.sort(_rng(seed).choice(J, size=k, replace=False))
    out = x.copy()
    out[:, joints] = 0.0
    return SpatialMaskSample(out, joints, x[:, joints].copy())


# ----------------------------------------------------------------------------
# contrastive groups


Operator = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class TransformGroup:
    original: np.ndarray
    transformed: tuple[np.ndarray, ...]
    group_id: int = 0

    @property
    def M(self) -> int:
        return 1 + len(self.transformed)

    def members(self) -> list[np.ndarray]:
        return [self.original, *self.transformed]


def temporal_mask_op(T_prime: int, noise_std: float) -> Operator:
    return lambda x, rng: mask_and_noise(x, T_prime, noise_std, rng).padded()


def temporal_jigsaw_op(P: int) -> Operator:
    return lambda x, rng: temporal_jigsaw(x, P, rng).shuffled


def spatial_mask_op(mask_fraction: float) -> Operator:
    return lambda x, rng: spatial_mask(x, mask_fraction, rng).masked


def spatial_jigsaw_op(parts: Sequence[Sequence[int]]) -> Operator:
    return lambda x, rng: spatial_jigsaw(x, parts, rng).shuffled


def build_transform_group(seq, operators: Sequence[Operator], seed=None, group_id: int = 0) -> TransformGroup:
    if not operators:
        raise ValueError("at least one transformation operator is required")
    x = _frames(seq)
    rng = _rng(seed)
    members = tuple(op(x, rng) for op in operators)
    for m in members:
        if m.shape != x.shape:
            raise ValueError(f"operator produced shape {m.shape}, expected {x.shape}")
    return TransformGroup(x, members, group_id)


def num_classes_for_jigsaw(P: int) -> int:
    return math.factorial(P)
