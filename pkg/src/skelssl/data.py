"""Skeleton sequences, the SKEL1 text format, splits and a synthetic generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .io_utils import atomic_write_text


class DataError(ValueError):
    """Malformed or inconsistent skeleton data."""


class ParseError(DataError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


@dataclass(frozen=True)
class SkeletonSequence:
    frames: np.ndarray  # (T, J, 3)
    label: int | None = None
    id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise DataError(f"sequence {self.id!r}: frames must be T x J x 3, got {frames.shape}")
        if frames.shape[0] < 1 or frames.shape[1] < 1:
            raise DataError(f"sequence {self.id!r}: empty frames {frames.shape}")
        if not np.isfinite(frames).all():
            raise DataError(f"sequence {self.id!r}: non-finite coordinates")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def J(self) -> int:
        return self.frames.shape[1]

    def flat(self) -> np.ndarray:
        """Frames as a (T, J*3) matrix, joint-major."""
        return self.frames.reshape(self.T, -1)


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[SkeletonSequence, ...]
    num_classes: int
    joint_count: int
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        for s in self.sequences:
            if s.J != self.joint_count:
                raise DataError(f"sequence {s.id!r} has {s.J} joints, dataset has {self.joint_count}")
            if s.label is not None and not 0 <= s.label < self.num_classes:
                raise DataError(f"sequence {s.id!r}: label {s.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.sequences)

    def stacked(self) -> np.ndarray:
        """All frames as an (N, T, J*3) array; sequences must share T."""
        if not self.sequences:
            raise DataError("dataset is empty")
        lengths = {s.T for s in self.sequences}
        if len(lengths) != 1:
            raise DataError(f"sequences have differing lengths {sorted(lengths)}; downsample first")
        return np.stack([s.flat() for s in self.sequences])

    def labels(self) -> np.ndarray:
        if any(s.label is None for s in self.sequences):
            raise DataError("dataset contains unlabeled sequences")
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def subset(self, indices: Sequence[int], split: str | None = None) -> "Dataset":
        return Dataset(
            tuple(self.sequences[i] for i in indices),
            self.num_classes,
            self.joint_count,
            split or self.split,
        )

    def unlabeled(self) -> "Dataset":
        return replace(self, sequences=tuple(replace(s, label=None) for s in self.sequences))

    def merged(self, other: "Dataset", split: str | None = None) -> "Dataset":
        if other.joint_count != self.joint_count:
            raise DataError(f"joint counts differ: {self.joint_count} vs {other.joint_count}")
        return Dataset(
            self.sequences + other.sequences,
            max(self.num_classes, other.num_classes),
            self.joint_count,
            split or self.split,
        )


@dataclass(frozen=True)
class SplitSpec:
    labeled_fraction: float
    seed: int


# ----------------------------------------------------------------------------
# file format


def _fmt(x: float) -> str:
    # repr gives the shortest string that parses back to the same double
    return repr(float(x))


def dumps_dataset(ds: Dataset) -> str:
    lines = [f"SKEL1 {len(ds)} {ds.joint_count} {ds.num_classes}"]
    for i, s in enumerate(ds.sequences):
        sid = s.id or f"seq{i}"
        if any(c.isspace() for c in sid):
            raise DataError(f"sequence id {sid!r} contains whitespace")
        label = -1 if s.label is None else s.label
        lines.append(f"SEQ {sid} {s.T} {label}")
        for row in s.flat():
            lines.append(" ".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_text(path, dumps_dataset(ds))


def load_dataset(path, split: str = "train") -> Dataset:
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not ASCII ({exc})") from exc
    return parse_dataset(text, source=str(path), split=split)


def parse_dataset(text: str, source: str = "<string>", split: str = "train") -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise DataError(f"{source}: empty dataset file")

    def fail(ln, msg):
        raise ParseError(source, ln, msg)

    head = lines[0].split()
    if len(head) != 4 or head[0] != "SKEL1":
        fail(1, "expected header 'SKEL1 <num_sequences> <J> <num_classes>'")
    try:
        n_seq, J, n_cls = (int(v) for v in head[1:])
    except ValueError:
        fail(1, "header counts must be integers")
    if n_seq < 1:
        raise DataError(f"{source}: empty dataset (0 sequences)")
    if J < 1 or n_cls < 1:
        fail(1, "joint and class counts must be positive")

    seqs = []
    pos = 1
    for _ in range(n_seq):
        if pos >= len(lines):
            fail(pos + 1, f"expected {n_seq} sequences, found {len(seqs)}")
        parts = lines[pos].split()
        if len(parts) != 4 or parts[0] != "SEQ":
            fail(pos + 1, "expected 'SEQ <id> <T> <label|-1>'")
        try:
            T, label = int(parts[2]), int(parts[3])
        except ValueError:
            fail(pos + 1, "T and label must be integers")
        if T < 1:
            fail(pos + 1, "T must be positive")
        if label < -1 or label >= n_cls:
            fail(pos + 1, f"label {label} outside [-1, {n_cls})")
        frames = np.empty((T, 3 * J))
        for t in range(T):
            ln = pos + 2 + t
            if ln - 1 >= len(lines):
                fail(ln, "unexpected end of file inside sequence")
            vals = lines[ln - 1].split()
            if len(vals) != 3 * J:
                fail(ln, f"frame has {len(vals)} values, expected {3 * J}")
            try:
                frames[t] = [float(v) for v in vals]
            except ValueError:
                fail(ln, "non-numeric coordinate")
            if not np.isfinite(frames[t]).all():
                fail(ln, "non-finite coordinate")
        seqs.append(SkeletonSequence(frames.reshape(T, J, 3), None if label < 0 else label, parts[1]))
        pos += 1 + T
    if pos != len(lines):
        fail(pos + 1, "trailing content after last sequence")
    return Dataset(tuple(seqs), n_cls, J, split)


# ----------------------------------------------------------------------------
# preprocessing and splits


def downsample(seq: SkeletonSequence, length: int) -> SkeletonSequence:
    """Pick ``length`` frames at indices floor(k*T/length)."""
    if length < 1:
        raise ValueError("target length must be >= 1")
    idx = (np.arange(length) * seq.T) // length
    return replace(seq, frames=seq.frames[idx])


def center(seq: SkeletonSequence) -> SkeletonSequence:
    """Subtract the sequence's mean joint position."""
    return replace(seq, frames=seq.frames - seq.frames.mean(axis=(0, 1), keepdims=True))


def split_labeled(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    if not 0.0 < spec.labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {spec.labeled_fraction}")
    n = len(ds)
    k = max(1, int(round(spec.labeled_fraction * n)))
    order = np.random.default_rng(spec.seed).permutation(n)
    lab = np.sort(order[:k])
    unl = np.sort(order[k:])
    return ds.subset(lab), ds.subset(unl).unlabeled()


def split_train_test(ds: Dataset, test_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified hold-out: ``test_per_class`` sequences of each class go to test."""
    rng = np.random.default_rng(seed)
    labels = ds.labels()
    test_idx = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(labels == c)
        if len(members) <= test_per_class:
            raise DataError(f"class {c} has {len(members)} sequences, need more than {test_per_class}")
        test_idx.extend(rng.choice(members, size=test_per_class, replace=False))
    mask = np.zeros(len(ds), dtype=bool)
    mask[test_idx] = True
    return ds.subset(np.flatnonzero(~mask), "train"), ds.subset(np.flatnonzero(mask), "test")


# ----------------------------------------------------------------------------
# synthetic motions


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 4
    sequences_per_class: int = 50
    T: int = 40
    J: int = 8
    noise_std: float = 0.05
    seed: int = 0
    # per-sequence nuisance: random time shift (fraction of a period) and
    # amplitude scale spread; both zero keeps every clean sequence equal to
    # its class template
    phase_jitter: float = 0.0
    amplitude_jitter: float = 0.0
    harmonics: int = 1

    def validate(self) -> list[str]:
        errs = []
        for name in ("num_classes", "sequences_per_class", "T", "J", "harmonics"):
            if getattr(self, name) < 1:
                errs.append(f"synthetic.{name} must be >= 1")
        for name in ("noise_std", "phase_jitter", "amplitude_jitter"):
            if getattr(self, name) < 0:
                errs.append(f"synthetic.{name} must be >= 0")
        return errs


@dataclass(frozen=True)
class ClassTemplate:
    offset: np.ndarray  # (J, 3) rest pose
    amplitude: np.ndarray  # (K, J, 3)
    frequency: np.ndarray  # (K,) cycles per sequence
    phase: np.ndarray  # (K, J, 3)

    def render(self, T: int, shift: float = 0.0, gain: float = 1.0) -> np.ndarray:
        t = np.arange(T)[:, None, None, None] / T  # (T, 1, 1, 1)
        arg = 2 * math.pi * (self.frequency[None, :, None, None] * (t + shift)) + self.phase[None]
        motion = (self.amplitude[None] * np.sin(arg)).sum(axis=1)
        return self.offset[None] + gain * motion


def class_templates(cfg: SyntheticConfig) -> list[ClassTemplate]:
    rng = np.random.default_rng([cfg.seed, 0])
    K, J = cfg.harmonics, cfg.J
    offset = rng.normal(0.0, 0.5, size=(J, 3))  # shared skeleton rest pose
    out = []
    for _ in range(cfg.num_classes):
        out.append(
            ClassTemplate(
                offset=offset,
                amplitude=rng.uniform(0.2, 0.6, size=(K, J, 3)) / np.sqrt(K),
                frequency=rng.uniform(0.5, 2.5, size=K),
                phase=rng.uniform(0.0, 2 * math.pi, size=(K, J, 3)),
            )
        )
    return out


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    templates = class_templates(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    seqs = []
    for c, tpl in enumerate(templates):
        for k in range(cfg.sequences_per_class):
            shift = rng.uniform(-cfg.phase_jitter, cfg.phase_jitter) if cfg.phase_jitter else 0.0
            gain = 1.0 + (rng.uniform(-cfg.amplitude_jitter, cfg.amplitude_jitter) if cfg.amplitude_jitter else 0.0)
            frames = tpl.render(cfg.T, shift, gain)
            if cfg.noise_std > 0:
                frames = frames + rng.normal(0.0, cfg.noise_std, size=frames.shape)
            seqs.append(SkeletonSequence(frames, c, f"c{c}_s{k}"))
    return Dataset(tuple(seqs), cfg.num_classes, cfg.J, "train")


def nearest_template_predict(ds: Dataset, templates: Sequence[np.ndarray]) -> np.ndarray:
    """Class of the closest template (squared distance) for every sequence."""
    X = ds.stacked()
    Tm = np.stack([t.reshape(t.shape[0], -1) for t in templates])
    d = ((X[:, None] - Tm[None]) ** 2).sum(axis=(2, 3))
    return d.argmin(axis=1)
