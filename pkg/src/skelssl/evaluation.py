"""Linear probe, accuracy, task-combination sweeps and loss-curve statistics."""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import losses as L
from . import model as M
from . import numerics as nx
from .data import DataError, Dataset
from .io_utils import atomic_write_text
from .model import ModelConfig, ModelParams
from .numerics import Value
from .training import (
    TASKS,
    AdamState,
    PretextBatch,
    PretextConfig,
    Schedule,
    TrainConfig,
    TrainReport,
    adam_step,
    pretrain_self_supervised,
    train_supervised,
    zero_grads,
)


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest index."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError("accuracy needs a nonempty (n, classes) batch")
    if len(labels) != len(logits):
        raise ValueError(f"{len(logits)} logit rows vs {len(labels)} labels")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    feature_dim: int
    encoder_source: str = "file"

    def line(self) -> str:
        return f"probe,{self.encoder_source},{self.accuracy!r}"


def pooled_features(params: ModelParams, ds: Dataset, batch: int = 256) -> np.ndarray:
    X = ds.stacked()
    return np.concatenate([M.encode(params, X[i : i + batch]).pooled().value for i in range(0, len(X), batch)])


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    epochs: int = 50,
    batch_size: int = 32,
    seed: int = 0,
    schedule: Schedule | None = None,
) -> tuple[Value, Value]:
    """Fit an affine softmax classifier on fixed features with Adam."""
    sched = schedule or Schedule()
    rng = np.random.default_rng([seed, 21])
    F = features.shape[1]
    a = np.sqrt(1.0 / F)
    W = nx.param(rng.uniform(-a, a, size=(F, num_classes)), "probe.W")
    b = nx.param(np.zeros((1, num_classes)), "probe.b")
    state = AdamState()
    it = 0
    n = len(features)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            with nx.Tape() as tape:
                loss = L.classification_loss(nx.affine(nx.const(features[idx]), W, b), labels[idx])
            zero_grads([W, b])
            tape.backward(loss)
            adam_step({"probe.W": W, "probe.b": b}, state, sched.lr(it))
            it += 1
    return W, b



def linear_probe(
    encoder: ModelParams,
    train: Dataset,
    test: Dataset,
    epochs: int = 50,
    batch_size: int = 32,
    seed: int = 0,
    encoder_source: str = "file",
    schedule: Schedule | None = None,
) -> ProbeResult:
    """Accuracy of a linear classifier trained on frozen pooled encoder features.

    The encoder is only read; its parameters are never differentiated.
    """
    if len(train) == 0 or len(test) == 0:
        raise DataError("linear probe needs nonempty train and test splits")
    ftr = pooled_features(encoder, train)
    fte = pooled_features(encoder, test)
    num_classes = max(train.num_classes, test.num_classes)
    W, b = train_probe(ftr, train.labels(), num_classes, epochs, batch_size, seed, schedule)
    logits = fte @ W.value + b.value
    return ProbeResult(accuracy(logits, test.labels()), ftr.shape[1], encoder_source)


def jigsaw_accuracy(params: ModelParams, ds: Dataset, pretext: PretextConfig, seed: int, repeats: int = 1) -> float:
    """Permutation-classification accuracy on fresh shuffles of ``ds``."""
    X = ds.stacked()
    rng = np.random.default_rng([seed, 31])
    hits = total = 0
    for _ in range(repeats):
        logits, target = PretextBatch(params, X, pretext, rng).jigsaw_logits()
        hits += int((np.argmax(logits.value, axis=1) == target).sum())
        total += len(target)
    return hits / total


# ----------------------------------------------------------------------------
# task-combination sweep


def all_task_subsets() -> list[tuple[str, ...]]:
    return [c for r in range(1, 4) for c in itertools.combinations(TASKS, r)]


@dataclass
class AblationCell:
    tasks: tuple[str, ...]
    prediction_variant: str
    jigsaw_variant: str
    accuracy: float
    report: TrainReport = field(repr=False, default_factory=TrainReport)


@dataclass
class AblationGrid:
    cells: list[AblationCell]

    def to_csv(self) -> str:
        lines = ["subset,prediction_variant,jigsaw_variant,accuracy"]
        for c in self.cells:
            lines.append(f"{'+'.join(c.tasks)},{c.prediction_variant},{c.jigsaw_variant},{c.accuracy!r}")
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


def _sweep_cell(train, test, model_cfg, pretext, pre_cfg, fine_cfg, tasks, seed) -> AblationCell:
    pre, report = pretrain_self_supervised(train.unlabeled(), model_cfg, pretext, replace(pre_cfg, tasks=tasks), seed)
    _, fine = train_supervised(
        train, "jointly", model_cfg, pretext, replace(fine_cfg, tasks=tasks), seed, init=pre, test=test
    )
    acc = float(fine.rows[-1].test_acc)
    return AblationCell(tasks, pretext.prediction_variant, model_cfg.jigsaw_variant, acc, report.extend(fine))


def ablation_sweep(
    train: Dataset,
    test: Dataset,
    model_cfg: ModelConfig,
    pretext: PretextConfig,
    pre_cfg: TrainConfig,
    fine_cfg: TrainConfig,
    combinations: Sequence[Sequence[str]],
    seed: int,
    jobs: int = 1,
) -> AblationGrid:
    """Pretrain with each task subset, fine-tune jointly, record test accuracy.

    The fine-tune phase starts from the pretrained weights and optimizes
    L_cls + omega * L_self over the same subset. Cells share ``seed`` and are
    independent, so ``jobs > 1`` runs them in worker processes.
    """
    if not combinations:
        raise ValueError("ablation sweep needs at least one task subset")
    subsets = []
    for combo in combinations:
        if not combo:
            raise ValueError("empty task subset requested")
        tasks = tuple(t for t in TASKS if t in combo)
        if len(tasks) != len(set(combo)):
            raise ValueError(f"unknown task in subset {combo!r}")
        subsets.append(tasks)
    cell_args = [(train, test, model_cfg, pretext, pre_cfg, fine_cfg, tasks, seed) for tasks in subsets]
    if jobs > 1 and len(cell_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_sweep_cell, *zip(*cell_args)))
    else:
        cells = [_sweep_cell(*a) for a in cell_args]
    return AblationGrid(cells)


# ----------------------------------------------------------------------------
# loss curves


def curve_stats(report: TrainReport | Sequence[float], transition_epoch: int) -> float:
    """Largest rise of L_self between consecutive epochs from ``transition_epoch`` on."""
    curve = report.column("L_self") if isinstance(report, TrainReport) else np.asarray(report, dtype=float)
    if not 0 <= transition_epoch < len(curve) - 1:
        raise ValueError(f"transition epoch {transition_epoch} outside report range of {len(curve)} epochs")
    return float(np.max(np.diff(curve[transition_epoch:])))
