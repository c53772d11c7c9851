"""Optimizer, schedules and the training strategies."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from . import losses as L
from . import model as M
from . import numerics as nx
from . import transforms as tf
from .data import DataError, Dataset
from .io_utils import atomic_write_text
from .model import ModelConfig, ModelParams
from .numerics import Value

log = logging.getLogger(__name__)

TASKS = ("prediction", "jigsaw", "contrastive")
STRATEGIES = ("rand", "pretrain", "moving", "jointly", "finetune")
CONTRASTIVE_OPS = ("temporal_mask", "temporal_jigsaw", "spatial_mask", "spatial_jigsaw")
# encoder and pretext heads carry over from a pretrained checkpoint; the
# classifier and probe are always freshly initialized
TRANSFERRED = ("enc.", "dec.", "jig.", "proj.")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretextConfig:
    T_prime: int = 50
    noise_std: float = 0.02
    prediction_variant: str = "temporal"  # or "spatial"
    mask_fraction: float = 0.3
    contrastive_ops: tuple[str, ...] = ("temporal_mask", "temporal_jigsaw")
    body_parts: tuple[tuple[int, ...], ...] | None = None
    temperature: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.01
    floor_lr: float = 1e-4
    decay: float = 0.1
    decay_every: int = 100
    moving_epochs: int = 10
    omega: float = 1.0
    tasks: tuple[str, ...] = TASKS
    track_self: bool = False


# ----------------------------------------------------------------------------
# schedule and optimizer


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.01
    floor_lr: float = 1e-4
    decay: float = 0.1
    decay_every: int = 100
    moving_epochs: int = 10

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Schedule":
        return cls(cfg.base_lr, cfg.floor_lr, cfg.decay, cfg.decay_every, cfg.moving_epochs)

    def lr(self, iteration: int) -> float:
        return max(self.base_lr * self.decay ** (iteration // self.decay_every), self.floor_lr)

    def theta(self, epoch: int) -> float:
        """Weight of the classification loss after ``epoch`` moving epochs."""
        if self.moving_epochs <= 0:
            return 1.0
        return min(epoch / self.moving_epochs, 1.0)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Value], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every parameter that holds a gradient."""
    live = [(k, p) for k, p in params.items() if p.requires_grad and p.grad is not None]
    for k, p in live:
        if not np.isfinite(p.grad).all():
            raise nx.NumericError(f"non-finite gradient for parameter {k!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in live:
        g = p.grad
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.value)
            state.v[k] = np.zeros_like(p.value)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def export_adam(state: AdamState) -> dict[str, np.ndarray]:
    out = {"step": np.array([[float(state.step)]])}
    for k in state.m:
        out[f"m.{k}"] = state.m[k].copy()
        out[f"v.{k}"] = state.v[k].copy()
    return out


def import_adam(saved: dict[str, np.ndarray], prefixes: Sequence[str] = ("",)) -> AdamState:
    """Adam state restricted to parameters under ``prefixes``; empty input gives a fresh state."""
    state = AdamState()
    if not saved:
        return state
    state.step = int(saved["step"][0, 0])
    for key, arr in saved.items():
        if key.startswith("m.") and key[2:].startswith(tuple(prefixes)):
            name = key[2:]
            state.m[name] = arr.copy()
            state.v[name] = saved[f"v.{name}"].copy()
    return state


def zero_grads(params: Iterable[Value]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# report


REPORT_COLUMNS = ("epoch", "L_m", "L_j", "L_c", "L_self", "L_cls", "theta", "lr", "train_acc", "test_acc")


@dataclass
class EpochRow:
    epoch: int
    L_m: float = math.nan
    L_j: float = math.nan
    L_c: float = math.nan
    L_cls: float = math.nan
    theta: float = math.nan
    lr: float = math.nan
    train_acc: float = math.nan
    test_acc: float = math.nan
    wall_time: float = 0.0
    phase: str = ""

    @property
    def L_self(self) -> float:
        return self.L_m + self.L_j + self.L_c


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def extend(self, other: "TrainReport") -> "TrainReport":
        offset = len(self.rows)
        for r in other.rows:
            self.rows.append(EpochRow(**{f.name: getattr(r, f.name) for f in fields(EpochRow)}))
            self.rows[-1].epoch = offset + r.epoch
        return self

    def phase_end(self, phase: str) -> int:
        """Index of the last row of ``phase``."""
        idx = [i for i, r in enumerate(self.rows) if r.phase == phase]
        if not idx:
            raise KeyError(phase)
        return idx[-1]

    def to_csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for r in self.rows:
            vals = [str(r.epoch)] + [repr(float(getattr(r, c))) for c in REPORT_COLUMNS[1:]]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


# ----------------------------------------------------------------------------
# batch objective


@dataclass
class BatchResult:
    loss: Value | None
    parts: dict[str, Value]
    cls_logits: Value | None = None


class PretextBatch:
    """Builds the pretext views of one batch and caches their encodings."""

    def __init__(self, params: ModelParams, X: np.ndarray, pretext: PretextConfig, rng: np.random.Generator):
        self.params = params
        self.X = X
        self.N, self.T, self.D = X.shape
        self.J = self.D // 3
        self.pretext = pretext
        self.rng = rng
        self.views: dict[str, np.ndarray] = {}
        self.encodings: dict[str, M.Encoding] = {}
        self.targets: dict[str, np.ndarray] = {}

    def frames(self) -> np.ndarray:
        return self.X.reshape(self.N, self.T, self.J, 3)

    def body_parts(self):
        parts = self.pretext.body_parts
        return [list(p) for p in parts] if parts else tf.default_body_parts(self.J)

    def view(self, name: str) -> np.ndarray:
        if name in self.views:
            return self.views[name]
        frames, rng, pc = self.frames(), self.rng, self.pretext
        if name == "original":
            out = self.X
        elif name == "temporal_mask":
            samples = [tf.mask_and_noise(x, pc.T_prime, pc.noise_std, rng) for x in frames]
            self.targets["temporal_mask"] = np.stack([s.target_suffix for s in samples])
            self.views["temporal_prefix"] = np.stack([s.noisy_prefix for s in samples]).reshape(self.N, pc.T_prime, -1)
            out = np.stack([s.padded() for s in samples])
        elif name == "temporal_jigsaw":
            samples = [tf.temporal_jigsaw(x, self.params.config.segments, rng) for x in frames]
            self.targets[name] = np.array([s.permutation_id for s in samples])
            out = np.stack([s.shuffled for s in samples])
        elif name == "spatial_jigsaw":
            parts = self.body_parts()
            samples = [tf.spatial_jigsaw(x, parts, rng) for x in frames]
            self.targets[name] = np.array([s.permutation_id for s in samples])
            out = np.stack([s.shuffled for s in samples])
        elif name == "spatial_mask":
            samples = [tf.spatial_mask(x, pc.mask_fraction, rng) for x in frames]
            mask = np.zeros((self.N, self.T, self.J, 3))
            for i, s in enumerate(samples):
                mask[i, :, s.joints] = 1.0
            self.targets[name] = mask.reshape(self.N, self.T, -1)
            out = np.stack([s.masked for s in samples])
        else:
            raise ValueError(f"unknown view {name!r}")
        out = out.reshape(self.N, self.T, -1)
        self.views[name] = out
        return out

    def pretext_views(self, tasks: Sequence[str]) -> list[str]:
        """Draw the augmentations for ``tasks`` and name the views the encoder reads."""
        names = []
        if "prediction" in tasks:
            if self.pretext.prediction_variant == "spatial":
                names.append("spatial_mask")
            else:
                self.view("temporal_mask")  # the decoder path encodes the prefix only
        if "jigsaw" in tasks:
            names.append("spatial_jigsaw" if self.params.config.jigsaw_variant == "spatial" else "temporal_jigsaw")
        if "contrastive" in tasks:
            names += ["original", *self.pretext.contrastive_ops]
        for name in names:
            self.view(name)
        return names

    def encode_together(self, names: Sequence[str]) -> None:
        """Encode several full-length views in one stacked pass."""
        todo = [n for n in dict.fromkeys(names) if n not in self.encodings]
        if len(todo) < 2:
            return
        stacked = M.encode(self.params, np.concatenate([self.view(n) for n in todo]))
        for k, name in enumerate(todo):
            self.encodings[name] = stacked.rows(k * self.N, (k + 1) * self.N)

    def encoding(self, name: str) -> M.Encoding:
        if name not in self.encodings:
            self.encodings[name] = M.encode(self.params, self.view(name))
        return self.encodings[name]

    def prediction_loss(self) -> Value:
        if self.pretext.prediction_variant == "spatial":
            recon = M.reconstruct_frames(self.params, self.encoding("spatial_mask"))
            return L.masked_motion_loss(recon, self.X, self.targets["spatial_mask"])
        self.view("temporal_mask")
        prefix = self.views["temporal_prefix"]
        truth = self.targets["temporal_mask"].reshape(self.N, self.T - self.pretext.T_prime, -1)
        pred = M.predict_future(self.params, prefix, self.T - self.pretext.T_prime)
        return L.motion_loss(pred, truth)

    def jigsaw_loss(self) -> Value:
        name = "spatial_jigsaw" if self.params.config.jigsaw_variant == "spatial" else "temporal_jigsaw"
        logits = M.jigsaw_head(self.params, self.encoding(name))
        return L.jigsaw_loss(logits, self.targets[name])

    def jigsaw_logits(self) -> tuple[Value, np.ndarray]:
        name = "spatial_jigsaw" if self.params.config.jigsaw_variant == "spatial" else "temporal_jigsaw"
        return M.jigsaw_head(self.params, self.encoding(name)), self.targets[name]

    def contrastive_loss(self) -> Value:
        names = ["original", *self.pretext.contrastive_ops]
        Mg = len(names)
        stacked = nx.concat_rows([M.projection_head(self.params, self.encoding(n)) for n in names])
        # stacked rows are view-major (m * N + k); regroup to sample-major
        order = np.arange(self.N * Mg).reshape(Mg, self.N).T.reshape(-1)
        z = nx.matmul(nx.const(np.eye(self.N * Mg)[order]), stacked)
        return L.contrastive_loss(z, Mg, self.pretext.temperature)


def batch_objective(
    params: ModelParams,
    X: np.ndarray,
    y: np.ndarray | None,
    pretext: PretextConfig,
    rng: np.random.Generator,
    tasks: Sequence[str],
    self_weight: float,
    cls_weight: float,
    need_self: bool,
) -> BatchResult:
    """Weighted ``cls_weight * L_cls + self_weight * L_self`` for one batch.

    Pretext losses are only built when ``need_self`` is set; tasks missing
    from ``tasks`` contribute exactly zero.
    """
    batch = PretextBatch(params, X, pretext, rng)
    if need_self:
        # the GRU cost is per step, not per row, so views share one pass
        views = batch.pretext_views(tasks)
        batch.encode_together((["original"] if y is not None else []) + views)
    parts: dict[str, Value] = {}
    logits = None
    if y is not None:
        logits = M.classifier_head(params, batch.encoding("original"))
        parts["L_cls"] = L.classification_loss(logits, y)
    if need_self:
        if "prediction" in tasks:
            parts["L_m"] = batch.prediction_loss()
        if "jigsaw" in tasks:
            parts["L_j"] = batch.jigsaw_loss()
        if "contrastive" in tasks:
            parts["L_c"] = batch.contrastive_loss()
    terms = []
    if "L_cls" in parts and cls_weight != 0.0:
        terms.append(nx.scale(parts["L_cls"], cls_weight))
    if need_self and self_weight != 0.0:
        for key in ("L_m", "L_j", "L_c"):
            if key in parts:
                terms.append(nx.scale(parts[key], self_weight))
    loss = None
    for t in terms:
        loss = t if loss is None else nx.add(loss, t)
    return BatchResult(loss, parts, logits)


# ----------------------------------------------------------------------------
# loops


def evaluate_accuracy(params: ModelParams, ds: Dataset, mode: str = "full", batch: int = 256) -> float:
    from .evaluation import accuracy

    X, y = ds.stacked(), ds.labels()
    logits = [M.classifier_head(params, M.encode(params, X[i : i + batch]), mode).value for i in range(0, len(X), batch)]
    return accuracy(np.concatenate(logits), y)


@dataclass
class _Phase:
    name: str
    # (epoch index, 1-based) -> (cls weight, self weight, theta for the report)
    weights: Callable[[int], tuple[float, float, float]]
    supervised: bool
    need_self: bool


def _run_phase(
    params: ModelParams,
    ds: Dataset,
    phase: _Phase,
    pretext: PretextConfig,
    cfg: TrainConfig,
    seed: int,
    test: Dataset | None = None,
    state: AdamState | None = None,
) -> TrainReport:
    if len(ds) == 0:
        raise DataError("training dataset is empty")
    X = ds.stacked()
    y = ds.labels() if phase.supervised else None
    if X.shape[2] != params.config.input_dim:
        raise DataError(f"dataset frame width {X.shape[2]} does not match model input {params.config.input_dim}")
    sched = Schedule.from_config(cfg)
    order_rng = np.random.default_rng([seed, 11])
    aug_rng = np.random.default_rng([seed, 12])
    state = state if state is not None else AdamState()
    trainable = {k: v for k, v in params if v.requires_grad}
    report = TrainReport()
    it = 0
    n = len(X)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        w_cls, w_self, theta = phase.weights(epoch)
        sums = {"L_m": 0.0, "L_j": 0.0, "L_c": 0.0, "L_cls": 0.0}
        correct = 0
        lr = sched.lr(it)
        perm = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            lr = sched.lr(it)
            with nx.Tape() as tape:
                res = batch_objective(
                    params, X[idx], None if y is None else y[idx], pretext, aug_rng,
                    cfg.tasks, w_self, w_cls, phase.need_self,
                )
            if res.loss is not None and res.loss.requires_grad:
                zero_grads(trainable.values())
                tape.backward(res.loss)
                adam_step(trainable, state, lr)
            for k, v in res.parts.items():
                sums[k] += v.item()
            if res.cls_logits is not None:
                pred = _argmax(res.cls_logits.value)
                correct += int((pred == y[idx]).sum())
            it += 1
        row = EpochRow(epoch=len(report.rows), theta=theta, lr=lr, phase=phase.name)
        if phase.need_self:
            for k in ("L_m", "L_j", "L_c"):
                setattr(row, k, sums[k] / n)
        if phase.supervised:
            row.L_cls = sums["L_cls"] / n
            row.train_acc = correct / n
            if test is not None:
                row.test_acc = evaluate_accuracy(params, test)
        row.wall_time = time.perf_counter() - t0
        report.rows.append(row)
        params.optimizer = export_adam(state)
        log.info(
            "%s epoch %d L_self=%.4f L_cls=%.4f theta=%.2f lr=%.5f acc=%.3f/%.3f",
            phase.name, epoch, row.L_self, row.L_cls, theta, lr, row.train_acc, row.test_acc,
        )
    return report


def _argmax(logits: np.ndarray) -> np.ndarray:
    # numpy argmax already returns the first maximal index
    return np.argmax(logits, axis=1)


def pretrain_self_supervised(
    dataset: Dataset,
    model_cfg: ModelConfig,
    pretext: PretextConfig,
    cfg: TrainConfig,
    seed: int,
    init: ModelParams | None = None,
) -> tuple[ModelParams, TrainReport]:
    if len(dataset) == 0:
        raise DataError("cannot pretrain on an empty dataset")
    _check_tasks(cfg.tasks, require=True)
    params = init.copy() if init is not None else M.init_params(model_cfg, seed)
    phase = _Phase("pretrain", lambda e: (0.0, 1.0, 0.0), supervised=False, need_self=True)
    report = _run_phase(params, dataset, phase, pretext, cfg, seed, state=import_adam(params.optimizer))
    return params, report


def _check_tasks(tasks, require: bool) -> None:
    unknown = set(tasks) - set(TASKS)
    if unknown:
        raise ValueError(f"unknown pretext tasks {sorted(unknown)}")
    if require and not tasks:
        raise ValueError("at least one pretext task is required")


def _from_init(model_cfg: ModelConfig, init: ModelParams, seed: int) -> ModelParams:
    if init.config.joints != model_cfg.joints:
        raise DataError(f"checkpoint expects {init.config.joints} joints, data has {model_cfg.joints}")
    params = M.init_params(model_cfg, seed)
    for prefix in TRANSFERRED:
        params.load_from(init, prefix)
    return params


def train_supervised(
    dataset: Dataset,
    strategy: str,
    model_cfg: ModelConfig,
    pretext: PretextConfig,
    cfg: TrainConfig,
    seed: int,
    init: ModelParams | None = None,
    test: Dataset | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Train the action classifier.

    ``rand``      random init, classification loss only
    ``pretrain``  encoder from ``init`` and frozen, classifier trained
    ``moving``    from ``init``; theta * L_cls + (1 - theta) * L_self
    ``jointly``   L_cls + omega * L_self (random init unless ``init`` given)
    ``finetune``  from ``init``, whole network on L_cls only
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
    if strategy in ("pretrain", "moving", "finetune") and init is None:
        raise ValueError(f"{strategy} requires --init")
    dataset.labels()  # rejects unlabeled samples up front
    _check_tasks(cfg.tasks, require=strategy in ("moving", "jointly"))
    params = _from_init(model_cfg, init, seed) if init is not None else M.init_params(model_cfg, seed)
    # optimization continues from the pretraining moments of transferred tensors
    state = import_adam(init.optimizer, TRANSFERRED) if init is not None else AdamState()
    track = cfg.track_self
    sched = Schedule.from_config(cfg)

    if strategy == "pretrain":
        params.set_trainable(M.ENCODER_PREFIX, False)
        phase = _Phase(strategy, lambda e: (1.0, 0.0, 1.0), True, track)
    elif strategy == "moving":
        def weights(e):
            th = sched.theta(e)
            return th, 1.0 - th, th

        phase = _Phase(strategy, weights, True, True)
    elif strategy == "jointly":
        omega = cfg.omega
        if omega < 0:
            raise ValueError("omega must be non-negative")
        phase = _Phase(strategy, lambda e: (1.0, omega, 1.0), True, omega != 0.0 or track)
    else:
        phase = _Phase(strategy, lambda e: (1.0, 0.0, 1.0), True, track)
    try:
        report = _run_phase(params, dataset, phase, pretext, cfg, seed, test, state)
    finally:
        params.set_trainable(M.ENCODER_PREFIX, True)
    return params, report


def train_semi_supervised(
    labeled: Dataset,
    unlabeled: Dataset,
    model_cfg: ModelConfig,
    pretext: PretextConfig,
    pre_cfg: TrainConfig,
    fine_cfg: TrainConfig,
    seed: int,
    test: Dataset | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Pretrain on labeled + unlabeled (labels ignored), fine-tune on labeled."""
    overlap = {s.id for s in labeled.sequences} & {s.id for s in unlabeled.sequences}
    if overlap:
        raise DataError(f"labeled and unlabeled splits overlap ({len(overlap)} shared ids)")
    corpus = labeled.unlabeled().merged(unlabeled) if len(unlabeled) else labeled.unlabeled()
    pre, report = pretrain_self_supervised(corpus, model_cfg, pretext, pre_cfg, seed)
    params, fine = train_supervised(labeled, "finetune", model_cfg, pretext, fine_cfg, seed, init=pre, test=test)
    return params, report.extend(fine)


def transfer(
    source: Dataset,
    target: Dataset,
    model_cfg: ModelConfig,
    pretext: PretextConfig,
    pre_cfg: TrainConfig,
    fine_cfg: TrainConfig,
    seed: int,
    test: Dataset | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Self-supervised pretraining on ``source``, full fine-tune on ``target``."""
    if source.joint_count != target.joint_count:
        raise DataError(f"joint counts differ: source {source.joint_count}, target {target.joint_count}")
    pre, report = pretrain_self_supervised(source.unlabeled(), model_cfg, pretext, pre_cfg, seed)
    params, fine = train_supervised(target, "finetune", model_cfg, pretext, fine_cfg, seed, init=pre, test=test)
    return params, report.extend(fine)
