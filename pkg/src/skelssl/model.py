"""Shared bidirectional GRU encoder, pretext heads and action classifier."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import numerics as nx
from .io_utils import atomic_write_bytes
from .numerics import GRUParams, Value
from .transforms import NUM_BODY_PARTS, num_classes_for_jigsaw

CHECKPOINT_MAGIC = b"SKELCKPT"
CHECKPOINT_VERSION = 1
OPTIMIZER_PREFIX = "opt."  # checkpoint blocks holding optimizer moments


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    joints: int = 25
    hidden: int = 30  # per direction; features are 2 * hidden wide
    num_classes: int = 10
    segments: int = 3
    jigsaw_variant: str = "temporal"  # or "spatial"

    @property
    def input_dim(self) -> int:
        return 3 * self.joints

    @property
    def feature_dim(self) -> int:
        return 2 * self.hidden

    @property
    def jigsaw_classes(self) -> int:
        if self.jigsaw_variant == "spatial":
            return num_classes_for_jigsaw(NUM_BODY_PARTS)
        return num_classes_for_jigsaw(self.segments)


def _gru_shapes(prefix: str, d_in: int, h: int) -> list[tuple[str, tuple[int, int]]]:
    return [
        (f"{prefix}.Wx", (d_in, 3 * h)),
        (f"{prefix}.Uzr", (h, 2 * h)),
        (f"{prefix}.Uh", (h, h)),
        (f"{prefix}.b", (1, 3 * h)),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    D, H, F = cfg.input_dim, cfg.hidden, cfg.feature_dim
    return [
        *_gru_shapes("enc.fwd", D, H),
        *_gru_shapes("enc.bwd", D, H),
        *_gru_shapes("dec.gru", D, F),
        ("dec.proj.W", (F, D)),
        ("dec.proj.b", (1, D)),
        ("jig.W", (F, cfg.jigsaw_classes)),
        ("jig.b", (1, cfg.jigsaw_classes)),
        ("proj.W", (F, F)),
        ("proj.b", (1, F)),
        *_gru_shapes("cls.gru", F, F),
        ("cls.mlp1.W", (F, F)),
        ("cls.mlp1.b", (1, F)),
        ("cls.mlp2.W", (F, cfg.num_classes)),
        ("cls.mlp2.b", (1, cfg.num_classes)),
        ("probe.W", (F, cfg.num_classes)),
        ("probe.b", (1, cfg.num_classes)),
    ]


ENCODER_PREFIX = "enc."


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Value] = field(default_factory=dict)
    # Adam moments saved with the weights: "step", "m.<name>", "v.<name>"
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Value:
        return self.tensors[name]

    def __iter__(self) -> Iterator[tuple[str, Value]]:
        return iter(self.tensors.items())

    def gru(self, prefix: str) -> GRUParams:
        t = self.tensors
        return GRUParams(t[f"{prefix}.Wx"], t[f"{prefix}.Uzr"], t[f"{prefix}.Uh"], t[f"{prefix}.b"])

    def group(self, prefix: str) -> dict[str, Value]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def encoder(self) -> dict[str, Value]:
        return self.group(ENCODER_PREFIX)

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for v in self.group(prefix).values():
            v.requires_grad = flag

    def copy(self) -> "ModelParams":
        out = ModelParams(self.config)
        for k, v in self.tensors.items():
            out.tensors[k] = Value(v.value.copy(), requires_grad=v.requires_grad, name=k)
        out.optimizer = {k: v.copy() for k, v in self.optimizer.items()}
        return out

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.tensors.items() if k.startswith(prefix)}

    def load_from(self, other: "ModelParams", prefix: str = "") -> None:
        """Copy matching tensors from ``other`` (e.g. a pretrained encoder)."""
        for k, v in other.tensors.items():
            if k.startswith(prefix) and k in self.tensors:
                if self.tensors[k].shape != v.shape:
                    raise CheckpointError(f"shape mismatch for {k}: {self.tensors[k].shape} vs {v.shape}")
                self.tensors[k].value = v.value.copy()


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Weights ~ U(-a, a) with a = sqrt(1 / fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    params = ModelParams(cfg)
    for name, (rows, cols) in param_shapes(cfg):
        if name.endswith(".b"):
            arr = np.zeros((rows, cols))
        else:
            a = np.sqrt(1.0 / rows)
            arr = rng.uniform(-a, a, size=(rows, cols))
        params.tensors[name] = nx.param(arr, name=name)
    return params


# ----------------------------------------------------------------------------
# forward computations


def _batch(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 4:  # (N, T, J, 3)
        arr = arr.reshape(arr.shape[0], arr.shape[1], -1)
    if arr.ndim != 3:
        raise nx.DimensionError(f"expected (N, T, D) input, got {np.shape(x)}")
    return arr


def run_gru(xs: list[Value], p: GRUParams, h0: Value | None = None, reverse: bool = False) -> list[Value]:
    """Unroll a GRU over ``xs``; returned states are aligned with ``xs``."""
    n = xs[0].shape[0]
    h = h0 if h0 is not None else nx.const(np.zeros((n, p.hidden_dim)))
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    states: list[Value | None] = [None] * len(xs)
    for t in order:
        h = nx.gru_cell(xs[t], h, p)
        states[t] = h
    return states


class Encoding:
    """Per-frame states of both directions; the pooled feature is built once."""

    def __init__(self, forward: list[Value], backward: list[Value]):
        self.forward = forward
        self.backward = backward
        self._pooled: Value | None = None

    def frames(self) -> list[Value]:
        """Per-frame features, forward state then backward state."""
        return [nx.concat_cols(f, b) for f, b in zip(self.forward, self.backward)]

    def pooled(self) -> Value:
        if self._pooled is None:
            # mean of concatenations == concatenation of means
            self._pooled = nx.concat_cols(nx.mean_of(self.forward), nx.mean_of(self.backward))
        return self._pooled

    def rows(self, start: int, stop: int) -> "Encoding":
        return _RowSlice(self, start, stop)


class _RowSlice(Encoding):
    """Samples ``start:stop`` of an encoding computed on a stacked batch."""

    def __init__(self, parent: Encoding, start: int, stop: int):
        self.parent, self.start, self.stop = parent, start, stop
        self._forward: list[Value] | None = None
        self._backward: list[Value] | None = None
        self._pooled = None

    @property
    def forward(self) -> list[Value]:
        if self._forward is None:
            self._forward = [nx.rows(h, self.start, self.stop) for h in self.parent.forward]
        return self._forward

    @property
    def backward(self) -> list[Value]:
        if self._backward is None:
            self._backward = [nx.rows(h, self.start, self.stop) for h in self.parent.backward]
        return self._backward

    def pooled(self) -> Value:
        if self._pooled is None:
            self._pooled = nx.rows(self.parent.pooled(), self.start, self.stop)
        return self._pooled


def encode(params: ModelParams, x) -> Encoding:
    X = _batch(x)
    if X.shape[2] != params.config.input_dim:
        raise nx.DimensionError(f"frame width {X.shape[2]} != encoder input {params.config.input_dim}")
    xs = [nx.const(X[:, t]) for t in range(X.shape[1])]
    return Encoding(
        run_gru(xs, params.gru("enc.fwd")),
        run_gru(xs, params.gru("enc.bwd"), reverse=True),
    )


def predict_future(params: ModelParams, prefix, steps: int) -> list[Value]:
    """Autoregressive decoder over ``steps`` future frames.

    The encoder only sees ``prefix``. The decoder GRU starts from the pooled
    prefix feature, takes the last prefix frame as its first input and then
    feeds back its own projected output.
    """
    P = _batch(prefix)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = encode(params, P).pooled()
    x = nx.const(P[:, -1])
    dec = params.gru("dec.gru")
    W, b = params["dec.proj.W"], params["dec.proj.b"]
    out = []
    for _ in range(steps):
        h = nx.gru_cell(x, h, dec)
        x = nx.affine(h, W, b)
        out.append(x)
    return out


def reconstruct_frames(params: ModelParams, enc: Encoding) -> list[Value]:
    """Per-frame reconstruction through the decoder projection (spatial masking)."""
    W, b = params["dec.proj.W"], params["dec.proj.b"]
    return [nx.affine(f, W, b) for f in enc.frames()]


def jigsaw_head(params: ModelParams, enc: Encoding) -> Value:
    logits = nx.affine(enc.pooled(), params["jig.W"], params["jig.b"])
    if logits.shape[1] != params.config.jigsaw_classes:
        raise nx.DimensionError(f"jigsaw head emits {logits.shape[1]} logits, expected {params.config.jigsaw_classes}")
    return logits


def jigsaw_logits(params: ModelParams, shuffled) -> Value:
    return jigsaw_head(params, encode(params, shuffled))


def projection_head(params: ModelParams, enc: Encoding) -> Value:
    return nx.affine(enc.pooled(), params["proj.W"], params["proj.b"])


def project(params: ModelParams, x) -> Value:
    return projection_head(params, encode(params, x))


def classifier_head(params: ModelParams, enc: Encoding, mode: str = "full") -> Value:
    if mode == "linear_probe":
        return probe_head(params, enc.pooled())
    if mode != "full":
        raise ValueError(f"unknown classifier mode {mode!r}")
    states = run_gru(enc.frames(), params.gru("cls.gru"))
    hidden = nx.tanh(nx.affine(states[-1], params["cls.mlp1.W"], params["cls.mlp1.b"]))
    return nx.affine(hidden, params["cls.mlp2.W"], params["cls.mlp2.b"])


def probe_head(params: ModelParams, features: Value) -> Value:
    return nx.affine(features, params["probe.W"], params["probe.b"])


def classify(params: ModelParams, x, mode: str = "full") -> Value:
    return classifier_head(params, encode(params, x), mode)


# ----------------------------------------------------------------------------
# checkpoint file


def dumps_checkpoint(params: ModelParams) -> bytes:
    cfg = json.dumps(asdict(params.config), sort_keys=True).encode("ascii")
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    blocks = [(k, v.value) for k, v in params.tensors.items()]
    blocks += [(OPTIMIZER_PREFIX + k, v) for k, v in sorted(params.optimizer.items())]
    out.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        raw = name.encode("ascii")
        rows, cols = arr.shape
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", rows, cols))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def loads_checkpoint(data: bytes) -> ModelParams:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, cfg_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(**json.loads(take(cfg_len)))
    (count,) = struct.unpack("<I", take(4))
    params = ModelParams(cfg)
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("ascii")
        rows, cols = struct.unpack("<II", take(8))
        arr = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
        if name.startswith(OPTIMIZER_PREFIX):
            params.optimizer[name[len(OPTIMIZER_PREFIX) :]] = arr
        else:
            params.tensors[name] = nx.param(arr, name=name)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last parameter block")
    expected = dict(param_shapes(cfg))
    got = {k: v.shape for k, v in params.tensors.items()}
    if got != expected:
        raise CheckpointError("parameter blocks do not match the stored model configuration")
    for key, arr in params.optimizer.items():
        want = (1, 1) if key == "step" else expected.get(key[2:])
        if key != "step" and key[:2] not in ("m.", "v."):
            raise CheckpointError(f"unknown optimizer block {key!r}")
        if arr.shape != want:
            raise CheckpointError(f"optimizer block {key!r} has shape {arr.shape}, expected {want}")
    return params


def save_checkpoint(params: ModelParams, path) -> None:
    atomic_write_bytes(path, dumps_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
