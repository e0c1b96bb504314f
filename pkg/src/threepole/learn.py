"""Coordinate MLP that learns a three-pole field from labelled samples.

Two heads are supported on the same ReLU trunk:

* ``triclass``: 3 logits for {inside, outside, null}, trained with mean
  cross-entropy;
* ``br``: one logit for "non-null" plus one regressed signed distance,
  trained with binary cross-entropy + L1 on non-null points.

Everything is plain numpy with hand-written backprop and Adam.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from os import PathLike

import numpy as np

from .field import NULL, FieldGrid, SampleBatch, values_from_labels

log = logging.getLogger(__name__)

MODES = ("triclass", "br")
POSENC_FREQS = 6
CHECKPOINT_MAGIC = b"3PM1"
MIN_ROWS = 16


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    batch_size: int = 1024
    epochs: int = 500
    seed: int = 0
    mode: str = "triclass"
    posenc: bool = False
    class_weights: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if any(h <= 0 for h in self.hidden) or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("sizes must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def in_features(self) -> int:
        return 3 * (1 + 2 * POSENC_FREQS) if self.posenc else 3

    @property
    def out_features(self) -> int:
        return 3 if self.mode == "triclass" else 2


@dataclass(eq=False)
class TriClassModel:
    """Fully connected ReLU network; ``weights[l]`` has shape (out, in).

    Inputs are mapped to ``(p - center) / scale`` before the optional
    positional encoding.
    """

    config: TrainConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    @property
    def mode(self) -> str:
        return self.config.mode

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "TriClassModel":
        return TriClassModel(self.config, [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.center.copy(), self.scale)


def init_model(config: TrainConfig, seed: int | None = None) -> TriClassModel:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = np.dtype(config.dtype)
    widths = [config.in_features, *config.hidden, config.out_features]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return TriClassModel(config, weights, biases)


def encode(model: TriClassModel, points: np.ndarray) -> np.ndarray:
    x = (np.asarray(points, dtype=np.float64) - model.center) / model.scale
    if model.config.posenc:
        freqs = np.pi * 2.0 ** np.arange(POSENC_FREQS)
        ang = x[:, None, :] * freqs[None, :, None]  # (N, F, 3)
        x = np.concatenate([x, np.sin(ang).reshape(len(x), -1), np.cos(ang).reshape(len(x), -1)], axis=1)
    return x.astype(model.weights[0].dtype)


def _forward(model: TriClassModel, points: np.ndarray):
    x = encode(model, points)
    acts = [x]
    n_layers = len(model.weights)
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        x = x @ w.T + b
        if l < n_layers - 1:
            x = np.maximum(x, 0)
        acts.append(x)
    return x, acts


def forward(model: TriClassModel, points: np.ndarray) -> np.ndarray:
    """(N, 3) logits in triclass mode; (N, 2) ``[non-null logit, distance]`` in br mode."""
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {points.shape}")
    n = len(points)
    if 0 < n < MIN_ROWS:
        # BLAS routes tiny batches through a different kernel; pad so rows round identically
        points = np.concatenate([points, np.repeat(points[:1], MIN_ROWS - n, axis=0)])
    return _forward(model, points)[0][:n]


def _flush_subnormal(x: np.ndarray) -> np.ndarray:
    # saturated softmax rows give ~1e-40 gradients; subnormal float32 math is very slow on x86
    x[np.abs(x) < np.finfo(x.dtype).tiny] = 0
    return x


def _backward(model: TriClassModel, acts, dout) -> list[np.ndarray]:
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    g = _flush_subnormal(dout.astype(acts[0].dtype))
    for l in range(len(model.weights) - 1, -1, -1):
        grads_w[l] = g.T @ acts[l]
        grads_b[l] = g.sum(axis=0)
        if l:
            g = (g @ model.weights[l]) * (acts[l] > 0)
    return [p for pair in zip(grads_w, grads_b) for p in pair]


def softmax_xent(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None):
    """Mean (or class-weighted mean) cross-entropy and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    nll = logsum - z[rows, labels]
    prob = np.exp(z - logsum[:, None])
    prob[rows, labels] -= 1.0
    if weights is None:
        return float(nll.mean()), prob / len(labels)
    w = np.asarray(weights, dtype=np.float64)[labels]
    return float((w * nll).sum() / w.sum()), prob * (w / w.sum())[:, None]


def bce_l1(outputs: np.ndarray, nonnull: np.ndarray, distances: np.ndarray):
    """BCE on the non-null logit plus L1 on the distance head (non-null rows only)."""
    outputs = np.asarray(outputs, dtype=np.float64)
    y = np.asarray(nonnull, dtype=np.float64)
    z = outputs[:, 0]
    n = len(z)
    bce = np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))
    grad = np.zeros_like(outputs)
    grad[:, 0] = (0.5 * (1 + np.tanh(0.5 * z)) - y) / n
    loss = float(bce.mean())
    mask = y > 0
    m = int(np.count_nonzero(mask))
    if m:
        r = outputs[mask, 1] - np.asarray(distances, dtype=np.float64)[mask]
        loss += float(np.abs(r).mean())
        grad[mask, 1] = np.sign(r) / m
    return loss, grad


def triclass_loss(model: TriClassModel, points: np.ndarray, labels: np.ndarray,
                  class_weights: np.ndarray | None = None):
    """Mean cross-entropy over the batch and gradients for ``model.parameters()``."""
    logits, acts = _forward(model, points)
    loss, dlogits = softmax_xent(logits, labels, class_weights)
    return loss, _backward(model, acts, dlogits)


def br_loss(model: TriClassModel, points: np.ndarray, nonnull: np.ndarray, distances: np.ndarray):
    """BCE(non-null) + L1(distance on non-null points), weighted 1:1, and gradients."""
    out, acts = _forward(model, points)
    loss, dout = bce_l1(out, nonnull, distances)
    return loss, _backward(model, acts, dout)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, config: TrainConfig, lr: float | None = None) -> None:
    lr = config.lr if lr is None else lr
    b1, b2 = config.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if config.weight_decay:
            g = g + config.weight_decay * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)


def _inverse_frequency(labels: np.ndarray) -> np.ndarray:
    counts = np.bincount(labels, minlength=3).astype(np.float64)
    w = np.where(counts > 0, counts.sum() / (3 * np.maximum(counts, 1)), 0.0)
    return w


def train(batch: SampleBatch, config: TrainConfig, model: TriClassModel | None = None):
    """Mini-batch Adam over shuffled epochs.

    Returns ``(model, losses)`` where ``losses[e]`` is the mean batch loss of
    epoch ``e``. Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    points = np.asarray(batch.points, dtype=np.float64)
    labels = np.asarray(batch.labels, dtype=np.int64)
    if model is None:
        model = init_model(config, config.seed)
        lo, hi = points.min(axis=0), points.max(axis=0)
        model.center = 0.5 * (lo + hi)
        model.scale = float(max((hi - lo).max() / 2, 1e-12))
    present = set(np.unique(labels).tolist())
    if present != {0, 1, 2}:
        log.warning("training labels cover only %s", sorted(present))

    if config.mode == "br":
        if batch.distances is None:
            raise ValueError("br mode needs signed distance targets")
        nonnull = (labels != NULL).astype(np.float64)
        dist = np.nan_to_num(np.asarray(batch.distances, dtype=np.float64))
    weights = _inverse_frequency(labels) if config.class_weights and config.mode == "triclass" else None

    params = model.parameters()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    losses = []
    n = len(labels)
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** epoch
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            if config.mode == "triclass":
                loss, grads = triclass_loss(model, points[idx], labels[idx], weights)
            else:
                loss, grads = br_loss(model, points[idx], nonnull[idx], dist[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {state.step}")
            adam_step(params, grads, state, config, lr)
            total += loss * len(idx)
        losses.append(total / n)
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.5f", epoch, losses[-1])
    return model, np.array(losses)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def predict_labels(model: TriClassModel, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Argmax class per point; ties resolve to the lowest class index."""
    out = np.empty(len(points), dtype=np.uint8)
    for s in range(0, len(points), chunk):
        out[s:s + chunk] = np.argmax(forward(model, points[s:s + chunk]), axis=1)
    return out


def merge_br(nonnull_prob: np.ndarray, distance: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Keep the regressed distance where the mask says non-null (inclusive), NaN elsewhere."""
    return np.where(np.asarray(nonnull_prob) >= threshold, distance, np.nan)


def predict_grid(model: TriClassModel, geometry: FieldGrid, chunk: int = 65536) -> FieldGrid:
    """Evaluate the model on every lattice point of ``geometry``'s grid."""
    pts = geometry.lattice_points()
    if model.mode == "triclass":
        values = values_from_labels(predict_labels(model, pts, chunk))
    else:
        values = np.empty(len(pts))
        for s in range(0, len(pts), chunk):
            out = forward(model, pts[s:s + chunk]).astype(np.float64)
            prob = 0.5 * (1 + np.tanh(0.5 * out[:, 0]))
            values[s:s + chunk] = merge_br(prob, out[:, 1])
    return FieldGrid(geometry.dims, geometry.lo, geometry.hi, values)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_model(model: TriClassModel, path: str | PathLike, extra: dict | None = None) -> None:
    """Write a ``3PM1`` checkpoint: magic, u32 header length, JSON header,
    then little-endian float32 parameters in layer order (W then b)."""
    cfg = asdict(model.config)
    header = {
        "config": cfg,
        "center": [float(c) for c in model.center],
        "scale": float(model.scale),
        "shapes": [list(p.shape) for p in model.parameters()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path: str | PathLike) -> tuple[TriClassModel, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a 3PM1 checkpoint")
    (length,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + length].decode("utf-8"))
    cfg = header["config"]
    cfg["hidden"] = tuple(cfg["hidden"])
    cfg["betas"] = tuple(cfg["betas"])
    config = TrainConfig(**cfg)
    offset = 8 + length
    params = []
    dtype = np.dtype(config.dtype)
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        params.append(arr.astype(dtype))
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing parameter bytes")
    model = TriClassModel(config, params[0::2], params[1::2],
                          np.array(header["center"]), header["scale"])
    return model, header["extra"]


def with_dtype(model: TriClassModel, dtype: str) -> TriClassModel:
    """Copy of ``model`` with parameters cast (e.g. float64 for gradient checks)."""
    cfg = replace(model.config, dtype=dtype)
    return TriClassModel(cfg, [w.astype(dtype) for w in model.weights],
                         [b.astype(dtype) for b in model.biases], model.center.copy(), model.scale)
