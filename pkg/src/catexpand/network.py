"""One-hidden-layer softmax classifiers over one-hot inputs.

``logits(x) = W2 @ f(W1 @ x + b1) + b2`` with ``f`` either ``tanh`` or the
square ``u**2``. Training minimises the sample-weighted cross-entropy plus an
L2 penalty on every parameter, using mini-batch Adam.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._binio import ContainerError, Reader, Writer, write_sidecar
from .categorical import CategorySpec, LabeledDataset, encode_batch

logger = logging.getLogger(__name__)

CNET_MAGIC = b"CNET"
CNET_VERSION = 1
ACTIVATIONS = ("tanh", "square")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged: non-finite loss at epoch {epoch}")
        self.epoch = epoch


def activate(u: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(u)
    if activation == "square":
        return u * u
    raise ValueError(f"unsupported activation {activation!r}")


def activate_grad(u: np.ndarray, activation: str, fu: np.ndarray | None = None) -> np.ndarray:
    if activation == "tanh":
        if fu is None:
            fu = np.tanh(u)
        return 1.0 - fu * fu
    if activation == "square":
        return 2.0 * u
    raise ValueError(f"unsupported activation {activation!r}")


@dataclass
class NetworkParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str
    spec: CategorySpec

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        self.W1 = np.array(self.W1, dtype=np.float64, ndmin=2)
        self.b1 = np.array(self.b1, dtype=np.float64).reshape(-1)
        self.W2 = np.array(self.W2, dtype=np.float64, ndmin=2)
        self.b2 = np.array(self.b2, dtype=np.float64).reshape(-1)
        h, d = self.W1.shape
        k = self.W2.shape[0]
        if d != self.spec.dim:
            raise ValueError(f"W1 has {d} columns but the category layout has D={self.spec.dim}")
        if self.b1.shape != (h,) or self.W2.shape != (k, h) or self.b2.shape != (k,):
            raise ValueError(
                f"inconsistent shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )
        for name in ("W1", "b1", "W2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def class_count(self) -> int:
        return self.W2.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "NetworkParams":
        return replace(self, W1=self.W1.copy(), b1=self.b1.copy(), W2=self.W2.copy(), b2=self.b2.copy())

    @classmethod
    def initialize(
        cls,
        spec: CategorySpec,
        hidden: int,
        class_count: int,
        activation: str = "tanh",
        seed: int = 0,
        init_scale: float | None = None,
    ) -> "NetworkParams":
        """Uniform initialisation, zero biases.

        The default scale is ``1/sqrt(D)`` for ``W1`` and ``1/sqrt(H)`` for ``W2``.
        """
        rng = np.random.default_rng(seed)
        s1 = init_scale if init_scale is not None else 1.0 / np.sqrt(spec.dim)
        s2 = init_scale if init_scale is not None else 1.0 / np.sqrt(hidden)
        W1 = rng.uniform(-s1, s1, size=(hidden, spec.dim))
        W2 = rng.uniform(-s2, s2, size=(class_count, hidden))
        return cls(W1, np.zeros(hidden), W2, np.zeros(class_count), activation, spec)


def forward_logits(net: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Logits for one probe (shape ``(D,)``) or a batch (shape ``(B, D)``).

    Any real vector is accepted, including invalid one-hot probes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.spec.dim or x.ndim > 2:
        raise ValueError(f"expected input with last dimension D={net.spec.dim}, got {x.shape}")
    hidden = activate(x @ net.W1.T + net.b1, net.activation)
    return hidden @ net.W2.T + net.b2


def logits_from_samples(net: NetworkParams, samples: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty((len(samples), net.class_count))
    for start in range(0, len(samples), chunk):
        x = encode_batch(samples[start : start + chunk], net.spec)
        out[start : start + chunk] = forward_logits(net, x)
    return out


def softmax(logits) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting the row maximum."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax input contains non-finite values")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    epochs: int = 30
    batch_size: int = 128
    l2_coefficient: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7
    rng_seed: int = 0
    init_scale: float | None = None

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.l2_coefficient < 0:
            raise ValueError("l2_coefficient must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class TrainReport:
    loss_history: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")
    validation_accuracy: float | None = None
    convergence_residual: float = float("nan")
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def loss_and_grads(
    net: NetworkParams,
    x: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    l2: float,
) -> tuple[float, list[np.ndarray]]:
    """Batch objective ``sum_m w_m CE_m / B + l2 * sum(theta**2)`` and its gradient.

    Gradients come back in the order ``W1, b1, W2, b2``.
    """
    b = x.shape[0]
    pre = x @ net.W1.T + net.b1
    hid = activate(pre, net.activation)
    logits = hid @ net.W2.T + net.b2
    logp = log_softmax(logits)
    rows = np.arange(b)
    data_loss = -np.dot(weights, logp[rows, labels]) / b

    delta = np.exp(logp)
    delta[rows, labels] -= 1.0
    delta *= (weights / b)[:, None]
    gW2 = delta.T @ hid
    gb2 = delta.sum(axis=0)
    dhid = delta @ net.W2
    dpre = dhid * activate_grad(pre, net.activation, hid if net.activation == "tanh" else None)
    gW1 = dpre.T @ x
    gb1 = dpre.sum(axis=0)

    grads = [gW1, gb1, gW2, gb2]
    reg = 0.0
    if l2:
        for p, g in zip(net.params(), grads):
            reg += float(np.sum(p * p))
            g += 2.0 * l2 * p
    return float(data_loss + l2 * reg), grads


def predict(net: NetworkParams, samples: np.ndarray) -> np.ndarray:
    return np.argmax(logits_from_samples(net, samples), axis=1)


def weighted_accuracy(pred: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None) -> float:
    hit = (np.asarray(pred) == np.asarray(labels)).astype(np.float64)
    if weights is None:
        return float(hit.mean()) if hit.size else float("nan")
    total = float(np.sum(weights))
    return float(np.dot(hit, weights) / total) if total > 0 else float("nan")


def train(
    net: NetworkParams,
    data: LabeledDataset,
    config: TrainConfig,
    validation: LabeledDataset | None = None,
) -> tuple[NetworkParams, TrainReport]:
    """Mini-batch Adam on a private copy of ``net``.

    Shuffling uses ``config.rng_seed``; within a batch samples are processed in
    index order, so repeated calls are bitwise reproducible.
    """
    if data.spec != net.spec:
        raise ValueError("dataset spec does not match network spec")
    if data.class_count != net.class_count:
        raise ValueError("dataset class count does not match network output size")
    if not np.any(data.sample_weights > 0):
        raise ValueError("training needs at least one sample with positive weight")

    start = time.perf_counter()
    net = net.copy()
    report = TrainReport()
    params = net.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate
    rng = np.random.default_rng(config.rng_seed)
    n = len(data)
    step = 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = np.sort(order[lo : lo + config.batch_size])
            x = encode_batch(data.samples[idx], data.spec)
            loss, grads = loss_and_grads(
                net, x, data.labels[idx], data.sample_weights[idx], config.l2_coefficient
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for p, g, m, v in zip(params, grads, m1, m2):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            total += loss
            batches += 1
        report.loss_history.append(total / batches)
        logger.debug("epoch %d loss %.6f", epoch, report.loss_history[-1])

    report.train_accuracy = weighted_accuracy(predict(net, data.samples), data.labels, data.sample_weights)
    if validation is not None:
        report.validation_accuracy = weighted_accuracy(
            predict(net, validation.samples), validation.labels, validation.sample_weights
        )
    report.convergence_residual = convergence_residual(net, data)
    report.wall_time = time.perf_counter() - start
    return net, report


def convergence_residual(net: NetworkParams, data: LabeledDataset, chunk: int = 4096) -> float:
    """Largest gap between observed and predicted label-input correlations.

    Returns ``max |<y_true^l x_a> - <y_pred^l x_a>|`` over classes ``l`` and
    one-hot entries ``a``, with weighted sample averages.
    """
    if data.spec != net.spec:
        raise ValueError("dataset spec does not match network spec")
    total_w = float(np.sum(data.sample_weights))
    gap = np.zeros((net.class_count, net.spec.dim))
    for lo in range(0, len(data), chunk):
        sl = slice(lo, lo + chunk)
        x = encode_batch(data.samples[sl], data.spec)
        diff = -softmax(forward_logits(net, x))
        diff[np.arange(x.shape[0]), data.labels[sl]] += 1.0
        gap += (diff * data.sample_weights[sl, None]).T @ x
    return float(np.max(np.abs(gap / total_w)))


def save_network(net: NetworkParams, path, manifest: dict | None = None) -> Path:
    w = Writer()
    w.raw(CNET_MAGIC)
    w.u32(CNET_VERSION)
    w.u32(net.spec.feature_count)
    w.u32_array(net.spec.category_counts)
    w.u32(net.class_count)
    w.u32(net.hidden)
    w.u32(ACTIVATIONS.index(net.activation))
    for arr in net.params():
        w.array(arr, "<f8")
    path = Path(path)
    path.write_bytes(w.getvalue())
    payload = {"format": "CNET", "version": CNET_VERSION, "activation": net.activation,
               "hidden": net.hidden, "class_count": net.class_count}
    payload.update(manifest or {})
    write_sidecar(path, payload)
    return path


def load_network(path) -> NetworkParams:
    r = Reader(Path(path).read_bytes(), "CNET")
    r.magic(CNET_MAGIC)
    r.version(CNET_VERSION)
    n = r.u32("feature count")
    counts = r.array(n, "<u4", "category counts")
    k = r.u32("class count")
    h = r.u32("hidden size")
    tag_at = r.pos
    tag = r.u32("activation tag")
    if tag >= len(ACTIVATIONS):
        raise ContainerError(f"CNET: unknown activation tag {tag}", tag_at)
    spec = CategorySpec(counts)
    W1 = r.array(h * spec.dim, "<f8", "W1").reshape(h, spec.dim)
    b1 = r.array(h, "<f8", "b1")
    W2 = r.array(k * h, "<f8", "W2").reshape(k, h)
    b2 = r.array(k, "<f8", "b2")
    r.finish()
    return NetworkParams(W1, b1, W2, b2, ACTIVATIONS[tag], spec)
