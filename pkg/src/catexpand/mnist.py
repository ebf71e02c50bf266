"""Quantised-MNIST experiment: IDX ingestion, pixel quantisation, training,
expansion, truncation study and score maps."""

from __future__ import annotations

import gzip
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .categorical import CategorySpec, LabeledDataset
from .expansion import closed_form_expand, expansion_manifest, probe_count, save_coefficients, truncation_report
from .gauge import gauge_residuals, ising_gauge_fix
from .network import NetworkParams, TrainConfig, save_network, train
from .scoring import (
    all_scores,
    chebyshev_separation,
    top_pairs,
    write_first_scores_csv,
    write_pair_scores_csv,
)

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxMagicError(f"{path}: bad magic {got}, expected {magic}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise IdxTruncatedError(f"{path}: expected {need} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images ``(M, rows, cols)`` uint8 and labels ``(M,)`` from IDX files (optionally gzipped)."""
    images = _parse_idx(_read_maybe_gzip(images_path), IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_maybe_gzip(labels_path), LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return images, labels


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">IIII", IMAGES_MAGIC, *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


@dataclass
class QuantizerModel:
    """Per-pixel thresholds; a pixel's category is the number of thresholds it exceeds."""

    bits: int
    thresholds: np.ndarray  # (2**bits - 1, n_pixels)

    @property
    def categories(self) -> int:
        return 2**self.bits


def fit_quantizer(train_images: np.ndarray, bits: int) -> QuantizerModel:
    """Mean threshold for 2 categories, per-pixel quartiles for 4."""
    flat = np.asarray(train_images, dtype=np.float64).reshape(len(train_images), -1)
    if flat.shape[0] == 0:
        raise ValueError("cannot fit a quantizer on an empty training set")
    if bits == 1:
        thresholds = flat.mean(axis=0)[None, :]
    elif bits == 2:
        thresholds = np.quantile(flat, [0.25, 0.5, 0.75], axis=0)
    else:
        raise ValueError("bits must be 1 or 2")
    return QuantizerModel(bits, thresholds)


def quantize_images(images: np.ndarray, q: QuantizerModel) -> np.ndarray:
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    # value <= threshold stays in the lower category
    return (flat[:, None, :] > q.thresholds[None]).sum(axis=1).astype(np.int64)


def quantize(images: np.ndarray, labels: np.ndarray, q: QuantizerModel) -> LabeledDataset:
    cats = quantize_images(images, q)
    spec = CategorySpec.uniform(cats.shape[1], q.categories)
    return LabeledDataset(cats, labels, spec, 10)


@dataclass
class MnistConfig:
    images: str
    labels: str
    out_dir: str
    bits: int = 1
    scale: str = "desk"
    seed: int = 0
    n_train: int | None = None
    n_val: int | None = None
    hidden: int | None = None
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.005
    l2_coefficient: float = 0.01
    top_k: int = 20
    min_separation: int = 2
    threads: int | None = None
    extra: dict = field(default_factory=dict)

    def resolved(self) -> "MnistConfig":
        presets = {"desk": (5000, 1000, 128), "full": (50000, 10000, 800)}
        if self.scale not in presets:
            raise ValueError(f"scale must be one of {sorted(presets)}")
        n_train, n_val, hidden = presets[self.scale]
        return MnistConfig(**{
            **asdict(self),
            "n_train": self.n_train or n_train,
            "n_val": self.n_val or n_val,
            "hidden": self.hidden or hidden,
        })


def split_indices(total: int, n_train: int, n_val: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random train/validation split; shrinks the training part if needed."""
    if total < 2:
        raise ValueError("need at least two images")
    n_val = min(n_val, total // 2)
    if n_train + n_val > total:
        logger.warning("only %d images: using %d train / %d validation", total, total - n_val, n_val)
        n_train = total - n_val
    perm = np.random.default_rng(seed).permutation(total)
    return np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_val])


def _write_pgm(path, image: np.ndarray) -> Path:
    image = np.asarray(image, dtype=np.uint8)
    rows, cols = image.shape
    path = Path(path)
    path.write_bytes(f"P5 {cols} {rows} 255\n".encode() + image.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(raw, dtype=np.uint8, count=rows * cols, offset=pos + 1)
    return data.reshape(rows, cols)


def normalized_map(values: np.ndarray) -> np.ndarray:
    """Scale to 0..255 by the maximum; black means zero."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max(initial=0.0)
    if top <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(255.0 * np.clip(values, 0, None) / top).astype(np.uint8)


def emit_score_maps(
    scores,
    out_dir,
    grid: tuple[int, int] = (28, 28),
    mean_images: np.ndarray | None = None,
    top_k: int = 20,
    min_separation: int = 2,
) -> list[Path]:
    """Per-class first-order maps, pair-score matrices and top-pair tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, cols = grid
    written = []
    n_classes = scores.first_order.shape[1]
    for label in range(n_classes):
        written.append(
            _write_pgm(out / f"first_order_class{label}.pgm",
                       normalized_map(scores.first_order[:, label].reshape(rows, cols)))
        )
        if scores.second_order is not None:
            written.append(
                _write_pgm(out / f"second_order_class{label}.pgm",
                           normalized_map(scores.pair_matrix(label)))
            )
    if scores.second_order is not None:
        path = out / "top_pairs.csv"
        sep = chebyshev_separation(cols)
        with open(path, "w") as fh:
            fh.write("class,rank,i,j,row_i,col_i,row_j,col_j,score\n")
            for label in range(n_classes):
                ranked = top_pairs(scores, top_k, min_separation, class_aggregate=False,
                                   label=label, separation=sep)
                for rank, (i, j, s) in enumerate(ranked):
                    fh.write(f"{label},{rank},{i},{j},{i // cols},{i % cols},"
                             f"{j // cols},{j % cols},{float(s)!r}\n")
        written.append(path)
    if mean_images is not None:
        path = out / "mean_digits.csv"
        with open(path, "w") as fh:
            fh.write("class,pixel,value\n")
            for label, img in enumerate(mean_images):
                flat = np.asarray(img, dtype=np.float64).ravel()
                fh.writelines(f"{label},{p},{float(v)!r}\n" for p, v in enumerate(flat))
                written.append(_write_pgm(out / f"mean_digit_class{label}.pgm",
                                          np.rint(img.reshape(rows, cols)).astype(np.uint8)))
        written.append(path)
    return written


def run_mnist_experiment(config: MnistConfig) -> dict:
    """Train, expand, gauge-fix and score a quantised-MNIST classifier.

    Writes every artifact into ``config.out_dir`` and returns the report that
    is also saved as ``report.json``.
    """
    cfg = config.resolved()
    t_start = time.perf_counter()
    timings = {}
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    images, labels = load_idx(cfg.images, cfg.labels)
    tr, va = split_indices(len(images), cfg.n_train, cfg.n_val, cfg.seed)
    quantizer = fit_quantizer(images[tr], cfg.bits)
    train_data = quantize(images[tr], labels[tr], quantizer)
    val_data = quantize(images[va], labels[va], quantizer)
    spec = train_data.spec

    t0 = time.perf_counter()
    net = NetworkParams.initialize(spec, cfg.hidden, 10, "tanh", seed=cfg.seed)
    tcfg = TrainConfig(
        learning_rate=cfg.learning_rate,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        l2_coefficient=cfg.l2_coefficient,
        rng_seed=cfg.seed + 1,
    )
    net, train_report = train(net, train_data, tcfg, val_data)
    timings["train_s"] = time.perf_counter() - t0
    logger.info("trained: train acc %.4f, val acc %.4f", train_report.train_accuracy,
                train_report.validation_accuracy)

    t0 = time.perf_counter()
    raw = closed_form_expand(net, 2, threads=cfg.threads)
    timings["expand_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    coeffs = ising_gauge_fix(raw)
    del raw
    residuals = gauge_residuals(coeffs)
    timings["gauge_s"] = time.perf_counter() - t0
    scores = all_scores(coeffs)

    t0 = time.perf_counter()
    trunc_train = truncation_report(net, coeffs, train_data)
    trunc_val = truncation_report(net, coeffs, val_data)
    timings["truncation_s"] = time.perf_counter() - t0

    model_path = save_network(net, out / "model.cnet", {
        "train_config": asdict(tcfg), "train_report": train_report.to_dict()})
    coeff_path = save_coefficients(
        coeffs, out / "coefficients.cexp",
        expansion_manifest(model_path, "closed-form", probe_count(spec, 2), timings["expand_s"]),
    )
    first_csv = write_first_scores_csv(scores, out / "first_order_scores.csv")
    pair_csv = write_pair_scores_csv(scores, out / "pair_scores.csv")
    mean_images = np.stack([images[tr][labels[tr] == d].reshape(-1, images.shape[1] * images.shape[2]).mean(0)
                            if np.any(labels[tr] == d) else np.zeros(images.shape[1] * images.shape[2])
                            for d in range(10)])
    maps = emit_score_maps(scores, out / "maps", (images.shape[1], images.shape[2]), mean_images,
                           cfg.top_k, cfg.min_separation)

    report = {
        "config": asdict(cfg),
        "n_train": int(len(tr)),
        "n_val": int(len(va)),
        "categories": quantizer.categories,
        "train_accuracy": train_report.train_accuracy,
        "validation_accuracy": train_report.validation_accuracy,
        "convergence_residual": train_report.convergence_residual,
        "loss_history": train_report.loss_history,
        "truncation": {
            "train": {"full": trunc_train.full, "order2": trunc_train.order2, "order1": trunc_train.order1},
            "validation": {"full": trunc_val.full, "order2": trunc_val.order2, "order1": trunc_val.order1},
        },
        "gauge_residual": residuals.max_residual,
        "artifacts": [str(p) for p in [model_path, coeff_path, first_csv, pair_csv, *maps]],
        "timings": {**timings, "total_s": time.perf_counter() - t_start},
        "version": __version__,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report
