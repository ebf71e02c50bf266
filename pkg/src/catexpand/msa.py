"""Coupling analysis on aligned sequences with one square-activation
classifier per position."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from ._pykernels import match_cutoff
from .categorical import CategorySpec, LabeledDataset
from .expansion import ExpansionCoefficients, closed_form_expand, truncated_logits_batch
from .gauge import ising_gauge_fix
from .network import NetworkParams, TrainConfig, TrainReport, predict, train, weighted_accuracy
from .parallel import resolve_threads
from .scoring import (
    ScoreSet,
    all_scores,
    rank_pairs,
    read_matrix_csv,
    sequence_separation,
    write_matrix_csv,
)

logger = logging.getLogger(__name__)

AMINO_ALPHABET = "ACDEFGHIKLMNPQRSTVWY-"
GAP = "-"


class AlignmentError(ValueError):
    pass


@dataclass
class WeightedAlignment:
    """``sequences[m, i]`` in ``0..q-1`` with one weight and identifier per row."""

    sequences: np.ndarray
    q: int
    weights: np.ndarray | None = None
    identifiers: list[str] | None = None
    alphabet: str | None = None

    def __post_init__(self) -> None:
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.sequences.ndim != 2:
            raise AlignmentError("sequences must form an M x L matrix")
        if self.sequences.size and (self.sequences.min() < 0 or self.sequences.max() >= self.q):
            raise AlignmentError(f"categories must lie in 0..{self.q - 1}")
        m = self.sequences.shape[0]
        if self.weights is None:
            self.weights = np.ones(m)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (m,) or not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise AlignmentError("weights must be M finite non-negative values")
        if self.identifiers is None:
            self.identifiers = [f"seq{k}" for k in range(m)]
        if len(self.identifiers) != m:
            raise AlignmentError("one identifier per sequence is required")

    @property
    def depth(self) -> int:
        return self.sequences.shape[0]

    @property
    def length(self) -> int:
        return self.sequences.shape[1]

    def subset(self, keep) -> "WeightedAlignment":
        keep = np.asarray(keep)
        ids = [self.identifiers[k] for k in np.arange(self.depth)[keep]]
        return WeightedAlignment(self.sequences[keep], self.q, self.weights[keep], ids, self.alphabet)


def _read_fasta(path) -> list[tuple[str, str]]:
    records, name, chunks = [], None, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith(">"):
                if name is not None:
                    records.append((name, "".join(chunks)))
                name, chunks = line[1:].strip(), []
            elif name is None:
                raise AlignmentError(f"{path}: sequence data before the first header")
            else:
                chunks.append(line)
    if name is not None:
        records.append((name, "".join(chunks)))
    return records


def load_alignment(path, insert_states: str = "remove", alphabet: str = AMINO_ALPHABET) -> WeightedAlignment:
    """Read an aligned FASTA file.

    Lowercase letters and ``.`` are insert states; they are dropped with
    ``insert_states="remove"`` and raise with ``"reject"``.  Letters outside
    ``alphabet`` map to the gap symbol, which must then be part of it.
    """
    if insert_states not in ("remove", "reject"):
        raise ValueError("insert_states must be 'remove' or 'reject'")
    records = _read_fasta(path)
    if not records:
        raise AlignmentError(f"{path}: no sequences")
    lookup = np.full(256, -1, dtype=np.int64)
    for k, ch in enumerate(alphabet):
        lookup[ord(ch)] = k
    gap = alphabet.find(GAP)

    rows, ids = [], []
    for name, seq in records:
        inserts = [c for c in seq if c.islower() or c == "."]
        if inserts:
            if insert_states == "reject":
                raise AlignmentError(f"{path}: record {name!r} contains insert states")
            seq = "".join(c for c in seq if not (c.islower() or c == "."))
        codes = lookup[np.frombuffer(seq.encode("ascii", "replace"), dtype=np.uint8)]
        if np.any(codes < 0):
            if gap < 0:
                raise AlignmentError(f"{path}: record {name!r} has symbols outside the alphabet")
            codes[codes < 0] = gap
        rows.append(codes)
        ids.append(name)
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise AlignmentError(f"{path}: ragged alignment, record lengths {sorted(lengths)}")
    if 0 in lengths:
        raise AlignmentError(f"{path}: empty records")
    return WeightedAlignment(np.stack(rows), len(alphabet), None, ids, alphabet)


def write_fasta(msa: WeightedAlignment, path, alphabet: str | None = None) -> Path:
    alphabet = alphabet or msa.alphabet or AMINO_ALPHABET
    if msa.q > len(alphabet):
        raise AlignmentError(f"alphabet of {len(alphabet)} symbols cannot hold q={msa.q}")
    table = np.frombuffer(alphabet.encode("ascii"), dtype=np.uint8)
    path = Path(path)
    with open(path, "w") as fh:
        for name, row in zip(msa.identifiers, msa.sequences):
            fh.write(f">{name}\n{table[row].tobytes().decode('ascii')}\n")
    return path


def filter_gaps(msa: WeightedAlignment, max_gap_fraction: float) -> WeightedAlignment:
    """Drop sequences whose gap fraction is strictly above ``max_gap_fraction``."""
    if not 0.0 <= max_gap_fraction <= 1.0:
        raise ValueError("max_gap_fraction must lie in [0, 1]")
    alphabet = msa.alphabet or AMINO_ALPHABET
    gap = alphabet.find(GAP)
    if gap < 0 or gap >= msa.q:
        return msa.subset(np.ones(msa.depth, dtype=bool))
    frac = np.count_nonzero(msa.sequences == gap, axis=1) / msa.length
    keep = frac <= max_gap_fraction
    if not np.any(keep):
        raise AlignmentError("gap filtering removed every sequence")
    return msa.subset(keep)


def _cross_identity_counts(seqs: np.ndarray, ref: np.ndarray, q: int, threshold: float,
                           block: int = 512) -> np.ndarray:
    L = seqs.shape[1]
    def onehot(s):
        out = np.zeros((len(s), L * q), dtype=np.float32)
        out[np.arange(len(s))[:, None], np.arange(L) * q + s] = 1.0
        return out
    r = onehot(ref)
    cutoff = match_cutoff(L, threshold)
    counts = np.zeros(len(seqs), dtype=np.int64)
    for lo in range(0, len(seqs), block):
        matches = np.rint(onehot(seqs[lo : lo + block]) @ r.T).astype(np.int64)
        counts[lo : lo + block] = np.count_nonzero(matches >= cutoff, axis=1)
    return counts


def compute_weights(
    msa: WeightedAlignment,
    identity_threshold: float = 0.8,
    max_sequences: int | None = 20000,
    seed: int = 0,
    backend: str | None = None,
) -> WeightedAlignment:
    """Weight each sequence by the reciprocal number of sequences (itself
    included) sharing more than ``identity_threshold`` identity with it.

    Above ``max_sequences`` neighbours are counted in a seeded random
    reference subsample and rescaled to the full depth.
    """
    if not 0.0 < identity_threshold < 1.0:
        raise ValueError("identity_threshold must lie in (0, 1)")
    m = msa.depth
    if max_sequences is None or m <= max_sequences:
        counts = kernels.get_backend(backend).identity_counts(msa.sequences, identity_threshold)
        counts = counts.astype(np.float64)
    else:
        ref_idx = np.sort(np.random.default_rng(seed).choice(m, max_sequences, replace=False))
        hits = _cross_identity_counts(msa.sequences, msa.sequences[ref_idx], msa.q, identity_threshold)
        in_ref = np.zeros(m, dtype=bool)
        in_ref[ref_idx] = True
        others = hits - in_ref
        counts = 1.0 + others * (m - 1) / (max_sequences - in_ref.astype(np.float64))
    out = msa.subset(np.ones(m, dtype=bool))
    out.weights = 1.0 / counts
    return out


@dataclass
class PositionConfig:
    hidden: int = 32
    learning_rate: float = 0.01
    epochs: int = 500
    l2_coefficient: float = 0.01
    batch_size: int = 128
    seed: int = 0


@dataclass
class PositionModel:
    """Classifier for column ``position`` given the columns in ``inputs``."""

    position: int
    inputs: np.ndarray
    net: NetworkParams
    report: TrainReport | None = None
    coeffs: ExpansionCoefficients | None = None
    scores: ScoreSet | None = None


class PositionTrainingError(RuntimeError):
    def __init__(self, position: int, cause: Exception):
        super().__init__(f"position {position}: {cause}")
        self.position = position


def position_dataset(msa: WeightedAlignment, k: int) -> tuple[LabeledDataset, np.ndarray]:
    inputs = np.delete(np.arange(msa.length), k)
    spec = CategorySpec.uniform(msa.length - 1, msa.q)
    data = LabeledDataset(msa.sequences[:, inputs], msa.sequences[:, k], spec, msa.q, msa.weights)
    return data, inputs


def _train_one(msa: WeightedAlignment, k: int, config: PositionConfig) -> PositionModel:
    data, inputs = position_dataset(msa, k)
    try:
        net = NetworkParams.initialize(data.spec, config.hidden, msa.q, "square", seed=config.seed + k)
        tcfg = TrainConfig(
            learning_rate=config.learning_rate,
            epochs=config.epochs,
            batch_size=config.batch_size,
            l2_coefficient=config.l2_coefficient,
            rng_seed=config.seed + k,
        )
        net, report = train(net, data, tcfg)
    except Exception as exc:
        raise PositionTrainingError(k, exc) from exc
    logger.info("position %d: weighted accuracy %.4f", k, report.train_accuracy)
    return PositionModel(k, inputs, net, report)


def train_position_networks(
    msa: WeightedAlignment, config: PositionConfig | None = None, threads: int | None = None
) -> list[PositionModel]:
    """One square-activation network per column, trained concurrently.

    Every position has its own seed, so results do not depend on scheduling.
    """
    if msa.length < 2:
        raise AlignmentError("need at least two positions")
    config = config or PositionConfig()
    n = resolve_threads(threads)
    if n <= 1:
        return [_train_one(msa, k, config) for k in range(msa.length)]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(lambda k: _train_one(msa, k, config), range(msa.length)))


def expand_positions(models: list[PositionModel], max_order: int = 2) -> list[PositionModel]:
    """Attach gauge-fixed coefficients and their scores to every model."""
    for model in models:
        model.coeffs = ising_gauge_fix(closed_form_expand(model.net, max_order, threads=1))
        model.scores = all_scores(model.coeffs)
    return models


def _check_models(models: list[PositionModel], need_second: bool = False) -> int:
    if not models:
        raise ValueError("no position networks")
    L = len(models[0].inputs) + 1
    present = sorted(m.position for m in models)
    if present != list(range(L)):
        missing = sorted(set(range(L)) - set(present))
        raise ValueError(f"missing networks for positions {missing}")
    for m in models:
        if m.scores is None:
            raise ValueError(f"position {m.position} has not been expanded")
        if need_second and m.scores.second_order is None:
            raise ValueError(f"position {m.position} lacks second-order coefficients")
    return L


def aggregate_pair_scores(models: list[PositionModel]) -> np.ndarray:
    """Symmetric matrix of averaged directional first-order scores."""
    L = _check_models(models)
    directional = np.zeros((L, L))  # [k, i] = s_k(i)
    for m in models:
        directional[m.position, m.inputs] = m.scores.first_aggregate
    sym = 0.5 * (directional + directional.T)
    np.fill_diagonal(sym, 0.0)
    return sym


def average_product_correction(pair_matrix: np.ndarray) -> np.ndarray:
    """Optional extension: subtract ``mean_i * mean_j / mean`` (off-diagonal means)."""
    mat = np.array(pair_matrix, dtype=np.float64)
    L = mat.shape[0]
    if L < 3:
        return mat
    np.fill_diagonal(mat, 0.0)
    row = mat.sum(axis=1) / (L - 1)
    total = mat.sum() / (L * (L - 1))
    out = mat - (np.outer(row, row) / total if total > 0 else 0.0)
    np.fill_diagonal(out, 0.0)
    return out


def aggregate_triplet_scores(models: list[PositionModel], top_t: int = 10) -> list[tuple[int, int, int, float]]:
    """Top triplets by the mean of their directional second-order scores."""
    L = _check_models(models, need_second=True)
    keys, vals = [], []
    for m in models:
        pos = m.inputs[m.scores.pairs]
        trip = np.sort(np.column_stack([pos, np.full(len(pos), m.position)]), axis=1)
        keys.append((trip[:, 0] * L + trip[:, 1]) * L + trip[:, 2])
        vals.append(m.scores.second_aggregate)
    keys = np.concatenate(keys)
    vals = np.concatenate(vals)
    uniq, inv = np.unique(keys, return_inverse=True)
    mean = np.bincount(inv, vals) / np.bincount(inv)
    a, rest = np.divmod(uniq, L * L)
    b, c = np.divmod(rest, L)
    order = np.lexsort((c, b, a, -mean))[:top_t]
    return [(int(a[o]), int(b[o]), int(c[o]), float(mean[o])) for o in order]


def per_position_accuracy(models: list[PositionModel], msa: WeightedAlignment, order="full") -> np.ndarray:
    """Weighted accuracy of each column's classifier at a truncation order."""
    if order not in ("full", 2, 1, "2", "1"):
        raise ValueError("order must be 'full', 2 or 1")
    acc = np.zeros(msa.length)
    for m in models:
        data, _ = position_dataset(msa, m.position)
        if order == "full":
            pred = predict(m.net, data.samples)
        else:
            if m.coeffs is None:
                raise ValueError(f"position {m.position} has not been expanded")
            pred = np.argmax(truncated_logits_batch(m.coeffs, data.samples, int(order)), axis=1)
        acc[m.position] = weighted_accuracy(pred, data.labels, data.sample_weights)
    return acc


def load_distances(path, length: int | None = None) -> np.ndarray:
    dist = read_matrix_csv(path)
    if dist.shape[0] != dist.shape[1] or not np.allclose(dist, dist.T):
        raise ValueError(f"{path}: distance matrix must be square and symmetric")
    if length is not None and dist.shape[0] != length:
        raise ValueError(f"{path}: distance matrix is {dist.shape[0]} wide, alignment has {length} positions")
    return dist


def ranked_pairs(pair_matrix: np.ndarray, k: int, min_separation: int = 0):
    L = pair_matrix.shape[0]
    i, j = np.triu_indices(L, 1)
    return rank_pairs(np.column_stack([i, j]), pair_matrix[i, j], k, min_separation, sequence_separation)


def ppv_against_distogram(
    pair_matrix: np.ndarray,
    distances: np.ndarray,
    k: int,
    contact_threshold: float = 8.0,
    min_separation: int = 5,
) -> float:
    """Fraction of the top ``k`` separated pairs that are within ``contact_threshold``."""
    pair_matrix = np.asarray(pair_matrix)
    distances = np.asarray(distances)
    if pair_matrix.shape != distances.shape:
        raise ValueError(f"score matrix {pair_matrix.shape} and distances {distances.shape} differ")
    top = ranked_pairs(pair_matrix, k, min_separation)
    if not top:
        raise ValueError("no pairs satisfy the separation requirement")
    hits = sum(distances[i, j] <= contact_threshold for i, j, _ in top)
    return hits / len(top)


@dataclass
class DcaConfig:
    gap_max: float = 0.10
    id_thresh: float = 0.8
    max_sequences: int | None = 20000
    position: PositionConfig = field(default_factory=PositionConfig)
    top_pairs: int = 322
    top_triplets: int = 10
    min_separation: int = 5
    contact_threshold: float = 8.0
    apc: bool = False
    threads: int | None = None


def run_dca(msa: WeightedAlignment, config: DcaConfig, out_dir, distances: np.ndarray | None = None) -> dict:
    """Filter, reweight, train, expand and score an alignment; write every
    artifact into ``out_dir`` and return a report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    filtered = filter_gaps(msa, config.gap_max)
    weighted = compute_weights(filtered, config.id_thresh, config.max_sequences, config.position.seed)
    timings["weights_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    models = train_position_networks(weighted, config.position, config.threads)
    timings["train_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    expand_positions(models)
    pair_matrix = aggregate_pair_scores(models)
    if config.apc:
        pair_matrix = average_product_correction(pair_matrix)
    triplets = aggregate_triplet_scores(models, config.top_triplets)
    timings["expand_s"] = time.perf_counter() - t0

    accuracy = {name: per_position_accuracy(models, weighted, order)
                for name, order in (("full", "full"), ("order2", 2), ("order1", 1))}
    flagged = np.flatnonzero(accuracy["order1"] > accuracy["order2"] + 0.02)

    artifacts = [write_matrix_csv(pair_matrix, out / "pair_scores.csv")]
    path = out / "pair_ranking.csv"
    with open(path, "w") as fh:
        fh.write("rank,i,j,score\n")
        for r, (i, j, s) in enumerate(ranked_pairs(pair_matrix, config.top_pairs, config.min_separation)):
            fh.write(f"{r},{i},{j},{float(s)!r}\n")
    artifacts.append(path)
    path = out / "triplets.csv"
    with open(path, "w") as fh:
        fh.write("rank,i,j,k,score\n")
        for r, (i, j, k, s) in enumerate(triplets):
            fh.write(f"{r},{i},{j},{k},{float(s)!r}\n")
    artifacts.append(path)
    path = out / "position_accuracy.csv"
    with open(path, "w") as fh:
        fh.write("position,full,order2,order1,flagged\n")
        for k in range(weighted.length):
            fh.write(f"{k},{float(accuracy['full'][k])!r},{float(accuracy['order2'][k])!r},"
                     f"{float(accuracy['order1'][k])!r},{int(k in flagged)}\n")
    artifacts.append(path)

    report = {
        "sequences_in": msa.depth,
        "sequences_kept": weighted.depth,
        "effective_sequences": float(weighted.weights.sum()),
        "length": weighted.length,
        "q": weighted.q,
        "config": asdict(config),
        "top_triplets": [list(t) for t in triplets],
        "mean_accuracy": {k: float(v.mean()) for k, v in accuracy.items()},
        "flagged_positions": flagged.tolist(),
        "artifacts": [str(p) for p in artifacts],
        "timings": timings,
    }
    if distances is not None:
        if distances.shape[0] != weighted.length:
            raise ValueError("distance matrix does not match the alignment length")
        report["ppv"] = ppv_against_distogram(pair_matrix, distances, config.top_pairs,
                                              config.contact_threshold, config.min_separation)
    return report
