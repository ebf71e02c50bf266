"""Exact multilinear expansion of classifier logits over one-hot inputs.

Because one-hot entries are binary, any logit function is a finite polynomial
in which every entry appears at most linearly.  Coefficients are obtained by
evaluating the function on synthetic binary probes around the (invalid)
all-zero input and combining the results by inclusion-exclusion:

    order0         = z(0)
    order1[a]      = z(e_a) - z(0)
    order2[a, b]   = z(e_a + e_b) - z(e_a) - z(e_b) + z(0)

For a one-hidden-layer network the same numbers follow in closed form from
the weights, which is what :func:`closed_form_expand` computes.

Second-order coefficients are stored once per unordered feature pair
``i < j`` and never for two categories of the same feature.  In memory they
live in an array of shape ``(K, E)`` whose columns enumerate
``(pair, alpha, beta)`` lexicographically, so ``coeffs.block(i, j)`` is a
``(K, n_i, n_j)`` view.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import kernels
from ._binio import ContainerError, Reader, Writer, file_sha256, write_sidecar
from .categorical import CategorySpec, LabeledDataset, active_indices, encode_batch
from .network import NetworkParams, activate, forward_logits, logits_from_samples, weighted_accuracy
from .parallel import resolve_threads

CEXP_MAGIC = b"CEXP"
CEXP_VERSION = 1

LogitEvaluator = Callable[[np.ndarray], np.ndarray]


class ExpansionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PairLayout:
    """Column bookkeeping for the ``(K, E)`` second-order store."""

    pairs: np.ndarray  # (P, 2) feature pairs i < j, lexicographic
    pair_start: np.ndarray  # (P + 1,) first column of each pair block
    row_start: np.ndarray  # (N,) first column of pair (i, i + 1)
    entry_pair: np.ndarray  # (E,) pair of each column
    entry_a: np.ndarray  # (E,) flat one-hot index of the first entry
    entry_b: np.ndarray  # (E,) flat one-hot index of the second entry

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]

    @property
    def n_entries(self) -> int:
        return int(self.pair_start[-1])

    def pair_index(self, i: int, j: int, n_features: int) -> int:
        if i > j:
            i, j = j, i
        if not 0 <= i < j < n_features:
            raise IndexError(f"no stored pair ({i}, {j})")
        return i * (2 * n_features - i - 1) // 2 + (j - i - 1)


@lru_cache(maxsize=32)
def pair_layout(spec: CategorySpec) -> PairLayout:
    n = spec.feature_count
    counts = np.asarray(spec.category_counts, dtype=np.int64)
    ii, jj = np.triu_indices(n, k=1)
    pairs = np.stack([ii, jj], axis=1).astype(np.int64)
    sizes = counts[ii] * counts[jj]
    pair_start = np.zeros(len(pairs) + 1, dtype=np.int64)
    np.cumsum(sizes, out=pair_start[1:])
    first_pair_of_row = np.concatenate([[0], np.cumsum(n - 1 - np.arange(n))])[:n]
    row_start = pair_start[np.minimum(first_pair_of_row, len(pairs))]

    entry_pair = np.repeat(np.arange(len(pairs)), sizes)
    local = np.arange(pair_start[-1]) - pair_start[entry_pair]
    nj = counts[jj][entry_pair]
    offs = spec.offsets
    entry_a = offs[ii][entry_pair] + local // nj
    entry_b = offs[jj][entry_pair] + local % nj
    for arr in (pairs, pair_start, row_start, entry_pair, entry_a, entry_b):
        arr.setflags(write=False)
    return PairLayout(pairs, pair_start, row_start, entry_pair, entry_a, entry_b)


@dataclass
class ExpansionCoefficients:
    spec: CategorySpec
    order0: np.ndarray  # (K,)
    order1: np.ndarray | None = None  # (K, D)
    order2: np.ndarray | None = None  # (K, E)
    gauge_fixed: bool = False

    def __post_init__(self) -> None:
        self.order0 = np.asarray(self.order0, dtype=np.float64).reshape(-1)
        k = self.order0.shape[0]
        if self.order1 is not None:
            self.order1 = np.asarray(self.order1, dtype=np.float64)
            if self.order1.shape != (k, self.spec.dim):
                raise ValueError(f"order1 must have shape {(k, self.spec.dim)}, got {self.order1.shape}")
        if self.order2 is not None:
            if self.order1 is None:
                raise ValueError("order2 requires order1")
            if self.order2.dtype not in (np.float32, np.float64):
                self.order2 = self.order2.astype(np.float64)
            e = pair_layout(self.spec).n_entries
            if self.order2.shape != (k, e):
                raise ValueError(f"order2 must have shape {(k, e)}, got {self.order2.shape}")

    @property
    def class_count(self) -> int:
        return self.order0.shape[0]

    @property
    def max_order(self) -> int:
        if self.order2 is not None:
            return 2
        return 1 if self.order1 is not None else 0

    @property
    def layout(self) -> PairLayout:
        return pair_layout(self.spec)

    def first_order_block(self, i: int) -> np.ndarray:
        o = self.spec.offsets
        return self.order1[:, o[i] : o[i + 1]]

    def block(self, i: int, j: int) -> np.ndarray:
        """``(K, n_i, n_j)`` view of the coefficients of features ``i < j``."""
        if self.order2 is None:
            raise ExpansionError("no second-order coefficients stored")
        if i > j:
            raise IndexError("pair blocks are stored for i < j only")
        lay = self.layout
        p = lay.pair_index(i, j, self.spec.feature_count)
        s, e = lay.pair_start[p], lay.pair_start[p + 1]
        n = self.spec.category_counts
        return self.order2[:, s:e].reshape(self.class_count, n[i], n[j])

    def copy(self) -> "ExpansionCoefficients":
        return ExpansionCoefficients(
            self.spec,
            self.order0.copy(),
            None if self.order1 is None else self.order1.copy(),
            None if self.order2 is None else self.order2.copy(),
            self.gauge_fixed,
        )

    def check_finite(self) -> None:
        for name in ("order0", "order1", "order2"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ExpansionError(f"{name} contains non-finite coefficients")


def probe_count(spec: CategorySpec, max_order: int) -> int:
    """Number of probe evaluations needed by :func:`probe_expand`."""
    total = 1
    if max_order >= 1:
        total += spec.dim
    if max_order >= 2:
        total += pair_layout(spec).n_entries
    return total


def _evaluate(evaluator: LogitEvaluator, probes: np.ndarray, describe) -> np.ndarray:
    out = np.asarray(evaluator(probes), dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None] if probes.shape[0] > 1 else out[None, :]
    if out.shape[0] != probes.shape[0]:
        raise ExpansionError("evaluator returned the wrong number of rows")
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        raise ExpansionError(f"non-finite evaluator output at probe {describe(int(np.argmax(bad)))}")
    return out


def probe_expand(
    evaluator: LogitEvaluator,
    spec: CategorySpec,
    max_order: int = 2,
    batch_size: int = 4096,
) -> ExpansionCoefficients:
    """Coefficients up to ``max_order`` by evaluating ``evaluator`` on binary probes.

    ``evaluator`` maps a ``(B, D)`` batch of probes to ``(B, K)`` logits. It is
    called on exactly ``probe_count(spec, max_order)`` probe rows in total.
    """
    if max_order not in (0, 1, 2):
        raise ValueError("max_order must be 0, 1 or 2")
    d = spec.dim
    z0 = _evaluate(evaluator, np.zeros((1, d)), lambda _: "zero vector")[0]
    if max_order == 0:
        return ExpansionCoefficients(spec, z0)

    feat, cat = spec.entry_feature, spec.entry_category
    z1 = np.empty((d, z0.shape[0]))
    for lo in range(0, d, batch_size):
        hi = min(lo + batch_size, d)
        probes = np.zeros((hi - lo, d))
        probes[np.arange(hi - lo), np.arange(lo, hi)] = 1.0
        z1[lo:hi] = _evaluate(
            evaluator, probes, lambda r, lo=lo: f"{{({feat[lo + r]}, {cat[lo + r]})}}"
        )
    order1 = (z1 - z0).T
    if max_order == 1:
        return ExpansionCoefficients(spec, z0, order1)

    lay = pair_layout(spec)
    n_e = lay.n_entries
    order2 = np.empty((z0.shape[0], n_e))
    for lo in range(0, n_e, batch_size):
        hi = min(lo + batch_size, n_e)
        a, b = lay.entry_a[lo:hi], lay.entry_b[lo:hi]
        rows = np.arange(hi - lo)
        probes = np.zeros((hi - lo, d))
        probes[rows, a] = 1.0
        probes[rows, b] = 1.0
        zab = _evaluate(
            evaluator,
            probes,
            lambda r: f"{{({feat[a[r]]}, {cat[a[r]]}), ({feat[b[r]]}, {cat[b[r]]})}}",
        )
        order2[:, lo:hi] = (zab - z1[a] - z1[b] + z0).T
    return ExpansionCoefficients(spec, z0, order1, order2)


def _row_blocks(spec: CategorySpec, n_blocks: int) -> list[tuple[int, int]]:
    """Split feature rows into contiguous blocks of roughly equal pair work."""
    n = spec.feature_count
    counts = np.asarray(spec.category_counts, dtype=np.float64)
    tail = spec.dim - spec.offsets[1:]
    work = np.cumsum(counts * tail)
    if n < 2 or work[-1] == 0:
        return [(0, n)]
    bounds = np.searchsorted(work, np.linspace(0, work[-1], n_blocks + 1)[1:-1])
    edges = sorted(set([0, *bounds.tolist(), n]))
    return list(zip(edges[:-1], edges[1:]))


def closed_form_expand(
    net: NetworkParams,
    max_order: int = 2,
    backend: str | None = None,
    threads: int | None = None,
) -> ExpansionCoefficients:
    """Coefficients of a one-hidden-layer network computed from its weights.

    With ``u = b1`` and ``c_a = W1[:, a]``::

        order0      = W2 f(u) + b2
        order1[a]   = W2 [f(u + c_a) - f(u)]
        order2[a,b] = W2 [f(u + c_a + c_b) - f(u + c_a) - f(u + c_b) + f(u)]

    The pair term runs in the selected kernel backend, split into row blocks
    that are processed by up to ``threads`` workers.
    """
    if max_order not in (0, 1, 2):
        raise ValueError("max_order must be 0, 1 or 2")
    code = kernels.activation_code(net.activation)
    f0 = activate(net.b1, net.activation)
    order0 = net.W2 @ f0 + net.b2
    if max_order == 0:
        return ExpansionCoefficients(net.spec, order0)
    fcol = activate(net.W1 + net.b1[:, None], net.activation)
    order1 = net.W2 @ (fcol - f0[:, None])
    if max_order == 1:
        return ExpansionCoefficients(net.spec, order0, order1)

    spec = net.spec
    lay = pair_layout(spec)
    order2 = np.zeros((net.class_count, lay.n_entries))
    if lay.n_entries:
        kern = kernels.get_backend(backend)
        W1T = np.ascontiguousarray(net.W1.T)
        W2 = np.ascontiguousarray(net.W2)
        counts = np.asarray(spec.category_counts, dtype=np.int64)
        row_start = np.ascontiguousarray(lay.row_start, dtype=np.int64)
        n_threads = resolve_threads(threads)
        blocks = _row_blocks(spec, max(1, 4 * n_threads) if n_threads > 1 else 1)

        def run(block):
            kern.pair_coefficients(W1T, net.b1, W2, counts, row_start, code, block[0], block[1], order2)

        if n_threads > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(n_threads) as pool:
                list(pool.map(run, blocks))
        else:
            for block in blocks:
                run(block)
    return ExpansionCoefficients(spec, order0, order1, order2)


def _subset_probe(spec: CategorySpec, entries: list[tuple[int, int]], mask: int) -> np.ndarray:
    x = np.zeros(spec.dim)
    for bit, (f, c) in enumerate(entries):
        if mask >> bit & 1:
            x[spec.index(f, c)] = 1.0
    return x


def mobius_coefficient(
    evaluator: LogitEvaluator,
    spec: CategorySpec,
    entries: Iterable[tuple[int, int]],
    max_subsets: int = 1 << 16,
) -> np.ndarray:
    """Inclusion-exclusion coefficient of the monomial over ``entries``.

    Returns ``sum_{T subset of S} (-1)**(|S| - |T|) z(probe(T))``.
    """
    entries = sorted(set((int(f), int(c)) for f, c in entries))
    for f, c in entries:
        spec.index(f, c)
    n_sub = 1 << len(entries)
    if n_sub > max_subsets:
        raise ExpansionError(f"{n_sub} subsets exceed the cap of {max_subsets}")
    probes = np.stack([_subset_probe(spec, entries, m) for m in range(n_sub)])
    values = _evaluate(evaluator, probes, lambda r: f"subset mask {r}")
    signs = np.array([(-1) ** (len(entries) - bin(m).count("1")) for m in range(n_sub)], dtype=np.float64)
    return signs @ values


class MobiusTable:
    """Every expansion coefficient whose entries lie in distinct features.

    The table has shape ``(n_1 + 1, ..., n_N + 1, K)``; index 0 on an axis
    means the feature is absent from the monomial and index ``c + 1`` means
    category ``c`` is present.
    """

    def __init__(self, spec: CategorySpec, table: np.ndarray):
        self.spec = spec
        self.table = table

    @classmethod
    def from_evaluator(cls, evaluator: LogitEvaluator, spec: CategorySpec, max_terms: int = 1 << 20):
        shape = tuple(n + 1 for n in spec.category_counts)
        n_terms = int(np.prod(shape))
        if n_terms > max_terms:
            raise ExpansionError(f"{n_terms} partial assignments exceed the cap of {max_terms}")
        grid = np.array(list(itertools.product(*[range(s) for s in shape])), dtype=np.int64)
        probes = np.zeros((n_terms, spec.dim))
        rows, feats = np.nonzero(grid > 0)
        probes[rows, spec.offsets[feats] + grid[rows, feats] - 1] = 1.0
        values = _evaluate(evaluator, probes, lambda r: f"assignment {tuple(grid[r] - 1)}")
        table = values.reshape(*shape, -1)
        for axis in range(spec.feature_count):
            head = [slice(None)] * table.ndim
            head[axis] = slice(0, 1)
            tail = [slice(None)] * table.ndim
            tail[axis] = slice(1, None)
            table[tuple(tail)] -= table[tuple(head)]
        return cls(spec, table)

    def coefficient(self, entries: Iterable[tuple[int, int]]) -> np.ndarray:
        idx = [0] * self.spec.feature_count
        for f, c in entries:
            self.spec.index(f, c)
            if idx[f]:
                raise ExpansionError(f"feature {f} appears twice")
            idx[f] = c + 1
        return self.table[tuple(idx)]

    def evaluate(self, sample) -> np.ndarray:
        """Sum of the coefficients of every subset of the sample's active entries."""
        cats = self.spec.check_samples(np.asarray(sample).reshape(1, -1))[0]
        total = np.zeros(self.table.shape[-1])
        for mask in itertools.product((0, 1), repeat=self.spec.feature_count):
            total += self.table[tuple(np.where(mask, cats + 1, 0))]
        return total


def _dense_pair_matrix(coeffs: ExpansionCoefficients, label: int, dtype=np.float64) -> np.ndarray:
    lay = coeffs.layout
    a = np.zeros((coeffs.spec.dim, coeffs.spec.dim), dtype=dtype)
    a[lay.entry_a, lay.entry_b] = coeffs.order2[label]
    return a


def truncated_logits_batch(
    coeffs: ExpansionCoefficients, samples: np.ndarray, order: int, chunk: int = 2048
) -> np.ndarray:
    """Truncated expansion evaluated on valid samples of shape ``(M, N)``."""
    if order > coeffs.max_order or order < 0:
        raise ExpansionError(f"order {order} not available (max_order={coeffs.max_order})")
    spec = coeffs.spec
    samples = spec.check_samples(samples)
    m = samples.shape[0]
    out = np.tile(coeffs.order0, (m, 1))
    if order >= 1:
        idx = active_indices(samples, spec)
        out += coeffs.order1.T[idx].sum(axis=1)
    if order >= 2 and coeffs.layout.n_entries:
        lay = coeffs.layout
        k = coeffs.class_count
        if lay.n_pairs * 20 < spec.dim * spec.dim:
            # few pairs: gather the active coefficient of every pair directly
            ii, jj = lay.pairs[:, 0], lay.pairs[:, 1]
            nj = np.asarray(spec.category_counts)[jj]
            step = max(1, (1 << 22) // max(1, lay.n_pairs))
            for lo in range(0, m, step):
                s = samples[lo : lo + step]
                cols = lay.pair_start[:-1] + s[:, ii] * nj + s[:, jj]
                out[lo : lo + step] += coeffs.order2[:, cols].sum(axis=2).T
        else:
            # many pairs: z2 = x^T A x with a dense upper-triangular A per class
            for label in range(k):
                a = _dense_pair_matrix(coeffs, label)
                for lo in range(0, m, chunk):
                    x = encode_batch(samples[lo : lo + chunk], spec)
                    out[lo : lo + chunk, label] += np.einsum("md,md->m", x @ a, x)
    return out


def truncated_logits(coeffs: ExpansionCoefficients, sample, order: int) -> np.ndarray:
    """``W + sum_i W_i^{c_i} + sum_{i<j} W_ij^{c_i c_j}``, cut at ``order``."""
    return truncated_logits_batch(coeffs, np.asarray(sample).reshape(1, -1), order)[0]


@dataclass
class TruncationReport:
    full: float
    order2: float | None
    order1: float

    def as_tuple(self):
        return (self.full, self.order2, self.order1)


def truncation_report(
    net: NetworkParams, coeffs: ExpansionCoefficients, data: LabeledDataset
) -> TruncationReport:
    """Weighted argmax accuracy of the full network and of its truncations."""
    if coeffs.spec != net.spec or data.spec != net.spec:
        raise ValueError("network, coefficients and dataset must share one spec")
    w = data.sample_weights
    full = weighted_accuracy(np.argmax(logits_from_samples(net, data.samples), 1), data.labels, w)
    acc = {}
    for order in (1, 2):
        if order <= coeffs.max_order:
            z = truncated_logits_batch(coeffs, data.samples, order)
            acc[order] = weighted_accuracy(np.argmax(z, 1), data.labels, w)
    return TruncationReport(full, acc.get(2), acc[1])


def network_evaluator(net: NetworkParams) -> LogitEvaluator:
    return lambda x: forward_logits(net, x)


def _order2_file_order(coeffs: ExpansionCoefficients) -> np.ndarray:
    """Permutation from ``order2.ravel()`` to per-pair ``K x n_i x n_j`` blocks."""
    lay = coeffs.layout
    k, e = coeffs.order2.shape
    cols = np.arange(e)
    ell = np.repeat(np.arange(k), e)
    flat_e = np.tile(cols, k)
    order = np.lexsort((flat_e, ell, np.tile(lay.entry_pair, k)))
    return ell[order] * e + flat_e[order]


def save_coefficients(
    coeffs: ExpansionCoefficients, path, manifest: dict | None = None
) -> Path:
    """CEXP container: header, order0/order1 as f64, order2 blocks as f32."""
    spec = coeffs.spec
    w = Writer()
    w.raw(CEXP_MAGIC)
    w.u32(CEXP_VERSION)
    w.u32(spec.feature_count)
    w.u32_array(spec.category_counts)
    w.u32(coeffs.class_count)
    w.u32(coeffs.max_order)
    w.u32(1 if coeffs.gauge_fixed else 0)
    w.array(coeffs.order0, "<f8")
    if coeffs.max_order >= 1:
        w.array(coeffs.order1, "<f8")
    if coeffs.max_order >= 2:
        w.array(coeffs.order2.ravel()[_order2_file_order(coeffs)], "<f4")
    path = Path(path)
    path.write_bytes(w.getvalue())
    payload = {"format": "CEXP", "version": CEXP_VERSION, "max_order": coeffs.max_order,
               "gauge_fixed": coeffs.gauge_fixed}
    payload.update(manifest or {})
    write_sidecar(path, payload)
    return path


def load_coefficients(path) -> ExpansionCoefficients:
    r = Reader(Path(path).read_bytes(), "CEXP")
    r.magic(CEXP_MAGIC)
    r.version(CEXP_VERSION)
    n = r.u32("feature count")
    spec = CategorySpec(r.array(n, "<u4", "category counts"))
    k = r.u32("class count")
    at = r.pos
    max_order = r.u32("max order")
    if max_order > 2:
        raise ContainerError(f"CEXP: max_order {max_order} not supported", at)
    gauge = bool(r.u32("gauge flag"))
    order0 = r.array(k, "<f8", "order0")
    order1 = order2 = None
    if max_order >= 1:
        order1 = r.array(k * spec.dim, "<f8", "order1").reshape(k, spec.dim)
    coeffs = ExpansionCoefficients(spec, order0, order1, None, gauge)
    if max_order >= 2:
        e = pair_layout(spec).n_entries
        packed = r.array(k * e, "<f4", "order2")
        coeffs.order2 = np.empty((k, e), dtype=np.float64)
        coeffs.order2.ravel()[_order2_file_order(coeffs)] = packed
    r.finish()
    return coeffs


def expansion_manifest(model_path, method: str, n_probes: int, wall_time: float) -> dict:
    return {
        "source_model_sha256": file_sha256(model_path) if model_path else None,
        "extraction_method": method,
        "probe_count": n_probes,
        "wall_time_s": wall_time,
    }
