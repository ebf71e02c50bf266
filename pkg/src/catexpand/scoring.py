"""Sum-of-squares scores of first- and second-order coefficients."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expansion import ExpansionCoefficients, ExpansionError


@dataclass
class ScoreSet:
    """``first_order[i, l]`` and ``second_order[p, l]`` for pair ``pairs[p]``."""

    first_order: np.ndarray | None = None
    second_order: np.ndarray | None = None
    pairs: np.ndarray | None = None
    feature_count: int | None = None

    @property
    def first_aggregate(self) -> np.ndarray:
        return self.first_order.sum(axis=1)

    @property
    def second_aggregate(self) -> np.ndarray:
        return self.second_order.sum(axis=1)

    def pair_matrix(self, label: int | None = None) -> np.ndarray:
        """Symmetric ``N x N`` matrix of pair scores (class-summed if ``label`` is None)."""
        values = self.second_aggregate if label is None else self.second_order[:, label]
        n = self.feature_count
        mat = np.zeros((n, n))
        mat[self.pairs[:, 0], self.pairs[:, 1]] = values
        mat[self.pairs[:, 1], self.pairs[:, 0]] = values
        return mat


def _warn_gauge(coeffs: ExpansionCoefficients) -> None:
    if not coeffs.gauge_fixed:
        warnings.warn("scoring coefficients that are not gauge-fixed; scores depend on the gauge",
                      stacklevel=3)


def first_order_scores(coeffs: ExpansionCoefficients, scores: ScoreSet | None = None) -> ScoreSet:
    if coeffs.order1 is None:
        raise ExpansionError("no first-order coefficients")
    _warn_gauge(coeffs)
    scores = scores or ScoreSet(feature_count=coeffs.spec.feature_count)
    squares = coeffs.order1 * coeffs.order1
    scores.first_order = np.add.reduceat(squares, coeffs.spec.offsets[:-1], axis=1).T
    return scores


def second_order_scores(coeffs: ExpansionCoefficients, scores: ScoreSet | None = None) -> ScoreSet:
    if coeffs.order2 is None:
        raise ExpansionError("no second-order coefficients")
    _warn_gauge(coeffs)
    lay = coeffs.layout
    scores = scores or ScoreSet(feature_count=coeffs.spec.feature_count)
    if lay.n_pairs:
        o2 = coeffs.order2.astype(np.float64, copy=False)
        scores.second_order = np.add.reduceat(o2 * o2, lay.pair_start[:-1], axis=1).T
    else:
        scores.second_order = np.zeros((0, coeffs.class_count))
    scores.pairs = lay.pairs
    return scores


def all_scores(coeffs: ExpansionCoefficients) -> ScoreSet:
    scores = first_order_scores(coeffs)
    if coeffs.order2 is not None:
        second_order_scores(coeffs, scores)
    return scores


def chebyshev_separation(width: int):
    """Separation on a row-major pixel grid of the given width."""

    def sep(i: np.ndarray, j: np.ndarray) -> np.ndarray:
        return np.maximum(np.abs(i // width - j // width), np.abs(i % width - j % width))

    return sep


def sequence_separation(i: np.ndarray, j: np.ndarray) -> np.ndarray:
    return np.abs(j - i)


def rank_pairs(pairs: np.ndarray, values: np.ndarray, k: int, min_separation: int = 0,
               separation=sequence_separation) -> list[tuple[int, int, float]]:
    """Top ``k`` pairs by value, descending, ties broken by ``(i, j)``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    pairs = np.asarray(pairs)
    values = np.asarray(values, dtype=np.float64)
    if len(pairs) == 0:
        return []
    keep = separation(pairs[:, 0], pairs[:, 1]) >= min_separation
    pairs, values = pairs[keep], values[keep]
    order = np.lexsort((pairs[:, 1], pairs[:, 0], -values))[:k]
    return [(int(pairs[o, 0]), int(pairs[o, 1]), float(values[o])) for o in order]


def top_pairs(
    scores: ScoreSet,
    k: int,
    min_separation: int = 0,
    class_aggregate: bool = True,
    label: int | None = None,
    separation=sequence_separation,
) -> list[tuple[int, int, float]]:
    """Highest second-order scores among pairs at least ``min_separation`` apart.

    ``separation`` defaults to ``|j - i|``; pass :func:`chebyshev_separation`
    for image grids.  Without ``class_aggregate`` a ``label`` must be given.
    """
    if class_aggregate:
        values = scores.second_aggregate
    else:
        if label is None:
            raise ValueError("label is required when class_aggregate is False")
        values = scores.second_order[:, label]
    return rank_pairs(scores.pairs, values, k, min_separation, separation)


def display_scores(values: np.ndarray, sqrt: bool = False) -> np.ndarray:
    """Scores as displayed; ``sqrt`` gives the Frobenius norm instead of its square."""
    return np.sqrt(values) if sqrt else np.asarray(values)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_pair_scores_csv(scores: ScoreSet, path, sqrt: bool = False) -> Path:
    path = Path(path)
    vals = display_scores(scores.second_order, sqrt)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "class", "score"])
        for p, (i, j) in enumerate(scores.pairs):
            for label in range(vals.shape[1]):
                w.writerow([int(i), int(j), label, _fmt(vals[p, label])])
    return path


def write_first_scores_csv(scores: ScoreSet, path, sqrt: bool = False) -> Path:
    path = Path(path)
    vals = display_scores(scores.first_order, sqrt)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "class", "score"])
        for i in range(vals.shape[0]):
            for label in range(vals.shape[1]):
                w.writerow([i, label, _fmt(vals[i, label])])
    return path


def write_matrix_csv(matrix: np.ndarray, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(matrix):
            w.writerow([_fmt(v) for v in row])
    return path


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    mat = np.array(rows, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"{path}: not a rectangular matrix")
    return mat
