"""Zero-sum (Ising) gauge for first- and second-order coefficients.

On valid inputs every feature takes exactly one category, so coefficient
sets that differ by a gauge transformation describe the same function.  The
zero-sum gauge picks the representative whose coefficients average to zero
over the categories of every feature they involve.

Pair blocks are double-centred; their row means move to the first-order
coefficients of feature ``i``, their column means to feature ``j`` and the
grand mean leaves the constant term.  First-order blocks are centred next
and their means are absorbed into the constant.  The order-2 truncation is
unchanged on every valid input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expansion import ExpansionCoefficients, ExpansionError, truncated_logits_batch


@dataclass
class GaugeReport:
    first_order: float
    second_order: float
    function_deviation: float | None = None
    shift: float | None = None

    @property
    def max_residual(self) -> float:
        return max(self.first_order, self.second_order)


def _pair_groups(coeffs: ExpansionCoefficients):
    """Yield ``(ni, nj, pair_ids, cols)`` for pairs sharing one block shape."""
    lay = coeffs.layout
    counts = np.asarray(coeffs.spec.category_counts)
    ni = counts[lay.pairs[:, 0]]
    nj = counts[lay.pairs[:, 1]]
    shapes = ni * 100003 + nj
    for key in np.unique(shapes):
        ids = np.flatnonzero(shapes == key)
        a, b = int(ni[ids[0]]), int(nj[ids[0]])
        cols = lay.pair_start[ids][:, None] + np.arange(a * b)
        yield a, b, ids, cols


def _feature_means(coeffs: ExpansionCoefficients) -> np.ndarray:
    spec = coeffs.spec
    sums = np.add.reduceat(coeffs.order1, spec.offsets[:-1], axis=1)
    return sums / np.asarray(spec.category_counts)


def ising_gauge_fix(coeffs: ExpansionCoefficients) -> ExpansionCoefficients:
    """Return gauge-fixed coefficients; the input is left untouched."""
    if coeffs.max_order < 1:
        out = coeffs.copy()
        out.gauge_fixed = True
        return out
    out = coeffs.copy()
    spec = out.spec
    offsets = spec.offsets
    k = out.class_count

    if out.order2 is not None and out.layout.n_entries:
        order2 = out.order2
        if order2.dtype != np.float64:
            order2 = out.order2 = order2.astype(np.float64)
        lay = out.layout
        for ni, nj, ids, cols in _pair_groups(out):
            block = order2[:, cols].reshape(k, len(ids), ni, nj)
            row = block.mean(axis=3)
            col = block.mean(axis=2)
            tot = block.mean(axis=(2, 3))
            block = block - row[..., None] - col[..., None, :] + tot[..., None, None]
            order2[:, cols] = block.reshape(k, len(ids), ni * nj)
            ent_i = offsets[lay.pairs[ids, 0]][:, None] + np.arange(ni)
            ent_j = offsets[lay.pairs[ids, 1]][:, None] + np.arange(nj)
            np.add.at(out.order1, (slice(None), ent_i), row)
            np.add.at(out.order1, (slice(None), ent_j), col)
            out.order0 -= tot.sum(axis=1)

    means = _feature_means(out)
    out.order1 -= np.repeat(means, spec.category_counts, axis=1)
    out.order0 += means.sum(axis=1)
    out.gauge_fixed = True
    try:
        out.check_finite()
    except ExpansionError as exc:
        raise ExpansionError(f"gauge fixing produced non-finite values: {exc}") from None
    return out


def gauge_residuals(
    coeffs: ExpansionCoefficients,
    reference: ExpansionCoefficients | None = None,
    samples: np.ndarray | None = None,
) -> GaugeReport:
    """Largest category-mean residual of each order.

    With ``reference`` and ``samples`` the report also carries the largest
    change of the order-2 truncation between the two coefficient sets.
    """
    first = 0.0
    if coeffs.order1 is not None:
        first = float(np.max(np.abs(_feature_means(coeffs)), initial=0.0))
    second = 0.0
    if coeffs.order2 is not None and coeffs.layout.n_entries:
        k = coeffs.class_count
        for ni, nj, ids, cols in _pair_groups(coeffs):
            block = coeffs.order2[:, cols].astype(np.float64).reshape(k, len(ids), ni, nj)
            second = max(
                second,
                float(np.max(np.abs(block.mean(axis=3)))),
                float(np.max(np.abs(block.mean(axis=2)))),
            )
    deviation = None
    if reference is not None and samples is not None:
        order = min(coeffs.max_order, reference.max_order)
        deviation = float(
            np.max(
                np.abs(
                    truncated_logits_batch(coeffs, samples, order)
                    - truncated_logits_batch(reference, samples, order)
                )
            )
        )
    return GaugeReport(first, second, deviation)


def apply_constant_shift(coeffs: ExpansionCoefficients, shift: float) -> ExpansionCoefficients:
    """Move ``shift`` into the constant and remove ``shift / N`` from every
    first-order coefficient; valid-input values do not change."""
    if coeffs.order1 is None:
        raise ExpansionError("a constant shift needs first-order coefficients")
    out = coeffs.copy()
    out.order0 += shift
    out.order1 -= shift / coeffs.spec.feature_count
    out.gauge_fixed = False if shift else coeffs.gauge_fixed
    return out
