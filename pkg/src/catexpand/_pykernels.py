"""Pure numpy implementations of the hot kernels.

Signatures mirror ``_ckernels.pyx`` exactly; ``catexpand.kernels`` picks one
of the two at import time.
"""

from __future__ import annotations

import numpy as np

ACT_TANH = 0
ACT_SQUARE = 1


def _f(u, act):
    if act == ACT_TANH:
        return np.tanh(u)
    return u * u


def pair_coefficients(W1T, b1, W2, counts, pair_row_start, act, feature_lo, feature_hi, out):
    """Second-order logit coefficients for the pairs ``(i, j > i)`` with
    ``feature_lo <= i < feature_hi``, written into ``out`` of shape ``(K, E)``.

    ``pair_row_start[i]`` is the column of ``out`` where the pair ``(i, i+1)``
    starts; pairs of one row are contiguous and ordered by ``j``.
    """
    counts = np.asarray(counts, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    n_feat = counts.shape[0]
    k = W2.shape[0]
    f0 = _f(b1, act)
    fcol = _f(W1T + b1, act)
    for i in range(feature_lo, min(feature_hi, n_feat - 1)):
        ni = counts[i]
        a0, a1 = offsets[i], offsets[i + 1]
        rest = slice(a1, offsets[-1])
        g = _f((W1T[a0:a1] + b1)[:, None, :] + W1T[None, rest], act)
        g -= fcol[a0:a1, None, :]
        g -= fcol[None, rest]
        g += f0
        coef = g @ W2.T  # (ni, D_rest, K)
        col = pair_row_start[i]
        rest_counts = counts[i + 1 :]
        if np.all(rest_counts == rest_counts[0]):
            nj = rest_counts[0]
            block = coef.reshape(ni, rest_counts.shape[0], nj, k).transpose(3, 1, 0, 2)
            out[:, col : col + block[0].size] = block.reshape(k, -1)
        else:
            b = 0
            for nj in rest_counts:
                block = coef[:, b : b + nj, :].transpose(2, 0, 1).reshape(k, -1)
                out[:, col : col + ni * nj] = block
                col += ni * nj
                b += nj


def gibbs_run(state, h, J, tri_sites, tri_J, uniforms, burn_in, thin, out):
    """Sequential-scan Gibbs sampler for a Potts model with optional 3-body terms.

    Sweep ``s`` uses ``uniforms[s, i]`` to resample site ``i`` by inverse CDF.
    After ``burn_in`` sweeps, the state is recorded every ``thin`` sweeps
    into the rows of ``out``. ``state`` is updated in place.
    """
    L, q = h.shape
    sites = np.arange(L)
    n_tri = tri_sites.shape[0]
    sweep = 0
    total = burn_in + out.shape[0] * thin
    row = 0
    while sweep < total:
        for i in range(L):
            e = h[i] + J[i, sites, :, state].sum(axis=0)
            for t in range(n_tri):
                s0, s1, s2 = tri_sites[t]
                if s0 == i:
                    e = e + tri_J[t, :, state[s1], state[s2]]
                elif s1 == i:
                    e = e + tri_J[t, state[s0], :, state[s2]]
                elif s2 == i:
                    e = e + tri_J[t, state[s0], state[s1], :]
            p = np.exp(e - e.max())
            cdf = np.cumsum(p)
            a = int(np.searchsorted(cdf, uniforms[sweep, i] * cdf[-1], side="right"))
            state[i] = min(a, q - 1)
        sweep += 1
        if sweep > burn_in and (sweep - burn_in) % thin == 0:
            out[row] = state
            row += 1


def match_cutoff(L, threshold):
    """Smallest match count ``c`` with ``c / L > threshold``."""
    for c in range(L + 1):
        if c / L > threshold:
            return c
    return L + 1


def identity_counts(seqs, threshold, block=512):
    """For each sequence, the number of sequences (itself included) whose
    fraction of identical positions exceeds ``threshold``."""
    seqs = np.asarray(seqs)
    m, L = seqs.shape
    q = int(seqs.max()) + 1 if seqs.size else 1
    onehot = np.zeros((m, L * q), dtype=np.float32)
    onehot[np.arange(m)[:, None], np.arange(L) * q + seqs] = 1.0
    cutoff = match_cutoff(L, threshold)
    counts = np.zeros(m, dtype=np.int64)
    for lo in range(0, m, block):
        matches = np.rint(onehot[lo : lo + block] @ onehot.T).astype(np.int64)
        counts[lo : lo + block] = np.count_nonzero(matches >= cutoff, axis=1)
    return counts
