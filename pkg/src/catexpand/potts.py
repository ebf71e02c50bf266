"""Planted Potts models and Gibbs sampling of synthetic alignments."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .msa import AMINO_ALPHABET, WeightedAlignment


@dataclass
class PlantedPottsModel:
    """Fields ``h`` (L x q), pair blocks ``couplings[(i, j)]`` (q x q, i < j)
    and optional 3-body tensors ``triplets[(i, j, k)]`` (q x q x q, i < j < k).

    Inverse temperature is folded into the parameters.
    """

    L: int
    q: int
    h: np.ndarray | None = None
    couplings: dict = field(default_factory=dict)
    triplets: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.L < 1 or self.q < 2:
            raise ValueError("need L >= 1 and q >= 2")
        self.h = np.zeros((self.L, self.q)) if self.h is None else np.asarray(self.h, dtype=np.float64)
        if self.h.shape != (self.L, self.q):
            raise ValueError(f"fields must have shape ({self.L}, {self.q})")
        pairs = {}
        for (i, j), block in self.couplings.items():
            block = np.asarray(block, dtype=np.float64)
            if not 0 <= i < self.L or not 0 <= j < self.L or i == j:
                raise ValueError(f"invalid coupling sites ({i}, {j})")
            if block.shape != (self.q, self.q):
                raise ValueError(f"coupling ({i}, {j}) must be {self.q} x {self.q}")
            pairs[(i, j) if i < j else (j, i)] = block if i < j else block.T
        self.couplings = pairs
        trips = {}
        for sites, tensor in self.triplets.items():
            tensor = np.asarray(tensor, dtype=np.float64)
            if len(set(sites)) != 3 or not all(0 <= s < self.L for s in sites):
                raise ValueError(f"invalid triplet sites {sites}")
            if tensor.shape != (self.q,) * 3:
                raise ValueError(f"triplet {sites} must be {self.q} x {self.q} x {self.q}")
            order = np.argsort(sites)
            trips[tuple(int(s) for s in np.asarray(sites)[order])] = np.transpose(tensor, order)
        self.triplets = trips

    def coupling_tensor(self) -> np.ndarray:
        """Dense ``J[i, j, a, b]`` with ``J[j, i] = J[i, j].T`` and zero diagonal."""
        J = np.zeros((self.L, self.L, self.q, self.q))
        for (i, j), block in self.couplings.items():
            J[i, j] = block
            J[j, i] = block.T
        return J

    def triplet_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        keys = sorted(self.triplets)
        sites = np.array(keys, dtype=np.int64).reshape(-1, 3)
        tensors = np.array([self.triplets[k] for k in keys], dtype=np.float64).reshape(-1, self.q, self.q, self.q)
        return sites, tensors

    def energy(self, state) -> float:
        """Log-weight of one configuration up to the normaliser."""
        s = np.asarray(state)
        e = float(self.h[np.arange(self.L), s].sum())
        e += sum(float(b[s[i], s[j]]) for (i, j), b in self.couplings.items())
        e += sum(float(t[s[i], s[j], s[k]]) for (i, j, k), t in self.triplets.items())
        return e

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "q": self.q,
            "h": self.h.tolist(),
            "couplings": [{"i": i, "j": j, "J": b.tolist()} for (i, j), b in sorted(self.couplings.items())],
            "triplets": [{"sites": list(s), "J": t.tolist()} for s, t in sorted(self.triplets.items())],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PlantedPottsModel":
        try:
            return cls(
                int(payload["L"]),
                int(payload["q"]),
                payload.get("h"),
                {(int(c["i"]), int(c["j"])): c["J"] for c in payload.get("couplings", [])},
                {tuple(int(s) for s in t["sites"]): t["J"] for t in payload.get("triplets", [])},
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed Potts model description: {exc}") from None

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "PlantedPottsModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _centred(tensor: np.ndarray) -> np.ndarray:
    """Remove every lower-order component so all axis means vanish."""
    for axis in range(tensor.ndim):
        tensor = tensor - tensor.mean(axis=axis, keepdims=True)
    return tensor


def random_planted_model(
    L: int,
    q: int,
    n_pairs: int,
    strength: float = 1.0,
    seed: int = 0,
    triplet_strength: float | None = None,
) -> PlantedPottsModel:
    """Zero fields, ``n_pairs`` random couplings and optionally one 3-body term.

    Pair blocks and the 3-body tensor are zero-sum random tensors scaled to
    a largest entry of ``strength`` (``triplet_strength``).  The 3-body term
    sits on sites not used by any planted pair.
    """
    rng = np.random.default_rng(seed)
    all_pairs = [(i, j) for i in range(L) for j in range(i + 1, L)]
    if n_pairs > len(all_pairs):
        raise ValueError("more planted pairs than site pairs")
    chosen = sorted(all_pairs[k] for k in rng.choice(len(all_pairs), n_pairs, replace=False))
    couplings = {}
    for p in chosen:
        block = _centred(rng.standard_normal((q, q)))
        couplings[p] = strength * block / np.abs(block).max()
    triplets = {}
    if triplet_strength is not None:
        used = {s for p in chosen for s in p}
        free = [s for s in range(L) if s not in used]
        if len(free) < 3:
            raise ValueError("not enough uncoupled sites for a 3-body term")
        sites = tuple(sorted(int(s) for s in rng.choice(free, 3, replace=False)))
        tensor = _centred(rng.standard_normal((q, q, q)))
        triplets[sites] = triplet_strength * tensor / np.abs(tensor).max()
    return PlantedPottsModel(L, q, None, couplings, triplets)


def synth_potts_msa(
    model: PlantedPottsModel,
    M: int,
    burn_in: int = 500,
    thin: int = 10,
    seed: int = 0,
    backend: str | None = None,
) -> WeightedAlignment:
    """Sequential-scan Gibbs samples; identical seeds give identical alignments."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if burn_in < 0 or thin < 1:
        raise ValueError("need burn_in >= 0 and thin >= 1")
    rng = np.random.default_rng(seed)
    state = rng.integers(0, model.q, model.L).astype(np.int64)
    uniforms = rng.random((burn_in + M * thin, model.L))
    sites, tensors = model.triplet_arrays()
    out = np.zeros((M, model.L), dtype=np.int64)
    kernels.get_backend(backend).gibbs_run(
        state, np.ascontiguousarray(model.h), model.coupling_tensor(), sites, tensors,
        uniforms, burn_in, thin, out,
    )
    alphabet = AMINO_ALPHABET if model.q <= len(AMINO_ALPHABET) else None
    return WeightedAlignment(out, model.q, None, [f"sample{m}" for m in range(M)],
                             alphabet[: model.q] if alphabet else None)
