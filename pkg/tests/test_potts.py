import itertools

import numpy as np
import pytest

from catexpand import kernels
from catexpand.potts import PlantedPottsModel, random_planted_model, synth_potts_msa


def test_zero_couplings_give_uniform_marginals():
    model = PlantedPottsModel(4, 3)
    msa = synth_potts_msa(model, 3000, burn_in=10, thin=2, seed=0)
    freq = np.stack([np.bincount(col, minlength=3) / 3000 for col in msa.sequences.T])
    sigma = np.sqrt((1 / 3) * (2 / 3) / 3000)
    assert np.all(np.abs(freq - 1 / 3) < 4 * sigma)


def test_same_seed_same_alignment():
    model = random_planted_model(6, 3, 3, seed=1)
    a = synth_potts_msa(model, 50, burn_in=20, thin=2, seed=5)
    b = synth_potts_msa(model, 50, burn_in=20, thin=2, seed=5)
    c = synth_potts_msa(model, 50, burn_in=20, thin=2, seed=6)
    assert np.array_equal(a.sequences, b.sequences)
    assert not np.array_equal(a.sequences, c.sequences)
    assert a.alphabet == "ACD"


def test_json_round_trip(tmp_path):
    model = random_planted_model(7, 3, 2, seed=2, triplet_strength=1.5)
    back = PlantedPottsModel.load(model.save(tmp_path / "m.json"))
    assert back.couplings.keys() == model.couplings.keys()
    assert back.triplets.keys() == model.triplets.keys()
    state = np.random.default_rng(0).integers(0, 3, 7)
    assert back.energy(state) == pytest.approx(model.energy(state), abs=1e-12)


def test_canonical_orientation():
    block = np.arange(6.0).reshape(2, 3)
    model = PlantedPottsModel(3, 3, None, {(2, 0): np.arange(9.0).reshape(3, 3)},
                              {(2, 0, 1): np.arange(27.0).reshape(3, 3, 3)})
    assert list(model.couplings) == [(0, 2)]
    J = model.coupling_tensor()
    assert np.array_equal(J[0, 2], J[2, 0].T)
    s = np.array([1, 2, 0])
    # triplet value at sites (2, 0, 1) with original axis order
    assert model.energy(s) == pytest.approx(np.arange(9.0).reshape(3, 3)[0, 1] + np.arange(27.0).reshape(3, 3, 3)[0, 1, 2])
    with pytest.raises(ValueError):
        PlantedPottsModel(3, 3, None, {(0, 1): block})


def test_validation_errors():
    with pytest.raises(ValueError):
        PlantedPottsModel(0, 3)
    with pytest.raises(ValueError):
        PlantedPottsModel(3, 2, None, {(1, 1): np.zeros((2, 2))})
    with pytest.raises(ValueError):
        PlantedPottsModel(3, 2, None, {}, {(0, 0, 1): np.zeros((2, 2, 2))})
    with pytest.raises(ValueError, match="malformed"):
        PlantedPottsModel.from_dict({"q": 2})
    with pytest.raises(ValueError):
        random_planted_model(3, 2, 4)
    with pytest.raises(ValueError):
        random_planted_model(4, 2, 2, triplet_strength=1.0)
    with pytest.raises(ValueError):
        synth_potts_msa(PlantedPottsModel(2, 2), 0)


def test_planted_blocks_are_centred():
    model = random_planted_model(8, 4, 3, strength=1.0, seed=3, triplet_strength=2.0)
    for block in model.couplings.values():
        assert np.allclose(block.mean(0), 0) and np.allclose(block.mean(1), 0)
        assert np.abs(block).max() == pytest.approx(1.0)
    (sites, tensor), = model.triplets.items()
    assert not set(sites) & {s for p in model.couplings for s in p}
    assert np.abs(tensor).max() == pytest.approx(2.0)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_samples_follow_boltzmann_distribution(backend):
    rng = np.random.default_rng(4)
    model = PlantedPottsModel(3, 2, rng.normal(size=(3, 2)) * 0.5,
                              {(0, 1): rng.normal(size=(2, 2)), (1, 2): rng.normal(size=(2, 2))},
                              {(0, 1, 2): rng.normal(size=(2, 2, 2))})
    states = list(itertools.product(range(2), repeat=3))
    p = np.exp([model.energy(s) for s in states])
    p /= p.sum()
    M = 20000
    msa = synth_potts_msa(model, M, burn_in=50, thin=3, seed=1, backend=backend)
    codes = msa.sequences @ np.array([4, 2, 1])
    freq = np.bincount(codes, minlength=8) / M
    # thinned chains are nearly independent; allow a generous 5 sigma band
    assert np.all(np.abs(freq - p) < 5 * np.sqrt(p * (1 - p) / M) + 2e-3)
