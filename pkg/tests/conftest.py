import numpy as np
import pytest

from mfglobal.data import EvalSplit, ObservationSet
from mfglobal.kernels import SvdTriplet
from mfglobal.operators import FactorPair


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def random_triplet(rng, m, n, k, scale=1.0) -> SvdTriplet:
    qu, _ = np.linalg.qr(rng.standard_normal((m, k)))
    qv, _ = np.linalg.qr(rng.standard_normal((n, k)))
    sigma = np.sort(scale * (0.1 + rng.random(k)))[::-1]
    return SvdTriplet(qu, sigma, qv)


def random_factors(rng, m, n, k, scale=1.0) -> FactorPair:
    return FactorPair(
        scale * rng.standard_normal((m, k)), scale * rng.standard_normal((n, k))
    )


def random_obs(rng, m, n, frac=0.4, scale=1.0) -> ObservationSet:
    mask = rng.random((m, n)) < frac
    mask[0, 0] = True  # keep the set nonempty
    rows, cols = np.nonzero(mask)
    vals = scale * rng.standard_normal(rows.size)
    return ObservationSet.from_coo(m, n, rows, cols, vals)


def planted_obs(
    seed, m, n, r, frac, noise, with_split=False
) -> ObservationSet | tuple[ObservationSet, EvalSplit]:
    """Planted low-rank matrix observed on a random mask with Gaussian noise."""
    rng = rng_for(seed)
    full = rng.standard_normal((m, r)) @ rng.standard_normal((n, r)).T
    mask = rng.random((m, n)) < frac
    rows, cols = np.nonzero(mask)
    vals = full[rows, cols] + noise * rng.standard_normal(rows.size)
    obs = ObservationSet.from_coo(m, n, rows, cols, vals)
    if not with_split:
        return obs
    test_mask = ~mask & (rng.random((m, n)) < 0.05)
    trows, tcols = np.nonzero(test_mask)
    tvals = full[trows, tcols] + noise * rng.standard_normal(trows.size)
    split = EvalSplit(m, n, trows, tcols, tvals)
    return obs, split


@pytest.fixture
def rng():
    return rng_for(0)
