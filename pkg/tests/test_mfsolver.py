import numpy as np
import pytest

from mfglobal.data import loss_quad, residual_on_omega, residual_on_omega_svd
from mfglobal.kernels import SvdTriplet
from mfglobal.mfsolver import (
    MfPhaseError,
    bcd_epoch,
    factors_from_svd,
    mf_objective,
    mf_phase,
    svd_from_factors,
)
from mfglobal.operators import FactorPair

from conftest import random_factors, random_obs, random_triplet, rng_for


def _dense_bcd_epoch(obs, wf, lam):
    """Independent dense reference: row-wise normal equations on full masks."""
    a = np.zeros((obs.m, obs.n))
    mask = np.zeros((obs.m, obs.n), dtype=bool)
    a[obs.rows, obs.cols] = obs.vals
    mask[obs.rows, obs.cols] = True
    w = wf.w.copy()
    h = wf.h.copy()
    k = wf.k
    for i in range(obs.m):
        hj = h[mask[i]]
        m_i = lam * np.eye(k) + 2.0 * hj.T @ hj
        b_i = 2.0 * hj.T @ a[i, mask[i]]
        w[i] = np.linalg.solve(m_i, b_i)
    for j in range(obs.n):
        wi = w[mask[:, j]]
        m_j = lam * np.eye(k) + 2.0 * wi.T @ wi
        b_j = 2.0 * wi.T @ a[mask[:, j], j]
        h[j] = np.linalg.solve(m_j, b_j)
    return FactorPair(w, h)


class TestFactorsFromSvd:
    def test_one_by_one(self):
        x = SvdTriplet(np.array([[1.0]]), np.array([4.0]), np.array([[1.0]]))
        wf = factors_from_svd(x)
        assert np.allclose(wf.w, [[2.0]]) and np.allclose(wf.h, [[2.0]])

    @pytest.mark.parametrize("seed", range(4))
    def test_penalty_equals_nuclear_norm(self, seed):
        rng = rng_for(seed)
        x = random_triplet(rng, 15, 20, 6, scale=3.0)
        wf = factors_from_svd(x)
        nuc = x.nuclear_norm()
        assert abs(0.5 * wf.frob_sq() - nuc) <= 1e-10 * nuc

    def test_reconstruction(self, rng):
        x = random_triplet(rng, 12, 14, 5)
        wf = factors_from_svd(x)
        err = np.linalg.norm(wf.dense() - x.dense())
        assert err <= 1e-10 * np.linalg.norm(x.dense())

    def test_zero_rank(self):
        wf = factors_from_svd(SvdTriplet.zero(4, 5))
        assert wf.k == 0


class TestSvdFromFactors:
    def test_round_trip(self, rng):
        wf = random_factors(rng, 10, 13, 4)
        x = svd_from_factors(wf)
        x.check()
        assert np.linalg.norm(x.dense() - wf.dense()) <= 1e-10 * np.linalg.norm(wf.dense())

    def test_zero_factors(self):
        x = svd_from_factors(FactorPair(np.zeros((5, 2)), np.zeros((6, 2))))
        assert x.rank == 0


class TestMfObjective:
    def test_zero_factors(self, rng):
        obs = random_obs(rng, 7, 9)
        wf = FactorPair(np.zeros((7, 2)), np.zeros((9, 2)))
        assert abs(mf_objective(obs, wf, 1.5) - float(obs.vals @ obs.vals)) < 1e-12

    def test_lemma_factors_match_lifted_objective(self, rng):
        obs = random_obs(rng, 10, 12)
        x = random_triplet(rng, 10, 12, 3)
        lam = 2.0
        lifted = loss_quad(residual_on_omega_svd(obs, x)) + lam * x.nuclear_norm()
        got = mf_objective(obs, factors_from_svd(x), lam)
        assert abs(got - lifted) <= 1e-10 * max(1.0, lifted)

    def test_random_matches_dense(self):
        rng = rng_for(21)
        obs = random_obs(rng, 10, 12)
        wf = random_factors(rng, 10, 12, 3)
        a = np.zeros((10, 12))
        mask = np.zeros((10, 12), dtype=bool)
        a[obs.rows, obs.cols] = obs.vals
        mask[obs.rows, obs.cols] = True
        lam = 0.7
        dense = float(np.sum((np.where(mask, wf.dense() - a, 0.0)) ** 2))
        dense += 0.5 * lam * wf.frob_sq()
        assert abs(mf_objective(obs, wf, lam) - dense) <= 1e-10 * max(1.0, dense)


class TestBcdEpoch:
    def test_scalar_normal_equation(self):
        from mfglobal.data import ObservationSet

        a = 3.0
        lam = 0.5
        obs = ObservationSet.from_coo(1, 1, [0], [0], [a])
        wf = FactorPair(np.array([[10.0]]), np.array([[1.0]]))
        out = bcd_epoch(obs, wf, lam)
        assert abs(out.w[0, 0] - 2 * a / (lam + 2)) < 1e-12

    def test_fixed_point_unchanged(self):
        rng = rng_for(31)
        obs = random_obs(rng, 8, 10)
        wf = random_factors(rng, 8, 10, 2)
        for _ in range(200):
            wf = bcd_epoch(obs, wf, 1.0)
        again = bcd_epoch(obs, wf, 1.0)
        assert np.max(np.abs(again.w - wf.w)) < 1e-12
        assert np.max(np.abs(again.h - wf.h)) < 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_dense_reference(self, seed):
        rng = rng_for(40 + seed)
        obs = random_obs(rng, 10, 12)
        wf = random_factors(rng, 10, 12, 3)
        lam = 0.8
        ours = bcd_epoch(obs, wf, lam)
        ref = _dense_bcd_epoch(obs, wf, lam)
        assert np.max(np.abs(ours.w - ref.w)) < 1e-10
        assert np.max(np.abs(ours.h - ref.h)) < 1e-10
        assert mf_objective(obs, ours, lam) <= mf_objective(obs, wf, lam) + 1e-12

    def test_requires_positive_lam(self, rng):
        obs = random_obs(rng, 5, 6)
        with pytest.raises(ValueError):
            bcd_epoch(obs, random_factors(rng, 5, 6, 2), 0.0)

    def test_empty_rows_go_to_zero(self):
        from mfglobal.data import ObservationSet

        obs = ObservationSet.from_coo(3, 4, [0, 0], [1, 3], [2.0, -1.0])
        rng = rng_for(50)
        wf = random_factors(rng, 3, 4, 2)
        out = bcd_epoch(obs, wf, 1.0)
        assert np.allclose(out.w[1], 0.0) and np.allclose(out.w[2], 0.0)

    def test_stationarity_of_converged_point(self):
        # at a BCD fixed point the full gradient blocks vanish
        rng = rng_for(60)
        obs = random_obs(rng, 9, 11)
        wf = random_factors(rng, 9, 11, 2)
        lam = 1.2
        for _ in range(300):
            wf = bcd_epoch(obs, wf, lam)
        res = residual_on_omega(obs, wf)
        grad_w = 2.0 * (res.csr @ wf.h) + lam * wf.w
        grad_h = 2.0 * (res.csr_t @ wf.w) + lam * wf.h
        assert np.max(np.linalg.norm(grad_w, axis=1)) < 1e-8
        assert np.max(np.linalg.norm(grad_h, axis=1)) < 1e-8


class TestMfPhase:
    def test_zero_epochs_identity(self, rng):
        obs = random_obs(rng, 6, 8)
        wf = random_factors(rng, 6, 8, 2)
        assert mf_phase(obs, wf, 1.0, 0) is wf

    def test_monotone_three_epochs(self):
        rng = rng_for(70)
        obs = random_obs(rng, 12, 14)
        wf = random_factors(rng, 12, 14, 3)
        lam = 0.9
        objs = [mf_objective(obs, wf, lam)]
        cur = wf
        for _ in range(3):
            cur = mf_phase(obs, cur, lam, 1)
            objs.append(mf_objective(obs, cur, lam))
        assert all(b <= a + 1e-9 * (1 + abs(a)) for a, b in zip(objs, objs[1:]))
