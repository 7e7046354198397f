import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcmnet import tensorgrad as tg
from pcmnet.posenc import pe2d
from pcmnet.ppcm import (PpcmParams, check_validity, ppcm_forward, proposal_sampling_matrix,
                         row_group_masks, sample_proposal_features, validity_mask)
from pcmnet.verify import check_ppcm_gradients, ppcm_oracle, sampling_oracle


def _setup(seed, T, C, D):
    rng = np.random.default_rng(seed)
    valid = validity_mask(T, D)
    P = rng.normal(size=(T, T, C)) * valid[:, :, None]
    return P, valid, PpcmParams.init(rng, C), pe2d(T, C)


class TestValidity:
    def test_definition(self):
        v = validity_mask(6, 3)
        for i in range(6):
            for j in range(6):
                assert v[i, j] == (0 < j - i <= 3)

    def test_default_cap_is_t(self):
        np.testing.assert_array_equal(validity_mask(5), np.triu(np.ones((5, 5), bool), 1))

    def test_rejects_lower_triangle(self):
        bad = validity_mask(4, 4).copy()
        bad[2, 1] = True
        with pytest.raises(ValueError):
            check_validity(bad)
        with pytest.raises(ValueError):
            check_validity(np.eye(3, dtype=bool))


class TestSampling:
    def test_constant_input(self):
        T = 7
        c = np.array([0.5, -2.0, 3.0])
        P = sample_proposal_features(np.tile(c, (T, 1)), validity_mask(T, 5)).data
        v = validity_mask(T, 5)
        np.testing.assert_allclose(P[v], np.tile(c, (v.sum(), 1)), atol=1e-14)
        assert np.all(P[~v] == 0.0)

    def test_two_samples_is_endpoint_mean(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(5, 3))
        P = sample_proposal_features(X, validity_mask(5), samples=2).data
        for i in range(4):
            np.testing.assert_allclose(P[i, i + 1], (X[i] + X[i + 1]) / 2, atol=1e-15)

    def test_many_samples_tend_to_midpoint(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(4, 2))
        P = sample_proposal_features(X, validity_mask(4), samples=4001).data
        np.testing.assert_allclose(P[1, 2], (X[1] + X[2]) / 2, atol=1e-12)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(6, 2))
        v = validity_mask(6)
        P = sample_proposal_features(X, v, samples=8).data
        for i, j in zip(*np.nonzero(v)):
            np.testing.assert_allclose(P[i, j], sampling_oracle(X, i, j, 8), atol=1e-12, rtol=0)

    def test_projection_keeps_invalid_zero(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(6, 4))
        v = validity_mask(6, 3)
        P = sample_proposal_features(X, v, proj=rng.normal(size=(4, 4))).data
        assert np.all(P[~v] == 0.0)

    def test_matrix_rows_are_averages(self):
        A = proposal_sampling_matrix(validity_mask(6, 4), 5)
        v = validity_mask(6, 4).reshape(-1)
        np.testing.assert_allclose(A[v].sum(axis=1), 1.0, atol=1e-14)
        assert np.all(A[~v] == 0.0)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            proposal_sampling_matrix(validity_mask(4), 1)


class TestRowMasks:
    def test_groups(self):
        v = validity_mask(5, 3)
        earlier, later = row_group_masks(v)
        for i in range(5):
            for j in range(5):
                for k in range(5):
                    ok = v[i, j] and v[i, k]
                    assert earlier[i, j, k] == (ok and k < j)
                    assert later[i, j, k] == (ok and k > j)


class TestPpcmForward:
    @pytest.mark.parametrize("seed", range(10))
    def test_loop_oracle(self, seed):
        P, v, p, pe = _setup(seed, 6, 8, 6)
        np.testing.assert_allclose(ppcm_forward(P, pe, v, p).data, ppcm_oracle(P, pe, v, p),
                                   atol=1e-10, rtol=0)

    @pytest.mark.parametrize("D", [2, 5, 8])
    def test_loop_oracle_capped(self, D):
        P, v, p, pe = _setup(D, 8, 8, D)
        np.testing.assert_allclose(ppcm_forward(P, pe, v, p).data, ppcm_oracle(P, pe, v, p),
                                   atol=1e-10, rtol=0)

    def test_corner_cell_empty_groups(self):
        T = 6
        P, v, p, pe = _setup(0, T, 8, T)
        _, attn = ppcm_forward(P, pe, v, p, return_attention=True)
        # (0, T-1): nothing starts earlier and nothing ends later
        assert np.all(attn["ES"][0, T - 1] == 0.0)
        assert np.all(attn["LE"][0, T - 1] == 0.0)
        assert attn["EE"][0, T - 1].sum() == pytest.approx(1.0)
        assert attn["LS"][0, T - 1].sum() == pytest.approx(1.0)

    def test_singleton_groups(self):
        P, v, p, pe = _setup(1, 3, 4, 3)
        _, attn = ppcm_forward(P, pe, v, p, return_attention=True)
        # EE of (0,2) is {(0,1)}, LS of (0,2) is {(1,2)}
        np.testing.assert_array_equal(attn["EE"][0, 2], [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(attn["LS"][0, 2], [0.0, 1.0, 0.0])

    def test_group_weights_are_distributions(self):
        P, v, p, pe = _setup(2, 7, 8, 4)
        _, attn = ppcm_forward(P, pe, v, p, return_attention=True)
        for name in ("EE", "LE", "ES", "LS"):
            w = attn[name]
            sums = w.sum(axis=-1)
            assert np.all((np.abs(sums - 1.0) < 1e-12) | (sums == 0.0))
            assert np.all(w >= 0)

    def test_invalid_cells_do_not_leak(self):
        P, v, p, pe = _setup(3, 7, 8, 3)
        out = ppcm_forward(P, pe, v, p).data
        P2 = P.copy()
        P2[~v] = np.random.default_rng(9).normal(size=((~v).sum(), 8))
        out2 = ppcm_forward(P2, pe, v, p).data
        assert np.array_equal(out[v], out2[v])
        assert np.all(out2[~v] == 0.0)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 7), st.integers(1, 7), st.integers(0, 2**16))
    def test_oracle_property(self, T, D, seed):
        D = min(D, T)
        P, v, p, pe = _setup(seed, T, 4, D)
        np.testing.assert_allclose(ppcm_forward(P, pe, v, p).data, ppcm_oracle(P, pe, v, p),
                                   atol=1e-10, rtol=0)

    def test_shape_mismatch(self):
        P, v, p, pe = _setup(0, 5, 8, 5)
        with pytest.raises(ValueError):
            ppcm_forward(P, pe[:4, :4], v, p)
        with pytest.raises(ValueError):
            ppcm_forward(P, pe, validity_mask(4), p)

    def test_gradient_check(self):
        assert check_ppcm_gradients() < 1e-5

    def test_gradient_through_sampling(self):
        rng = np.random.default_rng(4)
        X = tg.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        W = tg.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        v = validity_mask(5, 3)
        err = tg.check_gradients(lambda: tg.tsum(tg.sigmoid(sample_proposal_features(X, v, W, 6))),
                                 {"X": X, "W": W}, fd_dtype=np.longdouble)
        assert err < 1e-5
