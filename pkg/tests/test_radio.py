import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qoslb.radio import (DEFAULT_BANDS, MCS_UNSUPPORTED, BandConfig, ChannelState,
                         instantaneous_rate, mcs_index, mcs_thresholds_db, noise_per_prb_mw,
                         path_loss_db, rsrp_dbm, sinr_prb, spectral_efficiency,
                         wideband_sinr_db)

B2G = BandConfig("x", 2.0e9, 10e6)
N1 = BandConfig("n1", 2.14e9, 5e6)


class TestPathLoss:
    def test_reference_distance_at_2ghz(self):
        assert path_loss_db(B2G, 1000.0) == pytest.approx(128.1, abs=1e-12)

    def test_frequency_correction(self):
        # 128.1 + 20 log10(1.07), evaluated independently
        assert path_loss_db(N1, 1000.0) == pytest.approx(128.68768, abs=1e-5)

    def test_clamp_below_10m(self):
        assert path_loss_db(B2G, 5.0) == path_loss_db(B2G, 10.0)
        assert path_loss_db(B2G, 0.0) == path_loss_db(B2G, 10.0)

    @given(st.floats(0, 5000), st.floats(0, 5000))
    def test_monotone_in_distance(self, a, b):
        lo, hi = sorted((a, b))
        assert path_loss_db(B2G, lo) <= path_loss_db(B2G, hi)

    def test_vectorized(self):
        d = np.array([10.0, 100.0, 1000.0])
        assert np.allclose(path_loss_db(B2G, d), [path_loss_db(B2G, x) for x in d])


class TestRsrp:
    def test_fifty_prb_example(self):
        assert B2G.num_prbs == 50
        # 44 - 128.1 - 10 log10(600)
        assert rsrp_dbm(44.0, B2G, 1000.0) == pytest.approx(-111.881512, abs=1e-6)

    def test_shadowing_is_linear_in_db(self):
        assert rsrp_dbm(44, N1, 300, 8.0) == pytest.approx(rsrp_dbm(44, N1, 300) - 8.0, abs=1e-12)

    def test_symmetric_cells(self):
        assert rsrp_dbm(44, N1, 321.0) == rsrp_dbm(44, BandConfig("n1b", 2.14e9, 5e6), 321.0)


class TestBands:
    def test_default_prb_counts(self):
        assert [b.num_prbs for b in DEFAULT_BANDS] == [50, 25, 25]

    def test_rejects_bad_band(self):
        with pytest.raises(ValueError):
            BandConfig("bad", -1.0, 5e6)


class TestSinr:
    def test_noise_limited(self):
        n = noise_per_prb_mw(B2G)
        assert sinr_prb(1e-9, n) == pytest.approx(1e-9 / n, rel=1e-12)

    def test_hand_formula_noise(self):
        # -174 dBm/Hz + 7 dB over 180 kHz
        n_mw = 10 ** ((-174 + 7) / 10) * 180e3
        assert noise_per_prb_mw(B2G) == pytest.approx(n_mw, rel=1e-12)

    def test_symmetric_interference(self):
        g = sinr_prb(1.0, 1e-15, [1.0], [True])
        assert 10 * math.log10(g) == pytest.approx(0.0, abs=1e-9)

    def test_unoccupied_interferer_ignored(self):
        assert sinr_prb(1.0, 1e-3, [5.0], [False]) == pytest.approx(1e3)

    @given(st.floats(0.1, 10.0))
    def test_gain_scaling_invariance(self, c):
        a = sinr_prb(2.0, 0.0, [1.0, 3.0], [True, True], 0.7, [0.4, 1.3])
        b = sinr_prb(2.0, 0.0, [1.0, 3.0], [True, True], 0.7 * c, [0.4 * c, 1.3 * c])
        assert b == pytest.approx(a, rel=1e-12)


class TestSpectralEfficiency:
    def test_examples(self):
        assert spectral_efficiency(0.0) == 0.0
        assert spectral_efficiency(3.0) == pytest.approx(1.6)
        assert spectral_efficiency(1e6) == 7.4

    def test_below_mcs0_is_zero(self):
        assert spectral_efficiency(10 ** (-6.01 / 10)) == 0.0
        assert spectral_efficiency(10 ** (-6.0 / 10)) > 0.0

    @settings(max_examples=300)
    @given(st.lists(st.floats(0, 1e7), min_size=2, max_size=2))
    def test_monotone(self, pair):
        lo, hi = sorted(pair)
        assert spectral_efficiency(lo) <= spectral_efficiency(hi)

    def test_monotone_bulk(self):
        rng = np.random.default_rng(0)
        g = 10 ** rng.uniform(-2, 4, size=(10_000, 2))
        g.sort(axis=1)
        se = spectral_efficiency(g)
        assert np.all(se[:, 0] <= se[:, 1])


class TestMcs:
    def test_table(self):
        t = mcs_thresholds_db()
        assert len(t) == 29 and t[0] == -6.0
        assert all(b > a for a, b in zip(t, t[1:]))

    def test_examples(self):
        assert mcs_index(-10.0) == MCS_UNSUPPORTED
        assert mcs_index(-6.0) == 0
        assert mcs_index(30.0) == 28

    def test_wideband_weights_by_load(self):
        noise = 1e-3
        got = wideband_sinr_db(1.0, [0.5, 0.5], [1.0, 0.0], noise)
        assert got == pytest.approx(10 * math.log10(1.0 / (0.5 + noise)))


class TestRate:
    def test_examples(self):
        assert instantaneous_rate([2.0], 15e3) == pytest.approx(360e3)
        assert instantaneous_rate([], 15e3) == 0.0
        assert instantaneous_rate(np.full(50, 7.4), 15e3) == pytest.approx(66.6e6)

    @given(st.lists(st.floats(0, 7.4), max_size=30), st.integers(0, 30))
    def test_additive(self, se, cut):
        cut = min(cut, len(se))
        whole = instantaneous_rate(se, 15e3)
        parts = instantaneous_rate(se[:cut], 15e3) + instantaneous_rate(se[cut:], 15e3)
        assert whole == pytest.approx(parts, rel=1e-12, abs=1e-6)


class TestChannel:
    def _make(self, seed):
        shadow = np.zeros((4, 2))
        return ChannelState(4, 2, DEFAULT_BANDS, shadow, np.random.default_rng(seed))

    def test_deterministic(self):
        a, b = self._make(3), self._make(3)
        for _ in range(5):
            a.advance()
            b.advance()
        for ga, gb in zip(a.gains, b.gains):
            assert np.array_equal(ga, gb)

    def test_unit_mean_gains(self):
        ch = self._make(1)
        acc = []
        for _ in range(400):
            ch.advance()
            acc.append(ch.gains[0].mean())
        assert np.mean(acc) == pytest.approx(1.0, abs=0.1)

    def test_shapes(self):
        ch = self._make(0)
        assert [g.shape for g in ch.gains] == [(4, 2, 50), (4, 2, 25), (4, 2, 25)]
