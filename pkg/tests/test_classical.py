import math

import numpy as np
import pytest

from cvqkdsim.classical import (
    PRBS15_PERIOD,
    Prbs15State,
    prbs15_next,
    prbs15_sequence,
    simulate_ook_link,
)


class TestPrbs15:
    def test_period_is_exactly_32767(self):
        state = Prbs15State(0x0001)
        seen = state.register
        for steps in range(1, PRBS15_PERIOD + 1):
            _, state = prbs15_next(state)
            if state.register == seen:
                break
        assert steps == PRBS15_PERIOD == 32767

    def test_ones_count_over_one_period(self):
        bits = prbs15_sequence(PRBS15_PERIOD)
        assert int(np.sum(bits)) == 16384

    def test_autocorrelation_exactly_minus_one(self):
        bits = prbs15_sequence(PRBS15_PERIOD).astype(np.int64)
        pm = 2 * bits - 1
        for lag in (1, 2, 100, 16384, PRBS15_PERIOD - 1):
            corr = int(np.sum(pm * np.roll(pm, lag)))
            assert corr == -1

    def test_zero_lag_autocorrelation(self):
        pm = 2 * prbs15_sequence(PRBS15_PERIOD).astype(np.int64) - 1
        assert int(np.sum(pm * pm)) == PRBS15_PERIOD

    def test_sequence_repeats_after_period(self):
        bits = prbs15_sequence(2 * PRBS15_PERIOD)
        assert np.array_equal(bits[:PRBS15_PERIOD], bits[PRBS15_PERIOD:])

    def test_all_seeds_reachable_nonzero(self):
        with pytest.raises(ValueError):
            Prbs15State(0)
        with pytest.raises(ValueError):
            Prbs15State(1 << 15)

    def test_seed_shifts_phase_only(self):
        a = prbs15_sequence(PRBS15_PERIOD, seed=0x0001)
        b = prbs15_sequence(PRBS15_PERIOD, seed=0x4321)
        assert int(np.sum(a)) == int(np.sum(b))
        # b is a cyclic rotation of a
        joined = np.concatenate([a, a]).tobytes()
        assert joined.find(b.tobytes()) >= 0


class TestEye:
    def test_noiseless_eye_fully_open(self):
        bits = prbs15_sequence(1000)
        rep = simulate_ook_link(bits, math.inf, 8, np.random.default_rng(0))
        assert rep.eye_opening == 1.0
        assert rep.noise_sigma == 0.0
        assert rep.level_one_mean == pytest.approx(1.0)
        assert rep.level_zero_mean == pytest.approx(0.0)

    def test_sigma_six_closes_the_eye(self):
        # sigma = swing / 6 puts the opening exactly at the 0 boundary
        snr_db = 20.0 * math.log10(6.0)
        bits = prbs15_sequence(20_000)
        rep = simulate_ook_link(bits, snr_db, 8, np.random.default_rng(1))
        assert rep.eye_opening == pytest.approx(0.0, abs=0.02)

    def test_five_percent_sigma_gives_seventy_percent(self):
        # sigma = 0.05 * swing -> opening (1 - 6*0.05) = 0.7
        snr_db = 20.0 * math.log10(1.0 / 0.05)
        bits = prbs15_sequence(50_000)
        rep = simulate_ook_link(bits, snr_db, 8, np.random.default_rng(2))
        assert rep.eye_opening == pytest.approx(0.7, abs=0.01)

    def test_report_independent_of_cvqkd_flag(self):
        bits = prbs15_sequence(5000)
        a = simulate_ook_link(bits, 18.0, 8, np.random.default_rng(5),
                              cvqkd_on=True)
        b = simulate_ook_link(bits, 18.0, 8, np.random.default_rng(5),
                              cvqkd_on=False)
        assert a == b

    def test_rejects_bad_inputs(self):
        bits = prbs15_sequence(100)
        with pytest.raises(ValueError):
            simulate_ook_link(np.array([], dtype=np.uint8), 20.0, 8,
                              np.random.default_rng(0))
        with pytest.raises(ValueError):
            simulate_ook_link(bits, math.nan, 8, np.random.default_rng(0))
        with pytest.raises(ValueError):
            simulate_ook_link(bits, -math.inf, 8, np.random.default_rng(0))
        with pytest.raises(ValueError):
            simulate_ook_link(bits, 20.0, 2, np.random.default_rng(0))
