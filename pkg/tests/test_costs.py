"""Energy and CO2 estimate arithmetic with published reference points."""

import pytest

from moelab.costs import co2_estimate, energy_estimate
from moelab.moe import ConfigError


def test_reference_training_run_energy():
    # 1024 chips at 326 W for 574 h with PUE 1.11 lands near 213 MWh.
    mwh = energy_estimate(1024, 326, 574, 1.11)
    assert abs(mwh - 212.69) < 0.01
    assert 212.5 <= mwh <= 213.5


def test_energy_scales_linearly_in_each_argument():
    base = energy_estimate(100, 300, 10, 1.0)
    assert energy_estimate(200, 300, 10, 1.0) == pytest.approx(2 * base)
    assert energy_estimate(100, 600, 10, 1.0) == pytest.approx(2 * base)
    assert energy_estimate(100, 300, 20, 1.0) == pytest.approx(2 * base)
    assert energy_estimate(100, 300, 10, 1.5) == pytest.approx(1.5 * base)


def test_zero_arguments_give_zero_energy():
    assert energy_estimate(0, 326, 574, 1.11) == 0.0
    assert energy_estimate(1024, 0, 574, 1.11) == 0.0
    assert energy_estimate(1024, 326, 0, 1.11) == 0.0


def test_pue_below_one_rejected():
    with pytest.raises(ConfigError):
        energy_estimate(1024, 326, 574, 0.99)


def test_negative_inputs_rejected():
    with pytest.raises(ConfigError):
        energy_estimate(-1, 326, 574, 1.11)
    with pytest.raises(ConfigError):
        co2_estimate(-1.0)


def test_co2_reference_values():
    assert co2_estimate(213, 0.088) == pytest.approx(18.744)
    assert 18.6 <= co2_estimate(213, 0.088) <= 18.8
    assert co2_estimate(456, 0.088) == pytest.approx(40.128)
    assert 40.0 <= co2_estimate(456, 0.088) <= 40.3
    assert co2_estimate(0.0) == 0.0


def test_energy_ratio_against_larger_dense_run():
    # A 456 MWh run against a 1287 MWh reference is roughly a third the energy.
    assert 456 / 1287 == pytest.approx(0.354, abs=0.001)
