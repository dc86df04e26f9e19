import numpy as np
import pytest

from constellation import ShapingDistribution, quadrant_points, source_entropy
from errors import ConfigError, DegenerateConstellationError, ShapeMismatchError
from grad_engine import ParamVector, check_gradients
from shaping_models import (GSTransmitter, MBQAMTransmitter, PSGSTransmitter, UniformQAMTransmitter,
                            build_transmitter, mb_distribution, mu_is_non_increasing, scheme_split)

SNRS = [0.0, 7.5, 20.0]


def mu_params(transmitter, mu):
    """Parameters whose network outputs the constant mu at every SNR"""
    params = transmitter.init_params(np.random.default_rng(0)).arrays()
    params["mu/w"] = np.zeros_like(params["mu/w"])
    params["mu/b"] = np.array([np.log(np.expm1(mu)) if mu > 0 else -60.0])
    return ParamVector.from_arrays(params)


class TestMbDistribution:
    def test_zero_mu_is_uniform(self):
        dist = mb_distribution(0.0, quadrant_points(6))
        np.testing.assert_allclose(dist.probs, np.full(16, 1 / 16))

    def test_large_mu_concentrates_on_lowest_energy(self):
        points = quadrant_points(6)
        dist = mb_distribution(1e4, points)
        assert dist.probs[np.argmin(np.abs(points))] == pytest.approx(1.0)

    def test_matches_direct_formula(self):
        points = quadrant_points(6)
        weights = np.exp(-0.1 * np.abs(points) ** 2)
        np.testing.assert_allclose(mb_distribution(0.1, points).probs, weights / weights.sum(), rtol=1e-14)

    def test_negative_mu_is_rejected(self):
        with pytest.raises(ValueError):
            mb_distribution(-0.1, quadrant_points(4))


class TestPSGS:
    def test_every_subconstellation_has_unit_power(self):
        transmitter = PSGSTransmitter(6, 4)
        output = transmitter.evaluate(SNRS, transmitter.init_params(np.random.default_rng(1)))
        for index in range(len(SNRS)):
            c = output.constellation(index)
            np.testing.assert_allclose(c.subconstellation_powers(), np.ones(4), rtol=1e-12)
            assert output.probs[index].sum() == pytest.approx(1.0)

    def test_zero_parameters_are_degenerate(self):
        transmitter = PSGSTransmitter(4, 2, hidden_units=8)
        params = transmitter.init_params(np.random.default_rng(0))
        with pytest.raises(DegenerateConstellationError):
            transmitter.evaluate([10.0], params.with_values(np.zeros(len(params))))

    def test_needs_parity_bits(self):
        with pytest.raises(ConfigError):
            PSGSTransmitter(4, 4)

    def test_rejects_foreign_parameters(self):
        params = PSGSTransmitter(6, 4, hidden_units=32).init_params(np.random.default_rng(0))
        with pytest.raises(ShapeMismatchError):
            PSGSTransmitter(6, 4).evaluate([5.0], params)

    def test_forward_gradients(self):
        transmitter = PSGSTransmitter(2, 1, hidden_units=4)
        rng = np.random.default_rng(2)
        params = transmitter.init_params(rng)
        params = params.with_values(params.values + rng.normal(0, 0.1, len(params)))
        target_re = rng.normal(size=(2, 4))
        target_im = rng.normal(size=(2, 4))

        def f(g, nodes):
            tx = transmitter.forward(g, [3.0, 12.0], nodes)
            fit = g.add(g.sum(g.mul(tx.re, g.constant(target_re))), g.sum(g.mul(tx.im, g.constant(target_im))))
            return g.add(fit, g.sum(g.mul(tx.weights, g.log(tx.weights))))

        assert check_gradients(f, params, step=1e-6, floor=1e-6) < 1e-5


class TestMBQAM:
    def test_constant_mu_reproduces_fixed_distribution(self):
        transmitter = MBQAMTransmitter(6, hidden_units=8)
        output = transmitter.evaluate(SNRS, mu_params(transmitter, 0.3))
        expected = mb_distribution(0.3, quadrant_points(6)).probs
        for probs in output.probs:
            np.testing.assert_allclose(probs, expected, rtol=1e-10)
        np.testing.assert_allclose(transmitter.mu(SNRS, mu_params(transmitter, 0.3)), 0.3)

    def test_vanishing_mu_is_uniform_qam(self):
        transmitter = MBQAMTransmitter(6, hidden_units=8)
        c = transmitter.constellation_at(10.0, mu_params(transmitter, 0.0))
        assert source_entropy(c.shaping, 6, 4) == pytest.approx(6.0)

    def test_quadrants_keep_unit_power(self):
        transmitter = MBQAMTransmitter(4, hidden_units=8)
        for mu in (0.0, 0.2, 2.0):
            c = transmitter.constellation_at(5.0, mu_params(transmitter, mu))
            np.testing.assert_allclose(c.subconstellation_powers(), np.ones(4), rtol=1e-12)

    @pytest.mark.parametrize("m", [2, 5])
    def test_needs_even_m_of_at_least_four(self, m):
        with pytest.raises(ConfigError):
            MBQAMTransmitter(m)


class TestGS:
    def test_uniform_full_entropy(self):
        transmitter = GSTransmitter(6, hidden_units=8)
        c = transmitter.constellation_at(10.0, transmitter.init_params(np.random.default_rng(3)))
        assert c.k == 6
        assert source_entropy(c.shaping, 6, 6) == pytest.approx(6.0)
        assert np.mean(np.abs(c.points) ** 2) == pytest.approx(1.0)


def test_uniform_qam_has_no_parameters():
    transmitter = UniformQAMTransmitter(6)
    params = transmitter.init_params(np.random.default_rng(0))
    assert len(params) == 0
    assert not transmitter.trainable
    c = transmitter.constellation_at(3.0, params)
    np.testing.assert_allclose(c.shaping.probs, ShapingDistribution.uniform(4).probs)


@pytest.mark.parametrize("scheme, m, k", [
    ("psgs-2/3", 6, 4), ("psgs-1/2", 6, 3), ("mbqam-2/3", 6, 4), ("gs", 6, 6), ("uniform-qam", 6, 4),
])
def test_scheme_split(scheme, m, k):
    assert scheme_split(scheme, m) == k
    assert build_transmitter(scheme, m, hidden_units=8).k == k


def test_scheme_split_needs_integer_information_bits():
    with pytest.raises(ConfigError):
        scheme_split("psgs-2/3", 4)


def test_unknown_scheme():
    with pytest.raises(ConfigError):
        build_transmitter("apsk", 6)


def test_mu_monotonicity_helper():
    assert mu_is_non_increasing([0.4, 0.3, 0.3, 0.05])
    assert not mu_is_non_increasing([0.4, 0.5])
