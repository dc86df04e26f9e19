import json
import logging

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import norm

import evaluation
from channels import snr_to_n0
from config import BerSettings, ExperimentConfig, TrainConfig
from constellation import ShapingDistribution, qam_constellation, source_entropy
from demappers import ExactDemapper, NeuralDemapper, exact_awgn_demap, nn_demap
from errors import CheckpointMissingError, ConfigError
from evaluation import (BmiPoint, SchemeModels, ber_at, bmi_at, capacity_curve, code_for, compute_se, enumerated_bmi,
                        estimate_bmi, load_scheme, map_grid, run_ber, sample_indices, scheme_rate, se_curve,
                        write_manifest, write_series)
from grad_engine import ParamVector
from shaping_models import PSGSTransmitter, build_transmitter
from training import train


def uniform_models(m=6):
    return load_scheme(ExperimentConfig(scheme="uniform-qam", m=m, demapper="exact"))


def gray_pam_bmi(snr_db):
    """BMI of unit-power Gray 64-QAM from 1-D quadrature over one axis"""
    c = qam_constellation(6)
    levels, first = np.unique(np.round(c.points.real, 12), return_index=True)
    labels = c.labels[first][:, [0, 2, 3]]
    sigma = np.sqrt(10 ** (-snr_db / 10) / 2)
    y = np.linspace(levels[0] - 12 * sigma, levels[-1] + 12 * sigma, 20001)
    likelihood = norm.pdf(y[None, :], loc=levels[:, None], scale=sigma)
    mixture = likelihood.mean(axis=0)

    conditional = 0.0
    for i in range(3):
        for bit in (0, 1):
            members = labels[:, i] == bit
            p_bit = likelihood[members].mean(axis=0) * members.mean() / mixture
            for row in likelihood[members]:
                conditional -= trapezoid(row * np.log2(np.maximum(p_bit, 1e-300)), y) / len(levels)
    return 2 * (3 - conditional)


@pytest.mark.parametrize("shaping, k, rate, expected", [
    (ShapingDistribution.uniform(4), 4, 2 / 3, 4.0),
    (ShapingDistribution.uniform(3), 3, 1 / 2, 3.0),
    (ShapingDistribution(np.eye(16)[0]), 4, 2 / 3, 0.0),
])
def test_compute_se(shaping, k, rate, expected):
    assert compute_se(shaping, 6, k, rate) == pytest.approx(expected)


def test_capacity_curve():
    np.testing.assert_allclose(capacity_curve([0.0, 15.0]), [1.0, np.log2(1 + 10 ** 1.5)])
    assert capacity_curve([15.0])[0] == pytest.approx(5.028, abs=1e-3)


class TestBmi:
    def test_noiseless_uniform_qam(self):
        point = bmi_at(uniform_models(), 80.0, 2000, np.random.default_rng(0))
        assert point.bmi == pytest.approx(6.0, abs=1e-6)
        assert point.entropy == pytest.approx(6.0)

    @pytest.mark.parametrize("snr_db", [0.0, 6.0, 12.0, 18.0])
    def test_information_bounds(self, snr_db):
        point = bmi_at(uniform_models(), snr_db, 20000, np.random.default_rng(1))
        assert point.bmi <= point.entropy + 3 * point.stderr
        assert point.bmi <= capacity_curve([snr_db])[0] + 3 * point.stderr
        assert len(point.bit_entropies) == 6

    def test_block_fading_with_network_demapper(self):
        demapper = NeuralDemapper(4, hidden_units=8)
        models = SchemeModels(build_transmitter("uniform-qam", 4), demapper, ParamVector.empty(),
                              demapper.init_params(np.random.default_rng(6)))
        point = bmi_at(models, 15.0, 4000, np.random.default_rng(7), channel="rbf", block_length=4)
        assert np.isfinite(point.bmi)
        assert 0.0 <= point.bmi <= 4.0

    @pytest.mark.slow
    @pytest.mark.parametrize("snr_db", [5.0, 10.0, 15.0])
    def test_matches_quadrature(self, snr_db):
        point = bmi_at(uniform_models(), snr_db, 100000, np.random.default_rng(2))
        assert point.bmi == pytest.approx(gray_pam_bmi(snr_db), abs=max(0.01, 3 * point.stderr))

    @pytest.mark.parametrize("snr_db", [2.0, 8.0, 14.0])
    def test_agrees_with_training_estimator(self, snr_db):
        models = uniform_models(4)
        sampled = bmi_at(models, snr_db, 40000, np.random.default_rng(3))
        mean, stderr = enumerated_bmi(models, snr_db, 10, 200, np.random.default_rng(4))
        assert sampled.bmi == pytest.approx(mean, abs=3 * np.hypot(sampled.stderr, stderr))


def test_sample_indices_follow_shaping():
    shaping = ShapingDistribution([0.5, 0.25, 0.125, 0.125])
    indices = sample_indices(np.random.default_rng(5), shaping, 4, 2, 200000)
    np.testing.assert_allclose(np.bincount(indices % 4, minlength=4) / indices.size, shaping.probs, atol=0.005)
    np.testing.assert_allclose(np.bincount(indices // 4, minlength=4) / indices.size, 0.25, atol=0.005)


def test_map_grid_keeps_order_and_streams():
    def evaluate(snr_db, rng):
        return snr_db, rng.random()

    serial = map_grid(evaluate, [1.0, 2.0, 3.0, 4.0], seed=7)
    threaded = map_grid(evaluate, [1.0, 2.0, 3.0, 4.0], seed=7, workers=3)
    assert serial == threaded
    assert [snr for snr, _ in serial] == [1.0, 2.0, 3.0, 4.0]
    assert len({value for _, value in serial}) == 4


def test_threaded_grid_merges_diagnostics(monkeypatch, caplog):
    def fake_bmi_at(models, snr_db, samples, rng, channel, block_length, diagnostics):
        for _ in range(50):
            diagnostics["regularized_equalizations"] += 1
        return BmiPoint(snr_db, 1.0, 0.0, 1.0)

    monkeypatch.setattr(evaluation, "bmi_at", fake_bmi_at)
    config = ExperimentConfig(scheme="uniform-qam", m=4, snr_grid=tuple(float(x) for x in range(16)),
                              demapper="exact", workers=4)
    with caplog.at_level(logging.WARNING, logger="evaluation"):
        points = estimate_bmi(config, uniform_models(4))
    assert len(points) == 16
    assert "800 equalizations were regularized" in caplog.text


class TestPosteriors:
    def test_exact_dispatch(self):
        models = uniform_models(4)
        c = models.constellation_at(10.0)
        y = np.random.default_rng(12).normal(size=20) + 1j * np.random.default_rng(13).normal(size=20)
        expected = exact_awgn_demap(y, c, c.point_distribution, snr_to_n0(10.0))
        np.testing.assert_array_equal(models.posteriors(y, np.ones(20), 10.0, c).llr, expected.llr)

    def test_network_dispatch(self):
        demapper = NeuralDemapper(4, hidden_units=8)
        params = demapper.init_params(np.random.default_rng(14))
        models = SchemeModels(build_transmitter("uniform-qam", 4), demapper, ParamVector.empty(), params)
        c = models.constellation_at(10.0)
        y = np.exp(1j * np.linspace(0.0, 3.0, 12))
        h = np.full(12, 0.8 + 0.1j)
        expected = nn_demap(y, h, 10.0, params, demapper)
        np.testing.assert_array_equal(models.posteriors(y, h, 10.0, c).llr, expected.llr)


class TestSchemeLoading:
    def test_trainable_scheme_needs_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointMissingError):
            load_scheme(ExperimentConfig(scheme="psgs-2/3"), checkpoint_dir=tmp_path)

    def test_loads_trained_checkpoint(self, tmp_path):
        config = TrainConfig(scheme="psgs-1/2", m=2, batch_size=4, iterations=2, validation_interval=1,
                             seeds=(0,), validation_realizations=2, hidden_units=4, demapper="exact")
        result = train(config, checkpoint_dir=tmp_path)
        models = load_scheme(ExperimentConfig(scheme="psgs-1/2", m=2, demapper="exact"), checkpoint_dir=tmp_path)
        assert models.transmitter.hidden_units == 4
        np.testing.assert_array_equal(models.tx_params.values, result.best.params.subset("tx").values)
        assert models.checkpoint.name == "psgs-12_awgn_best.params"


class TestSpectralEfficiency:
    def test_uniform_qam_curve(self):
        rows = se_curve(ExperimentConfig(snr_grid=(0.0, 10.0), demapper="exact"), uniform_models())
        assert [se for _, se, _ in rows] == pytest.approx([4.0, 4.0])
        assert [h for _, _, h in rows] == pytest.approx([6.0, 6.0])

    def test_rates(self):
        config = ExperimentConfig(ber=BerSettings(code_rate="1/2"))
        assert scheme_rate(config, build_transmitter("psgs-2/3", 6, 4)) == pytest.approx(2 / 3)
        assert scheme_rate(config, build_transmitter("uniform-qam", 6)) == pytest.approx(0.5)


class TestBer:
    def test_code_selection(self):
        code, k = code_for(ExperimentConfig(), build_transmitter("psgs-1/2", 6, 4))
        assert (str(code.rate), k) == ("1/2", 3)
        code, k = code_for(ExperimentConfig(), build_transmitter("uniform-qam", 6))
        assert (str(code.rate), k) == ("2/3", 4)

    def test_code_and_shaping_must_agree(self):
        with pytest.raises(ConfigError):
            code_for(ExperimentConfig(ber=BerSettings(code_rate="1/2")), build_transmitter("uniform-qam", 6))

    def test_noiseless_uniform_qam(self):
        config = ExperimentConfig(snr_grid=(60.0,), demapper="exact",
                                  ber=BerSettings(min_codewords=3, max_codewords=3, min_errors=1))
        (point,) = run_ber(config, uniform_models())
        assert point.ber == 0.0
        assert point.codewords == 3
        assert point.bits == 3 * 1296
        assert point.unconverged == 0

    def test_noiseless_shaped_chain(self):
        transmitter = PSGSTransmitter(6, 4, hidden_units=4)
        models = SchemeModels(transmitter, ExactDemapper(6), transmitter.init_params(np.random.default_rng(8)),
                              ParamVector.empty())
        config = ExperimentConfig(scheme="psgs-2/3", demapper="exact",
                                  ber=BerSettings(min_codewords=2, max_codewords=2, min_errors=1))
        point = ber_at(models, config, 60.0, np.random.default_rng(9))
        assert point.errors == 0

    @pytest.mark.slow
    def test_waterfall_is_monotone(self):
        config = ExperimentConfig(snr_grid=(10.0, 12.0, 14.0, 16.0), demapper="exact",
                                  ber=BerSettings(min_codewords=20, max_codewords=200, min_errors=100))
        bers = [point.ber for point in run_ber(config, uniform_models())]
        assert all(b <= a for a, b in zip(bers, bers[1:]))
        assert bers[-1] < 1e-4


def test_outputs_are_deterministic(tmp_path):
    config = ExperimentConfig(scheme="uniform-qam", m=4, snr_grid=(3.0, 9.0), samples_per_point=3000,
                              demapper="exact", workers=2)
    paths = []
    for run in range(2):
        points = estimate_bmi(config, uniform_models(4))
        paths.append(write_series(tmp_path / f"run{run}.csv", [(p.snr_db, p.bmi, p.stderr) for p in points]))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_text().splitlines()[0] == "es_n0_db,value,stderr"


def test_manifest(tmp_path):
    checkpoint = tmp_path / "model.params"
    ParamVector.from_arrays({"w": np.ones(3)}).save(checkpoint)
    path = write_manifest(tmp_path / "manifest.json", {"system": {"m": 6}}, 2024, checkpoint, {"extra": 1})
    manifest = json.loads(path.read_text())
    assert manifest["seed"] == 2024
    assert len(manifest["config_sha256"]) == 64
    assert len(manifest["checkpoint_sha256"]) == 64
    assert manifest["extra"] == 1
    bare = json.loads(write_manifest(tmp_path / "m2.json", {}, 1).read_text())
    assert bare["checkpoint"] is None and bare["checkpoint_sha256"] is None


DESK_SCALE = dict(m=6, batch_size=250, iterations=3000, patience=3000, validation_interval=500, log_interval=500,
                  seeds=(0, 1, 2), validation_realizations=200,
                  demapper_settings={"hidden_units": 64, "hidden_layers": 2})


@pytest.fixture(scope="module")
def trained_schemes():
    """Best-of-three desk-scale training per (scheme, channel), trained on first use"""
    cache = {}

    def get(scheme, channel="awgn"):
        if (scheme, channel) not in cache:
            snr_range = (0.0, 20.0) if channel == "awgn" else (5.0, 25.0)
            result = train(TrainConfig(scheme=scheme, channel=channel, snr_range=snr_range, **DESK_SCALE))
            params = result.best.params
            cache[scheme, channel] = SchemeModels(result.transmitter, result.demapper, params.subset("tx"),
                                                  params.subset("demapper"))
        return cache[scheme, channel]

    return get


def bmi_gap(first, second):
    """Difference in BMI less three combined standard errors"""
    return first.bmi - second.bmi - 3 * np.hypot(first.stderr, second.stderr)


def first_snr_below(points, target):
    return next((point.snr_db for point in points if point.ber < target), np.inf)


@pytest.mark.slow
def test_geometric_shaping_beats_uniform_qam(trained_schemes):
    gs = bmi_at(trained_schemes("gs"), 11.0, 100000, np.random.default_rng(30))
    uniform = bmi_at(trained_schemes("uniform-qam"), 11.0, 100000, np.random.default_rng(31))
    assert gs.bmi >= uniform.bmi - 3 * np.hypot(gs.stderr, uniform.stderr)


@pytest.mark.slow
def test_awgn_scheme_ordering(trained_schemes):
    points = {scheme: bmi_at(trained_schemes(scheme), 11.0, 100000, np.random.default_rng(32))
              for scheme in ("psgs-2/3", "mbqam-2/3", "psgs-1/2", "gs", "uniform-qam")}
    assert abs(points["psgs-2/3"].bmi - points["mbqam-2/3"].bmi) < 0.05
    assert bmi_gap(points["psgs-1/2"], points["gs"]) > 0.01
    assert bmi_gap(points["gs"], points["uniform-qam"]) > 0.01


@pytest.mark.slow
def test_trained_shaping_keeps_entropy(trained_schemes):
    c = trained_schemes("psgs-2/3").constellation_at(11.0)
    assert source_entropy(c.shaping, 6, 4) > 2.5


@pytest.mark.slow
def test_trained_constellation_depends_on_snr(trained_schemes):
    models = trained_schemes("psgs-2/3")
    low, high = models.constellation_at(5.0), models.constellation_at(15.0)
    same_points = np.allclose(low.points, high.points, atol=1e-6)
    same_shaping = np.allclose(low.shaping.probs, high.shaping.probs, atol=1e-6)
    assert not (same_points and same_shaping)


@pytest.mark.slow
def test_shaped_schemes_reach_target_ber_earlier(trained_schemes):
    grid = tuple(float(snr) for snr in np.arange(8.0, 14.01, 0.25))
    settings = BerSettings(min_codewords=20, max_codewords=300, min_errors=50)
    crossings = {}
    for scheme in ("psgs-2/3", "mbqam-2/3", "uniform-qam"):
        config = ExperimentConfig(scheme=scheme, m=6, snr_grid=grid, workers=4, ber=settings)
        crossings[scheme] = first_snr_below(run_ber(config, trained_schemes(scheme)), 1e-3)
    assert np.isfinite(crossings["uniform-qam"])
    assert crossings["psgs-2/3"] < crossings["uniform-qam"]
    assert crossings["mbqam-2/3"] < crossings["uniform-qam"]


@pytest.mark.slow
def test_fading_ordering_with_network_demappers(trained_schemes):
    psgs = bmi_at(trained_schemes("psgs-2/3", "rbf"), 16.0, 100000, np.random.default_rng(33), channel="rbf")
    mbqam = bmi_at(trained_schemes("mbqam-2/3", "rbf"), 16.0, 100000, np.random.default_rng(33), channel="rbf")
    assert psgs.bmi >= mbqam.bmi - 3 * np.hypot(psgs.stderr, mbqam.stderr)
