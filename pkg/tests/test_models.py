import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src_python')))

from config import DEFAULT_SETTINGS
from dsp import Preprocessing
from errors import BundleFormatError, DataError, RecordingTooShort, ShapeMismatch
from gait_data import N_CHANNELS, Label, Recording, SubjectId
from linpred import LinearPredictor
from models import (
    SINGLE_PASS,
    WINDOW_MEAN,
    GaitClassifier,
    ModelBundle,
    ModelSpec,
    build_baseline,
    build_lpgnet,
    count_params,
    load_bundle,
    load_predictor,
    make_bundle,
    parameter_report,
    pooled_features,
    predict_recording,
    save_bundle,
    save_predictor,
    spec_from_settings,
)
from nn import Activation, Conv1d, Dense, GlobalAvgPool1d, Network


def _recording(n, seed=0, group="Pt"):
    rng = np.random.default_rng(seed)
    subject = SubjectId("Si", group, 2)
    return Recording(subject, 1, subject.label, 100.0, rng.gamma(2.0, 50.0, (N_CHANNELS, n)), np.arange(n) / 100.0)


def _predictor(seed=0, p=11):
    return LinearPredictor(np.random.default_rng(seed).normal(0.0, 0.05, (N_CHANNELS, p)))


def _set_head(network, spec, weight=0.0, bias=0.0):
    dense = network.layers[spec.head_start + (1 if spec.name == "lpgnet" else 0)]
    dense.weight.data[...] = weight
    dense.bias.data[...] = bias


@pytest.fixture
def lpgnet_bundle():
    spec = build_lpgnet()
    net = Network(spec.layers, seed=1)
    net.forward(np.random.default_rng(0).normal(size=(4, N_CHANNELS, 100)).astype(np.float32), training=True)
    return make_bundle(Preprocessing.FILTERED_50HZ, spec, net, _predictor(), config_hash="abc123")


@pytest.fixture
def baseline_bundle():
    spec = build_baseline()
    net = Network(spec.layers, seed=2)
    return make_bundle(Preprocessing.NORMALIZED_100HZ, spec, net, aggregation=WINDOW_MEAN,
                       window_len=100, stride=50)


class TestArchitectures:
    def test_parameter_counts(self):
        assert count_params(build_lpgnet()) == 4729
        assert count_params(build_baseline()) == 16361
        assert count_params(_predictor()) == 198

    def test_counts_match_network_tensors(self):
        for spec in (build_lpgnet(), build_baseline()):
            net = Network(spec.layers)
            assert sum(p.size for p in net.parameters()) == count_params(spec)

    def test_minimum_lengths(self):
        assert build_lpgnet().min_input_length == 50
        assert build_baseline().min_input_length == 30

    def test_settings_match_builders(self):
        arch = DEFAULT_SETTINGS["architecture"]
        assert spec_from_settings("lpgnet", arch) == build_lpgnet()
        assert spec_from_settings("baseline", arch) == build_baseline()

    def test_lpgnet_layout(self):
        spec = build_lpgnet()
        kinds = [s.kind for s in spec.layers]
        assert kinds[0] == "SpatialDropout"
        assert kinds[-4:] == ["GlobalAvgPool1d", "Dropout", "Dense", "Activation"]
        assert kinds.count("DepthwiseConv1d") == 3
        assert spec.head_start == kinds.index("GlobalAvgPool1d") + 1

    def test_spec_document_round_trip(self):
        spec = build_lpgnet()
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_must_end_in_single_sigmoid(self):
        with pytest.raises(ShapeMismatch):
            ModelSpec("bad", (Conv1d(N_CHANNELS, 4, 3), GlobalAvgPool1d(), Dense(4, 2), Activation("Sigmoid")))
        with pytest.raises(ShapeMismatch):
            ModelSpec("bad", (Conv1d(N_CHANNELS, 4, 3), GlobalAvgPool1d(), Dense(4, 1)))

    def test_incompatible_layers_rejected(self):
        with pytest.raises(ShapeMismatch):
            ModelSpec("bad", (Conv1d(N_CHANNELS, 4, 3), GlobalAvgPool1d(), Dense(5, 1), Activation("Sigmoid")))


class TestForward:
    @pytest.mark.parametrize("length", [100, 6000])
    def test_any_length_gives_one_probability(self, lpgnet_bundle, length):
        model = GaitClassifier(lpgnet_bundle)
        x = np.random.default_rng(length).normal(size=(2, N_CHANNELS, length)).astype(np.float32)
        probs = model.forward(x)
        assert probs.shape == (2,)
        assert np.all((probs > 0) & (probs < 1))

    def test_below_minimum_length(self, lpgnet_bundle):
        model = GaitClassifier(lpgnet_bundle)
        with pytest.raises(ShapeMismatch):
            model.forward(np.zeros((1, N_CHANNELS, 49), dtype=np.float32))
        with pytest.raises(ShapeMismatch):
            model.forward(np.zeros((1, 17, 100), dtype=np.float32))

    def test_zero_head_gives_half(self):
        spec = build_lpgnet()
        net = Network(spec.layers, seed=0)
        _set_head(net, spec)
        model = GaitClassifier.from_network(spec, net, preprocessing=Preprocessing.FILTERED_50HZ,
                                            predictor=_predictor())
        x = np.random.default_rng(1).normal(size=(N_CHANNELS, 80))
        assert model.predict_window(x) == pytest.approx(0.5)

    def test_zero_input_independent_of_length(self, lpgnet_bundle):
        model = GaitClassifier(lpgnet_bundle)
        short = model.forward(np.zeros((1, N_CHANNELS, 50), dtype=np.float32))
        long = model.forward(np.zeros((1, N_CHANNELS, 3000), dtype=np.float32))
        np.testing.assert_allclose(short, long, rtol=1e-6)

    def test_pooled_features(self, lpgnet_bundle):
        spec = lpgnet_bundle.cnn_spec
        net = Network(spec.layers)
        net.load_state_dict(lpgnet_bundle.cnn_weights)
        inputs = [np.ones((N_CHANNELS, 60), dtype=np.float32), np.ones((N_CHANNELS, 500), dtype=np.float32)]
        assert pooled_features(net, spec, inputs).shape == (2, 44)


class TestRecordingInference:
    def test_lpgnet_single_pass(self, lpgnet_bundle):
        model = GaitClassifier(lpgnet_bundle)
        calls = model.network.forward_calls
        result = model.predict_recording(_recording(12000))
        assert model.network.forward_calls == calls + 1
        assert 0.0 < result.probability < 1.0
        assert result.window_probs == []
        assert result.lpr_channel_mean_abs.shape == (N_CHANNELS,)
        assert result.recording == "SiPt02_01"
        assert result.diagnosis is (Label.PD if result.probability >= 0.5 else Label.CONTROL)

    def test_classifiers_do_not_share_network_state(self, lpgnet_bundle):
        first, second = GaitClassifier(lpgnet_bundle), GaitClassifier(lpgnet_bundle)
        assert first.network is not second.network
        rec = _recording(3000)
        p = first.predict_recording(rec).probability
        assert second.network.forward_calls == 0
        assert second.predict_recording(rec).probability == p

    def test_lpgnet_too_short(self, lpgnet_bundle):
        with pytest.raises(RecordingTooShort):
            predict_recording(lpgnet_bundle, _recording(90))

    def test_baseline_window_mean(self, baseline_bundle):
        result = predict_recording(baseline_bundle, _recording(12000, seed=3))
        assert len(result.window_probs) == 239
        assert result.probability == pytest.approx(np.mean(result.window_probs))
        assert result.lpr_channel_mean_abs is None

    def test_equal_window_probabilities(self):
        spec = build_baseline()
        net = Network(spec.layers)
        _set_head(net, spec, bias=1.5)
        model = GaitClassifier.from_network(spec, net, preprocessing=Preprocessing.NORMALIZED_100HZ,
                                            aggregation=WINDOW_MEAN, window_len=100, stride=50)
        result = model.predict_recording(_recording(1000, group="Co"))
        q = 1.0 / (1.0 + np.exp(-1.5))
        np.testing.assert_allclose(result.window_probs, q, rtol=1e-6)
        assert result.probability == pytest.approx(q, rel=1e-6)
        assert result.diagnosis is Label.PD

    def test_probabilities_clipped(self):
        spec = build_baseline()
        net = Network(spec.layers)
        _set_head(net, spec, bias=-100.0)
        model = GaitClassifier.from_network(spec, net, preprocessing=Preprocessing.NORMALIZED_100HZ)
        prob = model.predict_window(np.ones((N_CHANNELS, 40)))
        assert prob > 0.0


class TestBundle:
    def test_round_trip_is_bit_exact(self, lpgnet_bundle, tmp_path):
        path = save_bundle(lpgnet_bundle, tmp_path / "model.bundle")
        loaded = load_bundle(path)
        assert loaded.preprocessing is Preprocessing.FILTERED_50HZ
        assert loaded.cnn_spec == lpgnet_bundle.cnn_spec
        assert loaded.predictor == lpgnet_bundle.predictor
        assert loaded.config_hash == "abc123"
        assert loaded.aggregation == SINGLE_PASS
        assert set(loaded.cnn_weights) == set(lpgnet_bundle.cnn_weights)
        for name, value in lpgnet_bundle.cnn_weights.items():
            assert loaded.cnn_weights[name].tobytes() == value.tobytes()
        rec = _recording(2000)
        assert predict_recording(loaded, rec).probability == predict_recording(lpgnet_bundle, rec).probability

    def test_file_layout(self, lpgnet_bundle, tmp_path):
        path = save_bundle(lpgnet_bundle, tmp_path / "model.bundle")
        lines = path.read_bytes().split(b"\n", 2)
        assert lines[0] == b"# gait-bundle"
        assert b'"name":"lp.coeffs","dtype":"<f8"' in lines[1]

    def test_parameter_report(self, lpgnet_bundle, baseline_bundle):
        assert parameter_report(lpgnet_bundle) == {"cnn_parameters": 4729, "lp_coefficients": 198, "total": 4927}
        assert count_params(baseline_bundle) == 16361

    def test_window_settings_survive(self, baseline_bundle, tmp_path):
        loaded = load_bundle(save_bundle(baseline_bundle, tmp_path / "b.bundle"))
        assert (loaded.aggregation, loaded.window_len, loaded.stride) == (WINDOW_MEAN, 100, 50)
        assert loaded.predictor is None

    def test_predictor_only(self, tmp_path):
        lp = _predictor(5)
        path = save_predictor(lp, tmp_path / "lp.bundle", config_hash="h")
        assert load_predictor(path) == lp
        assert load_bundle(path).kind == "predictor"
        with pytest.raises(BundleFormatError):
            GaitClassifier(load_bundle(path))

    def test_predictor_missing(self, baseline_bundle, tmp_path):
        path = save_bundle(baseline_bundle, tmp_path / "b.bundle")
        with pytest.raises(BundleFormatError):
            load_predictor(path)

    def test_truncated(self, lpgnet_bundle, tmp_path):
        path = save_bundle(lpgnet_bundle, tmp_path / "model.bundle")
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(BundleFormatError):
            load_bundle(path)

    def test_trailing_bytes(self, lpgnet_bundle, tmp_path):
        path = save_bundle(lpgnet_bundle, tmp_path / "model.bundle")
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(BundleFormatError):
            load_bundle(path)

    def test_bad_magic_and_header(self, tmp_path):
        path = tmp_path / "x.bundle"
        path.write_bytes(b"not a bundle\n{}\n")
        with pytest.raises(BundleFormatError):
            load_bundle(path)
        path.write_bytes(b"# gait-bundle\n{broken\n")
        with pytest.raises(BundleFormatError):
            load_bundle(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_bundle(tmp_path / "absent.bundle")

    def test_inconsistent_bundles_rejected(self):
        spec = build_lpgnet()
        net = Network(spec.layers)
        with pytest.raises(BundleFormatError):
            make_bundle(Preprocessing.FILTERED_50HZ, spec, net)
        with pytest.raises(BundleFormatError):
            make_bundle(Preprocessing.NORMALIZED_100HZ, spec, net, aggregation=WINDOW_MEAN, window_len=20, stride=10)
        with pytest.raises(BundleFormatError):
            ModelBundle(Preprocessing.NORMALIZED_100HZ)

    def test_weights_must_fit_spec(self):
        weights = Network(build_baseline().layers).state_dict()
        with pytest.raises(ShapeMismatch):
            ModelBundle(Preprocessing.FILTERED_50HZ, build_lpgnet(), weights, _predictor())
