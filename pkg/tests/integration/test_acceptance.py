"""Full-size acceptance checks.

Deselected by default; run with ``pytest -m acceptance``. The desk
experiment trains full networks and takes up to an hour on a desktop CPU.
"""

import numpy as np
import pytest

from neurododge.deploy import (
    encode_address, encode_sequence, quantize_array, quantize_weights, sequence_from_bytes, sequence_to_bytes,
)
from neurododge.events import decode_csv, decode_evs1, encode_csv, encode_evs1, to_event_field
from neurododge.harness import evaluate, make_split, run_training, scene_for
from neurododge.kep import apply_kep
from neurododge.models import EvalMode, ExperimentConfig, KepConfig, LayerKind, LayerSpec, Lighting, ObjectKind, TrainConfig
from neurododge.scene import render_scene
from neurododge.snn import build_network, forward_sync
from neurododge.sparse import forward_async
from neurododge.train import backward, desired_counts, loss_spec_for_window, surrogate_grad
from tests.conftest import assert_records_equal, make_tiny_network, object_share, random_stream, reset_free_response

WINDOWS = (30, 50, 100)
ROBUSTNESS_SEEDS = range(5)


def random_fc_instance(seed: int):
    """One or two FC layers, at most 12 neurons, T between 5 and 10, on a 2x2 sensor"""
    rng = np.random.default_rng(seed)
    T = int(rng.integers(5, 11))
    if seed % 2:
        layers = [LayerSpec(kind=LayerKind.FC, in_channels=8, out_channels=2)]
    else:
        hidden = int(rng.integers(2, 11))
        layers = [LayerSpec(kind=LayerKind.FC, in_channels=8, out_channels=hidden),
                  LayerSpec(kind=LayerKind.FC, in_channels=hidden, out_channels=2)]
    net = build_network(layers, T=T, seed=seed, input_shape=(2, 2, 2))
    stream = random_stream(seed, int(rng.integers(4, 40)), width=2, height=2, window_us=T * 1000)
    return net, stream, int(rng.integers(0, 2))


def directional_derivative(net, record, seed_error, V) -> float:
    """Forward-mode derivative of the loss along V through the reset-free filters"""
    T = net.T
    s_prev = record.input.reshape(T, -1).astype(float)
    ds = None
    for l, (w, params) in enumerate(zip(net.weights, net.params)):
        drive = s_prev @ V[l].T
        if ds is not None:
            drive = drive + ds @ w.T
        du = reset_free_response(drive, params.delta_curr, params.delta_volt)
        ds = surrogate_grad(record.traces[l], u_th=params.u_th) * du
        s_prev = record.spikes[l].reshape(T, -1).astype(float)
    return float(np.sum(seed_error * ds))


class TestEquivalenceAcceptance:
    """Async/sync equivalence over many streams and networks"""

    @pytest.mark.acceptance
    @pytest.mark.parametrize("T", WINDOWS)
    @pytest.mark.parametrize("net_seed", range(5))
    def test_async_matches_sync(self, T, net_seed):
        """Test bit-identical spikes for 14 random streams per network and window"""
        net = make_tiny_network(seed=net_seed, T=T, init_gain=2.0 + net_seed)
        rng = np.random.default_rng(1000 * T + net_seed)

        for i in range(14):
            stream = random_stream(int(rng.integers(0, 2 ** 31)), int(rng.integers(0, 800)), window_us=T * 1000)
            assert_records_equal(forward_async(net, stream), forward_sync(net, to_event_field(stream, T)))


class TestGradientAcceptance:
    """Backward pass against an element-wise derivative oracle"""

    @pytest.mark.acceptance
    @pytest.mark.parametrize("seed", range(50))
    def test_every_element(self, seed):
        """Test each weight gradient equals the derivative along that single weight"""
        net, stream, label = random_fc_instance(seed)
        spec = loss_spec_for_window(net.T)
        record = forward_sync(net, to_event_field(stream, net.T), train=True)
        grads = backward(net, record, label, spec)
        seed_error = -(desired_counts(label, spec) - record.counts) / net.T ** 2

        for l, g in enumerate(grads.weights):
            expected = np.zeros_like(g)
            for index in np.ndindex(g.shape):
                V = [np.zeros_like(w) for w in net.weights]
                V[l][index] = 1.0
                expected[index] = directional_derivative(net, record, seed_error, V)
            np.testing.assert_allclose(g, expected, rtol=1e-6, atol=1e-12)


class TestAnalyticAcceptance:
    """Quantization bound and lossless formats under fuzzing"""

    @pytest.mark.acceptance
    def test_quantization_error(self):
        """Test 10^5 in-range weights land within sigma/2 of their quantized value"""
        w = np.random.default_rng(0).uniform(-254.0, 254.0, size=100_000)

        quantized, clamped = quantize_array(w, 2.0)

        assert not clamped.any()
        assert np.max(np.abs(quantized - w)) <= 1.0

    @pytest.mark.acceptance
    def test_formats_lossless(self):
        """Test 10^4 random streams survive EVS1, CSV and AERSEQ1"""
        rng = np.random.default_rng(5)
        for i in range(10_000):
            width, height = (int(v) for v in rng.integers(1, 64, size=2))
            window_us = int(rng.integers(1, 100)) * 1000
            stream = random_stream(i, int(rng.integers(0, 40)), width=width, height=height, window_us=window_us)
            seq = encode_sequence(stream, int(rng.integers(1, 60)))

            assert decode_evs1(encode_evs1(stream)) == stream
            assert decode_csv(encode_csv(stream)) == stream
            assert sequence_from_bytes(sequence_to_bytes(seq)) == seq

    @pytest.mark.acceptance
    def test_addresses_invert(self):
        """Test every address of the 128x128 sensor decodes back to its event"""
        for x in range(128):
            for y in range(128):
                for p in (0, 1):
                    A = encode_address((0, x, y, p))
                    assert (A // 256, A % 256 // 2, A % 2) == (x, y, p)


class TestKepAcceptance:
    """KEP purity and compression on low-light disk scenes"""

    @pytest.fixture(scope="class")
    def low_light_scenes(self):
        config = ExperimentConfig()
        rng = np.random.default_rng(17)
        return [render_scene(scene_for(config, ObjectKind.DISK, Lighting.INDOOR_LOW, 50, i % 2, rng))
                for i in range(40)]

    @pytest.fixture(scope="class")
    def large_low_light_scenes(self):
        """Bigger, faster disks whose raw streams hold about 1700 events"""
        config = ExperimentConfig(radius_range=(7.0, 9.0), speed_range=(1.0, 1.2))
        rng = np.random.default_rng(23)
        return [render_scene(scene_for(config, ObjectKind.DISK, Lighting.INDOOR_LOW, 50, i % 2, rng))
                for i in range(40)]

    @pytest.mark.acceptance
    def test_key_events_are_object_events(self, low_light_scenes):
        """Test at least 90% of the retained key events belong to the object"""
        shares = []
        for scene in low_light_scenes:
            result = apply_kep(scene.stream, KepConfig())
            if result.candidate_kls:
                assert result.kl == min(result.candidate_kls)
            else:
                assert result.kl == 0.0
                assert result.key == result.main
            shares.append(object_share(scene.stream, scene.object_mask, result.key))

        assert np.mean(shares) >= 0.90

    @pytest.mark.acceptance
    def test_key_ratio(self, large_low_light_scenes):
        """Test large streams shrink to at most 40% of their raw size"""
        ratios = [len(apply_kep(s.stream).key) / len(s.stream)
                  for s in large_low_light_scenes if len(s.stream) >= 1400]

        assert len(ratios) >= 10
        assert np.mean(ratios) <= 0.40


class TestTrainingAcceptance:
    """Loss behaviour of full-size runs from the default initialization"""

    @pytest.mark.acceptance
    @pytest.mark.slow
    @pytest.mark.timeout(6 * 3600)
    def test_loss_decreases_epoch_over_epoch(self, tmp_path):
        """Test the epoch loss strictly decreases over 5 epochs for at least 4 of 5 seeds"""
        falling = 0
        for seed in range(5):
            config = TrainConfig(T=50, epochs=5, train_size=200, n_dt=30, n_df=10, seed=seed)
            _, history = run_training(config, tmp_path / f"net{seed}.snn")
            falling += all(b < a for a, b in zip(history.losses, history.losses[1:]))

        assert falling >= 4


class TestDeskExperiment:
    """Training on synthetic scenes and evaluating on held-out ones"""

    @pytest.fixture(scope="class")
    def desk_run(self, tmp_path_factory):
        path = tmp_path_factory.mktemp("desk") / "net50.snn"
        net, _ = run_training(TrainConfig(T=50, seed=0, train_size=800), path)
        experiment = ExperimentConfig(seed=0)
        test_sets = {kind: make_split(experiment, "test", [kind], experiment.lightings, 50, 800)
                     for kind in (ObjectKind.DISK, ObjectKind.TALL_BLOB)}
        return net, test_sets

    @pytest.mark.acceptance
    @pytest.mark.slow
    @pytest.mark.timeout(4 * 3600)
    def test_success_rates(self, desk_run):
        """Test held-out disk success of at least 0.90 and tall-blob success of at least 0.80"""
        net, test_sets = desk_run

        disk = evaluate(net, test_sets[ObjectKind.DISK], EvalMode.SYNC)
        blob = evaluate(net, test_sets[ObjectKind.TALL_BLOB], EvalMode.SYNC)

        assert np.mean([r.success_rate for r in disk.rows]) >= 0.90
        assert np.mean([r.success_rate for r in blob.rows]) >= 0.80

    @pytest.mark.acceptance
    @pytest.mark.slow
    @pytest.mark.timeout(4 * 3600)
    def test_quantization_keeps_success(self, desk_run):
        """Test 8-bit weights lose at most 5 points of disk success"""
        net, test_sets = desk_run

        float_rate = np.mean([r.success_rate for r in evaluate(net, test_sets[ObjectKind.DISK], EvalMode.SYNC).rows])
        quant_rate = np.mean([r.success_rate for r in
                              evaluate(quantize_weights(net), test_sets[ObjectKind.DISK], EvalMode.SYNC).rows])

        assert quant_rate >= float_rate - 0.05

    @pytest.mark.acceptance
    @pytest.mark.slow
    @pytest.mark.timeout(12 * 3600)
    def test_window_robustness(self, tmp_path):
        """Test the spread of success over windows is no larger for events than for event frames"""
        wins = 0
        for seed in ROBUSTNESS_SEEDS:
            experiment = ExperimentConfig(seed=seed, lightings=[Lighting.INDOOR_NORMAL])
            spread = {EvalMode.ASYNC: [], EvalMode.EF_SNN: []}
            for window in WINDOWS:
                net, _ = run_training(TrainConfig(T=window, seed=seed, train_size=200, epochs=5),
                                      tmp_path / f"s{seed}_{window}.snn", experiment=experiment)
                test = make_split(experiment, "test", [ObjectKind.DISK], experiment.lightings, window, 200)
                for mode in spread:
                    spread[mode].append(evaluate(net, test, mode).rows[0].success_rate)
            async_spread = max(spread[EvalMode.ASYNC]) - min(spread[EvalMode.ASYNC])
            frame_spread = max(spread[EvalMode.EF_SNN]) - min(spread[EvalMode.EF_SNN])
            wins += async_spread <= frame_spread

        assert wins >= 4
