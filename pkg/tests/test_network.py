import numpy as np
import pytest

from polyshift.network import (Act, Conv, Downsample, DownsampleKind, FullyConnected, GlobalAvgPool,
                               ImproperCalibration, ImproperLayer, ImproperNetworkSpec, MaxPoolDense, MissingLabels,
                               NetworkSpec, ResidualBlock, UnknownTap, backward, build, calibrate_readout, forward,
                               forward_with_taps, layer_from_dict, load_network, predict, residual_block_forward,
                               residual_taps, save_network, spec_from_dict, spec_to_dict, toy_resnet,
                               with_downsample_kind)
from polyshift.polyphase import aps_downsample, conventional_downsample, equal_up_to_shift
from polyshift.tensor import Activation, LabelOutOfRange, ShapeMismatch, circular_shift, softmax, softmax_cross_entropy

SMOOTH = Activation.polynomial(0.0, 1.0, 0.5)


def small_resnet(kind, precision='f64', seed=0, size=16):
    return toy_resnet(kind, channels=(4, 8, 8), size=size, precision=precision, seed=seed)


def shifted(x, rng, extent):
    dy, dx = rng.integers(-extent, extent + 1, size=2)
    return circular_shift(x, dy, dx)


class TestBuild:

    def test_same_seed_is_bit_identical(self):
        a = build(toy_resnet('aps'))
        b = build(toy_resnet('aps'))
        assert a.params.keys() == b.params.keys()
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_seed_changes_parameters(self):
        a = build(toy_resnet('aps', seed=0))
        b = build(toy_resnet('aps', seed=1))
        assert not np.array_equal(a.params['conv0.weight'], b.params['conv0.weight'])

    def test_toy_resnet_stage_sizes(self):
        net = build(toy_resnet('aps'))
        assert net.shapes['conv0'] == (8, 32, 32)
        assert net.shapes['block2'] == (8, 32, 32)
        assert net.shapes['block4'] == (16, 16, 16)
        assert net.shapes['block6'] == (32, 8, 8)
        assert net.shapes['fc9'] == (4,)
        assert net.classes == 4
        assert residual_taps(net) == ['block2', 'block4', 'block6']

    def test_he_fan_in_scaling_and_zero_biases(self):
        net = build(toy_resnet('baseline', channels=(64, 64, 64)))
        weight = net.params['block2.conv0.weight']
        assert weight.std() == pytest.approx(np.sqrt(2.0 / (64 * 9)), rel=0.05)
        assert not np.any(net.params['block2.conv0.bias'])
        assert 'block4.proj.weight' not in net.params

    def test_projection_when_channels_change(self):
        net = build(toy_resnet('aps'))
        assert net.params['block4.proj.weight'].shape == (16, 8, 1, 1)

    def test_precision(self):
        assert build(small_resnet('aps', 'f32')).params['conv0.weight'].dtype == np.float32
        assert build(small_resnet('aps', 'f64')).params['conv0.weight'].dtype == np.float64

    def test_strided_conv_is_rejected(self):
        with pytest.raises(ImproperLayer):
            Conv(8, 3, stride=2)

    def test_channel_mismatch_names_the_block(self):
        spec = NetworkSpec((ResidualBlock(4, (Conv(3),)), GlobalAvgPool(), FullyConnected(2)), (1, 8, 8))
        with pytest.raises(ImproperNetworkSpec, match='block0'):
            build(spec)

    def test_missing_head(self):
        with pytest.raises(ImproperNetworkSpec):
            build(NetworkSpec((Conv(2), GlobalAvgPool()), (1, 8, 8)))

    def test_stride_larger_than_map(self):
        spec = NetworkSpec((Downsample(stride=4), GlobalAvgPool(), FullyConnected(2)), (1, 2, 2))
        with pytest.raises(ImproperNetworkSpec, match='down0'):
            build(spec)

    def test_unsupported_blur_size(self):
        spec = NetworkSpec((Downsample(DownsampleKind.LPF, blur_size=4), GlobalAvgPool(), FullyConnected(2)), (1, 4, 4))
        with pytest.raises(ImproperNetworkSpec):
            build(spec)

    def test_with_downsample_kind_keeps_parameters(self):
        spec = small_resnet('aps')
        baseline = with_downsample_kind(spec, 'baseline')
        assert all(layer.downsample.kind == DownsampleKind.BASELINE
                   for layer in baseline.layers if isinstance(layer, ResidualBlock) and layer.downsample)
        a, b = build(spec), build(baseline)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])


class TestForward:

    @pytest.mark.parametrize('kind', ['aps', 'aps_lpf'])
    def test_circular_shift_invariance_f64(self, rng, kind):
        for seed in range(3):
            net = build(small_resnet(kind, 'f64', seed))
            x = rng.standard_normal((4, 1, 16, 16))
            logits = forward(net, x)
            for _ in range(3):
                np.testing.assert_allclose(forward(net, shifted(x, rng, 15)), logits, rtol=0, atol=1e-9)

    def test_circular_shift_invariance_f32(self, rng):
        net = build(small_resnet('aps', 'f32'))
        x = rng.standard_normal((4, 1, 16, 16)).astype(np.float32)
        logits = forward(net, x)
        shifted_logits = forward(net, circular_shift(x, 3, -5))
        np.testing.assert_allclose(shifted_logits, logits, rtol=0, atol=1e-4)
        np.testing.assert_array_equal(shifted_logits.argmax(axis=1), logits.argmax(axis=1))

    def test_invariance_with_dense_pooling_and_odd_shapes(self, rng):
        layers = (Conv(3), Act(), MaxPoolDense(2), Downsample(DownsampleKind.APS, 3), Conv(4), Act(),
                  Downsample(DownsampleKind.APS, 2), GlobalAvgPool(), FullyConnected(3))
        net = build(NetworkSpec(layers, (2, 12, 12), 'f64', seed=5))
        x = rng.standard_normal((2, 2, 12, 12))
        for _ in range(5):
            np.testing.assert_allclose(forward(net, shifted(x, rng, 11)), forward(net, x), atol=1e-9)

    def test_baseline_breaks_on_constructed_input(self):
        layers = (Downsample(DownsampleKind.BASELINE), GlobalAvgPool(), FullyConnected(2))
        net = build(NetworkSpec(layers, (1, 2, 2), 'f64'))
        net.params['fc2.weight'] = np.array([[1.0], [-1.0]])
        net.params['fc2.bias'] = np.array([0.0, 0.1])
        x = np.array([[[[1.0, 0.0], [0.0, 0.0]]]])
        assert predict(net, x)[0] == 0
        assert predict(net, circular_shift(x, 0, 1))[0] == 1

        aps = build(with_downsample_kind(net.spec, 'aps'))
        aps.params.update(net.params)
        assert predict(aps, x)[0] == predict(aps, circular_shift(x, 0, 1))[0] == 0

    def test_zero_head_ties_to_class_zero(self, rng):
        net = build(small_resnet('aps'))
        net.params['fc9.weight'][:] = 0
        x = rng.standard_normal((3, 1, 16, 16))
        np.testing.assert_array_equal(forward(net, x), np.zeros((3, 4)))
        np.testing.assert_array_equal(predict(net, x), [0, 0, 0])

    def test_repeated_calls_are_bit_identical(self, rng):
        net = build(small_resnet('aps_lpf', 'f32'))
        x = rng.standard_normal((2, 1, 16, 16))
        np.testing.assert_array_equal(forward(net, x), forward(net, x))

    def test_input_shape_mismatch(self):
        net = build(small_resnet('aps'))
        with pytest.raises(ShapeMismatch):
            forward(net, np.zeros((1, 1, 8, 8)))

    def test_predict_batches(self, rng):
        net = build(small_resnet('baseline'))
        x = rng.standard_normal((5, 1, 16, 16))
        np.testing.assert_array_equal(predict(net, x, batch_size=2), forward(net, x).argmax(axis=1))


class TestTaps:

    def test_taps_have_halved_sizes(self, rng):
        net = build(toy_resnet('aps'))
        _, taps = forward_with_taps(net, rng.standard_normal((1, 1, 32, 32)), ['block4', 'block6', 'block4.conv2'])
        assert taps['block4'].shape == (1, 16, 16, 16)
        assert taps['block6'].shape == (1, 32, 8, 8)
        assert taps['block4.conv2'].shape == (1, 16, 16, 16)

    def test_no_taps_behaves_as_forward(self, rng):
        net = build(small_resnet('aps'))
        x = rng.standard_normal((2, 1, 16, 16))
        logits, taps = forward_with_taps(net, x, [])
        assert taps == {}
        np.testing.assert_array_equal(logits, forward(net, x))

    def test_unknown_tap(self):
        net = build(small_resnet('aps'))
        with pytest.raises(UnknownTap):
            forward_with_taps(net, np.zeros((1, 1, 16, 16)), ['block99'])

    def test_aps_taps_follow_one_pixel_shift(self, rng):
        net = build(small_resnet('aps'))
        x = rng.standard_normal((1, 1, 16, 16))
        names = ['block2', 'block4', 'block6']
        _, taps = forward_with_taps(net, x, names)
        _, taps_shifted = forward_with_taps(net, circular_shift(x, 1, 1), names)
        for name in names:
            assert equal_up_to_shift(taps[name], taps_shifted[name], 1, tol=1e-9) is not None


def identity_block_net(kind, channels=2, size=6):
    block = ResidualBlock(channels, (Conv(channels, 1, bias=False),), Downsample(kind))
    net = build(NetworkSpec((block, GlobalAvgPool(), FullyConnected(2)), (channels, size, size), 'f64'))
    net.params['block0.conv0.weight'] = np.eye(channels).reshape(channels, channels, 1, 1)
    return net


class TestResidualBlock:

    def test_aps_identity_main_branch_doubles_selected_component(self, rng):
        net = identity_block_net(DownsampleKind.APS)
        x = rng.standard_normal((3, 2, 6, 6))
        y, _ = aps_downsample(x, 2)
        np.testing.assert_allclose(residual_block_forward(net, 'block0', x), 2 * y)

    def test_baseline_shortcut_uses_first_component(self, rng):
        net = identity_block_net(DownsampleKind.BASELINE)
        x = rng.standard_normal((2, 2, 6, 6))
        np.testing.assert_allclose(residual_block_forward(net, 'block0', x), 2 * conventional_downsample(x, 2))

    def test_shift_moves_index_but_not_compensated_output(self, rng):
        block = ResidualBlock(3, (Conv(3), Act(), Conv(3)), Downsample(DownsampleKind.APS))
        net = build(NetworkSpec((block, GlobalAvgPool(), FullyConnected(2)), (2, 8, 8), 'f64', seed=3))
        x = rng.standard_normal((1, 2, 8, 8))
        y = residual_block_forward(net, 'block0', x)
        for dy, dx in [(1, 0), (0, 1), (1, 1), (3, -2)]:
            y_shifted = residual_block_forward(net, 'block0', circular_shift(x, dy, dx))
            assert equal_up_to_shift(y, y_shifted, 2, tol=1e-9) is not None

    def test_not_a_block(self):
        net = build(small_resnet('aps'))
        with pytest.raises(UnknownTap):
            residual_block_forward(net, 'conv0', np.zeros((1, 1, 16, 16)))


def gradient_net(kind):
    layers = (
        Conv(2, 3), Act(SMOOTH),
        ResidualBlock(3, (Conv(3, 3), Act(SMOOTH), Conv(3, 3)), Downsample(kind)),
        Act(SMOOTH), Downsample(kind), GlobalAvgPool(), FullyConnected(3),
    )
    return build(NetworkSpec(layers, (1, 8, 8), 'f64', seed=7))


class TestBackward:

    @pytest.mark.parametrize('kind', list(DownsampleKind), ids=lambda k: k.value)
    def test_matches_finite_differences(self, rng, gradcheck, rel_err, kind):
        net = gradient_net(kind)
        x = rng.standard_normal((2, 1, 8, 8))
        labels = np.array([0, 2])
        _, grads = backward(net, x, labels)
        for name, value in net.params.items():

            def loss(v):
                net.params[name] = v
                return softmax_cross_entropy(forward(net, x), labels)[0]

            expected = gradcheck(loss, value)
            net.params[name] = value
            assert rel_err(grads[name], expected) < 1e-6, name

    def test_single_linear_layer_hand_formula(self, rng):
        net = build(NetworkSpec((GlobalAvgPool(), FullyConnected(3)), (4, 1, 1), 'f64'))
        net.params['fc1.weight'] = rng.standard_normal((3, 4))
        x = rng.standard_normal((5, 4, 1, 1))
        labels = np.array([0, 1, 2, 1, 0])
        loss, grads = backward(net, x, labels)
        p = softmax(forward(net, x))
        onehot = np.eye(3)[labels]
        np.testing.assert_allclose(grads['fc1.weight'], (p - onehot).T @ x.reshape(5, 4) / 5)
        np.testing.assert_allclose(grads['fc1.bias'], (p - onehot).sum(axis=0) / 5)
        assert loss == pytest.approx(-np.log(p[np.arange(5), labels]).mean())

    def test_zero_upstream_gives_zero_gradients(self, rng):
        net = build(small_resnet('aps'))
        loss, grads = backward(net, rng.standard_normal((2, 1, 16, 16)), dlogits=np.zeros((2, 4)))
        assert loss is None
        assert grads.keys() == net.params.keys()
        assert not any(np.any(g) for g in grads.values())

    def test_aps_gradient_comes_from_selected_positions(self, rng):
        layers = (Conv(1, 1, bias=False), Downsample(DownsampleKind.APS), GlobalAvgPool(), FullyConnected(2))
        net = build(NetworkSpec(layers, (1, 4, 4), 'f64', seed=2))
        x = rng.standard_normal((1, 1, 4, 4))
        g = np.array([[1.0, -2.0]])
        _, grads = backward(net, x, dlogits=g)
        component, idx = aps_downsample(x, 2)
        upstream = (g @ net.params['fc3.weight']).item()
        assert grads['conv0.weight'].item() == pytest.approx(upstream * component.mean())

    def test_needs_labels_or_upstream(self):
        net = build(small_resnet('aps'))
        with pytest.raises(MissingLabels):
            backward(net, np.zeros((1, 1, 16, 16)))

    def test_label_out_of_range(self):
        net = build(small_resnet('aps'))
        with pytest.raises(LabelOutOfRange):
            backward(net, np.zeros((1, 1, 16, 16)), np.array([4]))


class TestCalibrateReadout:

    def test_logits_are_centred_with_shared_spread(self, rng):
        x = np.abs(rng.standard_normal((40, 1, 16, 16)))
        net = build(small_resnet('aps'))
        calibrated = calibrate_readout(net, x)
        logits = forward(calibrated, x)
        np.testing.assert_allclose(logits.mean(axis=0), 0, atol=1e-10)
        spread = logits.std(axis=0)
        np.testing.assert_allclose(spread, spread.mean(), rtol=1e-8)

    def test_labels_follow_the_input(self, rng):
        x = np.abs(rng.standard_normal((40, 1, 16, 16)))
        net = build(small_resnet('baseline'))
        assert len(np.unique(predict(calibrate_readout(net, x), x))) >= 2

    def test_original_is_untouched(self, rng):
        x = rng.standard_normal((4, 1, 16, 16))
        net = build(small_resnet('aps'))
        bias = net.params['fc9.bias'].copy()
        calibrated = calibrate_readout(net, x)
        np.testing.assert_array_equal(net.params['fc9.bias'], bias)
        np.testing.assert_array_equal(calibrated.params['block2.conv0.weight'], net.params['block2.conv0.weight'])

    def test_aps_invariance_survives(self, rng):
        x = rng.standard_normal((6, 1, 16, 16))
        net = calibrate_readout(build(small_resnet('aps')), x)
        np.testing.assert_allclose(forward(net, shifted(x, rng, 8)), forward(net, x), atol=1e-10)

    def test_needs_two_images(self, rng):
        with pytest.raises(ImproperCalibration):
            calibrate_readout(build(small_resnet('aps')), rng.standard_normal((1, 1, 16, 16)))

    def test_identical_images(self):
        with pytest.raises(ImproperCalibration):
            calibrate_readout(build(small_resnet('aps')), np.ones((3, 1, 16, 16)))


class TestSerialization:

    def test_spec_dict_round_trip(self):
        spec = toy_resnet('aps_lpf', activation=SMOOTH, blur_size=5, precision='f64', seed=9)
        assert spec_from_dict(spec_to_dict(spec)) == spec

    def test_unknown_layer_keys_are_rejected(self):
        with pytest.raises(ImproperNetworkSpec):
            layer_from_dict({'type': 'conv', 'out_channels': 4, 'stride': 2})
        with pytest.raises(ImproperNetworkSpec):
            layer_from_dict({'type': 'pool'})
        with pytest.raises(ImproperNetworkSpec):
            spec_from_dict({'layers': [], 'input_shape': [1, 4, 4], 'batchnorm': True})

    def test_save_and_load(self, tmp_path, rng):
        net = build(small_resnet('aps', 'f32', seed=4))
        net.params['fc9.bias'][:] = [0.5, -1, 2, 0]
        save_network(net, tmp_path / 'net')
        loaded = load_network(tmp_path / 'net')
        assert loaded.spec == net.spec
        for name, value in net.params.items():
            assert loaded.params[name].dtype == value.dtype
            np.testing.assert_array_equal(loaded.params[name], value)
        x = rng.standard_normal((2, 1, 16, 16))
        np.testing.assert_array_equal(forward(loaded, x), forward(net, x))
