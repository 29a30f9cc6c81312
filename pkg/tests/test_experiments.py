from dataclasses import replace

import numpy as np
import pytest

from polyshift.experiments import (SGD, Augmentation, Dataset, DatasetSpec, Family, ImproperDatasetSpec,
                                   ImproperRepetitions, ImproperTrainConfig, Split, TrainConfig, TrainingDiverged,
                                   augment, bench_forward, dataset_loss, dataset_spec_from_dict, generate,
                                   load_dataset, resolve_augmentation, save_dataset, train)
from polyshift.metrics import EmptyDataset, ShiftSampler, accuracy, consistency
from polyshift.network import build, toy_resnet
from polyshift.tensor import PadMode

TINY = DatasetSpec(classes=4, per_class=10, size=16, seed=3)
QUICK = TrainConfig(epochs=2, batch_size=8, learning_rate=0.02, seed=1)


def small_resnet(kind, seed=0, pad=PadMode.CIRCULAR):
    return toy_resnet(kind, channels=(4, 8, 8), size=16, pad=pad, seed=seed)


@pytest.fixture(scope='module')
def tiny():
    return generate(TINY)


class TestGenerate:

    def test_same_seed_same_dataset(self, tiny):
        again = generate(TINY)
        for name in ('train', 'val', 'test'):
            np.testing.assert_array_equal(again.split(name).images, tiny.split(name).images)
            np.testing.assert_array_equal(again.split(name).labels, tiny.split(name).labels)

    def test_seed_changes_images(self, tiny):
        other = generate(replace(TINY, seed=4))
        assert not np.array_equal(other.train.images, tiny.train.images)

    def test_default_split_sizes(self):
        data = generate(DatasetSpec(classes=4, per_class=100, size=8))
        assert (len(data.train), len(data.val), len(data.test)) == (320, 40, 40)
        np.testing.assert_array_equal(np.bincount(data.train.labels), [80] * 4)
        np.testing.assert_array_equal(np.bincount(data.test.labels), [10] * 4)

    def test_shapes_and_types(self, tiny):
        assert tiny.train.images.shape == (32, 1, 16, 16)
        assert tiny.train.labels.dtype == np.int64
        assert set(tiny.val.labels) == {0, 1, 2, 3}

    @pytest.mark.parametrize('family', list(Family))
    def test_families_and_channels(self, family):
        data = generate(DatasetSpec(classes=6, per_class=5, size=12, family=family, channels=3, noise=0.0))
        assert data.train.images.shape == (24, 3, 12, 12)
        assert np.all(data.train.images >= 0)
        assert np.all(data.train.images.reshape(24, -1).max(axis=1) > 0)

    def test_classes_differ_in_pattern(self):
        data = generate(DatasetSpec(classes=2, per_class=10, size=16, family=Family.CHECKERBOARD, noise=0.0))
        energy = [np.abs(np.diff(data.train.images[data.train.labels == k], axis=3)).mean() for k in range(2)]
        assert energy[0] != pytest.approx(energy[1])

    @pytest.mark.parametrize('kwargs', [{'classes': 1}, {'classes': 7}, {'per_class': 0}, {'size': 3},
                                        {'noise': -0.1}, {'channels': 0}])
    def test_degenerate_specs(self, kwargs):
        with pytest.raises(ImproperDatasetSpec):
            generate(DatasetSpec(**kwargs))

    def test_spec_from_dict(self):
        spec = dataset_spec_from_dict({'classes': 3, 'family': 'checkerboard'})
        assert spec == DatasetSpec(classes=3, family=Family.CHECKERBOARD)
        with pytest.raises(ImproperDatasetSpec):
            dataset_spec_from_dict({'colour': 'red'})
        with pytest.raises(ImproperDatasetSpec):
            dataset_spec_from_dict({'family': 'stripes'})

    def test_cache_round_trip(self, tiny, tmp_path):
        save_dataset(tiny, tmp_path / 'data')
        loaded = load_dataset(tmp_path / 'data')
        assert loaded.spec == tiny.spec
        for name in ('train', 'val', 'test'):
            np.testing.assert_array_equal(loaded.split(name).images, tiny.split(name).images)
            np.testing.assert_array_equal(loaded.split(name).labels, tiny.split(name).labels)


class TestTrainConfig:

    @pytest.mark.parametrize('kwargs', [{'learning_rate': -0.1}, {'momentum': 1.0}, {'weight_decay': -1},
                                        {'decay_factor': 0}, {'epochs': -1}, {'batch_size': 0}])
    def test_out_of_range(self, kwargs):
        with pytest.raises(ImproperTrainConfig):
            TrainConfig(**kwargs)

    def test_step_schedule(self):
        sgd = SGD.from_config({}, TrainConfig())
        assert sgd.learning_rate_at(0) == 0.05
        assert sgd.learning_rate_at(19) == 0.05
        assert sgd.learning_rate_at(20) == pytest.approx(0.005)
        assert sgd.learning_rate_at(45) == pytest.approx(0.0005)

    def test_momentum_and_weight_decay(self):
        params = {'w': np.array([1.0, -2.0])}
        sgd = SGD(params, learning_rate=0.1, momentum=0.5, weight_decay=0.0, decay_factor=1.0, decay_period=1)
        g = {'w': np.array([1.0, 1.0])}
        sgd.step(params, g, 0)
        np.testing.assert_allclose(params['w'], [0.9, -2.1])
        sgd.step(params, g, 1)
        np.testing.assert_allclose(params['w'], [0.75, -2.25])

        params = {'w': np.array([2.0])}
        SGD(params, 0.1, 0.0, 0.5, 1.0, 1).step(params, {'w': np.zeros(1)}, 0)
        np.testing.assert_allclose(params['w'], [1.9])


class TestAugment:

    def test_resolution_follows_padding(self):
        assert resolve_augmentation(Augmentation.SHIFT, PadMode.CIRCULAR) == Augmentation.CIRCULAR
        assert resolve_augmentation(Augmentation.SHIFT, PadMode.ZERO) == Augmentation.ZEROPAD
        assert resolve_augmentation(Augmentation.NONE, PadMode.ZERO) == Augmentation.NONE

    def test_none_is_identity(self, rng):
        x = rng.standard_normal((2, 1, 4, 4))
        assert augment(x, Augmentation.NONE, rng) is x

    def test_unresolved_shift(self, rng):
        with pytest.raises(ImproperTrainConfig):
            augment(np.zeros((1, 1, 4, 4)), Augmentation.SHIFT, rng)

    def test_circular_keeps_content(self, rng):
        x = rng.standard_normal((5, 2, 8, 8))
        y = augment(x, Augmentation.CIRCULAR, np.random.default_rng(0), max_shift=3)
        assert y.shape == x.shape
        np.testing.assert_allclose(np.sort(y.reshape(5, -1), axis=1), np.sort(x.reshape(5, -1), axis=1))

    def test_zeropad_crops(self):
        x = np.ones((20, 1, 8, 8))
        y = augment(x, Augmentation.ZEROPAD, np.random.default_rng(0), pad=2)
        assert y.shape == x.shape
        assert np.all(y.sum(axis=(1, 2, 3)) >= 36)
        assert np.any(y == 0)


class TestTrain:

    def test_zero_epochs_leave_parameters(self, tiny):
        net = build(small_resnet('aps'))
        trained, log = train(net, tiny, replace(QUICK, epochs=0))
        assert [r.epoch for r in log] == [0]
        for name, value in net.params.items():
            np.testing.assert_array_equal(trained.params[name], value)

    def test_zero_learning_rate_leaves_parameters(self, tiny):
        net = build(small_resnet('baseline'))
        trained, _ = train(net, tiny, replace(QUICK, learning_rate=0.0, augmentation=Augmentation.SHIFT))
        for name, value in net.params.items():
            np.testing.assert_array_equal(trained.params[name], value)

    def test_aps_consistency_holds_every_epoch(self, tiny):
        net = build(small_resnet('aps'))
        trained, log = train(net, tiny, QUICK)
        assert [r.epoch for r in log] == [0, 1, 2]
        assert all(r.val_consistency == 1.0 for r in log)
        assert consistency(trained, tiny.test.images, ShiftSampler(max_shift=8, seed=2), trials=2).fraction == 1.0

    def test_training_lowers_the_loss(self, tiny):
        net = build(small_resnet('aps', seed=2))
        trained, log = train(net, tiny, replace(QUICK, epochs=4))
        assert dataset_loss(trained, tiny.train, 16) < dataset_loss(net, tiny.train, 16)
        assert np.isfinite(log[-1].train_loss)

    def test_original_network_is_untouched(self, tiny):
        net = build(small_resnet('aps'))
        before = {name: value.copy() for name, value in net.params.items()}
        train(net, tiny, replace(QUICK, epochs=1))
        for name, value in before.items():
            np.testing.assert_array_equal(net.params[name], value)

    def test_bit_identical_logs(self, tiny):
        net = build(small_resnet('lpf', pad=PadMode.ZERO))
        cfg = replace(QUICK, augmentation=Augmentation.SHIFT)
        first = train(net, tiny, cfg)
        second = train(net, tiny, cfg)
        assert first[1] == second[1]
        for name in first[0].params:
            np.testing.assert_array_equal(first[0].params[name], second[0].params[name])

    def test_divergence_aborts(self, tiny):
        net = build(small_resnet('baseline'))
        net.params['fc9.bias'][0] = np.inf
        with pytest.raises(TrainingDiverged):
            train(net, tiny, QUICK)

    def test_empty_training_split(self, tiny):
        empty = Split(np.zeros((0, 1, 16, 16)), np.zeros(0, dtype=np.int64))
        with pytest.raises(EmptyDataset):
            train(build(small_resnet('aps')), Dataset(tiny.spec, empty, tiny.val, tiny.test), QUICK)

    def test_empty_validation_split(self, tiny):
        empty = Split(np.zeros((0, 1, 16, 16)), np.zeros(0, dtype=np.int64))
        with pytest.raises(EmptyDataset):
            train(build(small_resnet('aps')), Dataset(tiny.spec, tiny.train, empty, tiny.test), QUICK)

    @pytest.mark.slow
    def test_aps_accuracy_not_below_baseline(self):
        data = generate(DatasetSpec(classes=4, per_class=40, size=16, seed=0))
        cfg = TrainConfig(epochs=8, batch_size=16, learning_rate=0.05, decay_period=6)
        scores = {}
        for kind in ('aps', 'baseline'):
            scores[kind] = np.median([
                accuracy(train(build(small_resnet(kind, seed)), data, replace(cfg, seed=seed))[0], data.test.images, data.test.labels)
                for seed in range(3)
            ])
        assert scores['aps'] >= scores['baseline']


class TestBench:

    def test_minimum_repetitions(self):
        net = build(small_resnet('aps'))
        with pytest.raises(ImproperRepetitions):
            bench_forward(net, net, (1, 1, 16, 16), repetitions=9)

    def test_record(self):
        aps = build(small_resnet('aps'))
        baseline = build(small_resnet('baseline'))
        record = bench_forward(aps, baseline, (4, 1, 16, 16), repetitions=10, warmup=2)
        assert record.repetitions == 10
        assert record.median_a > 0 and record.median_b > 0
        assert record.mad_a >= 0 and record.mad_b >= 0
        assert record.rss_bytes > 0
        assert record.ratio <= 3.0

    @pytest.mark.slow
    def test_identical_nets_within_noise(self):
        net = build(small_resnet('aps'))
        record = bench_forward(net, net, (8, 1, 16, 16), repetitions=50, warmup=10)
        assert 0.8 <= record.ratio <= 1.25
