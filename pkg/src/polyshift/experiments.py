"""Synthetic datasets, the SGD training loop, shift augmentation and the forward-pass timing benchmark."""
import os
from dataclasses import asdict, dataclass
from enum import Enum
from logging import getLogger
from timeit import default_timer

import numpy as np
import psutil
import yaml

from . import PolyshiftError
from .metrics import EmptyDataset, SamplerKind, ShiftSampler, accuracy, consistency, zero_pad_crop
from .network import Network, backward, forward
from .tensor import PadMode, as_tensor, circular_shift, load_tensor, save_tensor, softmax_cross_entropy

logger = getLogger('polyshift.experiments')

SPLIT_FRACTIONS = (0.8, 0.1)
SPLITS = ('train', 'val', 'test')
DATASET_FILE = 'dataset.yaml'
MIN_REPETITIONS = 10


class Family(Enum):
    SHAPES = 'shapes'
    CHECKERBOARD = 'checkerboard'


class Augmentation(Enum):
    NONE = 'none'
    SHIFT = 'shift'
    CIRCULAR = 'circular'
    ZEROPAD = 'zeropad'


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 4
    per_class: int = 100
    size: int = 32
    family: Family = Family.SHAPES
    channels: int = 1
    noise: float = 0.05
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class Dataset:
    spec: DatasetSpec
    train: Split
    val: Split
    test: Split

    def split(self, name:str) -> Split:
        return getattr(self, name)


def _centered_grid(size):
    offsets = np.arange(size) - size // 2
    return offsets[:, None], offsets[None, :]


def _shape_template(label, size, radius):
    r, c = _centered_grid(size)
    thickness = max(1.0, radius / 3)
    disc = r * r + c * c <= radius * radius
    horizontal = (np.abs(r) <= thickness) & (np.abs(c) <= 1.5 * radius)
    vertical = (np.abs(c) <= thickness) & (np.abs(r) <= 1.5 * radius)
    match label:
        case 0:
            mask = disc
        case 1:
            mask = horizontal
        case 2:
            mask = vertical
        case 3:
            mask = horizontal | vertical
        case 4:
            mask = disc & (r * r + c * c >= (0.55 * radius) ** 2)
        case 5:
            mask = (np.abs(r - c) <= thickness) & (np.abs(r + c) <= 2 * radius)
    return mask.astype(np.float64)


def _texture_template(label, size, radius):
    r, c = _centered_grid(size)
    patch = (np.abs(r) <= radius) & (np.abs(c) <= radius)
    match label:
        case 0:
            texture = (r + c) % 2
        case 1:
            texture = r % 2
        case 2:
            texture = c % 2
        case 3:
            texture = (r // 2 + c // 2) % 2
        case 4:
            texture = (r - c) % 4 < 2
        case 5:
            texture = (r // 2) % 2
    return np.where(patch, texture, 0).astype(np.float64)


TEMPLATES = {Family.SHAPES: _shape_template, Family.CHECKERBOARD: _texture_template}
MAX_CLASSES = 6


def _draw_image(spec, label, rng):
    radius = spec.size / 6 * rng.uniform(0.8, 1.2) if spec.family == Family.SHAPES else spec.size / 4 * rng.uniform(0.7, 1.0)
    template = TEMPLATES[spec.family](label, spec.size, radius)
    # wraparound placement keeps every circular translate a valid sample
    template = np.roll(template, tuple(rng.integers(0, spec.size, size=2)), axis=(0, 1))
    amplitudes = rng.uniform(0.5, 1.0, size=spec.channels)
    image = amplitudes[:, None, None] * template[None]
    return image + spec.noise * rng.standard_normal(image.shape)


def _validate_spec(spec:DatasetSpec):
    if not 2 <= spec.classes <= MAX_CLASSES:
        raise ImproperDatasetSpec(f'Datasets hold between 2 and {MAX_CLASSES} classes, got {spec.classes}')
    if spec.per_class < 1 or spec.channels < 1:
        raise ImproperDatasetSpec(f'Need at least one image per class and one channel, got {spec}')
    if spec.size < 4:
        raise ImproperDatasetSpec(f'Canvas must be at least 4x4, got {spec.size}')
    if spec.noise < 0:
        raise ImproperDatasetSpec(f'Noise level must be non-negative, got {spec.noise}')


def generate(spec:DatasetSpec) -> Dataset:
    """Balanced, seeded dataset split 0.8/0.1/0.1 within every class."""
    _validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    n_train = int(SPLIT_FRACTIONS[0] * spec.per_class)
    n_val = int(SPLIT_FRACTIONS[1] * spec.per_class)
    parts = {name: ([], []) for name in SPLITS}
    for label in range(spec.classes):
        images = [_draw_image(spec, label, rng) for _ in range(spec.per_class)]
        bounds = {'train': (0, n_train), 'val': (n_train, n_train + n_val), 'test': (n_train + n_val, spec.per_class)}
        for name, (start, stop) in bounds.items():
            parts[name][0].extend(images[start:stop])
            parts[name][1].extend([label] * (stop - start))
    splits = {}
    for name in SPLITS:
        images, labels = parts[name]
        order = rng.permutation(len(labels))
        shape = (0, spec.channels, spec.size, spec.size)
        stacked = np.stack(images)[order] if images else np.zeros(shape)
        splits[name] = Split(stacked, np.asarray(labels, dtype=np.int64)[order])
    logger.info(f'Generated {spec.family.value} dataset: {len(splits["train"])}/{len(splits["val"])}/{len(splits["test"])} images')
    return Dataset(spec, **splits)


def _spec_to_dict(spec:DatasetSpec):
    d = asdict(spec)
    d['family'] = spec.family.value
    return d


def dataset_spec_from_dict(d:dict) -> DatasetSpec:
    unknown = set(d) - set(DatasetSpec.__dataclass_fields__)
    if unknown:
        raise ImproperDatasetSpec(f'Unknown dataset keys {sorted(unknown)}')
    d = dict(d)
    try:
        if 'family' in d:
            d['family'] = Family(d['family'])
    except ValueError:
        raise ImproperDatasetSpec(f'Unknown pattern family {d["family"]!r}')
    return DatasetSpec(**d)


def save_dataset(data:Dataset, directory):
    os.makedirs(directory, exist_ok=True)
    for name in SPLITS:
        split = data.split(name)
        save_tensor(os.path.join(directory, f'{name}_images.psft'), split.images)
        save_tensor(os.path.join(directory, f'{name}_labels.psft'), split.labels.astype(np.float64).reshape(-1, 1, 1, 1))
    with open(os.path.join(directory, DATASET_FILE), 'w') as stream:
        stream.write(yaml.safe_dump(_spec_to_dict(data.spec), sort_keys=False))
    logger.info(f'Cached dataset in {directory}')


def load_dataset(directory) -> Dataset:
    with open(os.path.join(directory, DATASET_FILE), 'r') as stream:
        spec = dataset_spec_from_dict(yaml.safe_load(stream))
    splits = {}
    for name in SPLITS:
        images = load_tensor(os.path.join(directory, f'{name}_images.psft'))
        labels = load_tensor(os.path.join(directory, f'{name}_labels.psft')).reshape(-1).astype(np.int64)
        splits[name] = Split(images, labels)
    return Dataset(spec, **splits)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 0.1
    decay_period: int = 20
    augmentation: Augmentation = Augmentation.NONE
    max_shift: int = 3
    pad: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.decay_period < 1:
            raise ImproperTrainConfig(f'Epochs, batch size and decay period out of range in {self}')
        if self.learning_rate < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ImproperTrainConfig(f'Rates out of range in {self}')
        if not 0 < self.decay_factor <= 1:
            raise ImproperTrainConfig(f'Decay factor must lie in (0, 1], got {self.decay_factor}')


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    val_consistency: float


class SGD():
    """Heavy-ball momentum with L2 weight decay added to the gradient and a step learning-rate schedule."""

    logger = getLogger('polyshift.experiments.sgd')

    def __init__(self, params:dict, learning_rate, momentum, weight_decay, decay_factor, decay_period):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_factor = decay_factor
        self.decay_period = decay_period
        self.velocity = {name: np.zeros(value.shape) for name, value in params.items()}

    @classmethod
    def from_config(cls, params:dict, cfg:TrainConfig):
        return cls(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.decay_factor, cfg.decay_period)

    def learning_rate_at(self, epoch:int):
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_period)

    def step(self, params:dict, grads:dict, epoch:int):
        lr = self.learning_rate_at(epoch)
        for name, value in params.items():
            g = grads[name] + self.weight_decay * value
            self.velocity[name] = self.momentum * self.velocity[name] + g
            params[name] = (value - lr * self.velocity[name]).astype(value.dtype)


def resolve_augmentation(augmentation:Augmentation, pad_mode:PadMode) -> Augmentation:
    """SHIFT pairs the shift type with the padding: circular shifts for circular padding, zero-pad crops otherwise."""
    if augmentation != Augmentation.SHIFT:
        return augmentation
    return Augmentation.CIRCULAR if pad_mode == PadMode.CIRCULAR else Augmentation.ZEROPAD


def augment(x, augmentation:Augmentation, rng:np.random.Generator, max_shift:int=3, pad:int=3):
    if augmentation == Augmentation.NONE:
        return x
    if augmentation == Augmentation.SHIFT:
        raise ImproperTrainConfig('Resolve SHIFT augmentation against the padding mode first')
    extent = max_shift if augmentation == Augmentation.CIRCULAR else pad
    shifts = rng.integers(-extent, extent + 1, size=(len(x), 2))
    if augmentation == Augmentation.CIRCULAR:
        return np.concatenate([circular_shift(x[n:n + 1], dy, dx) for n, (dy, dx) in enumerate(shifts)])
    return np.concatenate([zero_pad_crop(x[n:n + 1], pad, dy, dx) for n, (dy, dx) in enumerate(shifts)])


def validation_sampler(net:Network, cfg:TrainConfig) -> ShiftSampler:
    kind = SamplerKind.CIRCULAR if net.spec.pad == PadMode.CIRCULAR else SamplerKind.ZEROPAD
    return ShiftSampler(kind, cfg.max_shift, cfg.pad, cfg.seed)


def dataset_loss(net:Network, split:Split, batch_size:int) -> float:
    total = 0.0
    for start in range(0, len(split), batch_size):
        loss, _ = softmax_cross_entropy(forward(net, split.images[start:start + batch_size]), split.labels[start:start + batch_size])
        total += loss * len(split.labels[start:start + batch_size])
    return total / len(split)


def _evaluate(net, data, cfg, sampler, epoch, train_loss):
    val_acc = accuracy(net, data.val.images, data.val.labels, cfg.batch_size)
    val_consistency = consistency(net, data.val.images, sampler, 1, cfg.batch_size).fraction
    record = EpochRecord(epoch, float(train_loss), val_acc, val_consistency)
    logger.info(f'Epoch {epoch}: loss {record.train_loss:.4f}, val acc {record.val_acc:.4f}, val consistency {record.val_consistency:.4f}')
    return record


def train(net:Network, data:Dataset, cfg:TrainConfig):
    """Train a copy of ``net``; returns (trained net, [EpochRecord]) with epoch 0 measured before any update."""
    for name in ('train', 'val'):
        if len(getattr(data, name)) == 0:
            raise EmptyDataset(f'{name.capitalize()} split is empty')
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    optimizer = SGD.from_config(net.params, cfg)
    augmentation = resolve_augmentation(cfg.augmentation, net.spec.pad)
    sampler = validation_sampler(net, cfg)
    log = [_evaluate(net, data, cfg, sampler, 0, dataset_loss(net, data.train, cfg.batch_size))]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data.train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            x = augment(data.train.images[batch], augmentation, rng, cfg.max_shift, cfg.pad)
            loss, grads = backward(net, x, data.train.labels[batch])
            if not np.isfinite(loss):
                raise TrainingDiverged(f'Loss became {loss} at epoch {epoch}, batch starting at {start}')
            optimizer.step(net.params, grads, epoch - 1)
            total += loss * len(batch)
        log.append(_evaluate(net, data, cfg, sampler, epoch, total / len(order)))
    return net, log


@dataclass(frozen=True)
class BenchRecord:
    repetitions: int
    median_a: float
    mad_a: float
    median_b: float
    mad_b: float
    rss_bytes: int

    @property
    def ratio(self):
        return self.median_a / self.median_b


def _median_mad(samples):
    samples = np.asarray(samples)
    median = float(np.median(samples))
    return median, float(np.median(np.abs(samples - median)))


def bench_forward(net_a:Network, net_b:Network, shape, repetitions:int=50, warmup:int=10, seed:int=0) -> BenchRecord:
    if repetitions < MIN_REPETITIONS:
        raise ImproperRepetitions(f'Need at least {MIN_REPETITIONS} repetitions, got {repetitions}')
    x = np.random.default_rng(seed).standard_normal(tuple(shape))
    xa = as_tensor(x, net_a.spec.precision)
    xb = as_tensor(x, net_b.spec.precision)
    for _ in range(warmup):
        forward(net_a, xa)
        forward(net_b, xb)
    times_a, times_b = [], []
    for _ in range(repetitions):
        start = default_timer()
        forward(net_a, xa)
        middle = default_timer()
        forward(net_b, xb)
        times_b.append(default_timer() - middle)
        times_a.append(middle - start)
    median_a, mad_a = _median_mad(times_a)
    median_b, mad_b = _median_mad(times_b)
    record = BenchRecord(repetitions, median_a, mad_a, median_b, mad_b, psutil.Process(os.getpid()).memory_info().rss)
    logger.info(f'Forward timing: {median_a * 1e3:.3f} ms vs {median_b * 1e3:.3f} ms, ratio {record.ratio:.3f}')
    return record


class ExperimentError(PolyshiftError):
    pass

class ImproperDatasetSpec(ExperimentError):
    pass

class ImproperTrainConfig(ExperimentError):
    pass

class ImproperRepetitions(ExperimentError):
    pass

class TrainingDiverged(ExperimentError):
    pass
