"""Consistency, accuracy, out-of-distribution transforms and shift-compensated feature stability."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from logging import getLogger

import numpy as np

from . import PolyshiftError
from .network import Network, forward, forward_with_taps, predict, residual_taps
from .polyphase import shift_candidates
from .tensor import ShapeMismatch, Tensor, as_tensor, check_rank4, circular_shift

logger = getLogger('polyshift.metrics')

STABILITY_RADIUS = 1


class SamplerKind(Enum):
    CIRCULAR = 'circular'
    ZEROPAD = 'zeropad'


@dataclass(frozen=True)
class ShiftSampler:
    """Draws one non-zero shift per (image, trial) pair from a generator seeded by (seed, pair index).

    Circular shifts are uniform over [-max_shift, max_shift]^2; zero-pad crops are
    uniform over [-pad, pad]^2 on a canvas padded with ``pad`` zeros on every side.
    """
    kind: SamplerKind = SamplerKind.CIRCULAR
    max_shift: int = 3
    pad: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.max_shift < 1 or self.pad < 1:
            raise ImproperSampler(f'Sampler needs max_shift >= 1 and pad >= 1, got {self.max_shift} and {self.pad}')
        if self.seed < 0:
            raise ImproperSampler(f'Sampler seed must be non-negative, got {self.seed}')

    @property
    def name(self):
        if self.kind == SamplerKind.CIRCULAR:
            return f'circular{self.max_shift}'
        return f'zeropad{self.pad}'

    @property
    def extent(self):
        return self.max_shift if self.kind == SamplerKind.CIRCULAR else self.pad

    def draw(self, pair_index:int):
        rng = np.random.default_rng((self.seed, pair_index))
        while True:
            dy, dx = rng.integers(-self.extent, self.extent + 1, size=2)
            if dy or dx:
                return int(dy), int(dx)

    def apply(self, x:Tensor, dy:int, dx:int) -> Tensor:
        if self.kind == SamplerKind.CIRCULAR:
            return circular_shift(x, dy, dx)
        return zero_pad_crop(x, self.pad, dy, dx)


@dataclass(frozen=True)
class ConsistencyReport:
    sampler: str
    trials: int
    total: int
    consistent: int
    max_logit_gap: float
    per_shift: dict = field(default_factory=dict)
    label_counts: tuple = ()

    @property
    def fraction(self):
        return self.consistent / self.total

    @property
    def distinct_labels(self):
        return sum(1 for count in self.label_counts if count)


@dataclass(frozen=True, eq=False)
class StabilityEntry:
    delta: np.ndarray
    shift: tuple
    max_energy_channel: int

    @property
    def max_delta(self):
        return float(self.delta.max())

    @property
    def mean_delta(self):
        return float(self.delta.mean())

    def channel_max(self, channel:int):
        return float(self.delta[:, channel].max())

    def channel_mean(self, channel:int):
        return float(self.delta[:, channel].mean())


@dataclass(frozen=True)
class StabilityReport:
    input_shift: tuple
    entries: dict

    @property
    def max_delta(self):
        return max(entry.max_delta for entry in self.entries.values())


def _consistency_chunk(net, images, start, sampler, trials):
    base = forward(net, images)
    labels = base.argmax(axis=1)
    n = len(images)
    consistent = np.zeros((n, trials), dtype=bool)
    shifts = np.zeros((n, trials, 2), dtype=np.int64)
    gap = 0.0
    for t in range(trials):
        drawn = [sampler.draw((start + k) * trials + t) for k in range(n)]
        shifted = np.concatenate([sampler.apply(images[k:k + 1], dy, dx) for k, (dy, dx) in enumerate(drawn)])
        logits = forward(net, shifted)
        consistent[:, t] = logits.argmax(axis=1) == labels
        shifts[:, t] = drawn
        gap = max(gap, float(np.max(np.abs(logits.astype(np.float64) - base))))
    return consistent, shifts, gap, labels


def consistency(net:Network, images, sampler:ShiftSampler, trials:int=1, batch_size:int=64, workers:int=1) -> ConsistencyReport:
    """Fraction of (image, shifted image) pairs that receive the same predicted label.

    Image chunks may run on a thread pool; every pair draws its shift from its own
    index, so the report does not depend on ``workers`` or ``batch_size``.
    """
    images = as_tensor(images, net.spec.precision)
    if len(images) == 0:
        raise EmptyDataset('Cannot measure consistency on an empty dataset')
    if trials < 1:
        raise ImproperTrials(f'Need at least one trial per image, got {trials}')
    starts = range(0, len(images), batch_size)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(_consistency_chunk, net, images[s:s + batch_size], s, sampler, trials) for s in starts]
        results = [f.result() for f in futures]
    consistent = np.concatenate([r[0] for r in results])
    shifts = np.concatenate([r[1] for r in results])
    per_shift = {}
    for (dy, dx), ok in zip(shifts.reshape(-1, 2).tolist(), consistent.reshape(-1).tolist()):
        total, hits = per_shift.get((dy, dx), (0, 0))
        per_shift[(dy, dx)] = (total + 1, hits + int(ok))
    report = ConsistencyReport(
        sampler.name,
        trials,
        int(consistent.size),
        int(consistent.sum()),
        max(r[2] for r in results),
        dict(sorted(per_shift.items())),
        tuple(int(c) for c in np.bincount(np.concatenate([r[3] for r in results]), minlength=net.classes)),
    )
    logger.debug(f'Consistency {report.consistent}/{report.total} with sampler {sampler.name}, max logit gap {report.max_logit_gap:.3e}, labels {report.label_counts}')
    return report


def accuracy(net:Network, images, labels, batch_size:int=64) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyDataset('Cannot measure accuracy on an empty dataset')
    if len(labels) != len(images):
        raise ShapeMismatch(f'{len(images)} images but {len(labels)} labels')
    return float(np.mean(predict(net, images, batch_size) == labels))


def stability_delta(y:Tensor, y_shifted:Tensor) -> StabilityEntry:
    """Squared error between ``y_shifted`` and the best one-pixel circular translate of ``y``.

    Candidates are the nine shifts with |dy|, |dx| <= 1; ties go to the smallest shift, (0, 0) first.
    """
    check_rank4(y)
    if y.shape != y_shifted.shape:
        raise ShapeMismatch(f'Cannot compare feature maps of shapes {y.shape} and {y_shifted.shape}')
    y = y.astype(np.float64)
    y_shifted = y_shifted.astype(np.float64)
    best, best_error = None, np.inf
    for dy, dx in shift_candidates(STABILITY_RADIUS):
        error = np.linalg.norm(y_shifted - circular_shift(y, dy, dx))
        if error < best_error:
            best, best_error = (dy, dx), error
    delta = np.square(y_shifted - circular_shift(y, *best))
    energy = np.square(y).sum(axis=(0, 2, 3))
    return StabilityEntry(delta, best, int(np.argmax(energy)))


def stability(net:Network, x, shift=(1, 1), taps=None) -> StabilityReport:
    taps = residual_taps(net) if taps is None else list(taps)
    x = as_tensor(x, net.spec.precision)
    _, original = forward_with_taps(net, x, taps)
    _, shifted = forward_with_taps(net, circular_shift(x, *shift), taps)
    entries = {tap: stability_delta(original[tap], shifted[tap]) for tap in taps}
    report = StabilityReport(tuple(shift), entries)
    logger.debug(f'Stability under shift {shift}: max delta {report.max_delta:.3e}')
    return report


def random_erase(x:Tensor, patch:int, seed:int) -> Tensor:
    check_rank4(x)
    N, _, H, W = x.shape
    if patch < 0 or patch > H or patch > W:
        raise ImproperPatch(f'Patch size {patch} does not fit spatial extent {(H, W)}')
    out = x.copy()
    if patch == 0:
        return out
    rng = np.random.default_rng(seed)
    for n in range(N):
        top = rng.integers(0, H - patch + 1)
        left = rng.integers(0, W - patch + 1)
        out[n, :, top:top + patch, left:left + patch] = 0
    return out


def vertical_flip(x:Tensor) -> Tensor:
    check_rank4(x)
    return np.ascontiguousarray(x[:, :, ::-1, :])


def zero_pad_crop(x:Tensor, pad:int, dy:int, dx:int) -> Tensor:
    check_rank4(x)
    if abs(dy) > pad or abs(dx) > pad:
        raise ImproperPatch(f'Crop offset {(dy, dx)} exceeds padding {pad}')
    H, W = x.shape[2:]
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return np.ascontiguousarray(padded[:, :, pad - dy:pad - dy + H, pad - dx:pad - dx + W])


class MetricsError(PolyshiftError):
    pass

class ImproperSampler(MetricsError):
    pass

class ImproperTrials(MetricsError):
    pass

class ImproperPatch(MetricsError):
    pass

class EmptyDataset(MetricsError):
    pass
