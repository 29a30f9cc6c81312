"""Stride-s polyphase decomposition, adaptive polyphase sampling (APS) and conventional sampling.

Component (i, j) of a stride-s decomposition is ``x[:, :, i::s, j::s]``. APS
keeps, per image, the component with the largest (or smallest) norm taken
over all channels and pixels of that image, so a shifted image selects the
matching (shifted) component of the original.

Downsampling outputs always have the static shape (ceil(H/s), ceil(W/s)).
For extents divisible by s this is exactly the component; otherwise the
selected component is sampled on the periodic grid, rows ``(s*n1 + i) mod H``,
which reads the wrapped-around pixels of the circular model.
"""
from dataclasses import dataclass
from enum import Enum
from logging import getLogger
from typing import NamedTuple

import numpy as np

from . import PolyshiftError
from .tensor import GRAD_DTYPE, ShapeMismatch, Tensor, check_rank4, circular_shift

logger = getLogger('polyshift.polyphase')

DEFAULT_SHIFT_TOLERANCE = 1e-6


class Norm(Enum):
    L1 = 'l1'
    L2 = 'l2'
    LINF = 'linf'
    L1_L2 = 'l1l2'


class Mode(Enum):
    ARGMAX = 'argmax'
    ARGMIN = 'argmin'


class TieRule(Enum):
    LEXICOGRAPHIC_FIRST = 'lexicographic_first'


@dataclass(frozen=True)
class SelectionCriterion:
    norm: Norm = Norm.L2
    mode: Mode = Mode.ARGMAX
    tie_rule: TieRule = TieRule.LEXICOGRAPHIC_FIRST

    @property
    def name(self):
        return f'{self.mode.value}_{self.norm.value}'

    @classmethod
    def parse(cls, text:str):
        """'argmax_l2', 'argmin_l1', 'argmax_linf', 'argmax_l1l2', ..."""
        try:
            mode, norm = text.lower().split('_', 1)
            return cls(Norm(norm), Mode(mode))
        except (ValueError, AttributeError):
            raise ImproperCriterion(f'Cannot parse selection criterion {text!r}, expected e.g. "argmax_l2"')


class ApsIndex(NamedTuple):
    i: int
    j: int


@dataclass(frozen=True, eq=False)
class PolyphaseSet:
    stride: int
    components: tuple
    source_shape: tuple

    def component(self, i:int, j:int) -> Tensor:
        if not (0 <= i < self.stride and 0 <= j < self.stride):
            raise ImproperApsIndex(f'Component ({i}, {j}) outside stride {self.stride}')
        return self.components[i][j]

    def __iter__(self):
        for i, row in enumerate(self.components):
            for j, component in enumerate(row):
                yield ApsIndex(i, j), component


def _check_stride(x, s):
    check_rank4(x)
    if int(s) != s or s < 1:
        raise StrideOutOfRange(f'Stride must be a positive integer, got {s}')
    if s > x.shape[2] or s > x.shape[3]:
        raise StrideOutOfRange(f'Stride {s} exceeds spatial extent {x.shape[2:]}')


def decompose(x:Tensor, s:int) -> PolyphaseSet:
    _check_stride(x, s)
    components = tuple(
        tuple(np.ascontiguousarray(x[:, :, i::s, j::s]) for j in range(s))
        for i in range(s)
    )
    return PolyphaseSet(int(s), components, tuple(x.shape[2:]))


def reassemble(ps:PolyphaseSet) -> Tensor:
    first = ps.component(0, 0)
    out = np.empty(first.shape[:2] + ps.source_shape, dtype=first.dtype)
    for (i, j), component in ps:
        out[:, :, i::ps.stride, j::ps.stride] = component
    return out


def component_scores(ps:PolyphaseSet, c:SelectionCriterion) -> np.ndarray:
    s = ps.stride
    N = ps.component(0, 0).shape[0]
    scores = np.empty((N, s, s), dtype=np.float64)
    for (i, j), component in ps:
        # sorted so circularly shifted copies of a component score bit-identically
        magnitudes = np.sort(np.abs(component.astype(np.float64)).reshape(N, -1), axis=1)
        l1 = magnitudes.sum(axis=1)
        match c.norm:
            case Norm.L1:
                scores[:, i, j] = l1
            case Norm.L2:
                scores[:, i, j] = np.sqrt((magnitudes * magnitudes).sum(axis=1))
            case Norm.LINF:
                scores[:, i, j] = magnitudes[:, -1]
            case Norm.L1_L2:
                scores[:, i, j] = l1 + np.sqrt((magnitudes * magnitudes).sum(axis=1))
    return scores


def select(ps:PolyphaseSet, c:SelectionCriterion) -> tuple:
    """One ApsIndex per image; ties go to the lexicographically first (i, j)."""
    scores = component_scores(ps, c).reshape(-1, ps.stride * ps.stride)
    best = scores.argmax(axis=1) if c.mode == Mode.ARGMAX else scores.argmin(axis=1)
    return tuple(ApsIndex(*divmod(int(k), ps.stride)) for k in best)


def aps_margin(x:Tensor, s:int, c:SelectionCriterion) -> np.ndarray:
    scores = np.sort(component_scores(decompose(x, s), c).reshape(x.shape[0], -1), axis=1)
    if scores.shape[1] < 2:
        return np.full(x.shape[0], np.inf)
    if c.mode == Mode.ARGMAX:
        return scores[:, -1] - scores[:, -2]
    return scores[:, 1] - scores[:, 0]


def _sampling_grid(extent, s, offset):
    return (s * np.arange(-(-extent // s)) + offset) % extent


def _normalize_indices(idx, N, s):
    if isinstance(idx, ApsIndex) or (len(idx) == 2 and all(isinstance(v, (int, np.integer)) for v in idx)):
        idx = (ApsIndex(*idx),) * N
    idx = tuple(ApsIndex(*map(int, v)) for v in idx)
    if len(idx) != N:
        raise ImproperApsIndex(f'Got {len(idx)} indices for a batch of {N}')
    for i, j in idx:
        if not (0 <= i < s and 0 <= j < s):
            raise ImproperApsIndex(f'Index ({i}, {j}) outside stride {s}')
    return idx


def downsample_with_index(x:Tensor, s:int, idx) -> Tensor:
    _check_stride(x, s)
    N, C, H, W = x.shape
    idx = _normalize_indices(idx, N, s)
    out = np.empty((N, C, -(-H // s), -(-W // s)), dtype=x.dtype)
    for n, (i, j) in enumerate(idx):
        rows = _sampling_grid(H, s, i)
        cols = _sampling_grid(W, s, j)
        out[n] = x[n][:, rows[:, None], cols[None, :]]
    return out


def conventional_downsample(x:Tensor, s:int) -> Tensor:
    _check_stride(x, s)
    return np.ascontiguousarray(x[:, :, ::s, ::s])


def aps_downsample(x:Tensor, s:int, c:SelectionCriterion=SelectionCriterion()):
    idx = select(decompose(x, s), c)
    logger.debug(f'APS stride {s} on {x.shape} selected {idx}')
    return downsample_with_index(x, s, idx), idx


def aps_backward(upstream:Tensor, idx, s:int, in_shape) -> Tensor:
    N, C, H, W = in_shape
    expected = (N, C, -(-H // s), -(-W // s))
    if upstream.shape != expected:
        raise ShapeMismatch(f'Upstream gradient shape {upstream.shape} does not match sampled shape {expected}')
    idx = _normalize_indices(idx, N, s)
    dx = np.zeros(in_shape, dtype=GRAD_DTYPE)
    for n, (i, j) in enumerate(idx):
        rows = _sampling_grid(H, s, i)
        cols = _sampling_grid(W, s, j)
        dx[n][:, rows[:, None], cols[None, :]] = upstream[n]
    return dx


def shift_candidates(max_shift:int):
    """All (dy, dx) with |dy|, |dx| <= max_shift, smallest magnitude first, non-negative before negative."""
    span = range(-max_shift, max_shift + 1)
    shifts = [(dy, dx) for dy in span for dx in span]
    return sorted(shifts, key=lambda d: (abs(d[0]), abs(d[1]), d[0] < 0, d[1] < 0))


def equal_up_to_shift(a:Tensor, b:Tensor, max_shift:int, tol:float=DEFAULT_SHIFT_TOLERANCE):
    if a.shape != b.shape:
        raise ShapeMismatch(f'Cannot compare tensors of shapes {a.shape} and {b.shape}')
    for dy, dx in shift_candidates(max_shift):
        if np.max(np.abs(circular_shift(a, dy, dx) - b), initial=0.0) <= tol:
            return dy, dx
    return None


def component_shift_map(x:Tensor, s:int=2) -> dict:
    """Check that the components of a one-pixel diagonal shift of ``x`` are permuted, shifted components of ``x``.

    For stride s the shifted component (i, j) equals component ((i-1) mod s, (j-1) mod s)
    of ``x``, itself shifted by one pixel along every axis where the index wrapped to 0.
    Returns the max absolute residual for each (i, j); requires H, W divisible by s.
    """
    _check_stride(x, s)
    if x.shape[2] % s or x.shape[3] % s:
        raise StrideOutOfRange(f'Permutation property needs extents divisible by {s}, got {x.shape[2:]}')
    original = decompose(x, s)
    shifted = decompose(circular_shift(x, 1, 1), s)
    residuals = {}
    for (i, j), component in shifted:
        source = original.component((i - 1) % s, (j - 1) % s)
        expected = circular_shift(source, int(i == 0), int(j == 0))
        residuals[ApsIndex(i, j)] = float(np.max(np.abs(component - expected)))
    return residuals


class PolyphaseError(PolyshiftError):
    pass

class StrideOutOfRange(PolyphaseError):
    pass

class ImproperApsIndex(PolyphaseError):
    pass

class ImproperCriterion(PolyphaseError):
    pass
