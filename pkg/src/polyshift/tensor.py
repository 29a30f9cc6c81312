"""Rank-4 (N, C, H, W) real tensors and the forward/vjp primitives the network is made of.

Tensors are plain numpy arrays of dtype float32 or float64. No function here
mutates its inputs. Reverse-mode products (the ``*_vjp`` functions) always
work in float64 whatever the forward precision.

Shift convention: ``circular_shift(x, dy, dx)`` moves content down/right for
positive ``dy``/``dx``, i.e. ``x'(n1, n2) = x(n1 - dy, n2 - dx)``.
"""
import struct
from dataclasses import dataclass
from enum import Enum
from logging import getLogger

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.polynomial import polynomial

from . import PolyshiftError

logger = getLogger('polyshift.tensor')

Tensor = np.ndarray

PRECISIONS = {'f32': np.dtype(np.float32), 'f64': np.dtype(np.float64)}
FILE_MAGIC = b'PSFT'
FILE_HEADER = struct.Struct('<4sB4I')
FILE_TAGS = {np.dtype(np.float32): 32, np.dtype(np.float64): 64}
GRAD_DTYPE = np.float64


class PadMode(Enum):
    CIRCULAR = 'circular'
    ZERO = 'zero'


@dataclass(frozen=True)
class Activation:
    kind: str = 'relu'
    coefficients: tuple = ()

    def __post_init__(self):
        if self.kind not in ('relu', 'polynomial', 'identity'):
            raise ImproperActivation(f'Unknown activation {self.kind!r}')
        if self.kind == 'polynomial':
            if len(self.coefficients) < 2:
                raise ImproperActivation(f'Polynomial activation needs degree >= 1, got coefficients {self.coefficients}')
            if not np.all(np.isfinite(self.coefficients)):
                raise ImproperActivation(f'Polynomial coefficients must be finite, got {self.coefficients}')
            object.__setattr__(self, 'coefficients', tuple(float(a) for a in self.coefficients))

    @classmethod
    def relu(cls):
        return cls('relu')

    @classmethod
    def identity(cls):
        return cls('identity')

    @classmethod
    def polynomial(cls, *coefficients):
        return cls('polynomial', tuple(coefficients))

    @property
    def degree(self):
        return len(self.coefficients) - 1 if self.kind == 'polynomial' else 1


def as_tensor(data, precision=None) -> Tensor:
    x = np.asarray(data)
    if precision is not None:
        x = x.astype(string_to_dtype(precision), copy=False)
    elif x.dtype not in FILE_TAGS:
        x = x.astype(np.float64)
    if x.ndim != 4:
        raise ImproperTensor(f'Expected a rank-4 (N, C, H, W) tensor, got shape {x.shape}')
    if not np.all(np.isfinite(x)):
        raise ImproperTensor('Tensor contains NaN or Inf')
    return x


def string_to_dtype(precision:str):
    try:
        return PRECISIONS[precision.lower()]
    except (KeyError, AttributeError):
        raise ImproperPrecision(f'Unknown precision {precision!r}, expected one of {sorted(PRECISIONS)}')


def check_rank4(x, name='x'):
    if x.ndim != 4:
        raise ShapeMismatch(f'{name} must be rank 4 (N, C, H, W), got shape {x.shape}')


def conv_padding(k:int):
    return (k - 1) // 2, k // 2


def pad(x:Tensor, pads, mode:PadMode) -> Tensor:
    (top, bottom), (left, right) = pads
    widths = ((0, 0), (0, 0), (top, bottom), (left, right))
    if mode == PadMode.CIRCULAR:
        return np.pad(x, widths, mode='wrap')
    return np.pad(x, widths, mode='constant')


def fold_pad(g:Tensor, pads, shape, mode:PadMode) -> Tensor:
    """Adjoint of ``pad``: gradient over the padded canvas back onto the source canvas."""
    (top, _), (left, _) = pads
    H, W = shape
    if mode == PadMode.ZERO:
        return g[:, :, top:top + H, left:left + W]
    rows = (np.arange(g.shape[2]) - top) % H
    cols = (np.arange(g.shape[3]) - left) % W
    folded_rows = np.zeros(g.shape[:2] + (H, g.shape[3]), dtype=g.dtype)
    np.add.at(folded_rows, (slice(None), slice(None), rows), g)
    folded = np.zeros(g.shape[:2] + (H, W), dtype=g.dtype)
    np.add.at(folded, (slice(None), slice(None), slice(None), cols), folded_rows)
    return folded


def _kernel_pads(kH, kW):
    return conv_padding(kH), conv_padding(kW)


def _check_conv(x, w, bias, stride):
    check_rank4(x)
    check_rank4(w, 'kernel')
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f'Input has {x.shape[1]} channels but kernel expects {w.shape[1]}')
    if bias is not None and np.shape(bias) != (w.shape[0],):
        raise ShapeMismatch(f'Bias shape {np.shape(bias)} does not match {w.shape[0]} output channels')
    if int(stride) != stride or stride < 1:
        raise ImproperStride(f'Stride must be a positive integer, got {stride}')


def conv_output_shape(shape, out_channels:int, stride:int=1):
    N, _, H, W = shape
    return N, out_channels, -(-H // stride), -(-W // stride)


def conv2d(x:Tensor, w:Tensor, bias=None, stride:int=1, pad_mode:PadMode=PadMode.CIRCULAR) -> Tensor:
    """Same-size cross-correlation of ``x`` with ``w`` (O, I, kH, kW), then stride-s sampling at offset (0, 0)."""
    _check_conv(x, w, bias, stride)
    pads = _kernel_pads(*w.shape[2:])
    windows = sliding_window_view(pad(x, pads, pad_mode), w.shape[2:], axis=(2, 3))
    out = np.tensordot(windows, w.astype(x.dtype, copy=False), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + np.asarray(bias, dtype=x.dtype)[None, :, None, None]
    if stride > 1:
        out = out[:, :, ::stride, ::stride]
    return np.ascontiguousarray(out)


def conv2d_vjp(x:Tensor, w:Tensor, g:Tensor, stride:int=1, pad_mode:PadMode=PadMode.CIRCULAR):
    _check_conv(x, w, None, stride)
    expected = conv_output_shape(x.shape, w.shape[0], stride)
    if g.shape != expected:
        raise ShapeMismatch(f'Upstream gradient shape {g.shape} does not match conv output {expected}')
    N, _, H, W = x.shape
    kH, kW = w.shape[2:]
    g = g.astype(GRAD_DTYPE)
    if stride > 1:
        dense = np.zeros((N, w.shape[0], H, W), dtype=GRAD_DTYPE)
        dense[:, :, ::stride, ::stride] = g
        g = dense
    w = w.astype(GRAD_DTYPE)
    pads = _kernel_pads(kH, kW)
    xp = pad(x.astype(GRAD_DTYPE), pads, pad_mode)
    windows = sliding_window_view(xp, (kH, kW), axis=(2, 3))
    dw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
    db = g.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    for a in range(kH):
        for b in range(kW):
            dxp[:, :, a:a + H, b:b + W] += np.einsum('nohw,oc->nchw', g, w[:, :, a, b])
    return fold_pad(dxp, pads, (H, W), pad_mode), dw, db


def activate(x:Tensor, a:Activation) -> Tensor:
    match a.kind:
        case 'relu':
            return np.maximum(x, 0)
        case 'polynomial':
            return polynomial.polyval(x, a.coefficients).astype(x.dtype, copy=False)
        case _:
            return x.copy()


def activate_vjp(x:Tensor, a:Activation, g:Tensor) -> Tensor:
    if g.shape != x.shape:
        raise ShapeMismatch(f'Upstream gradient shape {g.shape} does not match activation input {x.shape}')
    g = g.astype(GRAD_DTYPE)
    match a.kind:
        case 'relu':
            # subgradient at exactly 0 is 0
            return g * (x > 0)
        case 'polynomial':
            slope = polynomial.polyval(x.astype(GRAD_DTYPE), polynomial.polyder(a.coefficients))
            return g * slope
        case _:
            return g


def _check_window(x, k):
    check_rank4(x)
    if int(k) != k or k < 1:
        raise ImproperWindow(f'Window size must be a positive integer, got {k}')
    if k > x.shape[2] or k > x.shape[3]:
        raise ImproperWindow(f'Window size {k} exceeds spatial extent {x.shape[2:]}')


def max_pool_dense(x:Tensor, k:int, pad_mode:PadMode=PadMode.CIRCULAR) -> Tensor:
    _check_window(x, k)
    pads = _kernel_pads(k, k)
    windows = sliding_window_view(pad(x, pads, pad_mode), (k, k), axis=(2, 3))
    return windows.max(axis=(4, 5))


def max_pool_dense_vjp(x:Tensor, k:int, g:Tensor, pad_mode:PadMode=PadMode.CIRCULAR) -> Tensor:
    _check_window(x, k)
    if g.shape != x.shape:
        raise ShapeMismatch(f'Upstream gradient shape {g.shape} does not match pooling input {x.shape}')
    N, C, H, W = x.shape
    pads = _kernel_pads(k, k)
    xp = pad(x, pads, pad_mode)
    windows = sliding_window_view(xp, (k, k), axis=(2, 3)).reshape(N, C, H, W, k * k)
    winner = windows.argmax(axis=-1)
    n, c, i, j = np.indices((N, C, H, W))
    rows = i + winner // k
    cols = j + winner % k
    dxp = np.zeros(xp.shape, dtype=GRAD_DTYPE)
    np.add.at(dxp, (n, c, rows, cols), g.astype(GRAD_DTYPE))
    return fold_pad(dxp, pads, (H, W), pad_mode)


def global_average_pool(x:Tensor) -> Tensor:
    check_rank4(x)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeMismatch(f'Cannot average over empty spatial extent {x.shape[2:]}')
    return x.mean(axis=(2, 3), keepdims=True)


def global_average_pool_vjp(shape, g:Tensor) -> Tensor:
    N, C, H, W = shape
    if g.shape != (N, C, 1, 1):
        raise ShapeMismatch(f'Upstream gradient shape {g.shape} does not match pooled output {(N, C, 1, 1)}')
    return np.broadcast_to(g.astype(GRAD_DTYPE) / (H * W), shape).copy()


def fully_connected(x, w, b):
    x = np.asarray(x)
    flat = x.reshape(x.shape[0], -1)
    if w.ndim != 2 or flat.shape[1] != w.shape[1]:
        raise ShapeMismatch(f'Input with {flat.shape[1]} features does not fit weight matrix of shape {w.shape}')
    if np.shape(b) != (w.shape[0],):
        raise ShapeMismatch(f'Bias shape {np.shape(b)} does not match {w.shape[0]} outputs')
    return flat @ w.T.astype(flat.dtype, copy=False) + np.asarray(b, dtype=flat.dtype)


def fully_connected_vjp(x, w, g):
    x = np.asarray(x)
    flat = x.reshape(x.shape[0], -1).astype(GRAD_DTYPE)
    if g.shape != (flat.shape[0], w.shape[0]):
        raise ShapeMismatch(f'Upstream gradient shape {g.shape} does not match logits {(flat.shape[0], w.shape[0])}')
    g = g.astype(GRAD_DTYPE)
    dx = (g @ w.astype(GRAD_DTYPE)).reshape(x.shape)
    return dx, g.T @ flat, g.sum(axis=0)


def circular_shift(x:Tensor, dy:int, dx:int) -> Tensor:
    check_rank4(x)
    return np.roll(x, (int(dy), int(dx)), axis=(2, 3))


def circular_shift_vjp(g:Tensor, dy:int, dx:int) -> Tensor:
    return np.roll(g.astype(GRAD_DTYPE), (-int(dy), -int(dx)), axis=(2, 3))


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    logits = np.asarray(logits, dtype=GRAD_DTYPE)
    labels = np.asarray(labels)
    N, K = logits.shape
    if labels.shape != (N,):
        raise ShapeMismatch(f'Expected {N} labels, got shape {labels.shape}')
    if np.any(labels < 0) or np.any(labels >= K):
        raise LabelOutOfRange(f'Labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]')
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(N), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(N), labels] -= 1.0
    return float(loss), dlogits / N


def save_tensor(path, x:Tensor):
    """Write ``x`` as: magic 'PSFT', u8 precision tag (32/64), four u32 dims, little-endian raw data."""
    x = as_tensor(x)
    header = FILE_HEADER.pack(FILE_MAGIC, FILE_TAGS[x.dtype], *x.shape)
    with open(path, 'wb') as stream:
        stream.write(header)
        stream.write(x.astype(x.dtype.newbyteorder('<'), copy=False).tobytes())
    logger.debug(f'Saved tensor of shape {x.shape} to {path}')


def load_tensor(path) -> Tensor:
    with open(path, 'rb') as stream:
        raw = stream.read()
    if len(raw) < FILE_HEADER.size:
        raise ImproperTensorFile(f'{path} is too short to hold a tensor header')
    magic, tag, *shape = FILE_HEADER.unpack_from(raw)
    if magic != FILE_MAGIC:
        raise ImproperTensorFile(f'{path} does not start with {FILE_MAGIC!r}')
    dtypes = {v: k for k, v in FILE_TAGS.items()}
    if tag not in dtypes:
        raise ImproperTensorFile(f'{path} has unknown precision tag {tag}')
    dtype = dtypes[tag].newbyteorder('<')
    count = int(np.prod(shape))
    if len(raw) - FILE_HEADER.size != count * dtype.itemsize:
        raise ImproperTensorFile(f'{path} holds {len(raw) - FILE_HEADER.size} data bytes, expected {count * dtype.itemsize}')
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=FILE_HEADER.size)
    logger.debug(f'Loaded tensor of shape {tuple(shape)} from {path}')
    return data.astype(dtypes[tag]).reshape(shape)


def export_csv(path, x:Tensor):
    x = as_tensor(x)
    N, C, H, W = x.shape
    np.savetxt(path, x.reshape(N * C, H * W), delimiter=',', fmt='%.17g')


class TensorError(PolyshiftError):
    pass

class ShapeMismatch(TensorError):
    pass

class ImproperTensor(TensorError):
    pass

class ImproperPrecision(TensorError):
    pass

class ImproperStride(TensorError):
    pass

class ImproperWindow(TensorError):
    pass

class ImproperActivation(TensorError):
    pass

class ImproperTensorFile(TensorError):
    pass

class LabelOutOfRange(TensorError):
    pass
