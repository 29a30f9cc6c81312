"""Binomial low-pass kernels and the anti-aliased downsamplers built on them.

LPF-j (BlurPool) blurs with a j x j binomial kernel and keeps component (0, 0);
APS-j blurs with the same kernel and then samples adaptively. The kernel
family follows the binomial filters of the BlurPool line of work; the sizes
are 2, 3 and 5.
"""
from dataclasses import dataclass
from logging import getLogger

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import PolyshiftError
from .polyphase import SelectionCriterion, aps_downsample, conventional_downsample
from .tensor import GRAD_DTYPE, PadMode, Tensor, check_rank4, fold_pad, max_pool_dense, pad

logger = getLogger('polyshift.antialias')

SUPPORTED_SIZES = (2, 3, 5)


@dataclass(frozen=True, eq=False)
class BlurKernel:
    size: int
    coefficients: np.ndarray


def binomial_kernel(j:int) -> BlurKernel:
    if j not in SUPPORTED_SIZES:
        raise ImproperBlurSize(f'Blur size {j} not supported, expected one of {SUPPORTED_SIZES}')
    row = np.poly1d((0.5, 0.5)) ** (j - 1)
    taps = np.asarray(row.coeffs, dtype=np.float64)
    return BlurKernel(j, np.outer(taps, taps))


def blur_padding(j:int):
    # even kernels put the extra row/column on the top/left
    lead, trail = j // 2, (j - 1) // 2
    return (lead, trail), (lead, trail)


def blur(x:Tensor, k:BlurKernel, pad_mode:PadMode=PadMode.CIRCULAR) -> Tensor:
    check_rank4(x)
    windows = sliding_window_view(pad(x, blur_padding(k.size), pad_mode), (k.size, k.size), axis=(2, 3))
    return np.tensordot(windows, k.coefficients.astype(x.dtype), axes=([4, 5], [0, 1]))


def blur_vjp(g:Tensor, k:BlurKernel, pad_mode:PadMode=PadMode.CIRCULAR) -> Tensor:
    check_rank4(g, 'upstream gradient')
    pads = blur_padding(k.size)
    N, C, H, W = g.shape
    g = g.astype(GRAD_DTYPE)
    dxp = np.zeros((N, C, H + k.size - 1, W + k.size - 1), dtype=GRAD_DTYPE)
    for a in range(k.size):
        for b in range(k.size):
            dxp[:, :, a:a + H, b:b + W] += k.coefficients[a, b] * g
    return fold_pad(dxp, pads, (H, W), pad_mode)


def blurpool(x:Tensor, j:int, s:int, pad_mode:PadMode=PadMode.CIRCULAR) -> Tensor:
    return conventional_downsample(blur(x, binomial_kernel(j), pad_mode), s)


def aps_blurpool(x:Tensor, j:int, s:int, c:SelectionCriterion=SelectionCriterion(), pad_mode:PadMode=PadMode.CIRCULAR):
    return aps_downsample(blur(x, binomial_kernel(j), pad_mode), s, c)


def max_blurpool(x:Tensor, k:int, j:int, s:int, pad_mode:PadMode=PadMode.CIRCULAR) -> Tensor:
    """Dense k x k max pooling, blur, then conventional stride-s sampling."""
    return blurpool(max_pool_dense(x, k, pad_mode), j, s, pad_mode)


class AntialiasError(PolyshiftError):
    pass

class ImproperBlurSize(AntialiasError):
    pass
