"""DFT checks on 1-D periodic signals.

Signals are one period of an N-periodic sequence; spectra live on the N-point
DFT grid w_k = 2*pi*k/N. A "1-sample shift" is circular: x1(n) = x0(n - 1).
"""
from dataclasses import dataclass
from logging import getLogger
from typing import Union

import numpy as np
from numpy.polynomial import polynomial

from . import PolyshiftError
from .tensor import Activation

logger = getLogger('polyshift.spectral')

HALF_BAND = 2


@dataclass(frozen=True)
class SpectrumResiduals:
    even: float
    odd: float


@dataclass(frozen=True)
class CosineReluSums:
    length: int
    sum0: float
    closed0: float
    sum1: float
    closed1_from_sum0: float

    @property
    def residual0(self):
        return abs(self.sum0 - self.closed0)

    @property
    def residual1(self):
        return abs(self.sum1 - self.closed1_from_sum0)


def as_signal(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ImproperSignal(f'Expected a non-empty 1-D signal, got shape {x.shape}')
    if not np.all(np.isfinite(x)):
        raise ImproperSignal('Signal contains NaN or Inf')
    return x


def _check_even(x):
    if x.size % 2:
        raise ImproperSignalLength(f'Signal length must be even, got {x.size}')


def dft(x) -> np.ndarray:
    return np.fft.fft(as_signal(x))


def idft(spectrum) -> np.ndarray:
    return np.fft.ifft(np.asarray(spectrum, dtype=np.complex128)).real


def even_odd_samples(x):
    """(y0, y1) with y0(n) = x(2n) and y1(n) = x(2n - 1), indices taken modulo N."""
    x = as_signal(x)
    _check_even(x)
    return x[0::2], np.roll(x, 1)[0::2]


def polyphase_spectrum_check(x0) -> SpectrumResiduals:
    """Max residuals of the two stride-2 aliasing identities on the N/2-point grid.

    Y0(w) = (X0(w/2) + X0(w/2 + pi)) / 2
    Y1(w) = e^{-jw/2} (X0(w/2) - X0(w/2 + pi)) / 2
    """
    x0 = as_signal(x0)
    y0, y1 = even_odd_samples(x0)
    half = x0.size // 2
    X = np.fft.fft(x0)
    base, alias = X[:half], X[half:]
    phase = np.exp(-2j * np.pi * np.arange(half) / x0.size)
    even = np.max(np.abs(np.fft.fft(y0) - (base + alias) / 2))
    odd = np.max(np.abs(np.fft.fft(y1) - phase * (base - alias) / 2))
    return SpectrumResiduals(float(even), float(odd))


def stopband(n:int, band:int=HALF_BAND) -> np.ndarray:
    k = np.arange(n)
    return 2 * band * np.minimum(k, n - k) >= n


def ideal_lowpass(x, band:int=HALF_BAND) -> np.ndarray:
    x = as_signal(x)
    _check_even(x)
    if int(band) != band or band < 1:
        raise ImproperDegree(f'Band divisor must be a positive integer, got {band}')
    X = np.fft.fft(x)
    X[stopband(x.size, band)] = 0
    return idft(X)


def band_limited_signal(n:int, rng:np.random.Generator, band:int=HALF_BAND) -> np.ndarray:
    return ideal_lowpass(rng.standard_normal(n), band)


def _antialiased_pair(x0, band:int=HALF_BAND):
    return even_odd_samples(ideal_lowpass(x0, band))


def _as_polynomial(m):
    if isinstance(m, Activation):
        if m.kind != 'polynomial':
            raise ImproperDegree(f'Expected a polynomial activation, got {m.kind}')
        coefficients = m.coefficients
    else:
        if int(m) != m:
            raise ImproperDegree(f'Degree must be an integer, got {m}')
        coefficients = (0.0,) * int(m) + (1.0,)
    degree = len(coefficients) - 1
    if degree <= 1:
        raise ImproperDegree(f'Polynomial degree must exceed 1, got {degree}')
    return coefficients, degree


def polynomial_sum_check(x0, m:Union[int, Activation]) -> float:
    """|sum g(y0a) - sum g(y1a)| for g(y) = y**m, or any polynomial activation of degree m.

    The signal is band-limited to |w| < pi/m first. On the periodic grid the m-fold
    product of the spectrum otherwise wraps onto w = pi; for m = 2 this is the
    ideal half-band filter.
    """
    coefficients, degree = _as_polynomial(m)
    y0a, y1a = _antialiased_pair(x0, degree)
    residual = abs(polynomial.polyval(y0a, coefficients).sum() - polynomial.polyval(y1a, coefficients).sum())
    logger.debug(f'Polynomial sum check, degree {degree}, N={np.size(x0)}: residual {residual:.3e}')
    return float(residual)


def antialiased_sum_check(x0) -> float:
    y0a, y1a = _antialiased_pair(x0)
    return float(abs(y0a.sum() - y1a.sum()))


def relu_sum_gap(x0) -> float:
    y0a, y1a = _antialiased_pair(x0)
    return float(abs(np.maximum(y0a, 0).sum() - np.maximum(y1a, 0).sum()))


def cosine_signal(n:int) -> np.ndarray:
    return np.cos(2 * np.pi * np.arange(n) / n)


def cosine_relu_sums(n:int) -> CosineReluSums:
    """ReLU sums of the two samplings of cos(2*pi*n/N) against their closed forms.

    sum0 = cot(2*pi/N); sum1 = cos(2*pi/N) * sum0 + sin(2*pi/N).
    Requires N/2 > 6 and N/2 divisible by 4.
    """
    if int(n) != n or n % 2 or n // 2 <= 6 or (n // 2) % 4:
        raise ImproperSignalLength(f'Cosine ReLU sums need N/2 > 6 and divisible by 4, got N={n}')
    y0a, y1a = _antialiased_pair(cosine_signal(n))
    angle = 2 * np.pi / n
    sum0 = float(np.maximum(y0a, 0).sum())
    sum1 = float(np.maximum(y1a, 0).sum())
    return CosineReluSums(int(n), sum0, float(np.cos(angle) / np.sin(angle)), sum1, float(np.cos(angle) * sum0 + np.sin(angle)))


class SpectralError(PolyshiftError):
    pass

class ImproperSignal(SpectralError):
    pass

class ImproperSignalLength(SpectralError):
    pass

class ImproperDegree(SpectralError):
    pass
