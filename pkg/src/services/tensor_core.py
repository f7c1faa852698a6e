"""
Dense tensors and the three-dimensional FFT used by the operator model.

Tensors are plain ``numpy`` arrays: 64-bit floats for real fields and
128-bit complex for spectra. Spatial tensors are laid out row-major as
``(..., channel, x, y, z)``; every transform here acts on the trailing three
axes and treats the leading axes as batch/channel.

The FFT is a mixed-radix Cooley-Tukey transform applied one axis at a time.
Each stage splits off the smallest prime factor of the axis length; when the
length itself is prime the stage falls back to a direct DFT matrix. The grids
of the operator model contain prime factors (116 = 4 * 29, 41, 66 = 2 * 3 * 11)
so a power-of-two transform would not do.

Normalization: ``fft3`` is unnormalized, ``ifft3`` carries the full
``1 / (N1 * N2 * N3)`` factor and returns the real part.

Example:
    ```python
    import numpy as np
    from src.services.tensor_core import fft3, ifft3

    x = np.random.default_rng(0).normal(size=(5, 6, 7))
    np.testing.assert_allclose(ifft3(fft3(x)), x, atol=1e-10)
    ```
"""

from __future__ import annotations

import logging
from functools import lru_cache
from typing import TypeAlias

import numpy as np
from numpy.typing import NDArray

from src.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

Tensor: TypeAlias = NDArray[np.float64]
ComplexTensor: TypeAlias = NDArray[np.complex128]

SPATIAL_AXES = (-3, -2, -1)


def as_tensor(values) -> Tensor:
    """Coerce ``values`` to a contiguous float64 tensor."""
    return np.ascontiguousarray(values, dtype=np.float64)


def ensure_finite(x: np.ndarray, what: str = "tensor") -> None:
    """Raise ``ContractError`` when ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{what} contains non-finite values")


def _require_spatial(x: np.ndarray, op: str) -> None:
    if x.ndim < 3:
        raise ShapeError(f"{op} needs at least 3 trailing spatial axes, got shape {x.shape}")


@lru_cache(maxsize=None)
def _smallest_factor(n: int) -> int:
    if n % 2 == 0:
        return 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


@lru_cache(maxsize=256)
def _dft_matrix(n: int, sign: int) -> ComplexTensor:
    k = np.arange(n)
    # reduce the exponent modulo n before scaling to keep the phase exact
    phase = (np.outer(k, k) % n) * (sign * 2.0 * np.pi / n)
    w = np.exp(1j * phase)
    w.setflags(write=False)
    return w


@lru_cache(maxsize=256)
def _twiddles(p: int, m: int, sign: int) -> ComplexTensor:
    n = p * m
    r = np.arange(p)[:, None]
    k1 = np.arange(m)[None, :]
    t = np.exp(1j * ((r * k1) % n) * (sign * 2.0 * np.pi / n))
    t.setflags(write=False)
    return t


def _fft_last(a: ComplexTensor, sign: int) -> ComplexTensor:
    """Unnormalized DFT along the last axis with exponent sign ``sign``."""
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    p = _smallest_factor(n)
    if p == n:
        return a @ _dft_matrix(n, sign)
    m = n // p
    # a[p*q + r] -> sub[..., r, q]
    sub = np.swapaxes(a.reshape(a.shape[:-1] + (m, p)), -1, -2)
    inner = _fft_last(np.ascontiguousarray(sub), sign)
    inner = inner * _twiddles(p, m, sign)
    # radix-p butterfly across r; output index k = k1 + m * k2
    out = np.einsum("sr,...rm->...sm", _dft_matrix(p, sign), inner)
    return out.reshape(a.shape)


def _fft_axis(a: ComplexTensor, axis: int, sign: int) -> ComplexTensor:
    moved = np.ascontiguousarray(np.moveaxis(a, axis, -1))
    return np.moveaxis(_fft_last(moved, sign), -1, axis)


def fft3(x: np.ndarray) -> ComplexTensor:
    """
    Unnormalized forward DFT along the last three axes.

    Args:
        x: Real or complex tensor with at least three axes.

    Returns:
        Complex spectrum with the same shape as ``x``.

    Raises:
        ShapeError: If ``x`` has fewer than three axes.
    """
    _require_spatial(x, "fft3")
    out = np.asarray(x, dtype=np.complex128)
    for axis in SPATIAL_AXES:
        out = _fft_axis(out, axis, -1)
    return out


def ifft3_complex(spectrum: np.ndarray) -> ComplexTensor:
    """Inverse DFT along the last three axes, normalized, complex result."""
    _require_spatial(spectrum, "ifft3")
    out = np.asarray(spectrum, dtype=np.complex128)
    for axis in SPATIAL_AXES:
        out = _fft_axis(out, axis, +1)
    n = int(np.prod(spectrum.shape[-3:]))
    return out / n


def ifft3(spectrum: np.ndarray) -> Tensor:
    """
    Inverse DFT with ``1/(N1 N2 N3)`` normalization, returning the real part.

    ``ifft3(fft3(x)) == x`` for real ``x`` up to rounding.
    """
    return np.ascontiguousarray(ifft3_complex(spectrum).real)


def pad3(x: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad each of the three trailing spatial axes by ``p`` on both sides."""
    _require_spatial(x, "pad3")
    if p < 0:
        raise ShapeError(f"padding must be non-negative, got {p}")
    if p == 0:
        return x.copy()
    width = [(0, 0)] * (x.ndim - 3) + [(p, p)] * 3
    return np.pad(x, width)


def crop3(x: np.ndarray, p: int) -> np.ndarray:
    """Remove ``p`` cells from both ends of the three trailing axes (inverse of ``pad3``)."""
    _require_spatial(x, "crop3")
    if p < 0:
        raise ShapeError(f"padding must be non-negative, got {p}")
    for extent in x.shape[-3:]:
        if extent <= 2 * p:
            raise ShapeError(f"cannot crop {p} cells from each side of extent {extent}")
    if p == 0:
        return x.copy()
    return np.ascontiguousarray(x[..., p:-p, p:-p, p:-p])


def fft_flops(n_points: int) -> float:
    """Conventional ``5 N log2 N`` operation estimate for a complex FFT of ``N`` points."""
    if n_points <= 1:
        return 0.0
    return 5.0 * n_points * float(np.log2(n_points))
