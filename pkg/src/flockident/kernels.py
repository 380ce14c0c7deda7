"""Nonlocal interaction fields via screened-Coulomb kernel convolution.

The alignment, cohesion and repulsion fields all solve screened-Poisson
problems whose Green's function is k * exp(-lam*r) / r.  On the grid the
convolution integral becomes a Riemann sum over cell centers with a
regularized kernel (the singular cell is replaced by a local average),
evaluated as a zero-padded FFT linear convolution.  Everything here is a
free-space convolution; no periodic wrap-around across arena walls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sp_fft

from flockident.observation import GridSpec

__all__ = [
    "KernelParams",
    "kernel_eval",
    "default_near_radius",
    "kernel_tensor",
    "offset_convolve",
    "field_fft",
    "field_ifft",
    "pad_len",
    "KernelCache",
    "bessel_apply",
]


@dataclass(frozen=True)
class KernelParams:
    """Screened-Coulomb kernel k * exp(-decay * r) / r."""

    strength: float
    decay: float

    def __post_init__(self):
        if self.decay == 0:
            raise ValueError("kernel decay rate must be nonzero")


def default_near_radius(spec: GridSpec) -> float:
    return spec.spatial_half_width / (2.0 * spec.cells_per_axis)


def kernel_eval(r, params: KernelParams, near_radius: float):
    """Regularized kernel value at separation r >= 0.

    Below `near_radius` the singular 1/r profile is replaced by the
    constant 3k(1 - exp(-lam*a)(lam*a + 1)) / (lam*a)^2 with a the near
    radius, which removes the r = 0 singularity from the Riemann sum.
    """
    k, lam = params.strength, params.decay
    r = np.asarray(r, dtype=float)
    a = float(near_radius)
    near_value = 3.0 * k * (1.0 - np.exp(-lam * a) * (lam * a + 1.0)) / (lam * a) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        far = k * np.exp(-lam * r) / r
    out = np.where(r < a, near_value, far)
    if out.ndim == 0:
        return float(out)
    return out


def kernel_tensor(params: KernelParams, spec: GridSpec, near_radius: float | None = None) -> np.ndarray:
    """Kernel sampled at every cell-center offset, shape (2n-1,)*3.

    Entry [i, j, k] holds the kernel at offset ((i, j, k) - (n-1)) * dx.
    """
    if near_radius is None:
        near_radius = default_near_radius(spec)
    n = spec.cells_per_axis
    off = (np.arange(2 * n - 1) - (n - 1)) * spec.dx
    r = np.sqrt(off[:, None, None] ** 2 + off[None, :, None] ** 2 + off[None, None, :] ** 2)
    return kernel_eval(r, params, near_radius)


def pad_len(n: int) -> int:
    """FFT length giving an alias-free linear convolution on n cells.

    The tight length 2n-1 is preferred whenever its prime factors are
    FFT-friendly; otherwise the next fast real-transform length."""
    m = 2 * n - 1
    k = m
    for p in (2, 3, 5, 7, 11):
        while k % p == 0:
            k //= p
    if k == 1:
        return m
    return sp_fft.next_fast_len(m, real=True)


_pad_len = pad_len


def _wrap_kernel_fft(tensor: np.ndarray, n: int, pad: int) -> np.ndarray:
    kpad = np.zeros((pad, pad, pad))
    kpad[: 2 * n - 1, : 2 * n - 1, : 2 * n - 1] = tensor
    # Shift the zero-offset entry to index 0 so circular convolution of the
    # padded arrays reproduces the linear convolution on the first n cells.
    kpad = np.roll(kpad, -(n - 1), axis=(0, 1, 2))
    return sp_fft.rfftn(kpad)


def offset_convolve(field: np.ndarray, tensor: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Riemann convolution sum of `field` with an offset-indexed kernel.

    out[c] = sum_c' tensor[c - c'] * field[c'] * cell_volume, computed by
    zero-padded FFT.  Vector fields convolve component-wise over the
    leading axis.
    """
    n = spec.cells_per_axis
    pad = _pad_len(n)
    khat = _wrap_kernel_fft(tensor, n, pad)
    return _apply_khat(field, khat, n, pad) * spec.cell_volume


def field_fft(field: np.ndarray, n: int, pad: int) -> np.ndarray:
    """Zero-padded forward real FFT over the trailing three axes."""
    fpad = np.zeros(field.shape[:-3] + (pad, pad, pad))
    fpad[..., :n, :n, :n] = field
    return sp_fft.rfftn(fpad, axes=(-3, -2, -1))


def field_ifft(fhat: np.ndarray, n: int, pad: int) -> np.ndarray:
    """Inverse of field_fft, cropped back to the grid."""
    out = sp_fft.irfftn(fhat, s=(pad, pad, pad), axes=(-3, -2, -1))
    return out[..., :n, :n, :n]


def _apply_khat(field: np.ndarray, khat: np.ndarray, n: int, pad: int) -> np.ndarray:
    return field_ifft(field_fft(field, n, pad) * khat, n, pad)


class KernelCache:
    """Per-solver cache of kernel FFTs keyed by decay rate and grid.

    The strength enters linearly, so transforms are stored for unit
    strength and rescaled on application.
    """

    def __init__(self):
        self._store: dict[tuple, np.ndarray] = {}

    def transform(self, decay: float, spec: GridSpec, near_radius: float) -> np.ndarray:
        key = (decay, spec.cells_per_axis, spec.spatial_half_width, near_radius)
        khat = self._store.get(key)
        if khat is None:
            tensor = kernel_tensor(KernelParams(1.0, decay), spec, near_radius)
            khat = _wrap_kernel_fft(tensor, spec.cells_per_axis, _pad_len(spec.cells_per_axis))
            self._store[key] = khat
        return khat


def bessel_apply(
    field: np.ndarray,
    params: KernelParams,
    spec: GridSpec,
    near_radius: float | None = None,
    cache: KernelCache | None = None,
) -> np.ndarray:
    """Nonlocal field generated by a gridded source.

    Evaluates the regularized Green's-function convolution sum at every
    cell center.  The source must already be zero on exterior and obstacle
    cells.  Scalar input has shape (n, n, n); vector input (3, n, n, n)
    convolves element-wise.
    """
    if near_radius is None:
        near_radius = default_near_radius(spec)
    field = np.asarray(field, dtype=float)
    n = spec.cells_per_axis
    if params.strength == 0.0:
        return np.zeros_like(field)
    if cache is None:
        tensor = kernel_tensor(KernelParams(1.0, params.decay), spec, near_radius)
        khat = _wrap_kernel_fft(tensor, n, _pad_len(n))
    else:
        khat = cache.transform(params.decay, spec, near_radius)
    out = _apply_khat(field, khat, n, _pad_len(n))
    return out * (params.strength * spec.cell_volume)
