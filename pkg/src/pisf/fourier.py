"""Orthonormal, centered-DC Fourier transforms used throughout the package.

All k-space arrays keep DC at index ``n // 2`` along each transformed axis.
"""
import numpy as np

__all__ = ["fft1c", "ifft1c", "fft2c", "ifft2c"]


def fft1c(x, axis=-1):
    x = np.fft.ifftshift(x, axes=axis)
    return np.fft.fftshift(np.fft.fft(x, axis=axis, norm="ortho"), axes=axis)


def ifft1c(k, axis=-1):
    k = np.fft.ifftshift(k, axes=axis)
    return np.fft.fftshift(np.fft.ifft(k, axis=axis, norm="ortho"), axes=axis)


def fft2c(x, axes=(-2, -1)):
    x = np.fft.ifftshift(x, axes=axes)
    return np.fft.fftshift(np.fft.fft2(x, axes=axes, norm="ortho"), axes=axes)


def ifft2c(k, axes=(-2, -1)):
    k = np.fft.ifftshift(k, axes=axes)
    return np.fft.fftshift(np.fft.ifft2(k, axes=axes, norm="ortho"), axes=axes)
