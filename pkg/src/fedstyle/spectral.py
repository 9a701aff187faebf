"""2-D Fourier transforms and low-frequency amplitude ("style") manipulation.

Images are float arrays of shape (H, W, C) with intensities nominally in
[0, 1]. Spectra use the centered (shifted) layout: the zero-frequency bin
sits at spatial index (H // 2, W // 2), so "the center of the amplitude
spectrum" is literal. Styles are square l_s x l_s amplitude windows cut
around that center bin, flattened channel-major then row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Spectrum",
    "Style",
    "fft2",
    "ifft2",
    "extract_style",
    "mean_style",
    "apply_style",
]


@dataclass(frozen=True)
class Spectrum:
    """Per-channel centered DFT split into amplitude (modulus) and phase (argument).

    Both arrays have shape (C, H, W); amplitude is non-negative, phase is in
    (-pi, pi].
    """

    amplitude: np.ndarray
    phase: np.ndarray

    @property
    def channels(self) -> int:
        return self.amplitude.shape[0]

    @property
    def height(self) -> int:
        return self.amplitude.shape[1]

    @property
    def width(self) -> int:
        return self.amplitude.shape[2]


@dataclass(frozen=True)
class Style:
    """Flattened centered amplitude window: the privacy-safe client metadata unit.

    `values` has length channels * window_size**2, ordered channel-major then
    row-major within the window. That order is part of the wire format (see
    docs/formats.md).
    """

    window_size: int
    channels: int
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be a positive odd integer, got {self.window_size}")
        expected = self.channels * self.window_size**2
        if vals.shape != (expected,):
            raise ValueError(f"style values must have shape ({expected},), got {vals.shape}")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("style values must be finite and non-negative")

    def as_window(self) -> np.ndarray:
        """Return the (C, l_s, l_s) window view of the flattened values."""
        return self.values.reshape(self.channels, self.window_size, self.window_size)


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asanyarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"image must have shape (H, W, C), got {img.shape}")
    h, w, _ = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"image spatial dimensions must be >= 2, got {h}x{w}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def fft2(img: np.ndarray) -> Spectrum:
    """Per-channel 2-D DFT of an (H, W, C) image in centered layout."""
    img = _check_image(img)
    freq = np.fft.fftshift(np.fft.fft2(img, axes=(0, 1)), axes=(0, 1))
    freq = np.moveaxis(freq, -1, 0)  # (C, H, W)
    return Spectrum(amplitude=np.abs(freq), phase=np.angle(freq))


def ifft2(spec: Spectrum, clamp: bool = False, imag_tol: float = 1e-8) -> np.ndarray:
    """Inverse of :func:`fft2`; returns the real (H, W, C) image.

    The imaginary residue of the inverse transform must stay below
    `imag_tol`; it is then discarded. Clamping to [0, 1] is opt-in so the
    round-trip stays exact by default.
    """
    freq = spec.amplitude * np.exp(1j * spec.phase)
    freq = np.fft.ifftshift(freq, axes=(1, 2))
    img = np.fft.ifft2(freq, axes=(1, 2))
    imag_max = float(np.max(np.abs(img.imag))) if img.size else 0.0
    if imag_max > imag_tol * max(1.0, float(np.max(np.abs(img.real)))):
        raise ValueError(f"inverse transform has imaginary residue {imag_max:.3e} above tolerance")
    out = np.moveaxis(img.real, 0, -1)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def _window_slices(h: int, w: int, l_s: int) -> tuple[slice, slice]:
    cy, cx = h // 2, w // 2
    r = l_s // 2
    return slice(cy - r, cy + r + 1), slice(cx - r, cx + r + 1)


def extract_style(img: np.ndarray, l_s: int) -> Style:
    """Cut the centered l_s x l_s amplitude window out of the image spectrum."""
    img = _check_image(img)
    h, w, c = img.shape
    if l_s % 2 == 0 or l_s < 1:
        raise ValueError(f"style window size must be odd and positive, got {l_s}")
    if l_s > min(h, w):
        raise ValueError(f"style window {l_s} exceeds image size {h}x{w}")
    spec = fft2(img)
    ys, xs = _window_slices(h, w, l_s)
    window = spec.amplitude[:, ys, xs]
    return Style(window_size=l_s, channels=c, values=window.reshape(-1).copy())


def mean_style(styles: list[Style]) -> Style:
    """Element-wise mean of homogeneous styles (the per-client average)."""
    if not styles:
        raise ValueError("mean_style requires at least one style")
    first = styles[0]
    for s in styles[1:]:
        if s.window_size != first.window_size or s.channels != first.channels:
            raise ValueError("styles must share window_size and channels")
    stacked = np.stack([s.values for s in styles])
    return Style(window_size=first.window_size, channels=first.channels, values=stacked.mean(axis=0))


def apply_style(img: np.ndarray, style: Style, clamp: bool = False) -> np.ndarray:
    """Replace the image's centered amplitude window with `style`, keeping phase.

    All amplitude bins outside the window and every phase bin are untouched;
    extract_style(result, l_s) reproduces `style` up to FFT round-off.
    """
    img = _check_image(img)
    h, w, c = img.shape
    if style.channels != c:
        raise ValueError(f"style has {style.channels} channels, image has {c}")
    if style.window_size > min(h, w):
        raise ValueError(f"style window {style.window_size} exceeds image size {h}x{w}")
    spec = fft2(img)
    ys, xs = _window_slices(h, w, style.window_size)
    amplitude = spec.amplitude.copy()
    amplitude[:, ys, xs] = style.as_window()
    return ifft2(Spectrum(amplitude=amplitude, phase=spec.phase), clamp=clamp)
