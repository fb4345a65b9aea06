"""2-d Fourier analysis, spectrum mixup, and the phase-alignment loss.

Two independent routes compute the same transform. The fast route wraps
``np.fft`` and is used everywhere data flows; a naive double-sum route exists
purely as a cross-check oracle. A third, differentiable route expresses the
DFT as matrix products so the tape can carry gradients through spectral
quantities.

Conventions: unnormalized forward transform ``F[k,l] = sum x[m,n]
exp(-2 pi i (km/H + ln/W))``, inverse scaled by ``1/(HW)``. Phase lies in
``(-pi, pi]``; amplitude is nonnegative. Images reconstruct from an
amplitude/phase pair as the real part of the inverse transform of
``A * exp(+i P)``.
"""

import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng

_NORM_FLOOR = 1e-8


@dataclass
class Spectrum:
    """Real/imaginary parts of a 2-d DFT over the trailing two axes."""

    real: np.ndarray
    imag: np.ndarray

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag


@dataclass
class AmpPhase:
    """Polar form of a spectrum; phase normalized into (-pi, pi]."""

    amp: np.ndarray
    phase: np.ndarray


def dft2d(x: np.ndarray) -> Spectrum:
    """Forward DFT of a real [..., H, W] array over its trailing axes."""
    f = np.fft.fft2(x, axes=(-2, -1))
    return Spectrum(f.real.copy(), f.imag.copy())


def idft2d(spec: Spectrum) -> np.ndarray:
    """Inverse DFT; returns the complex result, callers take .real as needed."""
    return np.fft.ifft2(spec.to_complex(), axes=(-2, -1))


def naive_dft2d(x: np.ndarray) -> Spectrum:
    """Literal double-sum DFT of one [H, W] array. Cross-check oracle only."""
    h, w = x.shape
    real = np.zeros((h, w))
    imag = np.zeros((h, w))
    m = np.arange(h)[:, None]
    n = np.arange(w)[None, :]
    for k in range(h):
        for el in range(w):
            theta = 2.0 * np.pi * (k * m / h + el * n / w)
            real[k, el] = np.sum(x * np.cos(theta))
            imag[k, el] = -np.sum(x * np.sin(theta))
    return Spectrum(real, imag)


def amp_phase(spec: Spectrum) -> AmpPhase:
    amp = np.hypot(spec.real, spec.imag)
    phase = np.arctan2(spec.imag, spec.real)
    # arctan2 can return -pi (e.g. imag = -0.0, real < 0); fold onto +pi
    phase = np.where(phase == -np.pi, np.pi, phase)
    return AmpPhase(amp, phase)


def reconstruct(amp: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Image whose spectrum has the given polar form."""
    spec = Spectrum(amp * np.cos(phase), amp * np.sin(phase))
    return idft2d(spec).real


@functools.lru_cache(maxsize=8)
def dft_matrices(h: int, w: int):
    """Cosine/sine factor matrices for the matrix-product DFT."""
    km = np.outer(np.arange(h), np.arange(h)) * (2.0 * np.pi / h)
    ln = np.outer(np.arange(w), np.arange(w)) * (2.0 * np.pi / w)
    return np.cos(km), np.sin(km), np.cos(ln), np.sin(ln)


def dft2d_taped(x: T.Tensor):
    """Differentiable DFT of a [..., H, W] tensor as (real, imag) tensors.

    With row factor A = cos - i sin and column factor B likewise,
    A x B = (Ca x Cb - Sa x Sb) - i (Ca x Sb + Sa x Cb).
    """
    h, w = x.shape[-2], x.shape[-1]
    ca, sa, cb, sb = dft_matrices(h, w)
    ca, sa, cb, sb = T.Tensor(ca), T.Tensor(sa), T.Tensor(cb), T.Tensor(sb)
    cax = T.matmul(ca, x)
    sax = T.matmul(sa, x)
    real = T.sub(T.matmul(cax, cb), T.matmul(sax, sb))
    imag = T.neg(T.add(T.matmul(cax, sb), T.matmul(sax, cb)))
    return real, imag


def sample_lambda(rng: Rng, n: int, eta: float) -> np.ndarray:
    """Per-image mixing weights, uniform on [0, eta)."""
    return rng.uniform(n, 0.0, eta)


def specmix(x: np.ndarray, x_ref: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Blend each image's spectrum amplitude toward a reference image's.

    Keeps the original phase, mixes amplitudes with per-image weight lam,
    reconstructs, and clips to the valid [0, 1] pixel range.
    """
    own = amp_phase(dft2d(x))
    ref_amp = amp_phase(dft2d(x_ref)).amp
    w = lam.reshape(-1, *([1] * (x.ndim - 1)))
    mixed_amp = (1.0 - w) * own.amp + w * ref_amp
    out = reconstruct(mixed_amp, own.phase)
    return np.clip(out, 0.0, 1.0)


def specmix_batch(x: np.ndarray, rng: Rng, eta: float):
    """SpecMix against derangement partners drawn from the same batch.

    Returns (mixed images, partner indices, lambda weights).
    """
    partners = rng.derangement(x.shape[0])
    lam = sample_lambda(rng, x.shape[0], eta)
    return specmix(x, x[partners], lam), partners, lam


def phase_alignment_loss(x_ref: np.ndarray, x: T.Tensor) -> T.Tensor:
    """Negative mean cosine alignment between the two images' spectra.

    Each spectrum bin is treated as the 2-vector (real, imag). Bins where
    either side's magnitude falls below 1e-8 are excluded through a mask that
    is held constant, as is the whole reference branch. The result is the
    per-image sum over bins, averaged over the batch, negated, so perfect
    phase agreement on all kept bins of [B, C, H, W] input reaches -C*H*W.
    """
    ref = dft2d(np.asarray(x_ref, dtype=np.float64))
    ref_norm = np.hypot(ref.real, ref.imag)
    real, imag = dft2d_taped(x)
    norm = T.sqrt(T.add(T.square(real), T.square(imag)))
    mask = (ref_norm >= _NORM_FLOOR) & (norm.data >= _NORM_FLOOR)
    # unit reference vectors; masked bins get zeroed afterwards anyway
    safe = np.where(ref_norm < _NORM_FLOOR, 1.0, ref_norm)
    u_real = np.where(mask, ref.real / safe, 0.0)
    u_imag = np.where(mask, ref.imag / safe, 0.0)
    dot = T.add(T.mul(real, T.Tensor(u_real)), T.mul(imag, T.Tensor(u_imag)))
    cos = T.mul(T.div(dot, norm), T.Tensor(mask.astype(np.float64)))
    per_image = T.tsum(cos, axes=tuple(range(1, x.ndim)))
    return T.neg(T.tmean(per_image))
