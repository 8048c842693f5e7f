"""Differentiable augmentations: periodic pixel translation and latent perturbations.

The translation is an integer roll with periodic wrap-around, so it is a
permutation of pixels and its adjoint (the inverse roll) is exact. The
latent augmentations are identities at ``u = 0.5`` and perturb the mean
additively and the standard deviation multiplicatively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, custom_op, get_default_dtype

DEFAULT_TRANSLATION_STD_FRAC = 0.125
DEFAULT_LATENT_STRENGTH = 0.5
DEFAULT_PRIOR_JITTER = 0.0


@dataclass(frozen=True)
class TranslationParams:
    """Per-sample pixel displacements, already reduced modulo the image extent."""

    ux: np.ndarray
    uy: np.ndarray

    def inverse(self, size: tuple[int, int]) -> "TranslationParams":
        h, w = size
        return TranslationParams((-self.ux) % w, (-self.uy) % h)


@dataclass(frozen=True)
class LatentAugParams:
    u_mu: np.ndarray
    u_sigma: np.ndarray


def sample_translation(rng: np.random.Generator, image_size: int, std_frac: float,
                       batch: int = 1) -> TranslationParams:
    """Draw round(N(0, (std_frac * image_size)^2)) per axis and sample, wrapped to the image."""
    if image_size < 1:
        raise ValueError("image_size must be positive")
    raw = np.rint(rng.normal(0.0, std_frac * image_size, size=(2, batch))).astype(np.int64)
    return TranslationParams(raw[0] % image_size, raw[1] % image_size)


def shared_translation(u: TranslationParams, batch: int) -> TranslationParams:
    """Broadcast a single displacement to every sample of a batch."""
    return TranslationParams(np.full(batch, int(u.ux[0])), np.full(batch, int(u.uy[0])))


def _roll_rows(x: np.ndarray, ux: np.ndarray, uy: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    h, w = x.shape[-2:]
    for i in range(x.shape[0]):
        out[i] = np.roll(x[i], (int(uy[i % len(uy)]) % h, int(ux[i % len(ux)]) % w), axis=(-2, -1))
    return out


def translate_periodic(x, u: TranslationParams) -> Tensor:
    """x'[..., i, j] = x[..., (i - u_y) mod H, (j - u_x) mod W] per sample.

    ``x`` is (B, H, W) or (B, C, H, W); ``u`` holds one displacement per
    sample, or a single displacement shared by all samples.
    """
    x = as_tensor(x)
    ux = np.atleast_1d(np.asarray(u.ux))
    uy = np.atleast_1d(np.asarray(u.uy))
    if len(ux) not in (1, x.shape[0]) or len(uy) != len(ux):
        raise ValueError(f"{len(ux)} displacements for a batch of {x.shape[0]}")
    out = _roll_rows(x.data, ux, uy)

    def bw(g, needs):
        return (_roll_rows(g, -ux, -uy),)

    return custom_op(out, (x,), bw)


def sample_latent_aug(rng: np.random.Generator, z_dim: int) -> LatentAugParams:
    """One uniform draw per latent dimension, shared by prior and posterior."""
    dt = get_default_dtype()
    return LatentAugParams(rng.uniform(0.0, 1.0, z_dim).astype(dt),
                           rng.uniform(0.0, 1.0, z_dim).astype(dt))


def augment_mu(mu, u_mu, strength: float = DEFAULT_LATENT_STRENGTH) -> Tensor:
    """mu + strength * (2 u - 1)."""
    mu = as_tensor(mu)
    shift = strength * (2.0 * np.asarray(u_mu, dtype=mu.dtype) - 1.0)
    return mu + Tensor(shift.astype(mu.dtype, copy=False))


def augment_sigma(sigma, u_sigma, strength: float = DEFAULT_LATENT_STRENGTH) -> Tensor:
    """sigma * (1 + strength * (2 u - 1)); stays positive for strength < 1."""
    if not 0.0 <= strength < 1.0:
        raise ValueError("sigma augmentation strength must lie in [0, 1)")
    sigma = as_tensor(sigma)
    scale = 1.0 + strength * (2.0 * np.asarray(u_sigma, dtype=sigma.dtype) - 1.0)
    return sigma * Tensor(scale.astype(sigma.dtype, copy=False))


def sample_prior(rng: np.random.Generator, z_dim: int, jitter: float = DEFAULT_PRIOR_JITTER,
                 batch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Prior mean ~ N(0, jitter^2) and std = exp(N(0, jitter^2)); jitter 0 gives (0, 1)."""
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    shape = (z_dim,) if batch is None else (batch, z_dim)
    dt = get_default_dtype()
    if jitter == 0:
        return np.zeros(shape, dtype=dt), np.ones(shape, dtype=dt)
    mu = rng.normal(0.0, jitter, shape).astype(dt)
    sigma = np.exp(rng.normal(0.0, jitter, shape)).astype(dt)
    return mu, sigma
