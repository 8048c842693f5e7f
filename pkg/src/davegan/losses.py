"""Encoder, generator and discriminator losses and the KL divergence forms.

Every loss reduces by the mean over batch (and pixels or latent
dimensions), so the weights in :class:`LossWeights` do not depend on the
batch size. Probabilities entering a logarithm are clamped to
``[CLAMP, 1 - CLAMP]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DomainError, ShapeError, Tensor, as_tensor

CLAMP = 1e-7


@dataclass
class LossWeights:
    beta: float = 1.0
    lambda_vae: float = 1.0
    lambda_noise: float = 1.0
    lambda_rec: float = 1e-4

    def __post_init__(self):
        for name in ("beta", "lambda_vae", "lambda_noise", "lambda_rec"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _check_positive(*sigmas: Tensor) -> None:
    for s in sigmas:
        if np.any(s.data <= 0) or np.any(np.isnan(s.data)):
            raise DomainError("standard deviations must be strictly positive")


def kl_general(mu_post, sigma_post, mu_prior, sigma_prior) -> Tensor:
    """KL(N(mu_post, sigma_post^2) || N(mu_prior, sigma_prior^2)), averaged over all entries."""
    mu_post, sigma_post = as_tensor(mu_post), as_tensor(sigma_post)
    mu_prior = as_tensor(mu_prior, mu_post)
    sigma_prior = as_tensor(sigma_prior, mu_post)
    _check_positive(sigma_post, sigma_prior)
    kl = ((sigma_prior / sigma_post).log()
          + (sigma_post.square() + (mu_prior - mu_post).square()) / (sigma_prior.square() * 2.0)
          - 0.5)
    return kl.mean()


def kl_standard(mu_post, sigma_post) -> Tensor:
    """The usual closed form against a standard normal prior."""
    mu_post, sigma_post = as_tensor(mu_post), as_tensor(sigma_post)
    _check_positive(sigma_post)
    var = sigma_post.square()
    return ((var.log() - var - mu_post.square() + 1.0) * -0.5).mean()


def _clamped(p) -> Tensor:
    return as_tensor(p).clip(CLAMP, 1.0 - CLAMP)


def reconstruction_loss(x_target, x_recon) -> Tensor:
    """Mean pixel-wise binary cross-entropy (Bernoulli negative log-likelihood)."""
    x_target = as_tensor(x_target)
    x_recon = as_tensor(x_recon)
    if x_target.shape != x_recon.shape:
        raise ShapeError(f"target shape {x_target.shape} != reconstruction shape {x_recon.shape}")
    p = _clamped(x_recon)
    t = as_tensor(x_target, p)
    return -(t * p.log() + (1.0 - t) * (1.0 - p).log()).mean()


def encoder_loss(kld, rec, beta: float) -> Tensor:
    return as_tensor(kld) * beta + rec


def _scores(d) -> Tensor:
    d = as_tensor(d)
    if np.any(np.isnan(d.data)):
        raise DomainError("discriminator scores contain NaN")
    return _clamped(d)


def discriminator_loss(d_real, d_vae, d_noise) -> Tensor:
    """-log D(x) - log(1 - D(G(z_vae))) - log(1 - D(G(z_noise))), batch mean."""
    r, v, n = _scores(d_real), _scores(d_vae), _scores(d_noise)
    return -(r.log().mean() + (1.0 - v).log().mean() + (1.0 - n).log().mean())


def generator_loss(d_vae, d_noise, rec, w: LossWeights) -> Tensor:
    """Non-saturating -log D terms for both latent sources plus weighted reconstruction."""
    v, n = _scores(d_vae), _scores(d_noise)
    loss = -(v.log().mean() * w.lambda_vae) - n.log().mean() * w.lambda_noise
    return loss + as_tensor(rec, loss) * w.lambda_rec


# Reference forms of the original minimax objective; training does not use them.

def minimax_generator_loss(d_fake) -> Tensor:
    return (1.0 - _scores(d_fake)).log().mean()


def minimax_discriminator_loss(d_real, d_fake) -> Tensor:
    return -(_scores(d_real).log().mean() + (1.0 - _scores(d_fake)).log().mean())

