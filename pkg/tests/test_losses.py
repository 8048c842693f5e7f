import math

import numpy as np
import pytest

from davegan.autodiff import DomainError, ShapeError, Tensor
from davegan.losses import (
    LossWeights,
    discriminator_loss,
    encoder_loss,
    generator_loss,
    kl_general,
    kl_standard,
    minimax_discriminator_loss,
    minimax_generator_loss,
    reconstruction_loss,
)
from gradcheck import check


def kl_oracle(mq, sq, mp, sp):
    """Closed-form KL between two univariate normals, one entry at a time."""
    return math.log(sp / sq) + (sq * sq + (mp - mq) ** 2) / (2 * sp * sp) - 0.5


def test_kl_examples():
    assert kl_general(0.0, 1.0, 0.0, 1.0).item() == 0.0
    assert kl_general(1.0, 1.0, 0.0, 1.0).item() == pytest.approx(0.5, abs=1e-15)
    assert kl_general(0.0, 2.0, 0.0, 1.0).item() == pytest.approx(-math.log(2) + 2 - 0.5, abs=1e-14)
    assert kl_standard(0.0, 1.0).item() == 0.0
    assert kl_standard(1.0, 1.0).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_scalar_oracle(rng):
    mq, mp = rng.normal(size=(2, 6))
    sq, sp = rng.uniform(0.2, 3.0, size=(2, 6))
    expect = np.mean([kl_oracle(*v) for v in zip(mq, sq, mp, sp)])
    assert kl_general(mq, sq, mp, sp).item() == pytest.approx(expect, rel=1e-13)


def test_kl_standard_is_special_case(rng):
    mu = rng.normal(0, 2, size=1000)
    sigma = rng.uniform(0.05, 4.0, size=1000)
    for m, s in zip(mu, sigma):
        assert abs(kl_standard(m, s).item() - kl_general(m, s, 0.0, 1.0).item()) <= 1e-12


def test_gibbs_inequality(rng):
    n = 10_000
    mq, mp = rng.normal(0, 3, size=(2, n))
    sq, sp = np.exp(rng.normal(0, 1, size=(2, n)))
    for i in range(0, n, 1000):
        sl = slice(i, i + 1000)
        vals = np.log(sp[sl] / sq[sl]) + (sq[sl] ** 2 + (mp[sl] - mq[sl]) ** 2) / (2 * sp[sl] ** 2) - 0.5
        assert vals.min() >= -1e-15
    per_entry = [kl_general(mq[i], sq[i], mp[i], sp[i]).item() for i in range(0, n, 7)]
    assert min(per_entry) >= 0.0
    assert kl_general(mq, sq, mq, sq).item() == 0.0


def test_kl_rejects_bad_sigma():
    with pytest.raises(DomainError):
        kl_general(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(DomainError):
        kl_standard(0.0, -1.0)


def test_reconstruction_examples():
    assert reconstruction_loss(np.zeros(4), np.full(4, 0.5)).item() == pytest.approx(math.log(2))
    assert reconstruction_loss(np.full(4, 0.5), np.full(4, 0.5)).item() == pytest.approx(math.log(2))
    x = np.array([0.0, 1.0, 1.0, 0.0])
    assert 0 <= reconstruction_loss(x, x).item() < 1e-6
    with pytest.raises(ShapeError):
        reconstruction_loss(np.zeros(3), np.zeros(4))


def test_encoder_loss_examples():
    assert encoder_loss(1.0, 2.0, 0.5).item() == 2.5
    assert encoder_loss(7.0, 2.0, 0.0).item() == 2.0
    assert encoder_loss(0.0, 2.0, 3.0).item() == 2.0


def test_discriminator_examples():
    assert discriminator_loss(0.5, 0.5, 0.5).item() == pytest.approx(3 * math.log(2))
    assert discriminator_loss(1.0, 0.0, 0.0).item() == pytest.approx(0.0, abs=1e-6)
    e = math.exp(-1)
    assert discriminator_loss(e, 1 - e, 1 - e).item() == pytest.approx(3.0, rel=1e-12)


def test_generator_examples():
    w = LossWeights()
    assert generator_loss(0.5, 0.5, 0.0, w).item() == pytest.approx(2 * math.log(2))
    w0 = LossWeights(lambda_vae=0, lambda_noise=0, lambda_rec=1e-4)
    assert generator_loss(0.3, 0.9, 2.0, w0).item() == pytest.approx(2e-4)
    assert generator_loss(1.0, 1.0, 0.0, w).item() == pytest.approx(0.0, abs=1e-6)


def test_saturated_scores_stay_finite():
    vals = [discriminator_loss([0.0, 1.0], [1.0, 0.0], [1.0, 1.0]),
            generator_loss([0.0], [0.0], 0.0, LossWeights()),
            reconstruction_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]))]
    assert all(np.isfinite(v.item()) for v in vals)
    with pytest.raises(DomainError):
        discriminator_loss([np.nan], [0.5], [0.5])


def test_weights_validate():
    with pytest.raises(ValueError):
        LossWeights(beta=-1)


def test_minimax_reference_forms():
    assert minimax_generator_loss(0.5).item() == pytest.approx(math.log(0.5))
    assert minimax_discriminator_loss(0.5, 0.5).item() == pytest.approx(2 * math.log(2))


def test_loss_gradients(rng):
    w = LossWeights(beta=0.7, lambda_vae=1.3, lambda_noise=0.4, lambda_rec=0.5)
    for _ in range(10):
        mq, mp = rng.normal(size=(2, 3, 4))
        sq, sp = rng.uniform(0.3, 2.0, size=(2, 3, 4))
        assert check(kl_general, [mq, sq, mp, sp]) <= 1e-5
        assert check(kl_standard, [mq, sq]) <= 1e-5
        t = rng.uniform(0, 1, size=(3, 4))
        r = rng.uniform(0.05, 0.95, size=(3, 4))
        assert check(reconstruction_loss, [t, r]) <= 1e-5
        d = rng.uniform(0.05, 0.95, size=(3, 4))
        assert check(discriminator_loss, list(d[:3])) <= 1e-5
        assert check(lambda a, b, c: generator_loss(a, b, c, w), [d[0], d[1], np.array(0.8)]) <= 1e-5
        assert check(lambda k, c: encoder_loss(k, c, 0.7), [np.array(0.4), np.array(1.2)]) <= 1e-5
