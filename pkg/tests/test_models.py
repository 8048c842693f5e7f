import numpy as np
import pytest

from davegan.autodiff import ShapeError, Tape, Tensor, default_dtype, grad
from davegan.models import (
    CheckpointError,
    HybridModel,
    LatentDist,
    LayerSpec,
    ellipse_arch,
    load_checkpoint,
    read_checkpoint,
    reparametrize,
    resize_arch,
    sample_noise,
    small_data_arch,
)
from gradcheck import check


@pytest.fixture(scope="module")
def ellipse_model():
    return HybridModel(ellipse_arch(), seed=0)


def test_table_rows():
    arch = ellipse_arch()
    assert [l.filters for l in arch.encoder] == [16, 32, 64, 10]
    assert [l.batch_norm for l in arch.encoder] == [False, True, True, True]
    assert arch.generator[-1] == LayerSpec("TranspConv2D", 1, 4, 2, "Same", True, "Sigmoid")
    assert arch.discriminator[-1] == LayerSpec("Conv2D", 1, 4, 1, "Valid", True, "Sigmoid")
    small = small_data_arch()
    assert [l.filters for l in small.encoder] == [16, 16, 32, 64, 64]
    assert [l.filters for l in small.generator] == [64, 32, 32, 16, 1]
    assert small.generator[-1].batch_norm is False
    assert [l.filters for l in small.discriminator] == [4, 8, 16, 32, 1]


def test_resized_small_data_arch_keeps_shapes():
    arch = resize_arch(small_data_arch(), 32)
    m = HybridModel(arch, seed=1)
    x = np.random.default_rng(0).uniform(size=(3, 1, 32, 32))
    assert m.generate(m.encode(x).mu).shape == (3, 1, 32, 32)
    assert len(resize_arch(small_data_arch(), 128).encoder) == 6


def test_encode_shapes(ellipse_model, rng):
    x = rng.uniform(size=(4, 1, 32, 32))
    d = ellipse_model.encode(x)
    assert d.mu.shape == d.log_var.shape == (4, 5)
    assert np.all(d.sigma.data > 0)
    with pytest.raises(ShapeError):
        ellipse_model.encode(rng.uniform(size=(4, 1, 16, 16)))


def test_identical_inputs_identical_codes(ellipse_model, rng):
    x = np.repeat(rng.uniform(size=(1, 1, 32, 32)), 2, axis=0)
    d = ellipse_model.encode(x, training=False)
    assert d.mu.data[0].tobytes() == d.mu.data[1].tobytes()


def test_zero_weights_give_constant_code(rng):
    m = HybridModel(ellipse_arch(), seed=0)
    for _, p in m.encoder.named_parameters():
        if p.ndim == 4:
            p.data = np.zeros_like(p.data)
    d = m.encode(rng.uniform(size=(3, 1, 32, 32)), training=False)
    assert np.ptp(d.mu.data, axis=0).max() == 0.0


def test_generate_and_discriminate_shapes(ellipse_model, rng):
    img = ellipse_model.generate(rng.normal(size=(4, 5)))
    assert img.shape == (4, 1, 32, 32)
    assert img.data.min() > 0 and img.data.max() < 1
    scores = ellipse_model.discriminate(img)
    assert scores.shape == (4,)
    assert scores.data.min() > 0 and scores.data.max() < 1
    x = rng.uniform(size=(4, 1, 32, 32))
    a = ellipse_model.discriminate(x, training=False).data
    b = ellipse_model.discriminate(x, training=False).data
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ShapeError):
        ellipse_model.generate(rng.normal(size=(4, 6)))


def test_small_data_generator_output(rng):
    m = HybridModel(small_data_arch(), seed=0)
    assert m.generate(rng.normal(size=(4, 32))).shape == (4, 1, 64, 64)


def test_reparametrize_examples(rng):
    mu, lv = rng.normal(size=(2, 3, 5))
    d = LatentDist(Tensor(mu), Tensor(lv))
    assert reparametrize(d, np.zeros((3, 5))).data.tobytes() == mu.tobytes()
    e = rng.normal(size=(3, 5))
    z0 = LatentDist(Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 5))))
    np.testing.assert_array_equal(reparametrize(z0, e).data, e)
    with pytest.raises(ShapeError):
        reparametrize(d, np.zeros((2, 5)))


def test_reparametrize_gradients(rng):
    for _ in range(10):
        mu, lv, e = rng.normal(size=(3, 2, 4))
        r = Tensor(rng.normal(size=(2, 4)))
        assert check(lambda m, l: reparametrize(LatentDist(m, l), e) * r, [mu, lv]) <= 1e-5
    m = Tensor(mu, requires_grad=True)
    with Tape():
        (g,) = grad(reparametrize(LatentDist(m, Tensor(lv)), e).sum(), [m])
    np.testing.assert_allclose(g, 1.0, rtol=1e-12)


def test_sample_noise_moments():
    z = sample_noise(100_000, 1, np.random.default_rng(0))
    assert abs(z.mean()) <= 0.02 and abs(z.var() - 1) <= 0.03
    a = sample_noise(2, 5, np.random.default_rng(1))
    assert a.tobytes() == sample_noise(2, 5, np.random.default_rng(1)).tobytes()
    assert a.tobytes() != sample_noise(2, 5, np.random.default_rng(2)).tobytes()


def test_end_to_end_gradient_spot_checks(rng):
    m = HybridModel(ellipse_arch(), seed=3)
    x = rng.uniform(size=(3, 1, 32, 32))
    eps = rng.normal(size=(3, 5))
    weight = m.encoder.blocks[1].linear.weight
    picks = [tuple(rng.integers(0, n) for n in weight.shape) for _ in range(5)]

    def loss():
        return m.generate(reparametrize(m.encode(x), eps)).mean()

    with Tape():
        (g,) = grad(loss(), [weight])
    assert np.abs(g).max() > 0
    h = 1e-6
    for idx in picks:
        old = weight.data[idx]
        weight.data[idx] = old + h
        up = loss().item()
        weight.data[idx] = old - h
        down = loss().item()
        weight.data[idx] = old
        fd = (up - down) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-8)


def test_checkpoint_round_trip(tmp_path, rng):
    with default_dtype(np.float32):
        m = HybridModel(ellipse_arch(), seed=5)
        x = rng.uniform(size=(4, 1, 32, 32)).astype(np.float32)
        m.encode(x, training=True)  # move the running statistics off their defaults
        m.save(tmp_path / "m.dvgn")
        loaded = load_checkpoint(tmp_path / "m.dvgn")
        a = m.reconstruct(x).data
        b = loaded.reconstruct(x).data
    assert a.tobytes() == b.tobytes()
    assert loaded.arch == m.arch
    for (na, ba), (nb, bb) in zip(m.named_buffers(), loaded.named_buffers()):
        assert na == nb and ba.tobytes() == bb.tobytes()


def test_corrupt_checkpoints(tmp_path):
    m = HybridModel(ellipse_arch(), seed=0)
    path = tmp_path / "m.dvgn"
    m.save(path)
    blob = path.read_bytes()
    (tmp_path / "short.dvgn").write_bytes(blob[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.dvgn")
    (tmp_path / "magic.dvgn").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "magic.dvgn")
    (tmp_path / "ver.dvgn").write_bytes(blob[:4] + (9).to_bytes(4, "little") + blob[8:])
    with pytest.raises(CheckpointError, match="version 9"):
        read_checkpoint(tmp_path / "ver.dvgn")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, small_data_arch())
