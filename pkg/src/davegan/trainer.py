"""Training loop for the augmented hybrid VAE/GAN.

One optimisation step per mini-batch runs, in order:

1. encode the batch, reparametrize to ``z_vae``, draw ``z_noise`` and decode both;
2. update the discriminator on translated real, reconstructed and random samples;
3. update the generator against the freshly updated discriminator, plus the
   weighted reconstruction term computed on one shared translation;
4. update the encoder with the augmented KL term and the same reconstruction term.

Each optimizer only receives gradients of its own loss. Random draws happen
in a fixed order, which makes a run a pure function of the configuration.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import augment
from .autodiff import Tape, Tensor, concat, default_dtype, grad
from .data import DataSet
from .layers import Adam
from .losses import (
    LossWeights,
    discriminator_loss,
    encoder_loss,
    generator_loss,
    kl_general,
    reconstruction_loss,
)
from .models import ARCHITECTURES, HybridModel, reparametrize, sample_noise, save_checkpoint

logger = logging.getLogger(__name__)

LOG_HEADER = ("step", "epoch", "l_disc", "l_gen", "l_enc", "l_kld", "l_rec")


class TrainingError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class TrainConfig:
    preset: str = "ellipse"
    epochs: int = 200
    batch_size: int = 32
    z_dim: int = 5
    image_size: int = 32
    lr_gen: float = 1e-4
    lr_disc: float = 4e-5
    lr_enc: float = 1e-4
    beta: float = 1.0
    lambda_vae: float = 1.0
    lambda_noise: float = 1.0
    lambda_rec: float = 1e-4
    translation_std_frac: float = augment.DEFAULT_TRANSLATION_STD_FRAC
    latent_strength: float = augment.DEFAULT_LATENT_STRENGTH
    prior_jitter: float = augment.DEFAULT_PRIOR_JITTER
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 means every 10% of the run
    dtype: str = "float32"

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.beta, self.lambda_vae, self.lambda_noise, self.lambda_rec)

    def arch(self):
        return ARCHITECTURES[self.preset](z_dim=self.z_dim, image_size=self.image_size)

    def to_text(self) -> str:
        lines = ["# resolved training configuration"]
        for f in fields(self):
            key = _FIELD_TO_KEY.get(f.name, f.name)
            lines.append(f"{key} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


PRESETS = {
    "ellipse": TrainConfig(preset="ellipse", epochs=200, batch_size=32, z_dim=5, image_size=32),
    "small-data": TrainConfig(preset="small-data", epochs=20_000, batch_size=4, z_dim=32,
                              image_size=64),
}

# config-file keys that differ from field names
_KEY_TO_FIELD = {
    "aug.translation_std_frac": "translation_std_frac",
    "aug.latent_strength": "latent_strength",
    "aug.prior_jitter": "prior_jitter",
    "alpha_gen": "lr_gen",
    "alpha_disc": "lr_disc",
    "alpha_enc": "lr_enc",
}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items() if k.startswith("aug.")}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``key = value`` lines ('#' starts a comment) on top of ``base``."""
    values = {}
    types = {f.name: f.type for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        name = _KEY_TO_FIELD.get(key, key)
        if name not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[name] = value
    if base is None:
        base = preset(values["preset"]) if "preset" in values else TrainConfig()
    elif "preset" in values and values["preset"] != base.preset:
        base = preset(values["preset"])
    out = {}
    for name, value in values.items():
        kind = types[name]
        if kind in ("int", int):
            out[name] = int(float(value)) if "e" in value.lower() else int(value)
        elif kind in ("float", float):
            out[name] = float(value)
        else:
            out[name] = value
    return replace(base, **out)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


# ---------------------------------------------------------------------------


@dataclass
class LossRecord:
    step: int
    epoch: int
    l_disc: float
    l_gen: float
    l_enc: float
    l_kld: float
    l_rec: float

    def row(self) -> list[str]:
        return [str(self.step), str(self.epoch)] + [repr(float(v)) for v in
                (self.l_disc, self.l_gen, self.l_enc, self.l_kld, self.l_rec)]


@dataclass
class LossLog:
    records: list[LossRecord] = field(default_factory=list)

    def append(self, rec: LossRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("loss log steps must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for r in self.records:
                w.writerow(r.row())

    @classmethod
    def read_csv(cls, path) -> "LossLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.append(LossRecord(int(row["step"]), int(row["epoch"]),
                                      *(float(row[k]) for k in LOG_HEADER[2:])))
        return log


class Optimizers:
    """One Adam instance per sub-model."""

    def __init__(self, model: HybridModel, cfg: TrainConfig):
        kw = dict(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        self.disc = Adam(model.discriminator.named_parameters(), cfg.lr_disc, **kw)
        self.gen = Adam(model.generator.named_parameters(), cfg.lr_gen, **kw)
        self.enc = Adam(model.encoder.named_parameters(), cfg.lr_enc, **kw)


def _finite(step: int, **losses: float) -> None:
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite loss at step {step}: {bad}")


def _split(scores: Tensor, b: int) -> tuple[Tensor, Tensor, Tensor]:
    return scores[:b], scores[b : 2 * b], scores[2 * b :]


def train_step(model: HybridModel, batch, cfg: TrainConfig, rng: np.random.Generator,
               opts: Optimizers, step: int = 0, epoch: int = 0) -> LossRecord:
    """One discriminator, generator and encoder update on ``batch`` (B, 1, H, W)."""
    x = Tensor(np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=model_dtype(model)))
    b = x.shape[0]
    if b < 2:
        raise ValueError("batch norm needs at least 2 samples per batch")
    size = model.image_size
    std = cfg.translation_std_frac
    w = cfg.weights

    def translations():
        return augment.sample_translation(rng, size, std, b)

    with default_dtype(model_dtype(model)), Tape():
        # (1) latent codes and decodings
        dist = model.encode(x)
        eps = sample_noise(b, model.z_dim, rng)
        z_vae = reparametrize(dist, eps)
        z_noise = Tensor(sample_noise(b, model.z_dim, rng))
        g_vae = model.generate(z_vae)
        g_noise = model.generate(z_noise)

        # (2) discriminator; one joint batch so batch-norm statistics span real and fake
        d_params = model.discriminator.parameters()
        t_real = augment.translate_periodic(x, translations())
        t_vae = augment.translate_periodic(g_vae.detach(), translations())
        t_noise = augment.translate_periodic(g_noise.detach(), translations())
        d_real, d_vae, d_noise = _split(model.discriminate(concat([t_real, t_vae, t_noise])), b)
        l_disc = discriminator_loss(d_real, d_vae, d_noise)
        _finite(step, l_disc=l_disc.item())
        opts.disc.step(grad(l_disc, d_params))

        # (3) generator, judged by the updated discriminator on a fresh joint batch
        t_real = augment.translate_periodic(x, translations())
        t_vae = augment.translate_periodic(g_vae, translations())
        t_noise = augment.translate_periodic(g_noise, translations())
        _, d_vae, d_noise = _split(model.discriminate(concat([t_real, t_vae, t_noise])), b)
        u_rec = augment.shared_translation(augment.sample_translation(rng, size, std, 1), b)
        rec = reconstruction_loss(augment.translate_periodic(x, u_rec),
                                  augment.translate_periodic(g_vae, u_rec))
        l_gen = generator_loss(d_vae, d_noise, rec, w)

        # (4) encoder: augmented prior and posterior share one draw
        lat = augment.sample_latent_aug(rng, model.z_dim)
        mu_prior, sigma_prior = augment.sample_prior(rng, model.z_dim, cfg.prior_jitter, batch=b)
        s = cfg.latent_strength
        kld = kl_general(augment.augment_mu(dist.mu, lat.u_mu, s),
                         augment.augment_sigma(dist.sigma, lat.u_sigma, s),
                         augment.augment_mu(Tensor(mu_prior), lat.u_mu, s),
                         augment.augment_sigma(Tensor(sigma_prior), lat.u_sigma, s))
        l_enc = encoder_loss(kld, rec, w.beta)
        _finite(step, l_gen=l_gen.item(), l_enc=l_enc.item(), l_kld=kld.item(), l_rec=rec.item())

        g_gen = grad(l_gen, model.generator.parameters())
        g_enc = grad(l_enc, model.encoder.parameters())
        opts.gen.step(g_gen)
        opts.enc.step(g_enc)

    return LossRecord(step, epoch, l_disc.item(), l_gen.item(), l_enc.item(), kld.item(), rec.item())


def model_dtype(model: HybridModel):
    return model.encoder.blocks[0].linear.weight.dtype


def build_model(cfg: TrainConfig) -> HybridModel:
    with default_dtype(np.dtype(cfg.dtype)):
        return HybridModel(cfg.arch(), seed=cfg.seed)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch of one sample is dropped (batch norm)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= 2:
            yield idx


def steps_per_epoch(n: int, batch_size: int) -> int:
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= 2 else 0)


def train(model: HybridModel, dataset: DataSet | Sequence[np.ndarray] | np.ndarray, cfg: TrainConfig,
          out_dir=None, log: LossLog | None = None, max_steps: int | None = None,
          progress: bool = False) -> tuple[HybridModel, LossLog]:
    """Run ``cfg.epochs`` epochs of shuffled mini-batch training.

    With ``out_dir`` set, periodic checkpoints, the final checkpoint
    (``model.dvgn``), the loss log (``losses.csv``) and the resolved config
    (``config.txt``) are written there.
    """
    samples = dataset.samples if isinstance(dataset, DataSet) else dataset
    if len(samples) == 0:
        raise ValueError("dataset is empty")
    dt = model_dtype(model)
    data = np.stack([np.asarray(s) for s in samples]).astype(dt)
    if data.ndim == 3:
        data = data[:, None]
    log = log if log is not None else LossLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(cfg.to_text())
        except OSError as exc:
            raise OSError(f"cannot write to output directory {out}: {exc}") from exc
    every = cfg.checkpoint_every or max(1, math.ceil(cfg.epochs / 10))
    rng = np.random.default_rng([cfg.seed, 1])
    opts = Optimizers(model, cfg)
    step = log.records[-1].step + 1 if log.records else 0
    start = time.perf_counter()
    done = False
    with default_dtype(dt):
        for epoch in range(cfg.epochs):
            for idx in iterate_batches(len(data), cfg.batch_size, rng):
                log.append(train_step(model, data[idx], cfg, rng, opts, step, epoch))
                step += 1
                if max_steps is not None and len(log) >= max_steps:
                    done = True
                    break
            if progress and log.records:
                r = log.records[-1]
                logger.info("epoch %d step %d  disc %.4f gen %.4f enc %.4f kld %.4f rec %.4f (%.0fs)",
                            epoch, r.step, r.l_disc, r.l_gen, r.l_enc, r.l_kld, r.l_rec,
                            time.perf_counter() - start)
            if out is not None and ((epoch + 1) % every == 0 or epoch + 1 == cfg.epochs or done):
                _write(out / f"checkpoint_{epoch + 1:06d}.dvgn", lambda p: save_checkpoint(model, p))
                _write(out / "losses.csv", log.write_csv)
            if done:
                break
    if out is not None:
        _write(out / "model.dvgn", lambda p: save_checkpoint(model, p))
        _write(out / "losses.csv", log.write_csv)
    return model, log


def _write(path: Path, fn) -> None:
    try:
        fn(path)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


# ---------------------------------------------------------------------------


def traversal_grid(model: HybridModel, x_ref, range_sigma: float = 3.0, steps: int = 13) -> np.ndarray:
    """Decode sweeps of one latent coordinate at a time around the encoded mean.

    Row d holds ``steps`` images with z[d] running linearly over
    mu_d +- range_sigma, all other coordinates at their encoded means.
    Returns one (z_dim * size, steps * size) image.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    x = np.asarray(x_ref, dtype=model_dtype(model)).reshape(1, 1, model.image_size, model.image_size)
    with Tape():
        mu = model.encode(Tensor(x), training=False).mu.data[0]
    offsets = np.linspace(-range_sigma, range_sigma, steps)
    if steps % 2:
        offsets[steps // 2] = 0.0
    zs = np.repeat(mu[None, None], model.z_dim * steps, axis=0).reshape(model.z_dim, steps, model.z_dim)
    for d in range(model.z_dim):
        zs[d, :, d] = mu[d] + offsets
    with Tape():
        imgs = model.generate(Tensor(zs.reshape(-1, model.z_dim).astype(mu.dtype)), training=False).data
    s = model.image_size
    imgs = imgs.reshape(model.z_dim, steps, s, s)
    return imgs.transpose(0, 2, 1, 3).reshape(model.z_dim * s, steps * s)
