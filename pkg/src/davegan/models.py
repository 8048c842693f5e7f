"""Encoder, mutual generator/decoder and discriminator built from layer tables."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor, get_default_dtype
from .layers import (
    BatchNormLayer,
    Conv2DLayer,
    Layer,
    TranspConv2DLayer,
    conv_output_size,
    transp_output_size,
)

CHECKPOINT_MAGIC = b"DVGN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass(frozen=True)
class LayerSpec:
    type: str  # "Conv2D" | "TranspConv2D"
    filters: int
    kernel: int = 4
    stride: int = 1
    padding: str = "Same"
    batch_norm: bool = False
    activation: str = "Leaky ReLU"  # "Leaky ReLU" | "Sigmoid"


@dataclass(frozen=True)
class ArchSpec:
    """Full hybrid architecture: three layer stacks plus image size and latent width."""

    encoder: tuple[LayerSpec, ...]
    generator: tuple[LayerSpec, ...]
    discriminator: tuple[LayerSpec, ...]
    image_size: int
    z_dim: int
    name: str = field(default="custom", compare=False)

    def canonical(self) -> str:
        body = {
            "encoder": [asdict(l) for l in self.encoder],
            "generator": [asdict(l) for l in self.generator],
            "discriminator": [asdict(l) for l in self.discriminator],
            "image_size": self.image_size,
            "z_dim": self.z_dim,
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical().encode()).digest()


def _conv(f, s, pad, bn, act="Leaky ReLU"):
    return LayerSpec("Conv2D", f, 4, s, pad, bn, act)


def _tconv(f, s, pad, bn, act="Leaky ReLU"):
    return LayerSpec("TranspConv2D", f, 4, s, pad, bn, act)


def ellipse_arch(z_dim: int = 5, image_size: int = 32) -> ArchSpec:
    """The 32x32 elliptical-inclusion network; other sizes drop or add stride-2 layers."""
    enc = (
        _conv(16, 2, "Same", False),
        _conv(32, 2, "Same", True),
        _conv(64, 2, "Same", True),
        _conv(2 * z_dim, 1, "Valid", True),
    )
    gen = (
        _tconv(64, 1, "Valid", True),
        _tconv(32, 2, "Same", True),
        _tconv(16, 2, "Same", True),
        _tconv(1, 2, "Same", True, "Sigmoid"),
    )
    disc = (
        _conv(8, 2, "Same", False),
        _conv(16, 2, "Same", True),
        _conv(32, 2, "Same", True),
        _conv(1, 1, "Valid", True, "Sigmoid"),
    )
    arch = ArchSpec(enc, gen, disc, 32, z_dim, "ellipse")
    return resize_arch(arch, image_size) if image_size != 32 else arch


def small_data_arch(z_dim: int = 32, image_size: int = 64) -> ArchSpec:
    """The 64x64 small-data network; other sizes drop or add stride-2 layers."""
    enc = (
        _conv(16, 2, "Same", False),
        _conv(16, 2, "Same", True),
        _conv(32, 2, "Same", True),
        _conv(64, 2, "Same", True),
        _conv(2 * z_dim, 1, "Valid", True),
    )
    gen = (
        _tconv(64, 1, "Valid", True),
        _tconv(32, 2, "Same", True),
        _tconv(32, 2, "Same", True),
        _tconv(16, 2, "Same", True),
        _tconv(1, 2, "Same", False, "Sigmoid"),
    )
    disc = (
        _conv(4, 2, "Same", False),
        _conv(8, 2, "Same", True),
        _conv(16, 2, "Same", True),
        _conv(32, 2, "Same", True),
        _conv(1, 1, "Valid", True, "Sigmoid"),
    )
    arch = ArchSpec(enc, gen, disc, 64, z_dim, "small-data")
    return resize_arch(arch, image_size) if image_size != 64 else arch


ARCHITECTURES = {"ellipse": ellipse_arch, "small-data": small_data_arch}


def resize_arch(arch: ArchSpec, image_size: int) -> ArchSpec:
    """Adapt the number of stride-2 layers so that ``image_size`` maps to 4x4 before the valid layer.

    Shrinking removes the second stride-2 layer of each stack (the generator's
    second-to-last upsampling layer); growing duplicates it.
    """
    n = image_size.bit_length() - 1
    if image_size < 8 or 2**n != image_size:
        raise ValueError(f"image size must be a power of two >= 8, got {image_size}")
    want = n - 2
    have = sum(1 for l in arch.encoder if l.stride == 2)
    enc, gen, disc = list(arch.encoder), list(arch.generator), list(arch.discriminator)
    while have > want:
        if have == 1:
            raise ValueError("cannot shrink further")
        del enc[1]
        del disc[1]
        del gen[-3]
        have -= 1
    while have < want:
        enc.insert(1, enc[1])
        disc.insert(1, disc[1])
        gen.insert(-2, gen[-3])
        have += 1
    return ArchSpec(tuple(enc), tuple(gen), tuple(disc), image_size, arch.z_dim, arch.name)


# ---------------------------------------------------------------------------


class Block(Layer):
    """Linear layer, optional batch norm, activation."""

    def __init__(self, spec: LayerSpec, in_channels: int, rng: np.random.Generator):
        cls = Conv2DLayer if spec.type == "Conv2D" else TranspConv2DLayer
        if spec.type not in ("Conv2D", "TranspConv2D"):
            raise ValueError(f"unknown layer type {spec.type!r}")
        self.spec = spec
        self.linear = cls(in_channels, spec.filters, spec.kernel, spec.stride, spec.padding, rng)
        self.bn = BatchNormLayer(spec.filters) if spec.batch_norm else None

    def named_parameters(self):
        out = [("linear." + n, p) for n, p in self.linear.named_parameters()]
        if self.bn is not None:
            out += [("bn." + n, p) for n, p in self.bn.named_parameters()]
        return out

    def named_buffers(self):
        return [("bn." + n, b) for n, b in self.bn.named_buffers()] if self.bn else []

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        y = self.linear(x)
        if self.bn is not None:
            y = self.bn.forward(y, training)
        if self.spec.activation == "Sigmoid":
            return y.sigmoid()
        return y.leaky_relu()


class Network(Layer):
    """Sequential stack of :class:`Block` objects."""

    def __init__(self, specs, in_channels: int, rng: np.random.Generator):
        self.blocks = []
        c = in_channels
        for spec in specs:
            self.blocks.append(Block(spec, c, rng))
            c = spec.filters
        self.in_channels = in_channels
        self.out_channels = c

    def named_parameters(self):
        return [(f"{i}.{n}", p) for i, b in enumerate(self.blocks) for n, p in b.named_parameters()]

    def named_buffers(self):
        return [(f"{i}.{n}", v) for i, b in enumerate(self.blocks) for n, v in b.named_buffers()]

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        for block in self.blocks:
            x = block.forward(x, training)
        return x

    def output_size(self, size: int) -> int:
        for b in self.blocks:
            size = b.linear.output_size(size)
        return size


@dataclass
class LatentDist:
    mu: Tensor
    log_var: Tensor

    @property
    def sigma(self) -> Tensor:
        return (self.log_var * 0.5).exp()


def reparametrize(d: LatentDist, eps) -> Tensor:
    """z = mu + exp(log_var / 2) * eps."""
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if eps.shape != d.mu.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match latent shape {d.mu.shape}")
    return d.mu + d.sigma * Tensor(eps.astype(d.mu.dtype, copy=False))


def sample_noise(batch: int, z_dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((batch, z_dim)).astype(get_default_dtype())


class HybridModel:
    """Encoder E, mutual generator/decoder G and discriminator D."""

    def __init__(self, arch: ArchSpec, seed: int = 0):
        self.arch = arch
        self.z_dim = arch.z_dim
        self.image_size = arch.image_size
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = Network(arch.encoder, 1, rng)
        self.generator = Network(arch.generator, arch.z_dim, rng)
        self.discriminator = Network(arch.discriminator, 1, rng)
        if self.encoder.out_channels != 2 * arch.z_dim:
            raise ValueError(
                f"encoder emits {self.encoder.out_channels} channels, expected 2*z_dim={2 * arch.z_dim}")
        s = arch.image_size
        checks = (
            ("encoder", self.encoder.output_size(s), 1),
            ("generator", self.generator.output_size(1), s),
            ("discriminator", self.discriminator.output_size(s), 1),
        )
        for name, got, want in checks:
            if got != want:
                raise ValueError(f"{name} maps to spatial size {got}, expected {want}")

    # -- sub-model access ------------------------------------------------
    @property
    def networks(self) -> dict[str, Network]:
        return {"encoder": self.encoder, "generator": self.generator,
                "discriminator": self.discriminator}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{k}.{n}", p) for k, net in self.networks.items() for n, p in net.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{k}.{n}", b) for k, net in self.networks.items() for n, b in net.named_buffers()]

    def _check_images(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        s = self.image_size
        if x.ndim != 4 or x.shape[1:] != (1, s, s):
            raise ShapeError(f"expected images of shape (B, 1, {s}, {s}), got {x.shape}")
        return x

    # -- forward maps ----------------------------------------------------
    def encode(self, x, training: bool = True) -> LatentDist:
        x = self._check_images(x)
        h = self.encoder.forward(x, training)
        b = h.shape[0]
        h = h.reshape(b, 2 * self.z_dim)
        return LatentDist(h[:, : self.z_dim], h[:, self.z_dim :])

    def generate(self, z, training: bool = True) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=get_default_dtype()))
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise ShapeError(f"expected latent batch of shape (B, {self.z_dim}), got {z.shape}")
        return self.generator.forward(z.reshape(z.shape[0], self.z_dim, 1, 1), training)

    def discriminate(self, x, training: bool = True) -> Tensor:
        x = self._check_images(x)
        d = self.discriminator.forward(x, training)
        return d.reshape(d.shape[0])

    def reconstruct(self, x, training: bool = False) -> Tensor:
        """G(mu(x)): decode the posterior mean, no sampling noise."""
        return self.generate(self.encode(x, training).mu, training)

    # -- checkpoints -----------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path, arch: ArchSpec | None = None) -> "HybridModel":
        return load_checkpoint(path, arch)


# ---------------------------------------------------------------------------
# checkpoint format: little-endian
#   "DVGN" | u32 version | u32 z_dim | 32-byte sha256 of the architecture
#   then records until EOF: u32 name_len | name | u32 rank | u32 extents... | f32 values


def _records(model: HybridModel):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, b in model.named_buffers():
        yield name, b


def save_checkpoint(model: HybridModel, path) -> None:
    path = Path(path)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, model.z_dim), model.arch.hash()]
    for name, arr in _records(model):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[int, int, bytes, dict[str, np.ndarray]]:
    """Parse a checkpoint into (version, z_dim, arch hash, {name: float32 array})."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 44 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, z_dim = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})")
    digest = blob[12:44]
    pos = 44
    records: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            if len(name.encode()) != n:
                raise CheckpointError(f"{path}: truncated record name at byte {pos}")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            end = pos + 4 * count
            if end > len(blob):
                raise CheckpointError(f"{path}: truncated values for {name!r} at byte {pos}")
            records[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint at byte {pos} (version {version})") from exc
    return version, z_dim, digest, records


def find_arch(z_dim: int, digest: bytes) -> ArchSpec | None:
    for builder in ARCHITECTURES.values():
        for size in (8, 16, 32, 64, 128, 256, 512):
            try:
                arch = builder(z_dim=z_dim, image_size=size)
            except ValueError:
                continue
            if arch.hash() == digest:
                return arch
    return None


def load_checkpoint(path, arch: ArchSpec | None = None) -> HybridModel:
    version, z_dim, digest, records = read_checkpoint(path)
    if arch is None:
        arch = find_arch(z_dim, digest)
        if arch is None:
            raise CheckpointError(f"{path}: architecture hash matches no known preset (version {version})")
    elif arch.hash() != digest or arch.z_dim != z_dim:
        raise CheckpointError(f"{path}: checkpoint was written for a different architecture")
    model = HybridModel(arch)
    dt = get_default_dtype()
    for name, p in model.named_parameters():
        if name not in records:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if records[name].shape != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}")
        p.data = records[name].astype(dt)
    for name, buf in model.named_buffers():
        if name not in records:
            raise CheckpointError(f"{path}: missing buffer {name!r}")
        buf[...] = records[name]
    return model
