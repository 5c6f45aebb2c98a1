""" Network definitions.

    Four trainable networks make up a style model: the feature pyramid encoder E, the style-based decoder D, the
    noise remapper M and the Wasserstein critic Dis.  Two more networks are fixed surrogates used only by the losses
    and metrics: a perceptual feature extractor F and an identity embedder R.  Their weights come from a seeded
    initializer and are never trained, so any pretrained network honoring the same call signature can replace them.

    Every network is built from a frozen spec dataclass plus an explicit seed.  parameter_count(spec) computes the
    number of weights from the spec alone and always agrees with the instantiated module.
"""
import hashlib
import math
from dataclasses import dataclass, asdict

import torch
from torch import nn
from torch.nn import functional as F

from stylecapsule.latent import LatentConfig, ShapeMismatch

LRELU_SLOPE = 0.2
PYRAMID_LEVELS = 3


def _lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LRELU_SLOPE)


def _halvings(resolution: int, count: int) -> list[int]:
    """ Strides for `count` downsampling convolutions that never go below a 1x1 map. """
    strides, size = [], resolution
    for _ in range(count):
        s = 2 if size > 1 else 1
        strides.append(s)
        size //= s
    return strides


def _level_channels(resolution: int, cap: int, span: int = 2048, floor: int = 16) -> tuple[int, ...]:
    """ Desk-scale channel widths for resolutions 4, 8, ..., resolution. """
    levels = [2 ** k for k in range(2, int(math.log2(resolution)) + 1)]
    return tuple(max(floor, min(cap, span // r)) for r in levels)


def seeded_init_(module: nn.Module, seed: int, gain: float = math.sqrt(2.0), bias_std: float = 0.0) -> nn.Module:
    """ Normal initialization scaled by fan-in, drawn from a private generator independent of the global RNG.

        Args:
            module (nn.Module): Module whose parameters are overwritten in named_parameters order.
            seed (int): Generator seed.
            gain (float): Weight std is gain / sqrt(fan_in).
            bias_std (float): Biases are zero unless this is positive.
        Returns:
            nn.Module: The same module.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith('bias'):
                if bias_std > 0:
                    p.copy_(torch.randn(p.shape, generator=g) * bias_std)
                else:
                    p.zero_()
            elif p.dim() >= 2 and not name.endswith('const'):
                p.copy_(torch.randn(p.shape, generator=g) * (gain / math.sqrt(p[0].numel())))
            else:
                p.copy_(torch.randn(p.shape, generator=g))
    return module


def _check_images(images: torch.Tensor, resolution: int):
    if images.dim() != 4 or images.shape[1] != 3 or images.shape[2] != resolution or images.shape[3] != resolution:
        raise ShapeMismatch(f"Expected N x 3 x {resolution} x {resolution} images, got {tuple(images.shape)}.")
    if not torch.isfinite(images).all():
        raise NonFiniteInput("Images contain non-finite values.")


@dataclass(frozen=True)
class EncoderSpec:
    """ Feature pyramid encoder: a residual backbone with three levels, fine to coarse. """
    resolution: int
    latent: LatentConfig
    channels: tuple[int, int, int] = (32, 64, 128)
    pyramid_channels: int = 64

    def __post_init__(self):
        if len(self.channels) != PYRAMID_LEVELS:
            raise ValueError(f"Encoder needs {PYRAMID_LEVELS} channel widths, got {self.channels}.")
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))

    def level_of_row(self, row: int) -> int:
        """ Pyramid level feeding a latent row: 0 coarse for [0, L/3), 1 medium up to 2L/3, 2 fine for the rest. """
        n = self.latent.num_layers
        if row < n // 3:
            return 0
        if row < (2 * n) // 3:
            return 1
        return 2


@dataclass(frozen=True)
class DecoderSpec:
    """ Style-based decoder: a learned 4x4 constant modulated by two AdaIN sites per resolution level. """
    resolution: int
    latent: LatentConfig
    channels: tuple[int, ...] | None = None

    def __post_init__(self):
        levels = self.latent.num_layers // 2
        if self.latent.num_layers != 2 * (int(math.log2(self.resolution)) - 1):
            raise ValueError(f"Decoder at resolution {self.resolution} needs "
                             f"{2 * (int(math.log2(self.resolution)) - 1)} latent rows, got {self.latent.num_layers}.")
        if self.channels is None:
            object.__setattr__(self, 'channels', _level_channels(self.resolution, cap=128))
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))
        if len(self.channels) != levels:
            raise ValueError(f"Decoder needs {levels} channel widths, got {self.channels}.")

    def row_channels(self, row: int) -> int:
        return self.channels[row // 2]


@dataclass(frozen=True)
class RemapperSpec:
    """ Fully connected map from Gaussian noise to the style rows of a latent code. """
    latent: LatentConfig
    noise_dim: int = 512
    hidden: tuple[int, ...] = (512, 512, 512)

    def __post_init__(self):
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class CriticSpec:
    """ Strided convolution critic; one channel width per resolution from the input down to 4x4. """
    resolution: int
    channels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.channels is None:
            object.__setattr__(self, 'channels', tuple(reversed(_level_channels(self.resolution, cap=128))))
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))
        if len(self.channels) != int(math.log2(self.resolution)) - 1:
            raise ValueError(f"Critic at resolution {self.resolution} needs "
                             f"{int(math.log2(self.resolution)) - 1} channel widths, got {self.channels}.")


@dataclass(frozen=True)
class EmbedderSpec:
    """ Fixed random-feature surrogate for the perceptual (F) or identity (R) network. """
    role: str
    resolution: int
    channels: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.role not in ('perceptual', 'identity'):
            raise ValueError(f"Embedder role must be perceptual or identity, got {self.role!r}.")
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))

    def to_dict(self) -> dict:
        return asdict(self)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1)
        self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride, 0)

    def forward(self, x):
        h = self.conv2(_lrelu(self.conv1(x)))
        return _lrelu(h + self.shortcut(x))


class StyleHead(nn.Module):
    """ Maps one pyramid level to one latent row. """
    def __init__(self, channels: int, layer_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 1, 1)
        self.linear = nn.Linear(channels, layer_dim)

    def forward(self, x):
        return self.linear(_lrelu(self.conv(x)).mean(dim=(2, 3)))


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec, seed: int):
        super().__init__()
        self.spec = spec
        c, f = spec.channels, spec.pyramid_channels
        self.stem = nn.Conv2d(3, c[0], 3, 1, 1)
        strides = _halvings(spec.resolution, PYRAMID_LEVELS)
        self.stages = nn.ModuleList([ResidualBlock(c_in, c_out, s)
                                     for c_in, c_out, s in zip((c[0],) + c[:-1], c, strides)])
        self.laterals = nn.ModuleList([nn.Conv2d(ch, f, 1) for ch in c])
        self.heads = nn.ModuleList([StyleHead(f, spec.latent.layer_dim) for _ in range(spec.latent.num_layers)])
        seeded_init_(self, seed)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        _check_images(images, self.spec.resolution)
        h = _lrelu(self.stem(images))
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        fine, medium, coarse = [lateral(feat) for lateral, feat in zip(self.laterals, feats)]
        # Top-down pathway.
        medium = medium + F.interpolate(coarse, size=medium.shape[-2:], mode='nearest')
        fine = fine + F.interpolate(medium, size=fine.shape[-2:], mode='nearest')
        levels = (coarse, medium, fine)
        rows = [head(levels[self.spec.level_of_row(j)]) for j, head in enumerate(self.heads)]
        return torch.stack(rows, dim=1)


class AdaIN(nn.Module):
    """ Instance-normalize a feature map, then scale and shift it per channel from one latent row. """
    def __init__(self, channels: int, layer_dim: int):
        super().__init__()
        self.affine = nn.Linear(layer_dim, 2 * channels)

    def forward(self, x, w):
        gamma, beta = self.affine(w).chunk(2, dim=1)
        return F.instance_norm(x) * (1 + gamma[..., None, None]) + beta[..., None, None]


class Decoder(nn.Module):
    def __init__(self, spec: DecoderSpec, seed: int):
        super().__init__()
        self.spec = spec
        n, d = spec.latent.num_layers, spec.latent.layer_dim
        self.const = nn.Parameter(torch.empty(1, spec.channels[0], 4, 4))
        self.convs = nn.ModuleList([nn.Conv2d(spec.row_channels(j - 1), spec.row_channels(j), 3, 1, 1)
                                    for j in range(1, n)])
        self.adains = nn.ModuleList([AdaIN(spec.row_channels(j), d) for j in range(n)])
        self.to_rgb = nn.Conv2d(spec.channels[-1], 3, 1)
        seeded_init_(self, seed)

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        n, d = self.spec.latent.num_layers, self.spec.latent.layer_dim
        if codes.dim() != 3 or codes.shape[1] != n or codes.shape[2] != d:
            raise ShapeMismatch(f"Expected N x {n} x {d} codes, got {tuple(codes.shape)}.")
        x = self.const.expand(codes.shape[0], -1, -1, -1)
        x = self.adains[0](x, codes[:, 0])
        for j in range(1, n):
            if j % 2 == 0:
                x = F.interpolate(x, scale_factor=2, mode='nearest')
            x = _lrelu(self.convs[j - 1](x))
            x = self.adains[j](x, codes[:, j])
        return torch.tanh(self.to_rgb(x))


class Remapper(nn.Module):
    def __init__(self, spec: RemapperSpec, seed: int):
        super().__init__()
        self.spec = spec
        widths = (spec.noise_dim,) + spec.hidden + (spec.latent.style_rows * spec.latent.layer_dim,)
        self.layers = nn.ModuleList([nn.Linear(a, b) for a, b in zip(widths, widths[1:])])
        seeded_init_(self, seed)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.spec.noise_dim:
            raise ShapeMismatch(f"Expected N x {self.spec.noise_dim} noise, got {tuple(z.shape)}.")
        if not torch.isfinite(z).all():
            raise NonFiniteInput("Noise contains non-finite values.")
        h = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = _lrelu(h)
        return h.view(z.shape[0], self.spec.latent.style_rows, self.spec.latent.layer_dim)


class CriticBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, 3, 1, 1)
        self.down = nn.Conv2d(in_channels, out_channels, 3, 2, 1)

    def forward(self, x):
        return _lrelu(self.down(_lrelu(self.conv(x))))


class Critic(nn.Module):
    def __init__(self, spec: CriticSpec, seed: int):
        super().__init__()
        self.spec = spec
        c = spec.channels
        self.from_rgb = nn.Conv2d(3, c[0], 1)
        self.blocks = nn.ModuleList([CriticBlock(a, b) for a, b in zip(c, c[1:])])
        self.final_conv = nn.Conv2d(c[-1], c[-1], 3, 1, 1)
        self.fc = nn.Linear(c[-1] * 16, c[-1])
        self.out = nn.Linear(c[-1], 1)
        seeded_init_(self, seed)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        _check_images(images, self.spec.resolution)
        x = _lrelu(self.from_rgb(images))
        for block in self.blocks:
            x = block(x)
        x = _lrelu(self.final_conv(x))
        x = _lrelu(self.fc(x.flatten(1)))
        return self.out(x).squeeze(1)


class PerceptualEmbedder(nn.Module):
    """ Random-feature stand-in for an LPIPS backbone; returns one activation map per scale. """
    def __init__(self, spec: EmbedderSpec):
        super().__init__()
        self.spec = spec
        strides = [1] + _halvings(spec.resolution, len(spec.channels) - 1)
        self.convs = nn.ModuleList([nn.Conv2d(a, b, 3, s, 1)
                                    for a, b, s in zip((3,) + spec.channels[:-1], spec.channels, strides)])
        seeded_init_(self, spec.seed, bias_std=0.1)
        self.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        _check_images(images, self.spec.resolution)
        acts, x = [], images
        for conv in self.convs:
            x = _lrelu(conv(x))
            acts.append(x)
        return acts


class IdentityEmbedder(nn.Module):
    """ Random-feature stand-in for a face recognition network; returns one vector per image. """
    def __init__(self, spec: EmbedderSpec):
        super().__init__()
        self.spec = spec
        strides = _halvings(spec.resolution, len(spec.channels))
        self.convs = nn.ModuleList([nn.Conv2d(a, b, 3, s, 1)
                                    for a, b, s in zip((3,) + spec.channels[:-1], spec.channels, strides)])
        self.project = nn.Linear(spec.channels[-1], spec.embedding_dim)
        seeded_init_(self, spec.seed, bias_std=0.1)
        self.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        _check_images(images, self.spec.resolution)
        x = images
        for conv in self.convs:
            x = _lrelu(conv(x))
        return self.project(x.mean(dim=(2, 3)))


def encode(encoder: Encoder, images: torch.Tensor) -> torch.Tensor:
    """ N x 3 x R x R images in [-1, 1] to N x L x D codes. """
    return encoder(images)


def decode(decoder: Decoder, codes: torch.Tensor) -> torch.Tensor:
    """ N x L x D codes to N x 3 x R x R images in [-1, 1]. """
    return decoder(codes)


def remap(remapper: Remapper, z: torch.Tensor) -> torch.Tensor:
    """ N x d_z noise to N x xi x D style rows. """
    return remapper(z)


def criticize(critic: Critic, images: torch.Tensor) -> torch.Tensor:
    """ One unbounded Wasserstein score per image. """
    return critic(images)


def embed_identity(embedder: IdentityEmbedder, images: torch.Tensor) -> torch.Tensor:
    return embedder(images)


def embed_perceptual(embedder: PerceptualEmbedder, images: torch.Tensor) -> list[torch.Tensor]:
    return embedder(images)


def feature_vector(embedder: PerceptualEmbedder, images: torch.Tensor) -> torch.Tensor:
    """ Spatially pooled perceptual activations of every scale, concatenated: the embedding used by the metrics. """
    return torch.cat([a.mean(dim=(2, 3)) for a in embedder(images)], dim=1)


def _conv(c_in: int, c_out: int, k: int) -> int:
    return c_in * c_out * k * k + c_out


def parameter_count(spec) -> int:
    """ Number of parameters a network built from spec holds, computed from the spec alone.

        Args:
            spec: Any of EncoderSpec, DecoderSpec, RemapperSpec, CriticSpec, EmbedderSpec.
        Returns:
            int: The parameter count.
    """
    if isinstance(spec, EncoderSpec):
        c, f, lat = spec.channels, spec.pyramid_channels, spec.latent
        total = _conv(3, c[0], 3)
        for c_in, c_out in zip((c[0],) + c[:-1], c):
            total += _conv(c_in, c_out, 3) + _conv(c_out, c_out, 3) + _conv(c_in, c_out, 1)
        total += sum(_conv(ch, f, 1) for ch in c)
        total += lat.num_layers * (_conv(f, f, 3) + f * lat.layer_dim + lat.layer_dim)
        return total
    if isinstance(spec, DecoderSpec):
        n, d = spec.latent.num_layers, spec.latent.layer_dim
        total = spec.channels[0] * 16
        total += sum(_conv(spec.row_channels(j - 1), spec.row_channels(j), 3) for j in range(1, n))
        total += sum(d * 2 * spec.row_channels(j) + 2 * spec.row_channels(j) for j in range(n))
        return total + _conv(spec.channels[-1], 3, 1)
    if isinstance(spec, RemapperSpec):
        widths = (spec.noise_dim,) + spec.hidden + (spec.latent.style_rows * spec.latent.layer_dim,)
        return sum(a * b + b for a, b in zip(widths, widths[1:]))
    if isinstance(spec, CriticSpec):
        c = spec.channels
        total = _conv(3, c[0], 1)
        total += sum(_conv(a, a, 3) + _conv(a, b, 3) for a, b in zip(c, c[1:]))
        total += _conv(c[-1], c[-1], 3) + (c[-1] * 16 * c[-1] + c[-1]) + (c[-1] + 1)
        return total
    if isinstance(spec, EmbedderSpec):
        total = sum(_conv(a, b, 3) for a, b in zip((3,) + spec.channels[:-1], spec.channels))
        if spec.role == 'identity':
            total += spec.channels[-1] * spec.embedding_dim + spec.embedding_dim
        return total
    raise TypeError(f"No parameter count for {type(spec).__name__}.")


def tensor_bytes(t: torch.Tensor) -> bytes:
    """ Little-endian float32, row-major: the byte layout used for checksums and package blobs. """
    return t.detach().cpu().contiguous().numpy().astype('<f4').tobytes()


def fingerprint(module: nn.Module) -> str:
    """ Short digest of a module's weights, stable across processes. """
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor_bytes(t))
    return h.hexdigest()[:12]


class NonFiniteInput(ValueError):
    """ Indicates that a network input contains NaN or infinite values. """
    pass
