""" Layered latent codes.

    A latent code holds one row per AdaIN modulation site of the decoder, row 0 being the coarsest (4x4) layer.
    The fusion index splits a code into the low-resolution content rows and the high-resolution style rows;
    the remapper only ever produces style rows, and fuse puts the two parts back together.

    split and fuse work on the last two dimensions, so they accept a single L x D code as well as an N x L x D batch.
"""
import math
from dataclasses import dataclass

import torch


def default_num_layers(resolution: int) -> int:
    """ Number of latent rows for a decoder of the given output resolution, two per resolution level.

        Args:
            resolution (int): Output resolution, a power of two no smaller than 4.
        Returns:
            int: 2 * log2(resolution) - 2, e.g. 18 at 1024 and 10 at 64.
    """
    if resolution < 4 or resolution & (resolution - 1):
        raise ValueError(f"Resolution must be a power of two >= 4, got {resolution}.")
    return 2 * int(math.log2(resolution)) - 2


@dataclass(frozen=True)
class LatentConfig:
    """ Shape of a latent code and where it splits into content and style. """
    num_layers: int
    layer_dim: int = 512
    fusion_index: int | None = None

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError(f"A latent code needs at least two rows, got {self.num_layers}.")
        if self.layer_dim < 1:
            raise ValueError(f"Layer dimension must be positive, got {self.layer_dim}.")
        if self.fusion_index is None:
            object.__setattr__(self, 'fusion_index', max(1, round(self.num_layers / 3)))
        if not 1 <= self.fusion_index <= self.num_layers - 1:
            raise ValueError(f"Fusion index must lie in [1, {self.num_layers - 1}], got {self.fusion_index}.")

    @classmethod
    def for_resolution(cls, resolution: int, layer_dim: int = 512, fusion_index: int | None = None) -> "LatentConfig":
        return cls(default_num_layers(resolution), layer_dim, fusion_index)

    @property
    def content_rows(self) -> int:
        return self.num_layers - self.fusion_index

    @property
    def style_rows(self) -> int:
        return self.fusion_index

    def to_dict(self) -> dict:
        return {'num_layers': self.num_layers, 'layer_dim': self.layer_dim, 'fusion_index': self.fusion_index}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentConfig":
        return cls(int(d['num_layers']), int(d['layer_dim']), int(d['fusion_index']))


@dataclass
class LatentCode:
    """ A single validated L x D code together with its configuration. """
    values: torch.Tensor
    config: LatentConfig

    def __post_init__(self):
        expected = (self.config.num_layers, self.config.layer_dim)
        if tuple(self.values.shape) != expected:
            raise ShapeMismatch(f"Latent code has shape {tuple(self.values.shape)}, expected {expected}.")
        if not torch.isfinite(self.values).all():
            raise ValueError("Latent code contains non-finite entries.")

    def split(self) -> tuple[torch.Tensor, torch.Tensor]:
        return split(self.values, self.config)

    @classmethod
    def fuse(cls, content: torch.Tensor, style: torch.Tensor, config: LatentConfig) -> "LatentCode":
        return cls(fuse(content, style, config), config)


def split(codes: torch.Tensor, config: LatentConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """ Split codes into content rows (first L - xi) and style rows (last xi).

        Args:
            codes (torch.Tensor): A L x D code or an N x L x D batch.
            config (LatentConfig): Configuration the codes were produced under.
        Returns:
            tuple: content (... x (L - xi) x D) and style (... x xi x D). Both are fresh tensors, writing into
            them never reaches the input; gradients still flow.
    """
    if codes.dim() < 2 or codes.shape[-2] != config.num_layers or codes.shape[-1] != config.layer_dim:
        raise ShapeMismatch(f"Cannot split codes of shape {tuple(codes.shape)} under {config}.")
    content = codes[..., :config.content_rows, :].clone()
    style = codes[..., config.content_rows:, :].clone()
    return content, style


def fuse(content: torch.Tensor, style: torch.Tensor, config: LatentConfig | None = None) -> torch.Tensor:
    """ Concatenate content rows and style rows back into full codes.

        Args:
            content (torch.Tensor): ... x (L - xi) x D content rows.
            style (torch.Tensor): ... x xi x D style rows.
            config (LatentConfig): When given, row counts must match it exactly.
        Returns:
            torch.Tensor: ... x L x D codes.
        Raises:
            ShapeMismatch: Row widths or leading dimensions differ, or row counts disagree with config.
    """
    if content.dim() != style.dim() or content.shape[:-2] != style.shape[:-2]:
        raise ShapeMismatch(f"Content {tuple(content.shape)} and style {tuple(style.shape)} do not share a batch shape.")
    if content.shape[-1] != style.shape[-1]:
        raise ShapeMismatch(f"Row widths differ: content {content.shape[-1]}, style {style.shape[-1]}.")
    if config is not None:
        if content.shape[-2] != config.content_rows or style.shape[-2] != config.style_rows:
            raise ShapeMismatch(f"Expected {config.content_rows} content and {config.style_rows} style rows, "
                                f"got {content.shape[-2]} and {style.shape[-2]}.")
        if content.shape[-1] != config.layer_dim:
            raise ShapeMismatch(f"Row width {content.shape[-1]} differs from layer_dim {config.layer_dim}.")
    return torch.cat([content, style], dim=-2)


class ShapeMismatch(ValueError):
    """ Indicates that tensors do not have the shapes a configuration requires. """
    pass
