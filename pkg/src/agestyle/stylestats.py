"""Channel statistics of feature maps and adaptive instance normalization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

EPS = 1e-5


def channel_stats(f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample, per-channel mean and population std over spatial positions.

    ``f`` is (batch, channels, height, width); both outputs are (batch, channels).
    """
    if f.dim() != 4:
        raise ValueError(f"expected a rank-4 feature map, got shape {tuple(f.shape)}")
    flat = f.flatten(2)
    mean = flat.mean(dim=2)
    var = (flat - mean.unsqueeze(2)).pow(2).mean(dim=2)
    # constant channels are exactly 0 despite rounding in the mean; this also
    # keeps sqrt's infinite derivative at 0 out of the graph
    varying = (flat.amax(dim=2) > flat.amin(dim=2)) & (var > 0)
    std = torch.where(varying, var.clamp_min(1e-30).sqrt(), torch.zeros_like(var))
    return mean, std


def adain(
    content: torch.Tensor,
    style_mean: torch.Tensor,
    style_std: torch.Tensor,
    eps: float = EPS,
) -> torch.Tensor:
    """Renormalize ``content`` channel-wise to the given style moments.

    ``style_mean``/``style_std`` are (batch, channels) or (channels,).
    """
    n, c = content.shape[:2]
    if style_mean.shape[-1] != c or style_std.shape[-1] != c:
        raise ValueError(
            f"channel mismatch: content has {c}, style has {style_mean.shape[-1]}/{style_std.shape[-1]}"
        )
    mu, sigma = channel_stats(content)
    style_mean = style_mean.expand(n, c)[..., None, None]
    style_std = style_std.expand(n, c)[..., None, None]
    normalized = (content - mu[..., None, None]) / (sigma[..., None, None] + eps)
    return style_std * normalized + style_mean


@dataclass
class StyleStats:
    """Ordered (mean, std) pairs, one per modulated decoder layer."""

    means: list[torch.Tensor]
    stds: list[torch.Tensor]
    layer_ids: list[int]

    def __post_init__(self):
        if not (len(self.means) == len(self.stds) == len(self.layer_ids)):
            raise ValueError("means, stds and layer_ids must have equal length")

    def __len__(self) -> int:
        return len(self.layer_ids)

    def __iter__(self):
        return iter(zip(self.means, self.stds))

    def detach(self) -> "StyleStats":
        return StyleStats([m.detach() for m in self.means], [s.detach() for s in self.stds], list(self.layer_ids))

    def flatten(self) -> torch.Tensor:
        """All statistics of each sample concatenated into one (batch, n) tensor."""
        parts = [t for pair in zip(self.means, self.stds) for t in pair]
        return torch.cat([p.reshape(p.shape[0], -1) for p in parts], dim=1)


@dataclass(frozen=True)
class LayerMap:
    """(discriminator_layer_id, decoder_layer_id) pairs."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        decoder_ids = [d for _, d in self.pairs]
        if len(set(decoder_ids)) != len(decoder_ids):
            raise ValueError("each decoder layer may appear at most once")

    @classmethod
    def mirrored(cls, n_layers: int = 6) -> "LayerMap":
        """Decoder layer ``j`` (0-based) takes the discriminator layer of equal resolution."""
        return cls(tuple((n_layers - 1 - j, j) for j in range(n_layers)))


def extract_style(d_activations: Sequence[torch.Tensor], layer_map: LayerMap) -> StyleStats:
    """Channel statistics of the mapped discriminator activations, ordered by decoder layer."""
    means, stds, ids = [], [], []
    for d_id, dec_id in sorted(layer_map.pairs, key=lambda p: p[1]):
        if not 0 <= d_id < len(d_activations):
            raise KeyError(f"no discriminator activation for layer {d_id}")
        mean, std = channel_stats(d_activations[d_id])
        means.append(mean)
        stds.append(std)
        ids.append(dec_id)
    return StyleStats(means, stds, ids)
