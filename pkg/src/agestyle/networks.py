"""Style-conditioned U-Net generator and the mirrored multi-task discriminator.

Layer geometry for an input of side ``s`` with ``n = 6`` layers:

* encoder layer ``i`` (0-based) is a stride-2 4x4 convolution producing
  ``width(i)`` channels at side ``s / 2**(i + 1)``;
* the discriminator repeats that geometry, so activation ``k`` has
  ``width(k)`` channels at side ``s / 2**(k + 1)``;
* decoder layer ``j`` (0-based) produces ``width(n - 1 - j)`` channels at
  side ``s / 2**(n - j)``, i.e. the dims of discriminator activation
  ``n - 1 - j``; its output is AdaIN-modulated with that activation's
  statistics, passed through a leaky ReLU and concatenated with the
  encoder output of the same resolution;
* an output head upsamples the last concatenation to full resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn
import torch.nn.functional as F

from .dataset import AgeGroup, N_GROUPS
from .stylestats import EPS, LayerMap, StyleStats, adain, extract_style

LEAK = 0.2


@dataclass(frozen=True)
class GeneratorSpec:
    n_layers: int = 6
    base_channels: int = 32
    max_channels: int = 256
    image_size: int = 128
    in_channels: int = 3

    def __post_init__(self):
        if self.image_size % 2**self.n_layers:
            raise ValueError(f"image_size must be divisible by {2 ** self.n_layers}")

    def width(self, i: int) -> int:
        return min(self.base_channels * 2**i, self.max_channels)

    def side(self, i: int) -> int:
        """Spatial side of encoder/discriminator layer ``i``."""
        return self.image_size // 2 ** (i + 1)

    def decoder_dims(self, j: int) -> tuple[int, int]:
        """(channels, side) of decoder layer ``j`` before the skip concatenation."""
        k = self.n_layers - 1 - j
        return self.width(k), self.side(k)


@dataclass(frozen=True)
class DiscriminatorSpec:
    n_layers: int = 6
    base_channels: int = 32
    max_channels: int = 256
    image_size: int = 128
    in_channels: int = 3
    heads: int = N_GROUPS

    @classmethod
    def mirroring(cls, g: GeneratorSpec) -> "DiscriminatorSpec":
        return cls(g.n_layers, g.base_channels, g.max_channels, g.image_size, g.in_channels)

    def width(self, k: int) -> int:
        return min(self.base_channels * 2**k, self.max_channels)

    def side(self, k: int) -> int:
        return self.image_size // 2 ** (k + 1)


class GeneratorOutput(NamedTuple):
    image: torch.Tensor
    decoder_activations: list[torch.Tensor]


class DiscriminatorOutput(NamedTuple):
    logits: torch.Tensor
    activations: list[torch.Tensor]


def _check_image(x: torch.Tensor, size: int, channels: int):
    if x.dim() != 4 or x.shape[1] != channels or x.shape[2] != size or x.shape[3] != size:
        raise ValueError(f"expected images of shape (N, {channels}, {size}, {size}), got {tuple(x.shape)}")


class Discriminator(nn.Module):
    """Six stride-2 convolutions followed by one real/fake logit per age group."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        c_in = spec.in_channels
        for k in range(spec.n_layers):
            layers.append(nn.Conv2d(c_in, spec.width(k), 4, stride=2, padding=1))
            c_in = spec.width(k)
        self.layers = nn.ModuleList(layers)
        self.head = nn.Linear(c_in, spec.heads)

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        _check_image(x, self.spec.image_size, self.spec.in_channels)
        acts = []
        h = x
        for conv in self.layers:
            h = F.leaky_relu(conv(h), LEAK)
            acts.append(h)
        logits = self.head(h.mean(dim=(2, 3)))
        return DiscriminatorOutput(logits, acts)


def select_logit(out: DiscriminatorOutput | torch.Tensor, group) -> torch.Tensor:
    """Pick each sample's logit for its age group.

    ``group`` may be an :class:`AgeGroup`, an int, or a per-sample index tensor.
    """
    logits = out.logits if isinstance(out, DiscriminatorOutput) else out
    if isinstance(group, AgeGroup):
        group = group.index
    if isinstance(group, int):
        return logits[..., group]
    group = torch.as_tensor(group, dtype=torch.long, device=logits.device)
    return logits.gather(-1, group.view(-1, 1)).squeeze(-1)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        n = spec.n_layers
        self.encoder = nn.ModuleList()
        self.encoder_norms = nn.ModuleList()
        c_in = spec.in_channels
        for i in range(n):
            # no normalization on the raw-pixel layer or the bottleneck, which can be 1x1
            use_norm = 0 < i < n - 1
            # a bias in front of a normalization is cancelled by it
            self.encoder.append(nn.Conv2d(c_in, spec.width(i), 4, stride=2, padding=1, bias=not use_norm))
            self.encoder_norms.append(nn.InstanceNorm2d(spec.width(i), affine=True) if use_norm else nn.Identity())
            c_in = spec.width(i)

        self.decoder = nn.ModuleList()
        for j in range(n):
            c_out, _ = spec.decoder_dims(j)
            if j == 0:
                self.decoder.append(nn.Conv2d(c_in, c_out, 3, padding=1, bias=False))
            else:
                self.decoder.append(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1, bias=False))
            skip_channels = spec.width(n - 1 - j)
            c_in = c_out + skip_channels
        self.to_image = nn.ConvTranspose2d(c_in, spec.in_channels, 4, stride=2, padding=1)
        self.layer_map = LayerMap.mirrored(n)

    def forward(self, x: torch.Tensor, style: StyleStats) -> GeneratorOutput:
        _check_image(x, self.spec.image_size, self.spec.in_channels)
        n = self.spec.n_layers
        if len(style) != n:
            raise ValueError(f"style has {len(style)} layers, decoder has {n}")
        skips = []
        h = x
        for conv, norm in zip(self.encoder, self.encoder_norms):
            h = F.leaky_relu(norm(conv(h)), LEAK)
            skips.append(h)

        decoder_acts = []
        for j, (conv, (mean, std)) in enumerate(zip(self.decoder, style)):
            h = conv(h)
            h = F.leaky_relu(adain(h, mean, std, EPS), LEAK)
            decoder_acts.append(h)
            h = torch.cat([h, skips[n - 1 - j]], dim=1)
        return GeneratorOutput(torch.tanh(self.to_image(h)), decoder_acts)


class AgingModel(nn.Module):
    """Generator plus discriminator; the discriminator doubles as the style encoder."""

    def __init__(self, g_spec: GeneratorSpec, d_spec: DiscriminatorSpec | None = None):
        super().__init__()
        d_spec = d_spec or DiscriminatorSpec.mirroring(g_spec)
        check_mirroring(g_spec, d_spec)
        self.g_spec, self.d_spec = g_spec, d_spec
        self.G = Generator(g_spec)
        self.D = Discriminator(d_spec)

    def style_of(self, target: torch.Tensor) -> StyleStats:
        return extract_style(self.D(target).activations, self.G.layer_map)

    def translate(self, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """``G(x, style(D(target)))``."""
        return self.G(x, self.style_of(target)).image

    def specs(self) -> dict:
        return {"generator": asdict(self.g_spec), "discriminator": asdict(self.d_spec)}


def check_mirroring(g: GeneratorSpec, d: DiscriminatorSpec):
    if g.n_layers != d.n_layers:
        raise ValueError("generator and discriminator must have the same depth")
    for k in range(d.n_layers):
        if g.decoder_dims(d.n_layers - 1 - k) != (d.width(k), d.side(k)):
            raise ValueError(f"discriminator layer {k} does not mirror the decoder")


def to_tensor(images) -> torch.Tensor:
    """H x W x C array(s) in [-1, 1] to an (N, C, H, W) float tensor."""
    t = torch.as_tensor(images, dtype=torch.float32)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def to_images(t: torch.Tensor):
    """(N, C, H, W) tensor to an N x H x W x C numpy array."""
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()
