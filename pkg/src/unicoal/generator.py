"""Co-modulated alias-free generator.

Data flow for one target slice::

    v = N(c1, delta)                      encoder attribute
    e, skips = E(x_in; v)                 image-conditioned representation
    w = M(l, c1, delta)                   stochastic attribute representation
    s_j = A_j(concat(e, w))               per-layer styles
    y = D(skips; s)                       synthesized slice
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import aliasfree
from .aliasfree import LayerSchedule, build_schedule, crop_margin, pad_margin, resample2d, wrapped_nonlinearity
from .config import ModelConfig
from .layers import FullyConnected, MagnitudeNorm, delta_embedding, modulated_conv2d, normalize_2nd_moment

BOTTLENECK_RATE = 4
BOTTLENECK_CUTOFF = 1.0
BOTTLENECK_HALF_WIDTH = 1.0


class ConfigurationError(ValueError):
    pass


@dataclass
class AttributeCondition:
    latent: torch.Tensor            # [B, z_dim]
    target_modality: torch.Tensor   # [B] integer codes
    delta: torch.Tensor             # [B] in [0, 1)

    def __post_init__(self):
        d = self.delta
        if torch.any(d < 0) or torch.any(d >= 1):
            raise ValueError("delta must lie in [0, 1)")


@dataclass
class StyleState:
    image_rep: torch.Tensor
    stochastic_rep: torch.Tensor
    encoder_attr: torch.Tensor
    styles: list[torch.Tensor]
    skips: dict[int, torch.Tensor]
    bottleneck: torch.Tensor


def layer_channels(schedule: LayerSchedule, base: int, cap: int) -> list[int]:
    return [int(max(1, min(round(base / l.resolution), cap))) for l in schedule]


class AttributeMapping(nn.Module):
    """Embeds (c1, delta), optionally concatenated with a latent, through FC layers."""

    def __init__(self, num_modalities: int, out_dim: int, z_dim: int = 0, embed_dim: int = 512,
                 delta_freqs: int = 8, num_layers: int = 2, lr_multiplier: float = 0.01):
        super().__init__()
        self.z_dim = z_dim
        self.num_modalities = num_modalities
        self.delta_freqs = delta_freqs
        self.class_embed = nn.Parameter(torch.randn(num_modalities, embed_dim))
        self.delta_embed = FullyConnected(2 * delta_freqs, embed_dim)
        dims = [z_dim + 2 * embed_dim] + [out_dim] * num_layers
        self.fcs = nn.ModuleList(
            FullyConnected(a, b, activation="lrelu", lr_multiplier=lr_multiplier)
            for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, modality: torch.Tensor, delta: torch.Tensor, latent: torch.Tensor | None = None):
        if modality.min() < 0 or modality.max() >= self.num_modalities:
            raise ConfigurationError(f"modality code outside [0, {self.num_modalities})")
        parts = []
        if self.z_dim:
            if latent is None:
                raise ValueError("this mapping network needs a latent code")
            parts.append(normalize_2nd_moment(latent))
        parts.append(normalize_2nd_moment(self.class_embed[modality]))
        parts.append(normalize_2nd_moment(self.delta_embed(delta_embedding(delta, self.delta_freqs))))
        x = torch.cat(parts, dim=1)
        for fc in self.fcs:
            x = fc(x)
        return x


class EncoderLayer(nn.Module):
    """v-modulated 3x3 conv, leaky rectification, filtered resampling to the layer rate."""

    def __init__(self, attr_dim, in_channels, out_channels, rate_in, spec: aliasfree.LayerSpec, margin,
                 normalize_input: bool = True):
        super().__init__()
        self.rate_in = rate_in
        self.input_norm = MagnitudeNorm() if normalize_input else nn.Identity()
        self.spec = spec
        self.margin = margin
        self.affine = FullyConnected(attr_dim, in_channels, bias_init=1)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, v):
        x = modulated_conv2d(self.input_norm(x), self.weight, self.affine(v))
        x = x + self.bias[None, :, None, None]
        x = F.leaky_relu(x, aliasfree.LRELU_SLOPE) * math.sqrt(2)
        return resample2d(x, self.rate_in, self.spec.rate, self.spec.cutoff, self.spec.half_width,
                          self.margin, self.margin)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig, schedule: LayerSchedule):
        super().__init__()
        self.cfg = cfg
        self.schedule = schedule
        chans = layer_channels(schedule, cfg.channel_base, cfg.channel_max)
        self.channels = chans
        layers = []
        rate, c_in = schedule.image_resolution, cfg.window
        for spec, c_out in zip(schedule, chans):
            layers.append(EncoderLayer(cfg.w_dim, c_in, c_out, rate, spec, cfg.margin,
                                       normalize_input=bool(layers)))
            rate, c_in = spec.rate, c_out
        self.layers = nn.ModuleList(layers)
        rep_in = chans[-1] * (BOTTLENECK_RATE ** 2 if cfg.image_rep == "flatten" else 1)
        self.to_rep = FullyConnected(rep_in, cfg.e_dim)

    @property
    def skip_rates(self) -> list[int]:
        return self.schedule.distinct_rates()

    def forward(self, x_in: torch.Tensor, v: torch.Tensor):
        r_N = self.schedule.image_resolution
        if tuple(x_in.shape[1:]) != (self.cfg.window, r_N, r_N):
            raise ValueError(f"encoder expects [B, {self.cfg.window}, {r_N}, {r_N}], got {list(x_in.shape)}")
        x = pad_margin(x_in, self.cfg.margin)
        skips = {}
        for i, layer in enumerate(self.layers):
            x = layer(x, v)
            nxt = self.layers[i + 1].spec.rate if i + 1 < len(self.layers) else None
            if nxt != layer.spec.rate:
                skips[layer.spec.rate] = x
        last = self.schedule[-1]
        bottleneck = resample2d(x, last.rate, BOTTLENECK_RATE, BOTTLENECK_CUTOFF, BOTTLENECK_HALF_WIDTH,
                                self.cfg.margin, self.cfg.margin)
        if self.cfg.image_rep == "flatten":
            rep = crop_margin(bottleneck, self.cfg.margin).flatten(1)
        else:
            rep = bottleneck.mean(dim=[2, 3])
        return self.to_rep(rep), skips, bottleneck


class SynthesisLayer(nn.Module):
    """s-modulated 3x3 conv, filtered upsampling, wrapped leaky rectification."""

    def __init__(self, style_dim, in_channels, out_channels, rate_in, cutoff_in, half_width_in,
                 spec: aliasfree.LayerSpec, margin, skip_channels=0):
        super().__init__()
        self.rate_in = rate_in
        self.cutoff_in = cutoff_in
        self.half_width_in = half_width_in
        self.spec = spec
        self.margin = margin
        self.skip_channels = skip_channels
        self.input_norm = MagnitudeNorm()
        c_in = in_channels + skip_channels
        self.affine = FullyConnected(style_dim, c_in, bias_init=1)
        self.weight = nn.Parameter(torch.randn(out_channels, c_in, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, style, skip=None):
        if self.skip_channels:
            if skip is None:
                raise ValueError(f"layer {self.spec.index} expects a skip at rate {self.rate_in}")
            x = torch.cat([x, skip], dim=1)
        x = modulated_conv2d(self.input_norm(x), self.weight, style)
        x = x + self.bias[None, :, None, None]
        if self.spec.rate != self.rate_in:
            x = resample2d(x, self.rate_in, self.spec.rate, self.cutoff_in, self.half_width_in,
                           self.margin, self.margin)
        return wrapped_nonlinearity(x, self.spec.rate, self.spec.cutoff, self.spec.half_width,
                                    self.margin, gain=math.sqrt(2))


class ToImage(nn.Module):
    def __init__(self, style_dim, in_channels, margin):
        super().__init__()
        self.margin = margin
        self.input_norm = MagnitudeNorm()
        self.affine = FullyConnected(style_dim, in_channels, bias_init=1)
        self.weight = nn.Parameter(torch.randn(1, in_channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1))
        self.weight_gain = 1 / math.sqrt(in_channels)

    def forward(self, x, style):
        x = modulated_conv2d(self.input_norm(x), self.weight, style * self.weight_gain, demod=False)
        x = crop_margin(x + self.bias[None, :, None, None], self.margin)
        return torch.tanh(x)


class Synthesizer(nn.Module):
    def __init__(self, cfg: ModelConfig, schedule: LayerSchedule, enc_channels: list[int]):
        super().__init__()
        self.cfg = cfg
        self.schedule = schedule
        style_dim = cfg.e_dim + cfg.w_dim
        skip_rates = set(schedule.distinct_rates())
        layers = []
        rate, c_in = BOTTLENECK_RATE, enc_channels[-1]
        cutoff, half_width = BOTTLENECK_CUTOFF, BOTTLENECK_HALF_WIDTH
        self.skip_plan = []
        for i in reversed(range(len(schedule))):
            spec = schedule[i]
            c_out = enc_channels[i]
            skip_ch = 0
            if rate in skip_rates:
                skip_rates.discard(rate)
                skip_ch = enc_channels[max(j for j in range(len(schedule)) if schedule[j].rate == rate)]
            self.skip_plan.append(rate if skip_ch else None)
            layers.append(SynthesisLayer(style_dim, c_in, c_out, rate, cutoff, half_width, spec,
                                         cfg.margin, skip_channels=skip_ch))
            rate, c_in, cutoff, half_width = spec.rate, c_out, spec.cutoff, spec.half_width
        if skip_rates:
            raise ConfigurationError(f"skips at rates {sorted(skip_rates)} have no consumer")
        self.layers = nn.ModuleList(layers)
        self.to_image = ToImage(style_dim, c_in, cfg.margin)

    @property
    def num_styles(self) -> int:
        return len(self.layers) + 1

    def affines(self):
        return [l.affine for l in self.layers] + [self.to_image.affine]

    def forward(self, bottleneck, skips, styles):
        x = bottleneck
        for layer, style, skip_rate in zip(self.layers, styles, self.skip_plan):
            skip = None
            if skip_rate is not None:
                if skip_rate not in skips:
                    raise ValueError(f"missing skip for rate {skip_rate}")
                skip = skips[skip_rate]
            x = layer(x, style, skip)
        return self.to_image(x, styles[-1])


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.schedule = build_schedule(cfg.num_layers, cfg.resolution)
        if cfg.resolution & (cfg.resolution - 1):
            raise ConfigurationError("image resolution must be a power of two")
        n_mod = len(cfg.modalities)
        self.mapping = AttributeMapping(n_mod, cfg.w_dim, z_dim=cfg.z_dim, embed_dim=cfg.embed_dim,
                                        delta_freqs=cfg.delta_freqs, num_layers=cfg.mapping_layers,
                                        lr_multiplier=cfg.mapping_lr_multiplier)
        self.attr_mapping = AttributeMapping(n_mod, cfg.w_dim, z_dim=0, embed_dim=cfg.embed_dim,
                                             delta_freqs=cfg.delta_freqs, num_layers=cfg.mapping_layers,
                                             lr_multiplier=cfg.mapping_lr_multiplier)
        self.encoder = Encoder(cfg, self.schedule)
        self.synthesizer = Synthesizer(cfg, self.schedule, self.encoder.channels)

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.cfg.modalities

    def modality_code(self, name: str) -> int:
        try:
            return self.cfg.modalities.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown modality {name!r}; known: {self.cfg.modalities}") from None

    def map_attributes(self, latent, modality, delta):
        return self.mapping(modality, delta, latent)

    def map_encoder_attributes(self, modality, delta):
        return self.attr_mapping(modality, delta)

    def encode(self, x_in, v):
        return self.encoder(x_in, v)

    def styles(self, e, w):
        ew = torch.cat([e, w], dim=1)
        return [a(ew) for a in self.synthesizer.affines()]

    def synthesize(self, bottleneck, skips, styles):
        return self.synthesizer(bottleneck, skips, styles)

    def forward(self, x_in, latent, modality, delta, return_state: bool = False):
        v = self.map_encoder_attributes(modality, delta)
        e, skips, bottleneck = self.encode(x_in, v)
        w = self.map_attributes(latent, modality, delta)
        styles = self.styles(e, w)
        y = self.synthesize(bottleneck, skips, styles)
        if return_state:
            return y, StyleState(image_rep=e, stochastic_rep=w, encoder_attr=v, styles=styles,
                                 skips=skips, bottleneck=bottleneck)
        return y

    def generate_slice(self, x_in, cond: AttributeCondition, return_state: bool = False):
        return self(x_in, cond.latent, cond.target_modality, cond.delta, return_state=return_state)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def random_condition(gen: Generator, batch: int, seed: int = 0, delta=None, modality=None):
    g = torch.Generator().manual_seed(seed)
    latent = torch.randn(batch, gen.cfg.z_dim, generator=g)
    if modality is None:
        modality = torch.randint(len(gen.modalities), (batch,), generator=g)
    if delta is None:
        delta = torch.rand(batch, generator=g) * 0.999
    return AttributeCondition(latent=latent, target_modality=torch.as_tensor(modality).long(),
                              delta=torch.as_tensor(delta, dtype=torch.float32))
