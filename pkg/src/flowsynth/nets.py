"""Velocity U-Net and PatchGAN discriminator.

The velocity network is a 2D diffusion-style U-Net: residual blocks with
group normalization and SiLU, additive time conditioning, self-attention
at selected levels, strided-conv downsampling and nearest+conv upsampling.
It takes three single-channel images (current state, conditioning slice,
previous-slice conditioning) and a scalar time per sample.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class NetConfig:
    channel_widths: tuple[int, ...] = (32, 32, 64)
    attention_levels: tuple[bool, ...] = (False, False, True)
    time_embed_dim: int = 128
    in_channels: int = 3
    out_channels: int = 1
    blocks_per_level: int = 2
    norm_groups: int = 8
    head_channels: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(int(c) for c in self.channel_widths))
        object.__setattr__(self, "attention_levels", tuple(bool(a) for a in self.attention_levels))
        if len(self.channel_widths) < 1 or len(self.channel_widths) != len(self.attention_levels):
            raise ConfigError("channel_widths and attention_levels must be non-empty and equally long")
        if self.in_channels != 3 or self.out_channels != 1:
            raise ConfigError("the velocity network maps 3 input channels to 1 output channel")
        if any(c % self.norm_groups for c in self.channel_widths):
            raise ConfigError(f"channel widths {self.channel_widths} must be divisible by norm_groups={self.norm_groups}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be a positive even integer")
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.channel_widths)

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_widths"] = list(self.channel_widths)
        d["attention_levels"] = list(self.attention_levels)
        return d


FULL_SCALE = NetConfig(channel_widths=(256, 256, 512), time_embed_dim=1024)


def time_embed(t, dim: int) -> torch.Tensor:
    """Interleaved sinusoidal embedding ``[sin(w0 s), cos(w0 s), sin(w1 s), ...]``.

    ``t`` in [0, 1] is scaled by 1000 before the frequency bank
    ``w_i = 10000^(-i / (dim/2))``, so the slowest component completes
    less than one period on [0, 1] for ``dim >= 8``.
    """
    t = torch.as_tensor(t, dtype=torch.get_default_dtype())
    if t.ndim == 0:
        t = t[None]
    if torch.any((t < 0) | (t > 1)):
        raise DataError("time must lie in [0, 1]")
    if dim % 2:
        raise DataError("embedding dimension must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None, :]
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(t.shape[0], dim)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int, groups: int, head_channels: int):
        super().__init__()
        self.heads = max(1, channels // head_channels)
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bncq,bnck->bnqk", q, k) / math.sqrt(c // self.heads), dim=-1)
        out = torch.einsum("bnqk,bnck->bncq", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class VelocityUNet(nn.Module):
    """Predicts a velocity image from ``(x_t, x_c, x_ar)`` and time ``t``.

    With ``zero_time=True`` the sinusoidal embedding is replaced by zeros,
    which removes any dependence on ``t`` (the regression baselines).
    """

    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        widths, groups, edim = config.channel_widths, config.norm_groups, config.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(edim, edim), nn.SiLU(), nn.Linear(edim, edim))
        self.conv_in = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        skips = [widths[0]]
        ch = widths[0]
        for level, (width, attn) in enumerate(zip(widths, config.attention_levels)):
            blocks = nn.ModuleList()
            for _ in range(config.blocks_per_level):
                layer = nn.ModuleDict({"res": ResBlock(ch, width, edim, groups)})
                if attn:
                    layer["attn"] = SelfAttention(width, groups, config.head_channels)
                blocks.append(layer)
                ch = width
                skips.append(ch)
            stage = nn.ModuleDict({"blocks": blocks})
            if level < config.levels - 1:
                stage["downsample"] = Downsample(ch)
                skips.append(ch)
            self.down.append(stage)

        self.mid_res1 = ResBlock(ch, ch, edim, groups)
        self.mid_attn = SelfAttention(ch, groups, config.head_channels)
        self.mid_res2 = ResBlock(ch, ch, edim, groups)

        self.up = nn.ModuleList()
        for level in reversed(range(config.levels)):
            width, attn = widths[level], config.attention_levels[level]
            blocks = nn.ModuleList()
            for _ in range(config.blocks_per_level + 1):
                layer = nn.ModuleDict({"res": ResBlock(ch + skips.pop(), width, edim, groups)})
                if attn:
                    layer["attn"] = SelfAttention(width, groups, config.head_channels)
                blocks.append(layer)
                ch = width
            stage = nn.ModuleDict({"blocks": blocks})
            if level > 0:
                stage["upsample"] = Upsample(ch)
            self.up.append(stage)

        self.norm_out = nn.GroupNorm(groups, ch)
        self.conv_out = nn.Conv2d(ch, config.out_channels, 3, padding=1)

    def forward(self, x_t, x_c, x_ar, t, zero_time: bool = False):
        x = torch.cat([x_t, x_c, x_ar], dim=1)
        b, _, h, w = x.shape
        m = self.config.size_multiple
        if h % m or w % m:
            raise DataError(f"input size {(h, w)} must be divisible by {m}")
        t = torch.as_tensor(t, dtype=x.dtype)
        if t.ndim == 0:
            t = t.expand(b)
        emb = time_embed(t, self.config.time_embed_dim).to(x.dtype)
        if zero_time:
            emb = torch.zeros_like(emb)
        emb = self.time_mlp(emb)

        h_ = self.conv_in(x)
        hs = [h_]
        for stage in self.down:
            for layer in stage["blocks"]:
                h_ = layer["res"](h_, emb)
                if "attn" in layer:
                    h_ = layer["attn"](h_)
                hs.append(h_)
            if "downsample" in stage:
                h_ = stage["downsample"](h_)
                hs.append(h_)
        h_ = self.mid_res2(self.mid_attn(self.mid_res1(h_, emb)), emb)
        for stage in self.up:
            for layer in stage["blocks"]:
                h_ = layer["res"](torch.cat([h_, hs.pop()], dim=1), emb)
                if "attn" in layer:
                    h_ = layer["attn"](h_)
            if "upsample" in stage:
                h_ = stage["upsample"](h_)
        return self.conv_out(F.silu(self.norm_out(h_)))


def init_network(config: NetConfig = NetConfig(), seed: int = 0) -> VelocityUNet:
    """Build a :class:`VelocityUNet` with seeded weights and a zero output layer."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = VelocityUNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    nn.init.zeros_(net.conv_out.weight)
    nn.init.zeros_(net.conv_out.bias)
    return net


def forward(net: VelocityUNet, x_t, x_c, x_ar, t, zero_time: bool = False):
    """Shape-checked functional wrapper around ``net(...)``."""
    if not (x_t.shape == x_c.shape == x_ar.shape):
        raise DataError(f"input shapes differ: {tuple(x_t.shape)}, {tuple(x_c.shape)}, {tuple(x_ar.shape)}")
    return net(x_t, x_c, x_ar, t, zero_time=zero_time)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


@dataclass(frozen=True)
class DiscConfig:
    widths: tuple[int, ...] = (64, 128, 256, 512)
    in_channels: int = 2
    n_strided: int = field(default=3)


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN: three stride-2 4x4 convs, then two stride-1 4x4 convs.

    Input is the channel concatenation of the conditioning slice and a real
    or synthesized target slice; output is a grid of patch logits.
    """

    def __init__(self, config: DiscConfig = DiscConfig()):
        super().__init__()
        w = config.widths
        layers: list[nn.Module] = [nn.Conv2d(config.in_channels, w[0], 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        for i in range(1, len(w)):
            stride = 2 if i < config.n_strided else 1
            layers += [
                nn.Conv2d(w[i - 1], w[i], 4, stride=stride, padding=1),
                nn.InstanceNorm2d(w[i]),
                nn.LeakyReLU(0.2),
            ]
        layers.append(nn.Conv2d(w[-1], 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, cond, candidate):
        return self.model(torch.cat([cond, candidate], dim=1))


def init_discriminator(config: DiscConfig = DiscConfig(), seed: int = 0) -> PatchDiscriminator:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = PatchDiscriminator(config)
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)
    finally:
        torch.random.set_rng_state(gen_state)
    return net


def patchgan_forward(disc: PatchDiscriminator, cond, candidate):
    if cond.shape != candidate.shape:
        raise DataError(f"shape mismatch: {tuple(cond.shape)} vs {tuple(candidate.shape)}")
    return disc(cond, candidate)


def receptive_field(config: DiscConfig = DiscConfig()) -> int:
    """Receptive field of one output logit, in input pixels."""
    strides = [2 if i < config.n_strided else 1 for i in range(len(config.widths))] + [1]
    rf = 1
    for s in reversed(strides):
        rf = s * (rf - 1) + 4
    return rf
