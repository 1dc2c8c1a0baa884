"""Network components: denoising U-Net and the two physical parameter nets.

The denoiser consumes the noisy image concatenated with its conditioning
image (6 input channels) plus a timestep embedding, and predicts the noise
residual.  The two small physical nets estimate ambient light (a per-image
RGB triple) and a transmission map (single channel, >= 1 after activation,
acting as the inverse attenuation factor).  ``phi_transform`` composes the
three nets into the physics-guided diffused estimate used by the fused
training objective and by the sampler.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedule import DiffusedState, NoiseSchedule, _coef


class ConfigError(ValueError):
    """Raised when a network configuration is structurally invalid."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UNetConfig:
    """Shape of the denoising U-Net.

    Defaults give the full-scale network (128 base channels, five levels,
    attention on 16x16 feature maps).  ``desk()`` returns a small variant
    for CPU-scale experiments and tests.
    """

    input_resolution: int = 128
    input_channels: int = 6
    output_channels: int = 3
    base_channels: int = 128
    channel_multipliers: tuple[int, ...] = (1, 2, 3, 4, 4)
    blocks_per_level: int = 2
    time_sinusoid_dim: int = 128
    time_embed_dim: int = 512
    attention_resolutions: tuple[int, ...] = (16,)
    bottleneck_attention: bool = True
    dropout: float = 0.0
    time_scale_shift: bool = True
    num_heads: int = 1

    def __post_init__(self) -> None:
        if not self.channel_multipliers:
            raise ConfigError("channel_multipliers must be non-empty")
        if any(m <= 0 for m in self.channel_multipliers):
            raise ConfigError("channel multipliers must be positive")
        if self.base_channels <= 0 or self.blocks_per_level <= 0:
            raise ConfigError("base_channels and blocks_per_level must be positive")
        if self.time_sinusoid_dim % 2 != 0:
            raise ConfigError("time_sinusoid_dim must be even")
        down_factor = 2 ** (len(self.channel_multipliers) - 1)
        if self.input_resolution % down_factor != 0:
            raise ConfigError(
                f"input_resolution {self.input_resolution} not divisible by "
                f"downsampling factor {down_factor}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def level_resolutions(self) -> tuple[int, ...]:
        return tuple(
            self.input_resolution // (2 ** i)
            for i in range(len(self.channel_multipliers))
        )

    @classmethod
    def desk(cls) -> "UNetConfig":
        """Small configuration for 32x32 CPU experiments."""
        return cls(
            input_resolution=32,
            base_channels=32,
            channel_multipliers=(1, 2),
            attention_resolutions=(16,),
        )

    @classmethod
    def tiny(cls) -> "UNetConfig":
        """Minimal configuration for numerical tests (gradient checks)."""
        return cls(
            input_resolution=16,
            base_channels=8,
            channel_multipliers=(1, 2),
            blocks_per_level=1,
            time_sinusoid_dim=8,
            time_embed_dim=16,
            attention_resolutions=(8,),
        )


@dataclass(frozen=True)
class PhysNetConfig:
    """Shape of the ambient-light and transmission nets."""

    anet_channels: tuple[int, ...] = (3, 3, 3)
    anet_output_channels: int = 3
    tnet_channels: tuple[int, ...] = (8, 8, 8)
    tnet_dilations: tuple[int, ...] = (1, 2, 5, 1)
    tnet_input_channels: int = 6

    def __post_init__(self) -> None:
        if self.anet_output_channels not in (1, 3):
            raise ConfigError("anet_output_channels must be 1 or 3")
        if len(self.tnet_dilations) != len(self.tnet_channels) + 1:
            raise ConfigError("tnet needs one dilation per conv layer")
        if any(d <= 0 for d in self.tnet_dilations):
            raise ConfigError("dilations must be positive")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def group_count(channels: int, preferred: int = 32) -> int:
    """Largest divisor of ``channels`` that is <= ``preferred``."""
    g = min(preferred, channels)
    while channels % g != 0:
        g -= 1
    return g


def sinusoidal_embedding(t: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Fixed sinusoidal timestep embedding.

    Frequencies follow ``base ** (-k / (half - 1))`` for ``k`` in
    ``0 .. half-1`` (a single unit frequency when ``half == 1``); the output
    is ``[sin(w_k t) .. cos(w_k t) ..]`` so that ``t = 0`` maps to zeros in
    the sine half and ones in the cosine half.
    """
    if dim % 2 != 0:
        raise ConfigError("embedding dimension must be even")
    half = dim // 2
    t = t.float().reshape(-1)
    if half == 1:
        freqs = torch.ones(1, device=t.device)
    else:
        exponent = -torch.arange(half, device=t.device, dtype=torch.float32) / (half - 1)
        freqs = torch.pow(torch.tensor(base, device=t.device), exponent)
    angles = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class TimeEmbedding(nn.Module):
    """Sinusoid followed by a two-layer MLP."""

    def __init__(self, sinusoid_dim: int, embed_dim: int) -> None:
        super().__init__()
        self.sinusoid_dim = sinusoid_dim
        self.mlp = nn.Sequential(
            nn.Linear(sinusoid_dim, embed_dim),
            nn.SiLU(),
            nn.Linear(embed_dim, embed_dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.sinusoid_dim)
        return self.mlp(emb.to(self.mlp[0].weight.dtype))


class ResnetBlock(nn.Module):
    """Two 3x3 convs with group norm, SiLU and a timestep projection.

    With ``scale_shift=True`` the timestep embedding is projected to a
    per-channel scale and shift applied after the second normalisation;
    otherwise it is projected to a plain additive shift.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        embed_dim: int,
        dropout: float = 0.0,
        scale_shift: bool = True,
    ) -> None:
        super().__init__()
        self.scale_shift = scale_shift
        self.norm1 = nn.GroupNorm(group_count(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        proj_out = 2 * out_channels if scale_shift else out_channels
        self.time_proj = nn.Linear(embed_dim, proj_out)
        self.norm2 = nn.GroupNorm(group_count(out_channels), out_channels)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        proj = self.time_proj(F.silu(temb))[:, :, None, None]
        if self.scale_shift:
            scale, shift = proj.chunk(2, dim=1)
            h = self.norm2(h) * (1.0 + scale) + shift
        else:
            h = self.norm2(h + proj)
        h = self.conv2(self.dropout(F.silu(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Single-scale self-attention over spatial positions."""

    def __init__(self, channels: int, num_heads: int = 1) -> None:
        super().__init__()
        if channels % num_heads != 0:
            raise ConfigError("channels must divide evenly across heads")
        self.num_heads = num_heads
        self.norm = nn.GroupNorm(group_count(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x))
        q, k, v = qkv.reshape(b, 3, self.num_heads, c // self.num_heads, h * w).unbind(1)
        scale = (c // self.num_heads) ** -0.5
        attn = torch.softmax(q.transpose(-2, -1) @ k * scale, dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


# ---------------------------------------------------------------------------
# denoising U-Net
# ---------------------------------------------------------------------------


class DenoisingUNet(nn.Module):
    """Noise-prediction U-Net conditioned on a clean reference image.

    The input is the channel-wise concatenation of the diffused image and
    its conditioning image.  Each resolution level applies
    ``blocks_per_level`` residual blocks (with self-attention at the
    configured feature-map sizes); one skip connection per level joins the
    decoder, whose blocks emit the channel width of the next shallower
    level so the upsampled tensor already matches it.
    """

    def __init__(self, config: UNetConfig) -> None:
        super().__init__()
        self.config = config
        chans = config.level_channels
        resos = config.level_resolutions
        levels = len(chans)

        self.time_embed = TimeEmbedding(config.time_sinusoid_dim, config.time_embed_dim)
        self.conv_in = nn.Conv2d(config.input_channels, chans[0], 3, padding=1)

        def block(cin: int, cout: int) -> ResnetBlock:
            return ResnetBlock(
                cin,
                cout,
                config.time_embed_dim,
                dropout=config.dropout,
                scale_shift=config.time_scale_shift,
            )

        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        width = chans[0]
        for i in range(levels):
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for _ in range(config.blocks_per_level):
                blocks.append(block(width, chans[i]))
                width = chans[i]
                if resos[i] in config.attention_resolutions:
                    attns.append(AttentionBlock(width, config.num_heads))
                else:
                    attns.append(nn.Identity())
            self.down_blocks.append(blocks)
            self.down_attns.append(attns)
            if i < levels - 1:
                self.downsamples.append(Downsample(width))

        self.mid_block1 = block(width, width)
        if config.bottleneck_attention:
            self.mid_attn: nn.Module = AttentionBlock(width, config.num_heads)
        else:
            self.mid_attn = nn.Identity()
        self.mid_block2 = block(width, width)

        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(levels)):
            out_width = chans[i - 1] if i > 0 else chans[0]
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for b in range(config.blocks_per_level):
                cin = width + chans[i] if b == 0 else out_width
                blocks.append(block(cin, out_width))
                width = out_width
                if resos[i] in config.attention_resolutions:
                    attns.append(AttentionBlock(width, config.num_heads))
                else:
                    attns.append(nn.Identity())
            self.up_blocks.append(blocks)
            self.up_attns.append(attns)
            if i > 0:
                self.upsamples.append(Upsample(width))

        self.norm_out = nn.GroupNorm(group_count(width), width)
        self.conv_out = nn.Conv2d(width, config.output_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.config.input_channels:
            raise ConfigError(
                f"expected {self.config.input_channels} input channels, got {x.shape[1]}"
            )
        temb = self.time_embed(t)
        h = self.conv_in(x)
        skips = []
        levels = len(self.down_blocks)
        for i in range(levels):
            for blk, attn in zip(self.down_blocks[i], self.down_attns[i]):
                h = attn(blk(h, temb))
            skips.append(h)
            if i < levels - 1:
                h = self.downsamples[i](h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, temb)), temb)

        for j in range(levels):
            skip = skips[levels - 1 - j]
            h = torch.cat([h, skip], dim=1)
            for blk, attn in zip(self.up_blocks[j], self.up_attns[j]):
                h = attn(blk(h, temb))
            if j < levels - 1:
                h = self.upsamples[j](h)

        return self.conv_out(F.silu(self.norm_out(h)))


# ---------------------------------------------------------------------------
# physical parameter nets
# ---------------------------------------------------------------------------


class AmbientNet(nn.Module):
    """Estimates spatially constant ambient light from a clean image.

    Two 3x3 convs, global average pooling, then two 1x1 convs; the sigmoid
    output lands in (0, 1).  Output shape is ``(B, C, 1, 1)`` with ``C``
    given by ``anet_output_channels``.
    """

    def __init__(self, config: PhysNetConfig | None = None) -> None:
        super().__init__()
        config = config or PhysNetConfig()
        self.config = config
        c1, c2, c3 = config.anet_channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1),
            nn.PReLU(),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.PReLU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Sequential(
            nn.Conv2d(c2, c3, 1),
            nn.PReLU(),
            nn.Conv2d(c3, config.anet_output_channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head(self.pool(self.features(x))))


class TransmissionNet(nn.Module):
    """Estimates an inverse-transmission map from image plus ambient light.

    Input is the clean image concatenated with the ambient estimate
    broadcast to the image plane.  Dilated 3x3 convs (dilations 1, 2, 5, 1)
    keep the spatial size; the ``1 + softplus`` head keeps the output >= 1
    so it can act as a restoring gain.
    """

    def __init__(self, config: PhysNetConfig | None = None) -> None:
        super().__init__()
        config = config or PhysNetConfig()
        self.config = config
        widths = (config.tnet_input_channels,) + config.tnet_channels + (1,)
        layers: list[nn.Module] = []
        for i, dilation in enumerate(config.tnet_dilations):
            layers.append(
                nn.Conv2d(widths[i], widths[i + 1], 3, padding=dilation, dilation=dilation)
            )
            if i < len(config.tnet_dilations) - 1:
                layers.append(nn.PReLU())
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, ambient: torch.Tensor) -> torch.Tensor:
        amb = broadcast_ambient(ambient, x)
        h = self.body(torch.cat([x, amb], dim=1))
        return 1.0 + F.softplus(h)


def broadcast_ambient(ambient: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Expand a ``(B, 1 or 3, 1, 1)`` ambient estimate to ``like``'s plane."""
    if ambient.dim() != 4:
        raise ConfigError("ambient estimate must be a 4-d tensor")
    b, c, h, w = like.shape
    amb = ambient
    if amb.shape[1] == 1:
        amb = amb.expand(-1, 3, -1, -1)
    return amb.expand(b, 3, h, w)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


def predict_noise(
    unet: DenoisingUNet, x_t: torch.Tensor, x0: torch.Tensor, t: torch.Tensor
) -> torch.Tensor:
    """Run the denoiser on the concatenation of diffused and clean images."""
    return unet(torch.cat([x_t, x0], dim=1), t)


def physical_restore(
    anet: AmbientNet, tnet: TransmissionNet, x0: torch.Tensor
) -> torch.Tensor:
    """Restoration estimate ``(x0 - A) * T + A`` from the two physics nets."""
    ambient = anet(x0)
    gain = tnet(x0, ambient)
    amb = broadcast_ambient(ambient, x0)
    return (x0 - amb) * gain + amb


def phi_transform(
    x0: torch.Tensor,
    xt: DiffusedState,
    schedule: NoiseSchedule,
    unet: DenoisingUNet,
    anet: AmbientNet,
    tnet: TransmissionNet,
) -> torch.Tensor:
    """Physics-guided diffused estimate at the level of ``xt``.

    Diffuses the network restoration of ``x0`` to timestep ``xt.t`` using
    the noise the denoiser reads out of ``xt``, i.e.
    ``sqrt(abar_t) * restore(x0) + sqrt(1 - abar_t) * eps_hat``.
    """
    t = xt.t
    t_tensor = torch.as_tensor(t, device=x0.device, dtype=torch.float32).reshape(-1)
    if t_tensor.numel() == 1:
        t_tensor = t_tensor.expand(x0.shape[0])
    eps_hat = predict_noise(unet, xt.value, x0, t_tensor)
    restored = physical_restore(anet, tnet, x0)
    ab = schedule.alpha_bar_at(t)
    return _coef(np.sqrt(ab), x0) * restored + _coef(np.sqrt(1.0 - np.asarray(ab)), x0) * eps_hat


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------


GROUP_PREFIXES = ("theta", "anet", "tnet")


@dataclass
class ModelBundle:
    """The three trainable networks plus EMA shadows and the schedule."""

    unet: DenoisingUNet
    anet: AmbientNet
    tnet: TransmissionNet
    schedule: NoiseSchedule
    unet_config: UNetConfig
    phys_config: PhysNetConfig
    ema_decay: float = 0.999
    step: int = 0
    ema: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        schedule: NoiseSchedule,
        unet_config: UNetConfig | None = None,
        phys_config: PhysNetConfig | None = None,
        ema_decay: float = 0.999,
        seed: int | None = None,
    ) -> "ModelBundle":
        unet_config = unet_config or UNetConfig()
        phys_config = phys_config or PhysNetConfig()
        if seed is not None:
            torch.manual_seed(seed)
        bundle = cls(
            unet=DenoisingUNet(unet_config),
            anet=AmbientNet(phys_config),
            tnet=TransmissionNet(phys_config),
            schedule=schedule,
            unet_config=unet_config,
            phys_config=phys_config,
            ema_decay=ema_decay,
        )
        bundle.reset_ema()
        return bundle

    def modules_by_group(self) -> dict[str, nn.Module]:
        return {"theta": self.unet, "anet": self.anet, "tnet": self.tnet}

    def named_parameters(self):
        for group, module in self.modules_by_group().items():
            for name, param in module.named_parameters():
                yield f"{group}.{name}", param

    def parameters(self) -> list[nn.Parameter]:
        return [p for _, p in self.named_parameters()]

    def reset_ema(self) -> None:
        self.ema = {
            name: param.detach().clone() for name, param in self.named_parameters()
        }

    def update_ema(self) -> None:
        d = self.ema_decay
        with torch.no_grad():
            for name, param in self.named_parameters():
                self.ema[name].mul_(d).add_(param.detach(), alpha=1.0 - d)

    def ema_modules(self) -> tuple[DenoisingUNet, AmbientNet, TransmissionNet]:
        """Deep copies of the nets carrying the EMA weights, in eval mode."""
        unet = copy.deepcopy(self.unet)
        anet = copy.deepcopy(self.anet)
        tnet = copy.deepcopy(self.tnet)
        with torch.no_grad():
            for group, module in (("theta", unet), ("anet", anet), ("tnet", tnet)):
                for name, param in module.named_parameters():
                    param.copy_(self.ema[f"{group}.{name}"])
                module.eval()
        return unet, anet, tnet

    def train_mode(self) -> None:
        for module in self.modules_by_group().values():
            module.train()

    def eval_mode(self) -> None:
        for module in self.modules_by_group().values():
            module.eval()

    def to(self, device: torch.device | str) -> "ModelBundle":
        for module in self.modules_by_group().values():
            module.to(device)
        self.ema = {k: v.to(device) for k, v in self.ema.items()}
        return self
