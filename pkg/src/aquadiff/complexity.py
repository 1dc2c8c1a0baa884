"""Analytic parameter and multiply-accumulate counting for the networks.

Counting rules, fixed for all reports:

* convolution MACs = output elements x input channels x kernel area
  (so a 3x3 conv from 3 to 8 channels on a 32x32 output costs
  ``32*32*8*3*9`` MACs and ``8*(3*9+1) = 224`` parameters);
* dense layers cost ``out x in`` MACs and ``out*(in+1)`` parameters;
* self-attention counts its 1x1 qkv/projection convs plus the two
  ``N^2 x C`` attention matmuls (N spatial positions);
* normalization affine weights and PReLU slopes contribute parameters
  but no MACs (elementwise work is not counted);
* FLOPs are reported as 2 x MACs.

The traversal below mirrors the module graphs in :mod:`aquadiff.networks`
layer by layer; tests cross-check the parameter totals against the live
``torch`` modules.
"""

from __future__ import annotations

from dataclasses import dataclass

from .networks import PhysNetConfig, UNetConfig


@dataclass(frozen=True)
class ComplexityReport:
    """Multiply-accumulate and parameter totals for one network."""

    name: str
    macs: int
    params: int

    @property
    def flops(self) -> int:
        return 2 * self.macs

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def mparams(self) -> float:
        return self.params / 1e6


class CostTape:
    """Accumulates MACs and parameters layer by layer.

    A fresh tape reports ``(0, 0)`` — the cost of an empty network.
    """

    def __init__(self) -> None:
        self.macs = 0
        self.params = 0

    def conv2d(
        self,
        in_channels: int,
        out_channels: int,
        out_h: int,
        out_w: int,
        kernel: int = 3,
        bias: bool = True,
    ) -> None:
        kernel_area = kernel * kernel
        self.macs += out_h * out_w * out_channels * in_channels * kernel_area
        self.params += out_channels * (in_channels * kernel_area + (1 if bias else 0))

    def linear(self, in_features: int, out_features: int, bias: bool = True) -> None:
        self.macs += out_features * in_features
        self.params += out_features * (in_features + (1 if bias else 0))

    def group_norm(self, channels: int) -> None:
        self.params += 2 * channels

    def prelu(self, num_parameters: int = 1) -> None:
        self.params += num_parameters

    def attention(self, channels: int, h: int, w: int) -> None:
        n = h * w
        self.group_norm(channels)
        self.conv2d(channels, 3 * channels, h, w, kernel=1)
        self.macs += 2 * n * n * channels
        self.conv2d(channels, channels, h, w, kernel=1)

    def report(self, name: str) -> ComplexityReport:
        return ComplexityReport(name=name, macs=self.macs, params=self.params)


def _resblock(
    tape: CostTape,
    in_channels: int,
    out_channels: int,
    res: int,
    embed_dim: int,
    scale_shift: bool,
) -> None:
    tape.group_norm(in_channels)
    tape.conv2d(in_channels, out_channels, res, res)
    tape.linear(embed_dim, 2 * out_channels if scale_shift else out_channels)
    tape.group_norm(out_channels)
    tape.conv2d(out_channels, out_channels, res, res)
    if in_channels != out_channels:
        tape.conv2d(in_channels, out_channels, res, res, kernel=1)


def count_denoiser(config: UNetConfig) -> ComplexityReport:
    """Walk the denoising U-Net graph and total its cost."""
    tape = CostTape()
    chans = config.level_channels
    resos = config.level_resolutions
    levels = len(chans)
    embed = config.time_embed_dim

    tape.linear(config.time_sinusoid_dim, embed)
    tape.linear(embed, embed)
    tape.conv2d(config.input_channels, chans[0], resos[0], resos[0])

    width = chans[0]
    for i in range(levels):
        for _ in range(config.blocks_per_level):
            _resblock(tape, width, chans[i], resos[i], embed, config.time_scale_shift)
            width = chans[i]
            if resos[i] in config.attention_resolutions:
                tape.attention(width, resos[i], resos[i])
        if i < levels - 1:
            tape.conv2d(width, width, resos[i + 1], resos[i + 1])

    bottom = resos[-1]
    _resblock(tape, width, width, bottom, embed, config.time_scale_shift)
    if config.bottleneck_attention:
        tape.attention(width, bottom, bottom)
    _resblock(tape, width, width, bottom, embed, config.time_scale_shift)

    for i in reversed(range(levels)):
        out_width = chans[i - 1] if i > 0 else chans[0]
        for b in range(config.blocks_per_level):
            cin = width + chans[i] if b == 0 else out_width
            _resblock(tape, cin, out_width, resos[i], embed, config.time_scale_shift)
            width = out_width
            if resos[i] in config.attention_resolutions:
                tape.attention(width, resos[i], resos[i])
        if i > 0:
            tape.conv2d(width, width, resos[i - 1], resos[i - 1])

    tape.group_norm(width)
    tape.conv2d(width, config.output_channels, resos[0], resos[0])
    return tape.report("denoiser")


def count_ambient_net(config: PhysNetConfig, resolution: int) -> ComplexityReport:
    tape = CostTape()
    c1, c2, c3 = config.anet_channels
    tape.conv2d(3, c1, resolution, resolution)
    tape.prelu()
    tape.conv2d(c1, c2, resolution, resolution)
    tape.prelu()
    tape.conv2d(c2, c3, 1, 1, kernel=1)
    tape.prelu()
    tape.conv2d(c3, config.anet_output_channels, 1, 1, kernel=1)
    return tape.report("ambient")


def count_transmission_net(config: PhysNetConfig, resolution: int) -> ComplexityReport:
    tape = CostTape()
    widths = (config.tnet_input_channels,) + config.tnet_channels + (1,)
    for i in range(len(config.tnet_dilations)):
        tape.conv2d(widths[i], widths[i + 1], resolution, resolution)
        if i < len(config.tnet_dilations) - 1:
            tape.prelu()
    return tape.report("transmission")


def count_complexity(
    unet_config: UNetConfig,
    phys_config: PhysNetConfig | None = None,
    resolution: int | None = None,
) -> dict[str, ComplexityReport]:
    """Per-network (MACs, params) reports at the given image resolution."""
    phys_config = phys_config or PhysNetConfig()
    resolution = resolution or unet_config.input_resolution
    return {
        "denoiser": count_denoiser(unet_config),
        "ambient": count_ambient_net(phys_config, resolution),
        "transmission": count_transmission_net(phys_config, resolution),
    }


def format_table(reports: dict[str, ComplexityReport]) -> str:
    """Human-readable table of FLOPs and parameter counts."""
    lines = [f"{'network':<14}{'GFLOPs':>12}{'params':>14}"]
    for report in reports.values():
        lines.append(
            f"{report.name:<14}{report.gflops:>12.4f}{report.params:>14,}"
        )
    return "\n".join(lines)
