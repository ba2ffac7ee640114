"""Analytic parameter, size and FLOP accounting over an :class:`ArchSpec`.

Conventions: one multiply-accumulate counts as one FLOP; normalisation,
activations, pooling and resizing are free; parameters are stored as 32-bit
floats and sizes are reported in MiB (2**20 bytes).
"""
from __future__ import annotations

from dataclasses import dataclass

from .arch import ArchSpec, LayerSpec, infer_shapes

BYTES_PER_PARAM = 4
MIB = 2 ** 20


@dataclass(frozen=True)
class ComplexityReport:
    params: int
    size_mib: float
    gflops: float
    resolution: int

    def row(self, name: str) -> str:
        """Report line: name, params/1e6, size (MiB), GFLOPs."""
        return f"{name:<16s}{self.params / 1e6:>10.1f}{self.size_mib:>10.1f}{self.gflops:>10.2f}"


def layer_params(layer: LayerSpec) -> int:
    kind = layer.kind
    cin, cout, k = layer.in_channels, layer.out_channels, layer.kernel
    if kind in ("conv", "transpose_conv"):
        return k * k * cin * cout + (cout if layer.has_bias else 0)
    if kind == "batch_norm":
        return 2 * cout
    if kind == "bottleneck_block":
        mid = layer.width
        n = cin * mid + 9 * mid * mid + mid * cout + 2 * (2 * mid + cout)
        if layer.stride != 1 or cin != cout:
            n += cin * cout + 2 * cout
        return n
    if kind == "attention_gate":
        inter, bias = layer.width, int(layer.has_bias)
        return (layer.gate_channels + cin + 1) * inter + bias * (2 * inter + 1)
    return 0


def layer_macs(layer: LayerSpec, in_hw: tuple[int, int], out_hw: tuple[int, int]) -> int:
    kind = layer.kind
    cin, cout, k = layer.in_channels, layer.out_channels, layer.kernel
    ho, wo = out_hw
    if kind == "conv":
        return k * k * cin * cout * ho * wo
    if kind == "transpose_conv":
        # every input pixel scatters a k x k x cout patch per input channel
        return k * k * cin * cout * in_hw[0] * in_hw[1]
    if kind == "bottleneck_block":
        mid = layer.width
        hi, wi = in_hw  # the 1x1 reduce runs before the strided 3x3
        macs = cin * mid * hi * wi + 9 * mid * mid * ho * wo + mid * cout * ho * wo
        if layer.stride != 1 or cin != cout:
            macs += cin * cout * ho * wo
        return macs
    if kind == "attention_gate":
        return (layer.gate_channels + cin + 1) * layer.width * ho * wo
    return 0


def count_params(spec: ArchSpec) -> int:
    return sum(layer_params(layer) for layer in spec.layers)


def count_macs(spec: ArchSpec, resolution: int | tuple[int, int]) -> int:
    h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
    spec.check_resolution(h, w)
    shapes = infer_shapes(spec, h, w)
    total = 0
    for layer in spec.layers:
        total += layer_macs(layer, shapes[layer.inputs[0]][1:], shapes[layer.name][1:])
    return total


def count_flops(spec: ArchSpec, resolution: int | tuple[int, int]) -> float:
    """GFLOPs for one forward pass of a single image."""
    return count_macs(spec, resolution) / 1e9


def size_mib(params: int) -> float:
    return params * BYTES_PER_PARAM / MIB


def analyze(spec: ArchSpec, resolution: int = 512) -> ComplexityReport:
    params = count_params(spec)
    return ComplexityReport(params, size_mib(params), count_flops(spec, resolution), resolution)


__all__ = [
    "ComplexityReport",
    "analyze",
    "count_flops",
    "count_macs",
    "count_params",
    "layer_macs",
    "layer_params",
    "size_mib",
]
