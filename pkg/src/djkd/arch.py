"""Declarative layer graphs.

Every network in the package is described by an :class:`ArchSpec`: an ordered
list of :class:`LayerSpec` nodes wired by name. The torch modules, the
parameter counts and the FLOP counts are all derived from the same spec, so
the three can never drift apart.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigurationError, StructuralError

LAYER_KINDS = (
    "conv",
    "batch_norm",
    "relu",
    "sigmoid",
    "max_pool",
    "transpose_conv",
    "bottleneck_block",
    "attention_gate",
    "concat",
    "bilinear_resize",
)
UP_MODES = ("resize_conv", "transpose")

# Layers whose channel count passes through unchanged.
_PASSTHROUGH = {"batch_norm", "relu", "sigmoid", "max_pool", "bilinear_resize"}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    has_bias: bool = False
    width: int | None = None  # bottleneck mid width / attention-gate inter width
    gate_channels: int | None = None  # attention_gate only
    scale: float | None = None  # bilinear_resize; None resizes to the network input size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = list(self.inputs)
        return d

    @classmethod
    def from_dict(cls, d: dict, previous: str) -> "LayerSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown layer fields {sorted(unknown)} in {d.get('name')!r}")
        d = dict(d)
        d["inputs"] = tuple(d.get("inputs") or (previous,))
        return cls(**d)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    in_channels: int
    layers: tuple[LayerSpec, ...]
    divisor: int = 1  # input height/width must be a multiple of this
    output: str | None = None  # defaults to the last layer

    def __post_init__(self):
        self.validate()

    @property
    def output_name(self) -> str:
        if self.output is not None:
            return self.output
        return self.layers[-1].name if self.layers else "input"

    def validate(self) -> None:
        """Raise :class:`StructuralError` unless channels chain consistently."""
        channels = {"input": self.in_channels}
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise StructuralError(f"{layer.name}: unknown layer kind {layer.kind!r}")
            if layer.name in channels:
                raise StructuralError(f"duplicate layer name {layer.name!r}")
            for src in layer.inputs:
                if src not in channels:
                    raise StructuralError(f"{layer.name}: input {src!r} is not defined earlier")
            src_ch = [channels[s] for s in layer.inputs]
            kind = layer.kind
            if kind == "concat":
                if len(src_ch) < 2:
                    raise StructuralError(f"{layer.name}: concat needs at least two inputs")
                if layer.in_channels != sum(src_ch) or layer.out_channels != sum(src_ch):
                    raise StructuralError(
                        f"{layer.name}: concat of {src_ch} must have {sum(src_ch)} channels, "
                        f"got in={layer.in_channels} out={layer.out_channels}"
                    )
            elif kind == "attention_gate":
                if len(src_ch) != 2:
                    raise StructuralError(f"{layer.name}: attention_gate takes [gate, skip]")
                if layer.gate_channels != src_ch[0] or layer.in_channels != src_ch[1]:
                    raise StructuralError(
                        f"{layer.name}: gate/skip channels ({layer.gate_channels}, {layer.in_channels}) "
                        f"do not match producers {src_ch}"
                    )
                if layer.out_channels != layer.in_channels:
                    raise StructuralError(f"{layer.name}: attention_gate preserves skip channels")
                if not layer.width or layer.width < 1:
                    raise StructuralError(f"{layer.name}: inter width must be >= 1")
            else:
                if len(src_ch) != 1:
                    raise StructuralError(f"{layer.name}: {kind} takes exactly one input")
                if layer.in_channels != src_ch[0]:
                    raise StructuralError(
                        f"{layer.name}: in_channels={layer.in_channels} but producer "
                        f"{layer.inputs[0]!r} emits {src_ch[0]}"
                    )
                if kind in _PASSTHROUGH and layer.out_channels != layer.in_channels:
                    raise StructuralError(f"{layer.name}: {kind} cannot change channel count")
                if kind == "bottleneck_block" and (not layer.width or layer.width < 1):
                    raise StructuralError(f"{layer.name}: bottleneck needs a mid width")
            if layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                raise StructuralError(f"{layer.name}: bad kernel/stride/padding")
            channels[layer.name] = layer.out_channels
        if self.output is not None and self.output not in channels:
            raise StructuralError(f"output {self.output!r} is not a layer")

    def check_resolution(self, height: int, width: int | None = None) -> None:
        width = height if width is None else width
        if height <= 0 or width <= 0 or height % self.divisor or width % self.divisor:
            raise ConfigurationError(
                f"{self.name}: input {height}x{width} is not divisible by {self.divisor}"
            )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "in_channels": self.in_channels,
            "divisor": self.divisor,
            "output": self.output,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        layers, prev = [], "input"
        for ld in d.get("layers", []):
            layer = LayerSpec.from_dict(ld, prev)
            layers.append(layer)
            prev = layer.name
        return cls(
            name=d.get("name", "custom"),
            in_channels=int(d["in_channels"]),
            layers=tuple(layers),
            divisor=int(d.get("divisor", 1)),
            output=d.get("output"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ArchSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(indent=2))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def infer_shapes(spec: ArchSpec, height: int, width: int | None = None) -> dict[str, tuple[int, int, int]]:
    """Propagate (channels, height, width) through the graph."""
    width = height if width is None else width
    shapes = {"input": (spec.in_channels, height, width)}
    for layer in spec.layers:
        src = [shapes[s] for s in layer.inputs]
        _, h, w = src[0]
        kind = layer.kind
        if kind in ("conv", "max_pool"):
            h, w = (conv_out(v, layer.kernel, layer.stride, layer.padding) for v in (h, w))
        elif kind == "bottleneck_block":
            h, w = (conv_out(v, 3, layer.stride, 1) for v in (h, w))
        elif kind == "transpose_conv":
            h, w = ((v - 1) * layer.stride - 2 * layer.padding + layer.kernel for v in (h, w))
        elif kind == "bilinear_resize":
            if layer.scale is None:
                h, w = height, width
            else:
                h, w = int(h * layer.scale), int(w * layer.scale)
        elif kind == "concat":
            if len({s[1:] for s in src}) != 1:
                raise StructuralError(f"{layer.name}: concat spatial sizes differ: {[s[1:] for s in src]}")
        elif kind == "attention_gate":
            (_, gh, gw), (_, h, w) = src
            if h % gh or w % gw or h // gh != w // gw:
                raise StructuralError(
                    f"{layer.name}: gate {gh}x{gw} cannot be resampled onto skip {h}x{w}"
                )
        if h < 1 or w < 1:
            raise StructuralError(f"{layer.name}: spatial size collapsed to {h}x{w}")
        shapes[layer.name] = (layer.out_channels, h, w)
    return shapes


class _Graph:
    """Small helper that appends layers and tracks channel counts by name."""

    def __init__(self, in_channels: int):
        self.layers: list[LayerSpec] = []
        self.channels = {"input": in_channels}
        self.last = "input"

    def add(self, name: str, kind: str, inputs: Sequence[str] | None = None,
            out_channels: int | None = None, **kw) -> str:
        inputs = tuple(inputs) if inputs else (self.last,)
        kw = dict(kw)
        if kind == "concat":
            in_ch = sum(self.channels[s] for s in inputs)
        elif kind == "attention_gate":
            in_ch = self.channels[inputs[1]]
            kw["gate_channels"] = self.channels[inputs[0]]
        else:
            in_ch = self.channels[inputs[0]]
        out = in_ch if out_channels is None else out_channels
        self.layers.append(LayerSpec(name, kind, inputs, in_ch, out, **kw))
        self.channels[name] = out
        self.last = name
        return name

    def conv_bn_relu(self, prefix: str, out_channels: int, kernel: int = 3, bias: bool = True,
                     inputs: Sequence[str] | None = None) -> str:
        self.add(f"{prefix}.conv", "conv", inputs, out_channels, kernel=kernel,
                 padding=kernel // 2, has_bias=bias)
        self.add(f"{prefix}.bn", "batch_norm")
        return self.add(f"{prefix}.relu", "relu")

    def double_conv(self, prefix: str, out_channels: int, inputs: Sequence[str] | None = None) -> str:
        self.conv_bn_relu(f"{prefix}.1", out_channels, inputs=inputs)
        return self.conv_bn_relu(f"{prefix}.2", out_channels)

    def upsample(self, prefix: str, out_channels: int, mode: str) -> str:
        if mode == "resize_conv":
            self.add(f"{prefix}.resize", "bilinear_resize", scale=2.0)
            return self.conv_bn_relu(prefix, out_channels)
        if mode == "transpose":
            self.add(f"{prefix}.tconv", "transpose_conv", None, out_channels,
                     kernel=2, stride=2, has_bias=True)
            self.add(f"{prefix}.bn", "batch_norm")
            return self.add(f"{prefix}.relu", "relu")
        raise ConfigurationError(f"unknown up_mode {mode!r}; expected one of {UP_MODES}")


@dataclass
class TeacherConfig:
    """Bottleneck-encoder attention U-Net. Defaults give the full-size teacher."""

    in_channels: int = 3
    out_channels: int = 1
    resolution: int = 512
    stem_width: int = 64
    blocks: tuple[int, ...] = (3, 4, 23, 3)
    decoder_widths: tuple[int, ...] = (1024, 512, 256, 64)
    up_mode: str = "resize_conv"

    @classmethod
    def desk(cls, resolution: int = 128) -> "TeacherConfig":
        """Same topology at a few percent of the full parameter count, for CPU-scale experiments."""
        return cls(resolution=resolution, stem_width=16, blocks=(1, 1, 1, 1),
                   decoder_widths=(256, 128, 64, 32))


@dataclass
class StudentConfig:
    """Simplified U-Net; ``widths`` has one entry per level (depth = len(widths))."""

    in_channels: int = 3
    out_channels: int = 1
    resolution: int = 512
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    up_mode: str = "resize_conv"

    @property
    def depth(self) -> int:
        return len(self.widths)


def _check_common(in_channels: int, out_channels: int, up_mode: str) -> None:
    if in_channels < 1:
        raise ConfigurationError("in_channels must be positive")
    if out_channels != 1:
        raise ConfigurationError("only a single foreground logit map is supported (out_channels=1)")
    if up_mode not in UP_MODES:
        raise ConfigurationError(f"unknown up_mode {up_mode!r}; expected one of {UP_MODES}")


def unet_arch(widths: Iterable[int], in_channels: int = 3, up_mode: str = "resize_conv",
              name: str = "unet") -> ArchSpec:
    """Plain U-Net: double 3x3 conv per level, max-pool down, ungated skip concat."""
    widths = tuple(widths)
    if len(widths) < 2 or min(widths) < 1:
        raise ConfigurationError(f"need at least two positive level widths, got {widths}")
    _check_common(in_channels, 1, up_mode)
    g = _Graph(in_channels)
    skips = []
    for i, w in enumerate(widths):
        skips.append(g.double_conv(f"enc{i}", w))
        if i < len(widths) - 1:
            g.add(f"pool{i}", "max_pool", kernel=2, stride=2)
    for i in reversed(range(len(widths) - 1)):
        up = g.upsample(f"up{i}", widths[i], up_mode)
        g.add(f"cat{i}", "concat", [skips[i], up])
        g.double_conv(f"dec{i}", widths[i])
    g.add("head", "conv", None, 1, kernel=1, has_bias=True)
    return ArchSpec(name, in_channels, tuple(g.layers), divisor=2 ** (len(widths) - 1))


def unet_reference_arch() -> ArchSpec:
    """The vanilla U-Net (64..1024) used as the complexity calibration baseline."""
    return unet_arch((64, 128, 256, 512, 1024), name="unet_reference")


def student_arch(config: StudentConfig | None = None) -> ArchSpec:
    config = config or StudentConfig()
    _check_common(config.in_channels, config.out_channels, config.up_mode)
    spec = unet_arch(config.widths, config.in_channels, config.up_mode, name="student")
    spec.check_resolution(config.resolution)
    return spec


def teacher_arch(config: TeacherConfig | None = None) -> ArchSpec:
    config = config or TeacherConfig()
    _check_common(config.in_channels, config.out_channels, config.up_mode)
    if len(config.blocks) != 4 or min(config.blocks) < 1:
        raise ConfigurationError(f"teacher needs four bottleneck stages, got {config.blocks}")
    if len(config.decoder_widths) != 4 or min(config.decoder_widths) < 1:
        raise ConfigurationError(f"teacher needs four decoder widths, got {config.decoder_widths}")
    g = _Graph(config.in_channels)
    sw = config.stem_width
    g.add("stem.conv", "conv", None, sw, kernel=7, stride=2, padding=3)
    g.add("stem.bn", "batch_norm")
    skips = [g.add("stem.relu", "relu")]
    g.add("pool", "max_pool", kernel=3, stride=2, padding=1)
    for stage, n_blocks in enumerate(config.blocks):
        mid = sw * 2 ** stage
        for b in range(n_blocks):
            stride = 2 if (b == 0 and stage > 0) else 1
            g.add(f"layer{stage + 1}.{b}", "bottleneck_block", None, mid * 4, stride=stride, width=mid)
        skips.append(g.last)
    # deepest stage output is the bottleneck; the other four are gated skips
    skip_order = skips[3::-1]
    for i, (dec_w, skip) in enumerate(zip(config.decoder_widths, skip_order), start=1):
        up = g.upsample(f"up{i}", dec_w, config.up_mode)
        inter = max(1, g.channels[skip] // 2)
        att = g.add(f"att{i}", "attention_gate", [up, skip], width=inter, has_bias=True)
        g.add(f"cat{i}", "concat", [att, up])
        g.double_conv(f"dec{i}", dec_w)
    g.add("head", "conv", None, 1, kernel=1, has_bias=True)
    g.add("out", "bilinear_resize")
    spec = ArchSpec("teacher", config.in_channels, tuple(g.layers), divisor=32)
    spec.check_resolution(config.resolution)
    return spec


BUILTIN_ARCHS = {
    "unet_reference": unet_reference_arch,
    "teacher": teacher_arch,
    "student": student_arch,
}
