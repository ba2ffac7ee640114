"""Torch networks built from :class:`~djkd.arch.ArchSpec` graphs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch import (
    ArchSpec,
    LayerSpec,
    StudentConfig,
    TeacherConfig,
    student_arch,
    teacher_arch,
)
from .errors import ConfigurationError, NumericError, StructuralError

ROLES = ("benign_teacher", "malignant_teacher", "student", "baseline")
ATTENTION_MODES = ("sigmoid_binary", "softmax_multiclass")
BN_MOMENTUM = 0.1


def soft_attention(v: torch.Tensor, mode: str = "sigmoid_binary") -> torch.Tensor:
    """Turn gate pre-activations into attention coefficients.

    ``sigmoid_binary`` squashes each value independently into (0, 1);
    ``softmax_multiclass`` normalises over the channel axis so coefficients
    sum to one at every pixel.
    """
    if mode == "sigmoid_binary":
        return torch.sigmoid(v)
    if mode == "softmax_multiclass":
        return torch.softmax(v, dim=1)
    raise ConfigurationError(f"unknown attention mode {mode!r}; expected one of {ATTENTION_MODES}")


@dataclass(frozen=True)
class AttentionGateSpec:
    skip_channels: int
    gate_channels: int
    inter_channels: int | None = None

    def __post_init__(self):
        if self.inter_channels is None:
            object.__setattr__(self, "inter_channels", max(1, self.skip_channels // 2))
        if min(self.skip_channels, self.gate_channels, self.inter_channels) < 1:
            raise ConfigurationError(f"attention gate widths must be positive: {self}")


class AttentionGate(nn.Module):
    """Additive attention gate on a skip connection.

    Both inputs are projected by 1x1 convs to ``inter_channels``, summed,
    rectified, projected to one channel and squashed by a sigmoid; the
    resulting per-pixel coefficient rescales the skip features.
    """

    def __init__(self, spec: AttentionGateSpec, bias: bool = True):
        super().__init__()
        self.spec = spec
        self.w_g = nn.Conv2d(spec.gate_channels, spec.inter_channels, 1, bias=bias)
        self.w_x = nn.Conv2d(spec.skip_channels, spec.inter_channels, 1, bias=bias)
        self.psi = nn.Conv2d(spec.inter_channels, 1, 1, bias=bias)

    def forward(self, g: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return attention_gate_forward(g, x, self)


def _resample_gate(g: torch.Tensor, x_l: torch.Tensor) -> torch.Tensor:
    gh, gw = g.shape[-2:]
    xh, xw = x_l.shape[-2:]
    if (gh, gw) == (xh, xw):
        return g
    if xh % gh or xw % gw or xh // gh != xw // gw:
        raise StructuralError(
            f"gate {tuple(g.shape)} cannot be resampled onto skip {tuple(x_l.shape)}"
        )
    return F.interpolate(g, size=(xh, xw), mode="bilinear", align_corners=False)


def attention_coefficients(g: torch.Tensor, x_l: torch.Tensor, gate: AttentionGate) -> torch.Tensor:
    """Per-pixel coefficients of shape (B, 1, H, W) for skip features ``x_l``."""
    spec = gate.spec
    if g.ndim != 4 or x_l.ndim != 4:
        raise StructuralError(f"expected 4-D feature maps, got {tuple(g.shape)} and {tuple(x_l.shape)}")
    if g.shape[0] != x_l.shape[0]:
        raise StructuralError(f"batch mismatch: gate {tuple(g.shape)} vs skip {tuple(x_l.shape)}")
    if g.shape[1] != spec.gate_channels or x_l.shape[1] != spec.skip_channels:
        raise StructuralError(
            f"channel mismatch: gate {tuple(g.shape)} / skip {tuple(x_l.shape)} "
            f"for gate spec {spec}"
        )
    if not (torch.isfinite(g).all() and torch.isfinite(x_l).all()):
        raise NumericError("attention gate received non-finite input")
    g = _resample_gate(g, x_l)
    pre = F.relu(gate.w_g(g) + gate.w_x(x_l))
    return soft_attention(gate.psi(pre), "sigmoid_binary")


def attention_gate_forward(g: torch.Tensor, x_l: torch.Tensor, gate: AttentionGate) -> torch.Tensor:
    """Gate skip features ``x_l`` with decoder signal ``g``; output has ``x_l``'s shape."""
    return x_l * attention_coefficients(g, x_l, gate)


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3 (carrying the stride), 1x1 expand, with a residual shortcut."""

    def __init__(self, in_channels: int, mid: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid, momentum=BN_MOMENTUM)
        self.conv3 = nn.Conv2d(mid, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


def _make_module(layer: LayerSpec) -> nn.Module | None:
    k, s, p = layer.kernel, layer.stride, layer.padding
    kind = layer.kind
    if kind == "conv":
        return nn.Conv2d(layer.in_channels, layer.out_channels, k, s, p, bias=layer.has_bias)
    if kind == "transpose_conv":
        return nn.ConvTranspose2d(layer.in_channels, layer.out_channels, k, s, p, bias=layer.has_bias)
    if kind == "batch_norm":
        return nn.BatchNorm2d(layer.out_channels, momentum=BN_MOMENTUM)
    if kind == "relu":
        return nn.ReLU()
    if kind == "sigmoid":
        return nn.Sigmoid()
    if kind == "max_pool":
        return nn.MaxPool2d(k, s, p)
    if kind == "bottleneck_block":
        return Bottleneck(layer.in_channels, layer.width, layer.out_channels, s)
    if kind == "attention_gate":
        spec = AttentionGateSpec(layer.in_channels, layer.gate_channels, layer.width)
        return AttentionGate(spec, bias=layer.has_bias)
    return None  # concat / bilinear_resize are parameter-free


def _key(name: str) -> str:
    return name.replace(".", "_")


class GraphNet(nn.Module):
    """Executes an :class:`ArchSpec` graph; returns the output node's tensor."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        self.blocks = nn.ModuleDict()
        for layer in spec.layers:
            module = _make_module(layer)
            if module is not None:
                self.blocks[_key(layer.name)] = module
        # index of the last consumer of each tensor, so intermediates can be freed early
        self._last_use = {}
        for i, layer in enumerate(spec.layers):
            for src in layer.inputs:
                self._last_use[src] = i

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise StructuralError(
                f"{spec.name} expects (B, {spec.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        spec.check_resolution(x.shape[2], x.shape[3])
        size = tuple(x.shape[-2:])
        out = {"input": x}
        target = spec.output_name
        for i, layer in enumerate(spec.layers):
            args = [out[s] for s in layer.inputs]
            if layer.kind == "concat":
                y = torch.cat(args, dim=1)
            elif layer.kind == "bilinear_resize":
                y = F.interpolate(
                    args[0],
                    size=size if layer.scale is None else None,
                    scale_factor=layer.scale,
                    mode="bilinear",
                    align_corners=False,
                )
            else:
                y = self.blocks[_key(layer.name)](*args)
            out[layer.name] = y
            for s in layer.inputs:
                if self._last_use.get(s) == i and s != target:
                    del out[s]
        return out[target]


def init_weights(net: nn.Module, seed: int) -> None:
    """He-normal convs, zero biases, unit/zero norms; driven by a private generator."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                std = (2.0 / m.weight[0].numel()) ** 0.5
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()


@dataclass
class NetworkHandle:
    net: GraphNet
    role: str
    seed: int = 0
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown role {self.role!r}; expected one of {ROLES}")

    @property
    def spec(self) -> ArchSpec:
        return self.net.spec

    @property
    def parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.net.named_parameters())

    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def build_network(spec: ArchSpec, role: str, seed: int = 0) -> NetworkHandle:
    net = GraphNet(spec)
    init_weights(net, seed)
    return NetworkHandle(net, role, seed)


def build_teacher(config: TeacherConfig | None = None, seed: int = 0,
                  role: str = "benign_teacher") -> NetworkHandle:
    return build_network(teacher_arch(config), role, seed)


def build_student(config: StudentConfig | None = None, seed: int = 0) -> NetworkHandle:
    return build_network(student_arch(config), "student", seed)


def _as_module(net) -> GraphNet:
    return net.net if isinstance(net, NetworkHandle) else net


def forward(net, batch) -> torch.Tensor:
    """Inference-mode logits for a batch (a tensor or anything with ``.images``)."""
    module = _as_module(net)
    images = getattr(batch, "images", batch)
    if not torch.is_tensor(images):
        images = torch.as_tensor(images)
    if images.ndim == 3:
        images = images.unsqueeze(0)
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            return module(images.float())
    finally:
        module.train(was_training)


def predict_proba(net, batch) -> torch.Tensor:
    return torch.sigmoid(forward(net, batch))


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(handle: NetworkHandle, path: str | Path, **extra) -> Path:
    """Write the weights blob to ``path`` and a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(handle.net.state_dict(), path)
    meta = {
        "arch_hash": handle.spec.hash(),
        "role": handle.role,
        "epoch": handle.epoch,
        "seed": handle.seed,
        **handle.meta,
        **extra,
        "arch": handle.spec.to_dict(),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> NetworkHandle:
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists() or not side.exists():
        raise ConfigurationError(f"checkpoint {path} or its sidecar {side} is missing")
    meta = json.loads(side.read_text())
    spec = ArchSpec.from_dict(meta.pop("arch"))
    if spec.hash() != meta["arch_hash"]:
        raise StructuralError(f"{side}: arch_hash does not match the stored architecture")
    net = GraphNet(spec)
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    role, seed, epoch = meta.pop("role"), meta.pop("seed"), meta.pop("epoch")
    meta.pop("arch_hash")
    return NetworkHandle(net, role, seed, epoch, meta)
