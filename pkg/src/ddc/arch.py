"""Layer-descriptor architectures and the layer-removal search space.

An architecture is an ordered tuple of :class:`LayerDescriptor` records.
Input channel counts are never stored; they are reconciled from the
sequence, so removing a convolution automatically rewires its successor.
Residual blocks are delimited by ``skip_start``/``skip_end`` flags and their
shortcuts (identity or 1x1 projection) are implicit.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class LayerKind(str, Enum):
    CONVOLUTION = "convolution"
    POOLING = "pooling"
    LINEAR = "linear"
    FLATTEN = "flatten"


class Family(str, Enum):
    SEQUENTIAL = "sequential"
    RESIDUAL = "residual"


class AllLayersRemovedError(ValueError):
    """The action vector removed every convolution of the teacher."""


class InvalidArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerDescriptor:
    """One layer: ``(t, k, s, p, n, skip_start, skip_end)`` plus kind and removability.

    Pooling layers with ``kernel_size == 0`` denote global average pooling;
    otherwise max pooling with the given kernel, stride and padding.
    """

    index: int
    kind: LayerKind
    kernel_size: int = 0
    stride: int = 0
    padding: int = 0
    out_channels: int = 0
    skip_start: bool = False
    skip_end: bool = False
    removable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))

    @property
    def is_conv(self) -> bool:
        return self.kind is LayerKind.CONVOLUTION


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple[LayerDescriptor, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    family: Family = Family.SEQUENTIAL

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "family", Family(self.family))

    @property
    def removable_positions(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.removable]

    @property
    def num_removable(self) -> int:
        return len(self.removable_positions)

    @property
    def conv_positions(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.is_conv]

    def with_num_classes(self, num_classes: int) -> "ArchitectureSpec":
        """Copy with the classifier resized, e.g. for a class-subset student."""
        layers = list(self.layers)
        last = max(i for i, l in enumerate(layers) if l.kind is LayerKind.LINEAR)
        layers[last] = replace(layers[last], out_channels=num_classes)
        return replace(self, layers=tuple(layers), num_classes=num_classes)


# ---------------------------------------------------------------------------
# shape tracing


@dataclass
class ResidualBlock:
    start: int
    end: int
    in_channels: int
    out_channels: int
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]
    stride: int

    @property
    def identity(self) -> bool:
        return self.in_channels == self.out_channels and self.in_hw == self.out_hw


@dataclass
class ShapeTrace:
    """Per-layer reconciled shapes of an architecture."""

    in_channels: list[int] = field(default_factory=list)
    out_channels: list[int] = field(default_factory=list)
    in_hw: list[tuple[int, int]] = field(default_factory=list)
    out_hw: list[tuple[int, int]] = field(default_factory=list)
    blocks: list[ResidualBlock] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def residual_spans(arch: ArchitectureSpec) -> tuple[list[tuple[int, int]], list[str]]:
    """Pair each skip_start with the first skip_end at or after it."""
    spans, errors = [], []
    open_start = None
    for i, layer in enumerate(arch.layers):
        if layer.skip_start:
            if open_start is not None:
                errors.append(f"skip_start at layer {open_start} has no matching skip_end before layer {i}")
            open_start = i
        if layer.skip_end:
            if open_start is None:
                errors.append(f"skip_end at layer {i} has no matching skip_start")
            else:
                spans.append((open_start, i))
                open_start = None
    if open_start is not None:
        errors.append(f"skip_start at layer {open_start} has no matching later skip_end")
    for start, end in spans:
        if not all(arch.layers[j].is_conv for j in range(start, end + 1)):
            errors.append(f"residual block {start}..{end} contains non-convolution layers")
    return spans, errors


def trace_shapes(arch: ArchitectureSpec) -> ShapeTrace:
    """Propagate channels and spatial sizes through ``arch``.

    Problems are collected in ``trace.errors`` rather than raised, so the
    same routine serves both validation and model construction.
    """
    tr = ShapeTrace()
    c, h, w = arch.input_shape
    flat = None
    spans, span_errors = residual_spans(arch)
    tr.errors.extend(span_errors)
    starts = {s: e for s, e in spans}
    block_entry = None
    for i, layer in enumerate(arch.layers):
        tr.in_hw.append((h, w))
        if i in starts:
            block_entry = (i, c, (h, w))
        if layer.kind is LayerKind.CONVOLUTION:
            if flat is not None:
                tr.errors.append(f"convolution at layer {i} follows flatten")
            tr.in_channels.append(c)
            k, s, p = layer.kernel_size, max(layer.stride, 1), layer.padding
            h, w = _conv_out(h, k, s, p), _conv_out(w, k, s, p)
            c = layer.out_channels
        elif layer.kind is LayerKind.POOLING:
            tr.in_channels.append(c)
            if layer.kernel_size == 0:
                h, w = min(h, 1), min(w, 1)
            else:
                k, s, p = layer.kernel_size, max(layer.stride, 1), layer.padding
                h, w = _conv_out(h, k, s, p), _conv_out(w, k, s, p)
        elif layer.kind is LayerKind.FLATTEN:
            tr.in_channels.append(c)
            flat = c * max(h, 0) * max(w, 0)
            c = flat
        else:
            if flat is None:
                tr.errors.append(f"linear layer {i} is not preceded by a flatten layer")
                flat = c * max(h, 0) * max(w, 0)
                c = flat
            tr.in_channels.append(c)
            c = layer.out_channels
        tr.out_channels.append(c)
        tr.out_hw.append((h, w))
        if block_entry is not None and starts.get(block_entry[0]) == i:
            start, cin, hw_in = block_entry
            stride = int(np.prod([max(arch.layers[j].stride, 1) for j in range(start, i + 1)]))
            tr.blocks.append(ResidualBlock(start, i, cin, c, hw_in, (h, w), stride))
            proj_hw = tuple((v - 1) // stride + 1 for v in hw_in)
            if not tr.blocks[-1].identity and proj_hw != (h, w):
                tr.errors.append(f"residual block {start}..{i}: projection shortcut cannot match main-path shape")
            block_entry = None
    return tr


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str]

    def __bool__(self) -> bool:
        return self.ok


def validate(arch: ArchitectureSpec) -> ValidationReport:
    """Check every ArchitectureSpec invariant; never raises."""
    v: list[str] = []
    if arch.num_classes < 2:
        v.append("num_classes must be at least 2")
    for i, layer in enumerate(arch.layers):
        if layer.index != i:
            v.append(f"layer {i}: index {layer.index} does not match its position")
        if layer.is_conv and (layer.kernel_size < 1 or layer.stride < 1 or layer.out_channels < 1):
            v.append(f"layer {i}: convolution needs kernel_size, stride, out_channels >= 1")
        if (layer.skip_start or layer.skip_end) and arch.family is not Family.RESIDUAL:
            v.append(f"layer {i}: skip flags require a residual family")
        if layer.removable and not layer.is_conv:
            v.append(f"layer {i}: only convolutions may be removable")
        if layer.kind is LayerKind.LINEAR and layer.out_channels < 1:
            v.append(f"layer {i}: linear layer needs out_channels >= 1")
    linears = [i for i, l in enumerate(arch.layers) if l.kind is LayerKind.LINEAR]
    if (
        len(linears) != 1
        or linears[0] != len(arch.layers) - 1
        or arch.layers[linears[0]].out_channels != arch.num_classes
    ):
        v.append("exactly one final linear layer with out_channels = num_classes")
    if not arch.conv_positions:
        v.append("at least one convolution")
    if not arch.layers:
        return ValidationReport(False, v)
    tr = trace_shapes(arch)
    for msg in tr.errors:
        if "skip" in msg or "residual" in msg:
            v.append(f"every skip_start has a matching later skip_end within the same residual block ({msg})")
        else:
            v.append(msg)
    if any(h < 1 or w < 1 for h, w in tr.out_hw) or min(arch.input_shape[1:]) < 1:
        v.append("spatial dimensions >= 1 throughout the network")
    return ValidationReport(not v, v)


def check(arch: ArchitectureSpec) -> ArchitectureSpec:
    report = validate(arch)
    if not report.ok:
        raise InvalidArchitectureError("; ".join(report.violations))
    return arch


# ---------------------------------------------------------------------------
# layer removal


def derive_student(teacher: ArchitectureSpec, actions: Sequence[int]) -> ArchitectureSpec:
    """Apply binary keep (1) / remove (0) decisions to the teacher's removable layers.

    Residual blocks that lose all their convolutions collapse to an identity
    connection when the incoming and block output channel counts agree, and
    to a single non-removable 1x1 projection otherwise.
    """
    positions = teacher.removable_positions
    actions = [int(a) for a in actions]
    if len(actions) != len(positions):
        raise ValueError(f"expected {len(positions)} actions, got {len(actions)}")
    if any(a not in (0, 1) for a in actions):
        raise ValueError("actions must be 0 or 1")
    keep = [True] * len(teacher.layers)
    for pos, a in zip(positions, actions):
        keep[pos] = bool(a)
    if not any(keep[i] for i in teacher.conv_positions):
        raise AllLayersRemovedError("every convolution layer was removed")

    spans = {s: e for s, e in residual_spans(teacher)[0]}
    out: list[LayerDescriptor] = []
    channels = teacher.input_shape[0]
    i = 0
    while i < len(teacher.layers):
        if i in spans:
            end = spans[i]
            kept = [j for j in range(i, end + 1) if keep[j]]
            block_out = teacher.layers[end].out_channels
            if not kept:
                if channels != block_out:
                    stride = int(np.prod([teacher.layers[j].stride for j in range(i, end + 1)]))
                    out.append(LayerDescriptor(0, LayerKind.CONVOLUTION, 1, stride, 0, block_out))
                    channels = block_out
            else:
                for j in kept:
                    out.append(replace(teacher.layers[j], skip_start=j == kept[0], skip_end=j == kept[-1]))
                channels = block_out
            i = end + 1
            continue
        layer = teacher.layers[i]
        if keep[i]:
            out.append(layer)
            if layer.is_conv:
                channels = layer.out_channels
        i += 1
    layers = tuple(replace(l, index=k) for k, l in enumerate(out))
    return replace(teacher, layers=layers)


def encode_architecture(arch: ArchitectureSpec, max_channels: int | None = None) -> np.ndarray:
    """Feature matrix with one row per removable layer.

    Columns: ``(t / T, k, s, p, n / max_channels, skip_start, skip_end)``.
    """
    if max_channels is None:
        max_channels = max(arch.layers[i].out_channels for i in arch.conv_positions)
    total = len(arch.layers)
    rows = [
        (
            layer.index / total,
            layer.kernel_size,
            layer.stride,
            layer.padding,
            layer.out_channels / max_channels,
            float(layer.skip_start),
            float(layer.skip_end),
        )
        for layer in arch.layers
        if layer.removable
    ]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), ENCODING_WIDTH)


ENCODING_WIDTH = 7


def count_parameters(arch: ArchitectureSpec) -> int:
    tr = trace_shapes(arch)
    total = 0
    for i, layer in enumerate(arch.layers):
        if layer.is_conv:
            k, n = layer.kernel_size, layer.out_channels
            total += k * k * tr.in_channels[i] * n + n
        elif layer.kind is LayerKind.LINEAR:
            total += tr.in_channels[i] * layer.out_channels + layer.out_channels
    for block in tr.blocks:
        if not block.identity:
            total += block.in_channels * block.out_channels + block.out_channels
    return total


def random_actions(arch: ArchitectureSpec, rng: np.random.Generator, keep_prob: float = 0.5) -> list[int]:
    return [int(v) for v in rng.random(arch.num_removable) < keep_prob]


# ---------------------------------------------------------------------------
# serialization


def arch_to_dict(arch: ArchitectureSpec) -> dict:
    return {
        "family": arch.family.value,
        "input_shape": list(arch.input_shape),
        "num_classes": arch.num_classes,
        "layers": [{**asdict(l), "kind": l.kind.value} for l in arch.layers],
    }


def arch_from_dict(data: dict) -> ArchitectureSpec:
    return ArchitectureSpec(
        layers=tuple(LayerDescriptor(**layer) for layer in data["layers"]),
        input_shape=tuple(data["input_shape"]),
        num_classes=int(data["num_classes"]),
        family=Family(data.get("family", "sequential")),
    )


def save_arch(arch: ArchitectureSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(arch_to_dict(arch), indent=2) + "\n", encoding="utf-8")


def load_arch(path: str | Path) -> ArchitectureSpec:
    return arch_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# builders


def conv(n: int, k: int = 3, s: int = 1, p: int | None = None, *, removable: bool = True,
         skip_start: bool = False, skip_end: bool = False) -> LayerDescriptor:
    return LayerDescriptor(0, LayerKind.CONVOLUTION, k, s, k // 2 if p is None else p, n,
                           skip_start, skip_end, removable)


def maxpool(k: int = 2, s: int | None = None) -> LayerDescriptor:
    return LayerDescriptor(0, LayerKind.POOLING, k, s or k, 0, 0)


def global_pool() -> LayerDescriptor:
    return LayerDescriptor(0, LayerKind.POOLING, 0, 0, 0, 0)


def flatten() -> LayerDescriptor:
    return LayerDescriptor(0, LayerKind.FLATTEN)


def linear(n: int) -> LayerDescriptor:
    return LayerDescriptor(0, LayerKind.LINEAR, 0, 0, 0, n)


def assemble(layers: Iterable[LayerDescriptor], num_classes: int,
             input_shape: tuple[int, int, int] = (3, 32, 32),
             family: Family | str = Family.SEQUENTIAL) -> ArchitectureSpec:
    """Number ``layers`` by position, append the classifier and validate."""
    layers = [*layers, linear(num_classes)]
    layers = tuple(replace(l, index=i) for i, l in enumerate(layers))
    return check(ArchitectureSpec(layers, input_shape, num_classes, Family(family)))


def _vgg_layers(cfg: Sequence[int | str]) -> list[LayerDescriptor]:
    return [maxpool() if v == "M" else conv(int(v)) for v in cfg]


def vgg11(num_classes: int = 10, input_shape=(3, 32, 32)) -> ArchitectureSpec:
    cfg = [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"]
    return assemble([*_vgg_layers(cfg), flatten()], num_classes, input_shape)


def _basic_block(cin: int, cout: int, stride: int) -> list[LayerDescriptor]:
    return [conv(cout, s=stride, skip_start=True), conv(cout, skip_end=True)]


def resnet18(num_classes: int = 10, input_shape=(3, 32, 32)) -> ArchitectureSpec:
    layers = [conv(64)]
    cin = 64
    for cout, stride in [(64, 1), (128, 2), (256, 2), (512, 2)]:
        layers += _basic_block(cin, cout, stride) + _basic_block(cout, cout, 1)
        cin = cout
    layers += [global_pool(), flatten()]
    return assemble(layers, num_classes, input_shape, Family.RESIDUAL)


def desk_sequential(num_classes: int = 2, input_shape=(3, 32, 32)) -> ArchitectureSpec:
    """Four-convolution VGG-style teacher small enough for CPU experiments."""
    cfg = [16, 32, "M", 32, "M", 64, "M"]
    return assemble([*_vgg_layers(cfg), flatten()], num_classes, input_shape)


def desk_residual(num_classes: int = 2, input_shape=(3, 32, 32)) -> ArchitectureSpec:
    layers = [conv(16), *_basic_block(16, 16, 1), maxpool(), *_basic_block(16, 32, 1), maxpool(),
              maxpool(), flatten()]
    return assemble(layers, num_classes, input_shape, Family.RESIDUAL)


def kd_student_7layer(num_classes: int = 10, input_shape=(3, 32, 32)) -> ArchitectureSpec:
    """Hand-designed VGG-inspired student used by the plain-KD baseline."""
    cfg = [32, "M", 64, "M", 128, 128, "M", 256, 256, "M"]
    return assemble([*_vgg_layers(cfg), flatten()], num_classes, input_shape)


BUILTIN_ARCHITECTURES = {
    "vgg11": vgg11,
    "resnet18": resnet18,
    "desk": desk_sequential,
    "desk_residual": desk_residual,
    "kd7": kd_student_7layer,
}


def builtin_architecture(name: str, num_classes: int, input_shape=(3, 32, 32)) -> ArchitectureSpec:
    try:
        factory = BUILTIN_ARCHITECTURES[name]
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(BUILTIN_ARCHITECTURES)}") from None
    return factory(num_classes=num_classes, input_shape=tuple(input_shape))
