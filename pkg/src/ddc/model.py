"""Instantiate :class:`ArchitectureSpec` values as torch modules."""
from __future__ import annotations

from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .arch import ArchitectureSpec, LayerKind, check, trace_shapes


class ArchNet(nn.Module):
    """A convolutional network laid out exactly as its spec.

    ``self.layers[i]`` realizes ``arch.layers[i]``. Convolutions are followed
    by ReLU; inside a residual block the activation of the last convolution
    is applied after the shortcut is added. Projection shortcuts live in
    ``self.shortcuts`` keyed by the block's last layer position.
    """

    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        check(arch)
        self.arch = arch
        tr = trace_shapes(arch)
        mods = []
        for i, layer in enumerate(arch.layers):
            if layer.kind is LayerKind.CONVOLUTION:
                mods.append(nn.Conv2d(tr.in_channels[i], layer.out_channels, layer.kernel_size,
                                      layer.stride, layer.padding))
            elif layer.kind is LayerKind.POOLING:
                if layer.kernel_size == 0:
                    mods.append(nn.AdaptiveAvgPool2d(1))
                else:
                    mods.append(nn.MaxPool2d(layer.kernel_size, layer.stride, layer.padding))
            elif layer.kind is LayerKind.FLATTEN:
                mods.append(nn.Flatten())
            else:
                mods.append(nn.Linear(tr.in_channels[i], layer.out_channels))
        self.layers = nn.ModuleList(mods)
        self.shortcuts = nn.ModuleDict()
        self._block_of_end = {}
        self._block_starts = set()
        for block in tr.blocks:
            self._block_starts.add(block.start)
            self._block_of_end[block.end] = block.start
            if not block.identity:
                self.shortcuts[str(block.end)] = nn.Conv2d(block.in_channels, block.out_channels, 1, block.stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = None
        for i, (layer, mod) in enumerate(zip(self.arch.layers, self.layers)):
            if i in self._block_starts:
                residual = x
            x = mod(x)
            if layer.kind is LayerKind.CONVOLUTION:
                if i in self._block_of_end:
                    key = str(i)
                    shortcut = self.shortcuts[key](residual) if key in self.shortcuts else residual
                    x = x + shortcut
                x = F.relu(x)
        return x

    def conv_modules(self) -> dict[int, nn.Conv2d]:
        return {i: self.layers[i] for i in self.arch.conv_positions}


def build_model(arch: ArchitectureSpec, seed: int | None = None) -> ArchNet:
    """Randomly initialized model; ``seed`` makes the initialization reproducible
    without touching the global RNG state."""
    if seed is None:
        return ArchNet(arch)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ArchNet(arch)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_weights(model: nn.Module, path: str | Path) -> None:
    torch.save(model.state_dict(), path)


def load_model(arch: ArchitectureSpec, path: str | Path) -> ArchNet:
    model = ArchNet(arch)
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return model
