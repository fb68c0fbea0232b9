"""Flat parameter vectors with named slices.

All learnable state in the package lives in a single 1-D torch tensor; modules
address their weights through named, shaped views of it. One flat leaf makes
the optimizer a three-line ADAM update and lets the gradient checker walk every
coordinate of every slice uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

SliceSpec = tuple[str, tuple[int, ...]]


@dataclass(frozen=True)
class SliceInfo:
    offset: int
    shape: tuple[int, ...]

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParamVector:
    """A 1-D tensor plus an ordered name -> (offset, shape) layout.

    ``vec[name]`` returns a reshaped *view* of the flat data, so autograd
    accumulates every module's gradient into one ``data.grad``.
    """

    def __init__(self, data: torch.Tensor, layout: dict[str, SliceInfo]):
        if data.ndim != 1:
            raise ValueError("parameter data must be 1-D")
        total = sum(info.numel for info in layout.values())
        if total != data.numel():
            raise ValueError(f"layout covers {total} values, data has {data.numel()}")
        offset = 0
        for name, info in layout.items():
            if info.offset != offset:
                raise ValueError(f"slice {name!r} not contiguous at offset {offset}")
            offset += info.numel
        self.data = data
        self.layout = dict(layout)

    def __getitem__(self, name: str) -> torch.Tensor:
        info = self.layout[name]
        return self.data[info.offset : info.offset + info.numel].view(info.shape)

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    @property
    def names(self) -> list[str]:
        return list(self.layout.keys())

    @property
    def dtype(self) -> torch.dtype:
        return self.data.dtype

    def numel(self) -> int:
        return self.data.numel()

    def requires_grad_(self, flag: bool = True) -> "ParamVector":
        self.data.requires_grad_(flag)
        return self

    def detach_clone(self, dtype: torch.dtype | None = None) -> "ParamVector":
        data = self.data.detach().clone()
        if dtype is not None:
            data = data.to(dtype)
        return ParamVector(data, self.layout)

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy().copy()


def layout_from_spec(spec: list[SliceSpec]) -> dict[str, SliceInfo]:
    layout: dict[str, SliceInfo] = {}
    offset = 0
    for name, shape in spec:
        if name in layout:
            raise ValueError(f"duplicate slice name {name!r}")
        info = SliceInfo(offset, tuple(int(s) for s in shape))
        layout[name] = info
        offset += info.numel
    return layout


def init_params(
    spec: list[SliceSpec], rng: np.random.Generator, dtype: torch.dtype
) -> ParamVector:
    """Gaussian fan-in init for matrix/kernel slices, zeros for the rest.

    Slices with >= 2 dims are treated as weights and drawn with standard
    deviation ``1/sqrt(fan_in)`` (fan-in = product of all dims but the first);
    1-D and scalar slices (biases, temperatures) start at zero.
    """
    layout = layout_from_spec(spec)
    chunks = []
    for name, info in layout.items():
        if len(info.shape) >= 2:
            fan_in = int(np.prod(info.shape[1:]))
            chunk = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=info.numel)
        else:
            chunk = np.zeros(info.numel)
        chunks.append(chunk)
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(torch.tensor(flat, dtype=dtype), layout)


def zero_params(spec: list[SliceSpec], dtype: torch.dtype) -> ParamVector:
    layout = layout_from_spec(spec)
    total = sum(info.numel for info in layout.values())
    return ParamVector(torch.zeros(total, dtype=dtype), layout)


def params_from_numpy(
    flat: np.ndarray, spec: list[SliceSpec], dtype: torch.dtype
) -> ParamVector:
    layout = layout_from_spec(spec)
    return ParamVector(torch.tensor(np.asarray(flat), dtype=dtype), layout)


def spec_from_layout(layout: dict[str, SliceInfo]) -> list[SliceSpec]:
    return [(name, info.shape) for name, info in layout.items()]
