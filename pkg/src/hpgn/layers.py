"""Composite layers: spatial-graph re-weighting, SGN stacks, CBR units, pooling.

Parameters are plain numpy arrays owned by layer objects and updated in place
by the optimizer.  A ``ForwardContext`` binds each array to a tape exactly
once per forward pass, so one parameter used twice contributes a single
gradient entry.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .gridgraph import GridGraph


class ForwardContext:
    """One forward pass: a tape, a mode, and the array->tensor binding.

    Modes: 'train' (batch BN stats, running update), 'infer' (running stats),
    'bn-bypass' (skip BN entirely; test hook only).
    """

    MODES = ("train", "infer", "bn-bypass")

    def __init__(self, tape: ad.Tape, mode: str = "train", update_stats: bool | None = None):
        if mode not in self.MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.tape = tape
        self.mode = mode
        self.update_stats = (mode == "train") if update_stats is None else update_stats
        self._bound: dict[int, ad.Tensor] = {}

    def p(self, arr: np.ndarray) -> ad.Tensor:
        key = id(arr)
        t = self._bound.get(key)
        if t is None:
            t = self.tape.parameter(arr)
            self._bound[key] = t
        return t

    def tensor_for(self, arr: np.ndarray) -> ad.Tensor | None:
        return self._bound.get(id(arr))

    def bind(self, arr: np.ndarray, tensor: ad.Tensor) -> None:
        """Route an externally created tensor in place of a stored array.

        Used by gradient checking to make a forward pass a pure function of
        caller-owned parameter tensors.
        """
        self._bound[id(arr)] = tensor


class Module:
    """Base with name-walking over parameter arrays and stat buffers."""

    _params: tuple[str, ...] = ()
    _buffers: tuple[str, ...] = ()

    def named_params(self, prefix: str = ""):
        for n in self._params:
            yield prefix + n, getattr(self, n)
        for name, attr in vars(self).items():
            if isinstance(attr, Module):
                yield from attr.named_params(f"{prefix}{name}.")
            elif isinstance(attr, (list, tuple)):
                for i, m in enumerate(attr):
                    if isinstance(m, Module):
                        yield from m.named_params(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for n in self._buffers:
            yield prefix + n, getattr(self, n)
        for name, attr in vars(self).items():
            if isinstance(attr, Module):
                yield from attr.named_buffers(f"{prefix}{name}.")
            elif isinstance(attr, (list, tuple)):
                for i, m in enumerate(attr):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{name}.{i}.")


class BatchNorm(Module):
    """Per-channel normalization over batch and spatial axes (channel-last)."""

    _params = ("gamma", "beta")
    _buffers = ("running_mean", "running_var")
    MOMENTUM = 0.1

    def __init__(self, channels: int):
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def forward(self, ctx: ForwardContext, x: ad.Tensor) -> ad.Tensor:
        if ctx.mode == "bn-bypass":
            return x
        if ctx.mode == "train":
            out, mu, var = ad.batch_norm_train(x, ctx.p(self.gamma), ctx.p(self.beta))
            if ctx.update_stats:
                m = self.MOMENTUM
                self.running_mean *= 1.0 - m
                self.running_mean += m * mu.astype(np.float32)
                self.running_var *= 1.0 - m
                self.running_var += m * var.astype(np.float32)
            return out
        return ad.batch_norm_infer(x, ctx.p(self.gamma), ctx.p(self.beta),
                                   self.running_mean, self.running_var)


class SpatialGraph(Module):
    """One spatial-graph layer: aggregate, re-weight by theta, BN, leaky ReLU.

    theta starts at all ones so a fresh layer is pure aggregation.
    """

    _params = ("theta",)
    LEAK = 0.2

    def __init__(self, graph: GridGraph, channels: int):
        self.graph = graph
        self.theta = np.ones((graph.d, channels), dtype=np.float32)
        self.bn = BatchNorm(channels)

    def forward(self, ctx: ForwardContext, v: ad.Tensor, self_only: bool = False) -> ad.Tensor:
        if v.data.shape[-2] != self.graph.d or v.data.shape[-1] != self.theta.shape[1]:
            raise ValueError(
                f"expected (*, {self.graph.d}, {self.theta.shape[1]}) input, got {v.data.shape}")
        a = v if self_only else ad.graph_aggregate(v, self.graph)
        u = ad.mul(a, ctx.p(self.theta))
        return ad.leaky_relu(self.bn.forward(ctx, u), self.LEAK)


class SGN(Module):
    """Stack of spatial-graph layers sharing one grid graph."""

    def __init__(self, graph: GridGraph, channels: int, depth: int = 3):
        if depth < 1:
            raise ValueError("SGN depth must be at least 1")
        self.graph = graph
        self.layers = [SpatialGraph(graph, channels) for _ in range(depth)]

    def forward(self, ctx: ForwardContext, v: ad.Tensor, self_only: bool = False) -> ad.Tensor:
        for layer in self.layers:
            v = layer.forward(ctx, v, self_only=self_only)
        return v


class CBR(Module):
    """1x1 convolution (no bias) + BN + ReLU on pooled (batch, channels) vectors."""

    _params = ("weight",)

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / in_channels)
        self.weight = rng.normal(0.0, std, (in_channels, out_channels)).astype(np.float32)
        self.bn = BatchNorm(out_channels)

    def forward(self, ctx: ForwardContext, x: ad.Tensor) -> ad.Tensor:
        y = ad.matmul(x, ctx.p(self.weight))
        return ad.relu(self.bn.forward(ctx, y))


class ConvBlock(Module):
    """k x k convolution + BN + ReLU, used only by the backbone."""

    _params = ("weight",)

    def __init__(self, in_channels: int, out_channels: int, k: int, stride: int,
                 padding: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (k * k * in_channels))
        self.weight = rng.normal(0.0, std, (k, k, in_channels, out_channels)).astype(np.float32)
        self.stride = stride
        self.padding = padding
        self.bn = BatchNorm(out_channels)

    def forward(self, ctx: ForwardContext, x: ad.Tensor) -> ad.Tensor:
        y = ad.conv2d(x, ctx.p(self.weight), stride=self.stride, padding=self.padding)
        return ad.relu(self.bn.forward(ctx, y))


def scale_pool(x: ad.Tensor, window: int) -> ad.Tensor:
    """Average pooling with stride = window and no padding; window must tile."""
    return ad.avg_pool2d(x, window)
