"""Backbone + pyramidal spatial-graph assembly, variants, and feature export.

The backbone is a small plain convolutional stack (3x3 blocks, stride-2
stages, optional stride-1 final stage) producing a square 2^n feature map.
The pyramid averages that map down through windows 2^0 .. 2^(n-1), runs a
spatial-graph stack per scale, global-average-pools each branch, and sums the
results into one embedding head; a parallel global-max branch feeds a second
head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .gridgraph import build_grid_graph
from .layers import CBR, SGN, ConvBlock, ForwardContext, Module, scale_pool
from .losses import ClassifierHead

VARIANTS = ("hpgn", "baseline", "hpgn-ng", "hpgn-oi", "hpgn1", "hpgn2", "hpgn3")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int
    input_size: int = 64
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    last_stride_one: bool = True
    sgn_depth: int = 3
    embed_dim: int = 256
    variant: str = "hpgn"
    scale_windows: tuple[int, ...] | None = None  # None: derived from variant

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.embed_dim < 1 or self.num_classes < 1 or self.sgn_depth < 1:
            raise ConfigError("embed_dim, num_classes and sgn_depth must be positive")
        n_stride2 = len(self.backbone_channels) - (1 if self.last_stride_one else 0)
        base, rem = divmod(self.input_size, 1 << n_stride2)
        if rem or base < 1 or (base & (base - 1)):
            raise ConfigError(
                f"input size {self.input_size} with {n_stride2} stride-2 stages gives a "
                f"non-power-of-two base map")
        self.base_hw = base
        self.base_channels = self.backbone_channels[-1]

    @property
    def pyramid_levels(self) -> int:
        return int(np.log2(self.base_hw))

    def branch_windows(self) -> tuple[int, ...]:
        """Average-pool windows of the enabled spatial-graph branches.

        The global-max branch always exists and is not listed here.  Reduced
        variants keep the largest windows (smallest maps) first.
        """
        n = self.pyramid_levels
        all_windows = tuple(1 << i for i in range(n))
        if self.scale_windows is not None:
            bad = set(self.scale_windows) - set(all_windows)
            if bad:
                raise ConfigError(f"scale windows {sorted(bad)} not in pyramid {all_windows}")
            return tuple(sorted(set(self.scale_windows)))
        if self.variant == "baseline":
            return ()
        if self.variant in ("hpgn", "hpgn-ng", "hpgn-oi"):
            return all_windows
        keep = int(self.variant[-1])  # hpgn1..hpgn3
        if keep > n:
            raise ConfigError(f"variant {self.variant} needs {keep} scales, pyramid has {n}")
        return tuple(sorted(all_windows[-keep:]))


@dataclass
class ForwardOutput:
    embed1: ad.Tensor | None
    embed2: ad.Tensor
    logits1: ad.Tensor | None
    logits2: ad.Tensor
    branch_pooled: list = field(default_factory=list)


class Model(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        cin = 3
        blocks = []
        n_stages = len(config.backbone_channels)
        for i, cout in enumerate(config.backbone_channels):
            stride = 1 if (config.last_stride_one and i == n_stages - 1) else 2
            blocks.append(ConvBlock(cin, cout, k=3, stride=stride, padding=1, rng=rng))
            cin = cout
        self.backbone = blocks
        self.windows = config.branch_windows()
        c0 = config.base_channels
        self.has_graphs = bool(self.windows) and config.variant != "hpgn-ng"
        if self.has_graphs:
            self.sgns = [
                SGN(build_grid_graph(config.base_hw // w, config.base_hw // w), c0,
                    config.sgn_depth)
                for w in self.windows
            ]
        else:
            self.sgns = []
        if self.windows:
            self.cbr1 = CBR(c0, config.embed_dim, rng)
            self.head1 = ClassifierHead(config.embed_dim, config.num_classes, rng)
        self.cbr2 = CBR(c0, config.embed_dim, rng)
        self.head2 = ClassifierHead(config.embed_dim, config.num_classes, rng)

    @property
    def self_only(self) -> bool:
        return self.config.variant == "hpgn-oi"

    def forward(self, ctx: ForwardContext, images: np.ndarray) -> ForwardOutput:
        """images: (batch, s, s, 3) float array in the configured input size."""
        s = self.config.input_size
        if images.ndim != 4 or images.shape[1:] != (s, s, 3):
            raise ValueError(f"expected (b, {s}, {s}, 3) images, got {images.shape}")
        x = ctx.tape.leaf(images)
        for block in self.backbone:
            x = block.forward(ctx, x)
        b = images.shape[0]
        hw = self.config.base_hw
        if x.data.shape[1:3] != (hw, hw):
            raise ValueError(f"backbone produced {x.data.shape[1:3]}, expected {(hw, hw)}")

        branch_pooled = []
        gap_sum = None
        for i, window in enumerate(self.windows):
            pooled = scale_pool(x, window)
            m = hw // window
            if self.has_graphs:
                v = ad.reshape(pooled, (b, m * m, pooled.data.shape[-1]))
                v = self.sgns[i].forward(ctx, v, self_only=self.self_only)
                v = ad.reshape(v, (b, m, m, v.data.shape[-1]))
                g = ad.global_avg_pool(v)
            else:
                g = ad.global_avg_pool(pooled)
            branch_pooled.append(g)
            gap_sum = g if gap_sum is None else ad.add(gap_sum, g)

        gmp = ad.global_max_pool(x)
        branch_pooled.append(gmp)
        embed2 = self.cbr2.forward(ctx, gmp)
        logits2 = ad.matmul(embed2, ctx.p(self.head2.weight))
        if gap_sum is not None:
            embed1 = self.cbr1.forward(ctx, gap_sum)
            logits1 = ad.matmul(embed1, ctx.p(self.head1.weight))
        else:
            embed1 = logits1 = None
        return ForwardOutput(embed1, embed2, logits1, logits2, branch_pooled)

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_params())


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def extract_features(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode retrieval features: embed1 || embed2 (embed2 alone
    when the pyramid head is absent)."""
    outs = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        ctx = ForwardContext(ad.Tape(np.float32), mode="infer")
        out = model.forward(ctx, chunk)
        if out.embed1 is not None:
            outs.append(np.concatenate([out.embed1.data, out.embed2.data], axis=1))
        else:
            outs.append(out.embed2.data)
    return np.concatenate(outs, axis=0)


def export_significance(model: Model) -> list[dict]:
    """Per-scale, per-layer location-importance heatmaps from theta.

    Each entry: scale window, grid size, layer depth index, and an h x w map
    of per-location L2 norms of theta across channels, min-max normalized to
    [0, 1] (constant maps normalize to all zeros).
    """
    maps = []
    for window, sgn in zip(model.windows, model.sgns):
        m = sgn.graph.height
        for depth, layer in enumerate(sgn.layers):
            norms = np.sqrt((layer.theta.astype(np.float64) ** 2).sum(axis=1))
            heat = norms.reshape(m, m)
            lo, hi = heat.min(), heat.max()
            heat = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
            maps.append({"window": window, "size": m, "depth": depth, "heatmap": heat})
    return maps
