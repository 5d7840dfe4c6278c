"""Model assembly: a beginning block followed by nine residual blocks.

Each residual block runs graph convolution, optionally the multi-grain
attention (blocks 4..9 by default), the temporal excitation gate, and a
strided temporal convolution; temporal resolution halves at blocks 4 and 7.
The head pools over time and joints and maps to class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError
from .layers import (BatchNorm, ClassifierHead, Mcf, PointwiseConv, Scn, Tcn,
                     Tdf, _collect)
from .topology import Layout, load_layout, partition_adjacency

DEFAULT_CHANNELS = (64, 64, 64, 128, 128, 128, 256, 256, 256)
STRIDE_BLOCKS = (4, 7)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults reproduce the full joint-stream model."""

    layout: str = "ntu25"
    num_classes: int = 60
    in_channels: int = 3
    channels: tuple = DEFAULT_CHANNELS
    mcf_blocks: frozenset = frozenset({4, 5, 6, 7, 8, 9})
    grains_used: int = 3
    alpha: int = 4
    use_mask: bool = True
    use_tdf: bool = True
    tdf_reduction: int = 4
    tdf_groups: int | None = None       # None: channels // 4
    tdf_kernel: int = 5
    tdf_motion: bool = False
    tcn_kernel: int = 9
    tcn_groups: int = 4
    data_bn: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if len(self.channels) != 9:
            raise ConfigError(f"channel schedule must have 9 entries, got "
                              f"{len(self.channels)}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "mcf_blocks", frozenset(int(b) for b in self.mcf_blocks))
        if not self.mcf_blocks <= set(range(1, 10)):
            raise ConfigError(f"mcf_blocks must be within 1..9, got {sorted(self.mcf_blocks)}")
        if self.grains_used < 1:
            raise ConfigError("grains_used must be >= 1")
        if self.tdf_motion and self.tdf_kernel == 5:
            # motion variant defaults to the smaller kernel
            object.__setattr__(self, "tdf_kernel", 3)
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def ablate(self, what):
        """Return a config with one mechanism removed: 'mcf', 'tdf' or 'mask'."""
        if what == "mcf":
            return replace(self, mcf_blocks=frozenset())
        if what == "tdf":
            return replace(self, use_tdf=False)
        if what == "mask":
            return replace(self, use_mask=False)
        raise ConfigError(f"unknown ablation {what!r} (expected mcf|tdf|mask)")


class StfBlock:
    """SCN -> (MCF) -> (TDF) -> TCN with a projected or identity residual."""

    def __init__(self, rng, c_in, c_out, stride, partition, grains, cfg,
                 with_mcf, dtype):
        self.scn = Scn(rng, c_in, c_out, partition, use_mask=cfg.use_mask,
                       dtype=dtype)
        self.mcf = (Mcf(rng, c_out, grains, alpha=cfg.alpha, dtype=dtype)
                    if with_mcf else None)
        self.tdf = (Tdf(rng, c_out, reduction=cfg.tdf_reduction,
                        groups=cfg.tdf_groups, kernel=cfg.tdf_kernel,
                        motion_mode=cfg.tdf_motion, dtype=dtype)
                    if cfg.use_tdf else None)
        self.tcn = Tcn(rng, c_out, kernel=cfg.tcn_kernel, stride=stride,
                       groups=cfg.tcn_groups, dtype=dtype)
        if c_in == c_out and stride == 1:
            self.res_conv = None
            self.res_bn = None
        else:
            # 1x1 projection; the stride is realized by temporal subsampling
            self.res_conv = PointwiseConv(rng, c_in, c_out, bias=False, dtype=dtype)
            self.res_bn = BatchNorm(c_out, dtype=dtype)
        self.stride = stride

    def forward(self, x, training, record=None):
        h = self.scn.forward(x, training)
        if self.mcf is not None:
            h = self.mcf.forward(h, training, record=record is not None)
            if record is not None:
                record.append(self.mcf.last_attention)
        if self.tdf is not None:
            h = self.tdf.forward(h, training)
        h = self.tcn.forward(h, training)
        res = x if self.stride == 1 else ad.subsample_axis(x, 2, self.stride)
        if self.res_conv is not None:
            res = self.res_bn(self.res_conv(res), training)
        return ad.relu(h + res)

    def params(self):
        yield from _collect(("scn", self.scn), ("mcf", self.mcf),
                            ("tdf", self.tdf), ("tcn", self.tcn),
                            ("res.conv", self.res_conv), ("res.bn", self.res_bn))

    def state(self):
        for prefix, child in (("scn", self.scn), ("tdf", self.tdf),
                              ("tcn", self.tcn), ("res.bn", self.res_bn)):
            if child is None:
                continue
            for name, s in child.state():
                yield f"{prefix}.{name}", s


class Model:
    """The assembled network; owns layout, blocks, and the classifier head."""

    def __init__(self, config, seed=0):
        if not isinstance(config, ModelConfig):
            raise ConfigError("build_model expects a ModelConfig")
        self.config = config
        self.layout = (config.layout if isinstance(config.layout, Layout)
                       else load_layout(config.layout))
        grains_all = self.layout.grain_mappings()
        if config.grains_used > len(grains_all):
            raise ConfigError(f"layout {self.layout.name!r} provides "
                              f"{len(grains_all)} grains, config asks for "
                              f"{config.grains_used}")
        grains = grains_all[:config.grains_used]
        dtype = config.np_dtype
        rng = np.random.default_rng(np.random.PCG64(seed))
        partition = partition_adjacency(self.layout.graph)
        v = self.layout.graph.num_joints

        if config.data_bn:
            self.data_bn = BatchNorm(config.in_channels * v, dtype=dtype)
        else:
            self.data_bn = None

        self.begin_scn = Scn(rng, config.in_channels, config.channels[0],
                             partition, use_mask=config.use_mask, dtype=dtype)
        self.begin_tcn = Tcn(rng, config.channels[0], kernel=config.tcn_kernel,
                             stride=1, groups=config.tcn_groups, dtype=dtype)

        self.blocks = []
        c_prev = config.channels[0]
        for idx, c_out in enumerate(config.channels, start=1):
            stride = 2 if idx in STRIDE_BLOCKS else 1
            self.blocks.append(StfBlock(
                rng, c_prev, c_out, stride, partition, grains, config,
                with_mcf=idx in config.mcf_blocks, dtype=dtype))
            c_prev = c_out
        self.head = ClassifierHead(rng, c_prev, config.num_classes, dtype=dtype)

    def forward(self, x, training=False, record=None):
        """Map N x C x T x V input to N x num_classes logits.

        ``record``, when a dict, captures per-block attention lists under
        ``record['attention'][block_index]`` and the final block's output
        under ``record['features']``.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.config.np_dtype))
        n, c, t, v = x.shape
        if c != self.config.in_channels or v != self.layout.graph.num_joints:
            raise ShapeError(f"expected N x {self.config.in_channels} x T x "
                             f"{self.layout.graph.num_joints}, got {x.shape}")
        if self.data_bn is not None:
            flat = ad.reshape(ad.permute(x, (0, 3, 1, 2)), (n, v * c, t, 1))
            flat = self.data_bn(flat, training)
            x = ad.permute(ad.reshape(flat, (n, v, c, t)), (0, 2, 3, 1))
        h = self.begin_tcn.forward(self.begin_scn.forward(x, training), training)
        attn_by_block = {}
        for idx, block in enumerate(self.blocks, start=1):
            if record is not None and block.mcf is not None:
                captured = []
                h = block.forward(h, training, record=captured)
                attn_by_block[idx] = captured[0]
            else:
                h = block.forward(h, training)
        if record is not None:
            record["attention"] = attn_by_block
            record["features"] = h.data.copy()
        return self.head.forward(h)

    def params(self):
        """Deterministically ordered (name, tensor) pairs of all trainables."""
        out = []
        if self.data_bn is not None:
            out.extend((f"data_bn.{n}", p) for n, p in self.data_bn.params())
        out.extend((f"begin.scn.{n}", p) for n, p in self.begin_scn.params())
        out.extend((f"begin.tcn.{n}", p) for n, p in self.begin_tcn.params())
        for i, b in enumerate(self.blocks, start=1):
            out.extend((f"block{i}.{n}", p) for n, p in b.params())
        out.extend((f"head.{n}", p) for n, p in self.head.params())
        return out

    def states(self):
        """Non-trainable running statistics, deterministically ordered."""
        out = []
        if self.data_bn is not None:
            out.extend((f"data_bn.{n}", s) for n, s in self.data_bn.state())
        out.extend((f"begin.scn.{n}", s) for n, s in self.begin_scn.state())
        out.extend((f"begin.tcn.{n}", s) for n, s in self.begin_tcn.state())
        for i, b in enumerate(self.blocks, start=1):
            out.extend((f"block{i}.{n}", s) for n, s in b.state())
        return out

    def zero_grad(self):
        for _, p in self.params():
            p.zero_grad()


def build_model(config, seed=0):
    """Deterministic constructor: same (config, seed) gives identical weights."""
    return Model(config, seed=seed)


def count_params(model):
    """Exact number of trainable scalars, masks and fusion weights included."""
    return int(sum(p.size for _, p in model.params()))


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood under softmax; labels must be in range."""
    labels = np.asarray(labels)
    if isinstance(logits, Tensor):
        k = logits.shape[1]
    else:
        k = np.asarray(logits).shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    return ad.cross_entropy(logits, labels)
