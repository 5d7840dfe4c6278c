"""Network building blocks.

Three mechanisms carry the model:

* ``Scn`` -- graph convolution over K center-distance partitions, each with
  a trainable additive mask on top of the fixed normalized adjacency.
* ``Mcf`` -- contextual attention in which every joint queries pooled body
  parts at several granularities; the per-grain contexts are blended by
  trainable scalar weights and added back through a channel-recovery map.
* ``Tdf`` -- squeeze-and-excitation along time: spatially pooled features
  (optionally frame-differenced) pass through grouped temporal convolutions
  and gate each channel-time position multiplicatively.

Plus the plain strided temporal convolution (``Tcn``) and the pooled
classifier head.  All layers own their parameters as ``Tensor`` objects and
expose them through ``params()`` as deterministic (name, tensor) pairs.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def fan_in_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class BatchNorm:
    """Per-channel normalization with momentum-tracked running statistics."""

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float64):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.scale = ad.parameter(np.ones(channels, dtype=dtype))
        self.shift = ad.parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, training, axes=(0, 2, 3)):
        if training:
            out, mean, var = ad.batch_norm_train(x, self.scale, self.shift,
                                                 eps=self.eps, axes=axes)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * var
            return out
        return ad.batch_norm_eval(x, self.scale, self.shift,
                                  self.running_mean, self.running_var,
                                  eps=self.eps, axes=axes)

    def params(self):
        yield "scale", self.scale
        yield "shift", self.shift

    def state(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class PointwiseConv:
    """1x1 convolution over channels of an N x C x T x V tensor."""

    def __init__(self, rng, c_in, c_out, bias=True, dtype=np.float64):
        self.w = ad.parameter(fan_in_uniform(rng, (c_out, c_in), c_in, dtype))
        self.b = ad.parameter(fan_in_uniform(rng, (c_out,), c_in, dtype)) if bias else None

    def __call__(self, x):
        return ad.conv1x1(x, self.w, self.b)

    def params(self):
        yield "w", self.w
        if self.b is not None:
            yield "b", self.b


class TemporalConv:
    """Grouped 1-D convolution along T, stride/groups configurable."""

    def __init__(self, rng, c_in, c_out, kernel, stride=1, groups=1,
                 bias=True, dtype=np.float64):
        if kernel % 2 == 0:
            raise ConfigError(f"temporal kernel must be odd, got {kernel}")
        if c_in % groups or c_out % groups:
            raise ConfigError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
        fan_in = (c_in // groups) * kernel
        self.stride = stride
        self.groups = groups
        self.w = ad.parameter(fan_in_uniform(rng, (c_out, c_in // groups, kernel),
                                             fan_in, dtype))
        self.b = ad.parameter(fan_in_uniform(rng, (c_out,), fan_in, dtype)) if bias else None

    def __call__(self, x):
        return ad.temporal_conv(x, self.w, self.b, stride=self.stride,
                                groups=self.groups)

    def params(self):
        yield "w", self.w
        if self.b is not None:
            yield "b", self.b


def _collect(*named_children):
    """Flatten (prefix, child) pairs into deterministic (name, tensor) pairs."""
    for prefix, child in named_children:
        if child is None:
            continue
        for name, p in child.params():
            yield f"{prefix}.{name}", p


class Scn:
    """Masked partitioned graph convolution: sum_i (G_i + mask_i) x W_i.

    The fixed normalized subsets G_i come from the partition; each mask is a
    free V x V matrix initialized to its G_i (and may go negative to suppress
    physical bones).  BN then ReLU follow the aggregation.  With
    ``use_mask=False`` the masks are omitted entirely.
    """

    def __init__(self, rng, c_in, c_out, partition, use_mask=True,
                 dtype=np.float64):
        self.subsets = partition.subsets.astype(dtype)
        self.convs = [PointwiseConv(rng, c_in, c_out, dtype=dtype)
                      for _ in range(partition.K)]
        if use_mask:
            self.masks = [ad.parameter(partition.masks[i].astype(dtype))
                          for i in range(partition.K)]
        else:
            self.masks = None
        self.bn = BatchNorm(c_out, dtype=dtype)

    def forward(self, x, training):
        if x.shape[3] != self.subsets.shape[1]:
            raise ShapeError(f"input has V={x.shape[3]}, adjacency expects "
                             f"V={self.subsets.shape[1]}")
        acc = None
        for i, conv in enumerate(self.convs):
            a = Tensor(self.subsets[i])
            if self.masks is not None:
                a = a + self.masks[i]
            term = ad.graph_mix(conv(x), a)
            acc = term if acc is None else acc + term
        return ad.relu(self.bn(acc, training))

    def params(self):
        for i, conv in enumerate(self.convs):
            yield from _collect((f"conv{i}", conv))
        if self.masks is not None:
            for i, m in enumerate(self.masks):
                yield f"mask{i}", m
        yield from _collect(("bn", self.bn))

    def state(self):
        for name, s in self.bn.state():
            yield f"bn.{name}", s


class Mcf:
    """Multi-grain contextual attention with weighted-sum fusion.

    Channels are first reduced by ``alpha``; query/key/value embeddings are
    pointwise convolutions on the reduced features.  Keys and values are
    pooled to part resolution per grain while queries stay at joint
    resolution, so the (V x Vhat_i) softmax rows let every joint attend over
    the parts of that grain.  Contexts are blended by trainable scalars and
    recovered to C channels through a bias-free pointwise map, added onto
    the identity path (zero fusion weights therefore give an exact
    pass-through).
    """

    def __init__(self, rng, channels, grains, alpha=4, dtype=np.float64):
        if channels % alpha:
            raise ConfigError(f"alpha={alpha} must divide channels={channels}")
        c_red = channels // alpha
        self.reduce = PointwiseConv(rng, channels, c_red, dtype=dtype)
        self.embed_q = PointwiseConv(rng, c_red, c_red, dtype=dtype)
        self.embed_k = PointwiseConv(rng, c_red, c_red, dtype=dtype)
        self.embed_v = PointwiseConv(rng, c_red, c_red, dtype=dtype)
        self.recover = PointwiseConv(rng, c_red, channels, bias=False, dtype=dtype)
        self.poolings = [g.pooling.astype(dtype) for g in grains]
        self.fusion = ad.parameter(
            np.full(len(grains), 1.0 / len(grains), dtype=dtype))
        self.last_attention = None

    def forward(self, x, training, record=False):
        n, c, t, v = x.shape
        if any(p.shape[1] != v for p in self.poolings):
            raise ShapeError(f"grain pooling does not match V={v}")
        xr = self.reduce(x)
        c_red = xr.shape[1]
        q = self.embed_q(xr)
        k = self.embed_k(xr)
        val = self.embed_v(xr)
        # joints as rows, whole channel-time signature as the feature vector
        q_flat = ad.reshape(ad.permute(q, (0, 3, 1, 2)), (n, v, c_red * t))

        captured = [] if record else None
        mixed = None
        for i, pooling in enumerate(self.poolings):
            p_t = Tensor(pooling.T)                     # V x Vhat
            k_i = ad.reshape(ad.matmul(k, p_t), (n, c_red * t, pooling.shape[0]))
            v_i = ad.reshape(ad.matmul(val, p_t), (n, c_red * t, pooling.shape[0]))
            attn = ad.softmax(ad.matmul(q_flat, k_i), axis=2)   # N x V x Vhat
            if record:
                captured.append(attn.data.copy())
            ctx = ad.matmul(attn, ad.permute(v_i, (0, 2, 1)))   # N x V x C'T
            ctx = ad.permute(ad.reshape(ctx, (n, v, c_red, t)), (0, 2, 3, 1))
            w_i = ad.reshape(ad.slice_axis(self.fusion, 0, i, i + 1), (1, 1, 1, 1))
            term = ctx * w_i
            mixed = term if mixed is None else mixed + term
        if record:
            self.last_attention = captured
        return x + self.recover(mixed)

    def params(self):
        yield from _collect(("reduce", self.reduce), ("q", self.embed_q),
                            ("k", self.embed_k), ("v", self.embed_v),
                            ("recover", self.recover))
        yield "fusion", self.fusion

    def state(self):
        return iter(())


class Tdf:
    """Temporal excitation: pool joints away, squeeze and re-excite channels
    through grouped temporal convolutions, then gate the input by (1 + sigmoid).

    With ``motion_mode`` the pooled features are replaced by their forward
    frame differences (last frame zero) before the squeeze, emphasizing
    motion saliency.
    """

    def __init__(self, rng, channels, reduction=4, groups=None, kernel=5,
                 motion_mode=False, dtype=np.float64):
        if channels % reduction:
            raise ConfigError(f"reduction={reduction} must divide channels={channels}")
        squeezed = channels // reduction
        if groups is None:
            groups = channels // 4
        if channels % groups or squeezed % groups:
            raise ConfigError(f"group count {groups} must divide both {channels} "
                              f"and {squeezed}")
        self.motion_mode = motion_mode
        self.squeeze = TemporalConv(rng, channels, squeezed, kernel,
                                    groups=groups, dtype=dtype)
        self.bn = BatchNorm(squeezed, dtype=dtype)
        self.excite = TemporalConv(rng, squeezed, channels, kernel,
                                   groups=groups, dtype=dtype)

    def forward(self, x, training):
        n, c, t, v = x.shape
        pooled = ad.reshape(ad.reduce_mean(x, axis=3), (n, c, t, 1))
        if self.motion_mode:
            ahead = ad.slice_axis(pooled, 2, 1, t)
            here = ad.slice_axis(pooled, 2, 0, t - 1)
            pooled = ad.pad_axis(ahead - here, 2, 0, 1)
        h = ad.relu(self.bn(self.squeeze(pooled), training))
        gate = ad.sigmoid(self.excite(h))
        return x * (gate + 1.0)

    def params(self):
        yield from _collect(("squeeze", self.squeeze), ("bn", self.bn),
                            ("excite", self.excite))

    def state(self):
        for name, s in self.bn.state():
            yield f"bn.{name}", s


class Tcn:
    """Channel-preserving temporal convolution plus BN; stride 2 halves T."""

    def __init__(self, rng, channels, kernel=9, stride=1, groups=1,
                 dtype=np.float64):
        if kernel % 2 == 0:
            raise ConfigError(f"TCN kernel must be odd, got {kernel}")
        self.conv = TemporalConv(rng, channels, channels, kernel,
                                 stride=stride, groups=groups, dtype=dtype)
        self.bn = BatchNorm(channels, dtype=dtype)

    def forward(self, x, training):
        return self.bn(self.conv(x), training)

    def params(self):
        yield from _collect(("conv", self.conv), ("bn", self.bn))

    def state(self):
        for name, s in self.bn.state():
            yield f"bn.{name}", s


class ClassifierHead:
    """Global average pool over (T, V) followed by an affine map to logits."""

    def __init__(self, rng, channels, num_classes, dtype=np.float64):
        self.w = ad.parameter(fan_in_uniform(rng, (channels, num_classes),
                                             channels, dtype))
        self.b = ad.parameter(fan_in_uniform(rng, (num_classes,), channels, dtype))

    def forward(self, x):
        return ad.affine(ad.reduce_mean(x, axis=(2, 3)), self.w, self.b)

    def params(self):
        yield "w", self.w
        yield "b", self.b

    def state(self):
        return iter(())
