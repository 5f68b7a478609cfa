"""Reusable tensor blocks: conv stacks, multi-rate context pooling (ASPP),
spatial attention, pyramid squeeze attention, and squeeze-excitation blocks
with an optional random-feature lift of the channel descriptor.

All blocks operate on NCHW tensors, are immutable after construction, and
are pure functions of their input in eval mode: the random projection used
by the squeeze block is drawn once from a seed and frozen (a config flag
allows per-forward resampling during training).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import BatchNorm2d, Conv2d, Dense, Module, ModuleList

# attention weights are kept strictly inside (0, 1)
ATTENTION_EPS = 1e-7


def _attention_sigmoid(x):
    return ad.sigmoid(x).clamp(ATTENTION_EPS, 1.0 - ATTENTION_EPS)


@dataclass
class BlockConfig:
    """Hyperparameters shared by the bottleneck and decoder blocks."""

    out_channels: int = 64
    aspp_rates: tuple = (1, 6, 12, 18)
    psa_groups: int = 4
    psa_kernel_sizes: tuple = (3, 5, 7, 9)
    se_reduction: int = 8
    rf_dim: int = 128

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")
        if len(self.aspp_rates) != 4:
            raise ValueError("aspp_rates must list 4 rates (a pooled branch "
                             "makes the fifth)")
        if len(self.psa_kernel_sizes) != self.psa_groups:
            raise ValueError("psa_kernel_sizes length must equal psa_groups")
        if any(k % 2 == 0 for k in self.psa_kernel_sizes):
            raise ValueError("psa kernel sizes must be odd")
        if self.se_reduction < 1 or self.rf_dim < 1 or self.psa_groups < 1:
            raise ValueError("se_reduction, rf_dim, psa_groups must be positive")


@dataclass(frozen=True)
class RandomFeatureParams:
    """Frozen random-cosine projection approximating a Gaussian kernel.

    `projection` rows are drawn N(0, 1/sigma^2), `phase` uniform on
    [0, 2*pi). Two constructions from the same seed are bit-identical.
    """

    projection: np.ndarray
    phase: np.ndarray
    seed: int
    sigma: float = 1.0

    def __post_init__(self):
        d_out, d_in = self.projection.shape
        if d_out < 1 or d_in < 1:
            raise ValueError("projection must be a D x d matrix with D,d >= 1")
        if self.phase.shape != (d_out,):
            raise ValueError("phase length must match projection rows")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def dim_out(self):
        return self.projection.shape[0]

    @property
    def dim_in(self):
        return self.projection.shape[1]

    @classmethod
    def draw(cls, dim_in, dim_out, sigma=1.0, seed=0):
        rng = np.random.default_rng(seed)
        projection = rng.normal(0.0, 1.0, (dim_out, dim_in)) / sigma
        phase = rng.uniform(0.0, 2.0 * np.pi, dim_out)
        return cls(projection=projection, phase=phase, seed=seed, sigma=sigma)


def random_feature_map(v, params):
    """Map a length-d vector (or batch of them) to D cosine features:
    sqrt(2/D) * cos(P v + phase). Deterministic given `params`."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != params.dim_in:
        raise ValueError(
            f"input dim {v.shape[-1]} does not match projection dim {params.dim_in}")
    d = params.dim_out
    return np.sqrt(2.0 / d) * np.cos(v @ params.projection.T + params.phase)


class ConvBlock(Module):
    """Two 3x3 conv layers, each followed by batch norm and a rectifier.

    Spatial size is preserved (padding 1); channel count becomes `out_ch`.
    """

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        if out_ch < 1:
            raise ValueError(f"out_channels must be positive, got {out_ch}")
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, padding=1)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1)
        self.bn2 = BatchNorm2d(out_ch)

    def forward(self, x):
        x = ad.relu(self.bn1(self.conv1(x)))
        return ad.relu(self.bn2(self.conv2(x)))


class ASPP(Module):
    """Five parallel context branches concatenated and projected.

    Branches: one 1x1 conv, three 3x3 convs dilated at the configured
    rates, and a global-average-pooled 1x1 conv broadcast back to the
    input size. Dilation rates that exceed the input extent are clamped
    at forward time (with a warning) instead of failing.
    """

    def __init__(self, in_ch, out_ch, rng, rates=(1, 6, 12, 18)):
        super().__init__()
        if len(rates) != 4:
            raise ValueError("ASPP needs 4 conv rates; the pooled branch is fifth")
        self.rates = tuple(int(r) for r in rates)
        self.conv1x1 = Conv2d(in_ch, out_ch, 1, rng)
        self.bn1x1 = BatchNorm2d(out_ch)
        self.dilated = ModuleList([Conv2d(in_ch, out_ch, 3, rng, padding=r, dilation=r)
                                   for r in self.rates[1:]])
        self.dilated_bns = ModuleList([BatchNorm2d(out_ch) for _ in self.rates[1:]])
        self.pool_conv = Conv2d(in_ch, out_ch, 1, rng)
        self.project = Conv2d(5 * out_ch, out_ch, 1, rng)
        self.bn_project = BatchNorm2d(out_ch)

    def _clamped_rates(self, h, w):
        limit = min(h, w) - 1
        out = []
        for r in self.rates[1:]:
            if r > limit:
                warnings.warn(
                    f"ASPP dilation rate {r} exceeds input extent {min(h, w)}; "
                    f"clamping to {limit}")
                r = max(limit, 1)
            out.append(r)
        return out

    def pooled_branch(self, x):
        n, c, h, w = x.shape
        pooled = ad.global_avg_pool(x).reshape(n, c, 1, 1)
        pooled = ad.relu(self.pool_conv(pooled))
        return ad.bilinear_resize(pooled, h, w)

    def forward(self, x):
        _, _, h, w = x.shape
        branches = [ad.relu(self.bn1x1(self.conv1x1(x)))]
        for conv, bn, r in zip(self.dilated, self.dilated_bns,
                               self._clamped_rates(h, w)):
            branches.append(ad.relu(bn(conv(x, dilation=r))))
        branches.append(self.pooled_branch(x))
        cat = ad.concat(branches, axis=1)
        return ad.relu(self.bn_project(self.project(cat)))


class SpatialAttention(Module):
    """2-D spatial attention: channel-pooled statistics -> 7x7 conv ->
    sigmoid map, multiplied back into the features.

    Returns (refined, attention_map); refined[c] = map * input[c].
    """

    def __init__(self, rng, kernel_size=7):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("spatial attention kernel size must be odd")
        self.conv = Conv2d(2, 1, kernel_size, rng, padding=kernel_size // 2)

    def attention_map(self, x):
        avg = x.mean(axis=1, keepdims=True)
        mx = ad.amax(x, axis=1, keepdims=True)
        return _attention_sigmoid(self.conv(ad.concat([avg, mx], axis=1)))

    def forward(self, x):
        m = self.attention_map(x)
        return x * m, m


class SqueezeExcite(Module):
    """Channel gate: pooled descriptor -> bottleneck dense pair -> sigmoid
    weights multiplying each channel."""

    def __init__(self, channels, reduction, rng):
        super().__init__()
        hidden = channels // reduction
        if hidden < 1:
            raise ValueError(
                f"reduction {reduction} collapses {channels} channels below 1")
        self.fc1 = Dense(channels, hidden, rng)
        self.fc2 = Dense(hidden, channels, rng)
        self.channels = channels

    def channel_weights(self, x):
        desc = ad.global_avg_pool(x)
        return _attention_sigmoid(self.fc2(ad.relu(self.fc1(desc))))

    def forward(self, x):
        n = x.shape[0]
        w = self.channel_weights(x)
        return x * w.reshape(n, self.channels, 1, 1)


class SqueezeExciteRF(Module):
    """Squeeze-excitation whose channel descriptor first passes through a
    frozen random-cosine feature lift.

    Pipeline: global average pool (length C) -> random features (length D)
    -> dense D -> C/reduction -> rectifier -> dense -> sigmoid -> per-channel
    gate. With `resample_per_forward` the projection is redrawn on every
    training-mode pass; by default it is frozen so forwards are pure.
    """

    def __init__(self, channels, rf_params, reduction, rng,
                 resample_per_forward=False):
        super().__init__()
        if rf_params.dim_in != channels:
            raise ValueError(
                f"random-feature input dim {rf_params.dim_in} != channels {channels}")
        hidden = channels // reduction
        if hidden < 1:
            raise ValueError(
                f"reduction {reduction} collapses {channels} channels below 1")
        self.register_buffer("projection", rf_params.projection)
        self.register_buffer("phase", rf_params.phase)
        self.sigma = rf_params.sigma
        self.fc1 = Dense(rf_params.dim_out, hidden, rng)
        self.fc2 = Dense(hidden, channels, rng)
        self.channels = channels
        self.resample_per_forward = resample_per_forward
        self._resample_rng = np.random.default_rng(rf_params.seed + 1)

    def _lift(self, desc):
        if self.resample_per_forward and self.training:
            d_out, d_in = self.buffer("projection").shape
            proj = self._resample_rng.normal(0.0, 1.0, (d_out, d_in)) / self.sigma
            phase = self._resample_rng.uniform(0.0, 2.0 * np.pi, d_out)
        else:
            proj = self.buffer("projection")
            phase = self.buffer("phase")
        d = proj.shape[0]
        z = ad.matmul(desc, Tensor(proj.T)) + Tensor(phase)
        return ad.cos(z) * np.sqrt(2.0 / d)

    def channel_weights(self, x):
        desc = ad.global_avg_pool(x)
        z = self._lift(desc)
        return _attention_sigmoid(self.fc2(ad.relu(self.fc1(z))))

    def forward(self, x):
        n = x.shape[0]
        w = self.channel_weights(x)
        return x * w.reshape(n, self.channels, 1, 1)


class PSA(Module):
    """Pyramid squeeze attention.

    The channels are split into S groups; group i is convolved with its own
    odd kernel size, a squeeze-excitation weight vector is computed per
    group, the S weight vectors are normalised by a softmax across groups
    at each channel slot, and each group's features are rescaled before
    re-concatenation. Output shape equals input shape.
    """

    def __init__(self, channels, groups, kernel_sizes, reduction, rng):
        super().__init__()
        if channels % groups != 0:
            raise ValueError(f"psa groups {groups} must divide channels {channels}")
        if len(kernel_sizes) != groups:
            raise ValueError("one kernel size per group required")
        if any(k % 2 == 0 for k in kernel_sizes):
            raise ValueError("psa kernel sizes must be odd")
        gch = channels // groups
        self.convs = ModuleList([Conv2d(gch, gch, k, rng, padding=k // 2)
                                 for k in kernel_sizes])
        self.se = ModuleList([SqueezeExcite(gch, min(reduction, gch), rng)
                              for _ in range(groups)])
        self.groups = groups
        self.group_channels = gch

    def group_attention(self, x):
        """Returns (per-group conv features, softmax-normalised weights
        of shape (N, S, C/S))."""
        n = x.shape[0]
        feats = []
        weights = []
        for i in range(self.groups):
            part = ad.narrow(x, 1, i * self.group_channels, self.group_channels)
            feat = self.convs[i](part)
            feats.append(feat)
            weights.append(self.se[i].channel_weights(feat)
                           .reshape(n, 1, self.group_channels))
        stacked = ad.concat(weights, axis=1)
        return feats, ad.softmax(stacked, axis=1)

    def forward(self, x):
        n = x.shape[0]
        feats, attn = self.group_attention(x)
        scaled = []
        for i, feat in enumerate(feats):
            w = ad.narrow(attn, 1, i, 1).reshape(n, self.group_channels, 1, 1)
            scaled.append(feat * w)
        return ad.concat(scaled, axis=1)
