"""Two stacked encoder-decoder segmentation networks.

The primary architecture uses a dense-block encoder for network 1, refines
the bottleneck with multi-rate context pooling, spatial attention and
pyramid squeeze attention, and gates every decoder stage with a
random-feature squeeze block. Network 2 re-encodes the image multiplied by
network 1's mask and its decoder concatenates skip taps from BOTH encoders.

The baseline keeps the same two-network topology with a plain stacked-conv
encoder, no attention modules, and squeeze blocks without random features.
Both builders produce models with identical input/output contracts so they
are drop-in comparable.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (ASPP, PSA, BlockConfig, ConvBlock, RandomFeatureParams,
                     SpatialAttention, SqueezeExcite, SqueezeExciteRF,
                     _attention_sigmoid)
from .nn import BatchNorm2d, Conv2d, Module, ModuleList

DOWNSAMPLE_FACTOR = 16  # four 2x downsampling stages

WEIGHT_SCHEMA_VERSION = 1


@dataclass
class ModelConfig:
    """Every architecture hyperparameter, plus desk/full presets."""

    input_size: tuple = (256, 256)
    # network-1 dense encoder
    growth_rate: int = 32
    block_depths: tuple = (6, 12, 24, 16)
    compression: float = 0.5
    stem_channels: int = 64
    # network-1 baseline encoder (stacked plain conv stages)
    baseline_channels: tuple = (64, 128, 256, 512, 512)
    baseline_layers: tuple = (2, 2, 4, 4, 4)
    # network 2 and decoders (shared by both architectures)
    encoder2_channels: tuple = (64, 128, 256, 512)
    decoder_channels: tuple = (256, 128, 64, 32)
    block_cfg: BlockConfig = field(default_factory=BlockConfig)
    rf_seed: int = 0
    seed: int = 0
    scale: str = "full"
    rf_resample_per_forward: bool = False
    rf_last_stage_only: bool = False

    def __post_init__(self):
        if len(self.block_depths) != 4:
            raise ValueError("dense encoder needs exactly 4 stages (4 skip taps)")
        if len(self.encoder2_channels) != 4:
            raise ValueError("encoder 2 needs exactly 4 stages")
        if len(self.decoder_channels) != 4:
            raise ValueError("decoders have exactly 4 upsampling stages")
        if len(self.baseline_channels) != 5 or len(self.baseline_layers) != 5:
            raise ValueError("baseline encoder needs 4 tapped stages + bottleneck")
        if not 0.0 < self.compression <= 1.0:
            raise ValueError("compression must be in (0, 1]")
        if self.scale not in ("full", "desk"):
            raise ValueError("scale must be 'full' or 'desk'")

    @classmethod
    def full(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides):
        """Small widths/depths: forwards a 64x64 input in well under a
        second on one CPU core."""
        base = dict(
            input_size=(64, 64),
            growth_rate=4,
            block_depths=(2, 2, 2, 2),
            stem_channels=8,
            baseline_channels=(8, 16, 16, 24, 24),
            baseline_layers=(2, 2, 2, 2, 2),
            encoder2_channels=(8, 12, 16, 24),
            decoder_channels=(24, 16, 12, 8),
            block_cfg=BlockConfig(out_channels=16, aspp_rates=(1, 2, 3, 3),
                                  psa_groups=4, psa_kernel_sizes=(3, 5, 7, 9),
                                  se_reduction=4, rf_dim=32),
            scale="desk",
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class NetworkOutput:
    """mask1 is network 1's output; mask2 is the final prediction.
    Both are 1xHxW arrays with entries strictly inside (0, 1)."""

    mask1: np.ndarray
    mask2: np.ndarray


def config_to_dict(cfg):
    d = asdict(cfg)

    def tuples_to_lists(obj):
        if isinstance(obj, dict):
            return {k: tuples_to_lists(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return [tuples_to_lists(v) for v in obj]
        return obj

    return tuples_to_lists(d)


def config_from_dict(d):
    d = dict(d)
    block = d.pop("block_cfg")
    cfg = ModelConfig(
        block_cfg=BlockConfig(
            out_channels=block["out_channels"],
            aspp_rates=tuple(block["aspp_rates"]),
            psa_groups=block["psa_groups"],
            psa_kernel_sizes=tuple(block["psa_kernel_sizes"]),
            se_reduction=block["se_reduction"],
            rf_dim=block["rf_dim"],
        ),
        **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()},
    )
    return cfg


# -- encoders -------------------------------------------------------------


class DenseLayer(Module):
    """BN-relu-1x1 bottleneck then BN-relu-3x3 producing `growth` channels."""

    def __init__(self, in_ch, growth, rng):
        super().__init__()
        mid = 4 * growth
        self.bn1 = BatchNorm2d(in_ch)
        self.conv1 = Conv2d(in_ch, mid, 1, rng, bias=False)
        self.bn2 = BatchNorm2d(mid)
        self.conv2 = Conv2d(mid, growth, 3, rng, padding=1, bias=False)

    def forward(self, x):
        y = self.conv1(ad.relu(self.bn1(x)))
        y = self.conv2(ad.relu(self.bn2(y)))
        return ad.concat([x, y], axis=1)


class DenseBlock(Module):
    def __init__(self, in_ch, depth, growth, rng):
        super().__init__()
        self.layers = ModuleList()
        ch = in_ch
        for _ in range(depth):
            self.layers.append(DenseLayer(ch, growth, rng))
            ch += growth
        self.out_channels = ch

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Transition(Module):
    """1x1 compression conv (the pre-downsampling tap point)."""

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.bn = BatchNorm2d(in_ch)
        self.conv = Conv2d(in_ch, out_ch, 1, rng, bias=False)

    def forward(self, x):
        return self.conv(ad.relu(self.bn(x)))


class DenseEncoder(Module):
    """Dense-block backbone with 4 skip taps and 4 downsamplings.

    A cheap full-resolution stem provides the first tap; the dense blocks
    run from 1/2 resolution down (as dense backbones do), with each
    transition's compressed activation tapped just before its 2x2 average
    pool. Skips sit at full, 1/2, 1/4 and 1/8 resolution; the final block's
    compressed output is the 1/16 bottleneck.
    """

    def __init__(self, cfg, rng):
        super().__init__()
        self.stem = Conv2d(1, cfg.stem_channels, 3, rng, padding=1)
        self.stem_bn = BatchNorm2d(cfg.stem_channels)
        self.blocks = ModuleList()
        self.transitions = ModuleList()
        ch = cfg.stem_channels
        self.skip_channels = [cfg.stem_channels]
        for i, depth in enumerate(cfg.block_depths):
            block = DenseBlock(ch, depth, cfg.growth_rate, rng)
            ch = block.out_channels
            out = max(1, int(ch * cfg.compression))
            self.blocks.append(block)
            self.transitions.append(Transition(ch, out, rng))
            if i < len(cfg.block_depths) - 1:
                self.skip_channels.append(out)
            ch = out
        self.out_channels = ch

    @property
    def first_conv(self):
        return self.stem

    def forward(self, x):
        x = ad.relu(self.stem_bn(self.stem(x)))
        skips = [x]
        x = ad.avg_pool2d(x)
        last = len(self.blocks) - 1
        for i, (block, trans) in enumerate(zip(self.blocks, self.transitions)):
            x = trans(block(x))
            if i < last:
                skips.append(x)
                x = ad.avg_pool2d(x)
        return x, skips


class _ConvBNRelu(Module):
    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng, padding=1)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x):
        return ad.relu(self.bn(self.conv(x)))


class PlainEncoder(Module):
    """Stacked 3x3 conv stages with 2x2 max-pool downsampling.

    `channels` lists one width per stage. The first four stages are tapped
    pre-pool then pooled; the fifth is the bottleneck at 1/16 resolution.
    """

    def __init__(self, in_ch, channels, layers_per_stage, rng):
        super().__init__()
        self.stages = ModuleList()
        ch = in_ch
        for width, depth in zip(channels, layers_per_stage):
            stage = ModuleList()
            for _ in range(depth):
                stage.append(_ConvBNRelu(ch, width, rng))
                ch = width
            self.stages.append(stage)
        self.skip_channels = list(channels[:-1])
        self.out_channels = channels[-1]

    @property
    def first_conv(self):
        return self.stages[0][0].conv

    def forward(self, x):
        skips = []
        last = len(self.stages) - 1
        for i, stage in enumerate(self.stages):
            for layer in stage:
                x = layer(x)
            if i < last:
                skips.append(x)
                x = ad.max_pool2d(x)
        return x, skips


class Encoder2(Module):
    """Network 2 encoder: 4 stages of (conv block, tap, 2x2 downsample)."""

    def __init__(self, channels, rng):
        super().__init__()
        self.stages = ModuleList()
        ch = 1
        for width in channels:
            self.stages.append(ConvBlock(ch, width, rng))
            ch = width
        self.skip_channels = list(channels)
        self.out_channels = channels[-1]

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = ad.max_pool2d(x)
        return x, skips


# -- bottleneck and decoder -------------------------------------------------


class Bottleneck(Module):
    """ASPP, optionally refined by spatial attention and PSA."""

    def __init__(self, in_ch, block_cfg, rng, use_attention):
        super().__init__()
        self.aspp = ASPP(in_ch, block_cfg.out_channels, rng,
                         rates=block_cfg.aspp_rates)
        self.use_attention = use_attention
        if use_attention:
            self.spatial = SpatialAttention(rng)
            self.psa = PSA(block_cfg.out_channels, block_cfg.psa_groups,
                           block_cfg.psa_kernel_sizes, block_cfg.se_reduction, rng)
        self.out_channels = block_cfg.out_channels

    def forward(self, x):
        x = self.aspp(x)
        if self.use_attention:
            x, _ = self.spatial(x)
            x = self.psa(x)
        return x


class DecoderStage(Module):
    """Upsample 2x, concatenate skip taps, conv block, squeeze gate."""

    def __init__(self, in_ch, skip_ch, out_ch, squeeze, rng):
        super().__init__()
        self.conv = ConvBlock(in_ch + skip_ch, out_ch, rng)
        self.squeeze = squeeze

    def forward(self, x, skips):
        th, tw = skips[0].shape[2], skips[0].shape[3]
        x = ad.bilinear_resize(x, th, tw)
        x = ad.concat([x] + list(skips), axis=1)
        return self.squeeze(self.conv(x))


class Decoder(Module):
    def __init__(self, in_ch, skip_channel_lists, cfg, rng, use_rf, rf_seed_base):
        """`skip_channel_lists[i]` holds the channel counts of the taps
        concatenated at stage i (deepest first)."""
        super().__init__()
        self.stages = ModuleList()
        ch = in_ch
        for i, (skip_chs, out_ch) in enumerate(zip(skip_channel_lists,
                                                   cfg.decoder_channels)):
            reduction = min(cfg.block_cfg.se_reduction, out_ch)
            rf_here = use_rf and (not cfg.rf_last_stage_only or i == 3)
            if rf_here:
                params = RandomFeatureParams.draw(
                    out_ch, cfg.block_cfg.rf_dim, seed=rf_seed_base + i)
                squeeze = SqueezeExciteRF(
                    out_ch, params, reduction, rng,
                    resample_per_forward=cfg.rf_resample_per_forward)
            else:
                squeeze = SqueezeExcite(out_ch, reduction, rng)
            self.stages.append(DecoderStage(ch, sum(skip_chs), out_ch, squeeze, rng))
            ch = out_ch

    def forward(self, x, skip_lists):
        for stage, skips in zip(self.stages, skip_lists):
            x = stage(x, skips)
        return x


class MaskHead(Module):
    def __init__(self, in_ch, rng):
        super().__init__()
        self.conv = Conv2d(in_ch, 1, 1, rng)

    def forward(self, x):
        return _attention_sigmoid(self.conv(x))


# -- full models -------------------------------------------------------------


class SegmentationModel(Module):
    """Shared two-network topology; subclasses choose the first encoder
    and whether attention / random features are active."""

    architecture = "base"
    use_attention = False
    use_rf = False

    def __init__(self, cfg):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder1 = self._build_encoder1(cfg, rng)
        self.bottleneck1 = Bottleneck(self.encoder1.out_channels, cfg.block_cfg,
                                      rng, self.use_attention)
        skips1 = list(reversed(self.encoder1.skip_channels))
        self.decoder1 = Decoder(cfg.block_cfg.out_channels,
                                [[c] for c in skips1], cfg, rng,
                                self.use_rf, cfg.rf_seed * 100 + 10)
        self.head1 = MaskHead(cfg.decoder_channels[-1], rng)
        self.encoder2 = Encoder2(cfg.encoder2_channels, rng)
        self.bottleneck2 = Bottleneck(self.encoder2.out_channels, cfg.block_cfg,
                                      rng, self.use_attention)
        skips2 = list(reversed(self.encoder2.skip_channels))
        self.decoder2 = Decoder(cfg.block_cfg.out_channels,
                                [[a, b] for a, b in zip(skips1, skips2)],
                                cfg, rng, self.use_rf, cfg.rf_seed * 100 + 50)
        self.head2 = MaskHead(cfg.decoder_channels[-1], rng)

    def _build_encoder1(self, cfg, rng):
        raise NotImplementedError

    @staticmethod
    def _check_input(x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (N,1,H,W) input, got shape {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"spatial size must be divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}")

    def forward(self, x):
        mask1, mask2, _ = self.forward_parts(x)
        return mask1, mask2

    def forward_parts(self, x):
        """Returns (mask1, mask2, net2_input) as tensors."""
        self._check_input(x.data if isinstance(x, Tensor) else x)
        if not isinstance(x, Tensor):
            x = Tensor(x)
        bottom1, skips1 = self.encoder1(x)
        d1 = self.decoder1(self.bottleneck1(bottom1), [[s] for s in reversed(skips1)])
        mask1 = self.head1(d1)
        net2_input = x * mask1  # multiplicative coupling of the two networks
        bottom2, skips2 = self.encoder2(net2_input)
        d2 = self.decoder2(self.bottleneck2(bottom2),
                           [[a, b] for a, b in zip(reversed(skips1), reversed(skips2))])
        mask2 = self.head2(d2)
        return mask1, mask2, net2_input

    # -- inference conveniences ------------------------------------------

    def predict(self, image):
        """Single image (H,W) or (1,H,W) -> NetworkOutput of 1xHxW arrays.
        Runs in eval mode without building the tape."""
        arr = np.asarray(image, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(f"predict expects a single image, got shape {arr.shape}")
        was_training = self.training
        self.eval()
        try:
            with ad.no_grad():
                m1, m2 = self.forward(Tensor(arr[None]))
        finally:
            self.train(was_training)
        return NetworkOutput(mask1=m1.data[0], mask2=m2.data[0])

    def predict_batch(self, images):
        """(N,1,H,W) -> (mask1, mask2) arrays, eval mode, no tape."""
        was_training = self.training
        self.eval()
        try:
            with ad.no_grad():
                m1, m2 = self.forward(Tensor(np.asarray(images, dtype=float)))
        finally:
            self.train(was_training)
        return m1.data, m2.data


class DoubleUNetPP(SegmentationModel):
    architecture = "doubleunet_pp"
    use_attention = True
    use_rf = True

    def _build_encoder1(self, cfg, rng):
        return DenseEncoder(cfg, rng)


class DoubleUNetBaseline(SegmentationModel):
    architecture = "doubleunet"
    use_attention = False
    use_rf = False

    def _build_encoder1(self, cfg, rng):
        return PlainEncoder(1, cfg.baseline_channels, cfg.baseline_layers, rng)


def build_doubleunet_pp(cfg):
    return DoubleUNetPP(cfg)


def build_doubleunet_baseline(cfg):
    return DoubleUNetBaseline(cfg)


ARCHITECTURES = {
    "doubleunet_pp": build_doubleunet_pp,
    "doubleunet": build_doubleunet_baseline,
}


def forward(model, image):
    """Spec-level convenience: image array -> NetworkOutput."""
    return model.predict(image)


def count_parameters(model):
    """Total number of trainable scalars."""
    return int(sum(p.data.size for p in model.parameters()))


# -- weight archive -----------------------------------------------------------

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed entry timestamp: reproducible bytes


def _write_entry(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def _array_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def save_weights(model, path):
    """Single-file archive: human-readable JSON manifest (schema version,
    architecture tag, full config) plus one entry per named tensor."""
    manifest = {
        "schema_version": WEIGHT_SCHEMA_VERSION,
        "architecture": model.architecture,
        "config": config_to_dict(model.config),
    }
    state = model.state_dict()
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json",
                     json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(state):
            _write_entry(zf, f"tensors/{name}.npy", _array_bytes(state[name]))
    return path


def read_manifest(path):
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json").decode())
    except (OSError, zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise ValueError(f"cannot read weight archive {path}: {exc}") from exc


def _config_diff(archive_cfg, model_cfg):
    diffs = []
    for key in sorted(set(archive_cfg) | set(model_cfg)):
        a, m = archive_cfg.get(key), model_cfg.get(key)
        if a != m:
            diffs.append(f"{key}: archive={a!r} model={m!r}")
    return diffs


def load_weights(model, path):
    """Load an archive into `model`; the embedded architecture tag and
    config must match, otherwise the offending fields are listed."""
    manifest = read_manifest(path)
    if manifest.get("schema_version") != WEIGHT_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported weight schema {manifest.get('schema_version')!r}")
    if manifest["architecture"] != model.architecture:
        raise ValueError(
            f"architecture mismatch: archive is {manifest['architecture']!r}, "
            f"model is {model.architecture!r}")
    diffs = _config_diff(manifest["config"], config_to_dict(model.config))
    if diffs:
        raise ValueError("config mismatch: " + "; ".join(diffs))
    state = {}
    with zipfile.ZipFile(path) as zf:
        for entry in zf.namelist():
            if entry.startswith("tensors/") and entry.endswith(".npy"):
                name = entry[len("tensors/"):-len(".npy")]
                state[name] = np.load(io.BytesIO(zf.read(entry)))
    model.load_state_dict(state)
    return model


def load_model(path):
    """Rebuild the model type and config embedded in an archive, then load."""
    manifest = read_manifest(path)
    arch = manifest["architecture"]
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture tag {arch!r}")
    model = ARCHITECTURES[arch](config_from_dict(manifest["config"]))
    return load_weights(model, path)
