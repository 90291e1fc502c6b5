"""Residual trunk with feature taps at strides 4, 8 and 16.

Depth and width are configuration knobs so the trunk:head cost ratio can be
swept. Parameters are He-initialised from a seeded PCG64 generator
(numpy.random.default_rng), so equal (config, seed) builds are bit-identical.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class TrunkConfig:
    stem_channels: int = 16
    stage_blocks: tuple = (2, 2, 2)
    stage_channels: tuple = (16, 32, 64)
    input_size: tuple = (64, 64)

    def validate(self):
        if len(self.stage_blocks) != 3 or len(self.stage_channels) != 3:
            raise ConfigError("trunk needs exactly 3 stages (taps at strides 4/8/16)")
        if self.stem_channels < 1:
            raise ConfigError(f"stem_channels must be >= 1, got {self.stem_channels}")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError(f"every stage needs >= 1 block, got {self.stage_blocks}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage channels must be >= 1, got {self.stage_channels}")
        h, w = self.input_size
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ConfigError(f"input size must be divisible by 16, got {h}x{w}")


@dataclass
class FeaturePyramid:
    """Trunk activations: c2 at stride 4, c3 at stride 8, c4 at stride 16."""
    c2: T.Tensor
    c3: T.Tensor
    c4: T.Tensor

    def as_list(self):
        return [self.c2, self.c3, self.c4]


class Conv2d:
    """3x3/1x1 convolution layer holding its weight and bias parameters."""

    def __init__(self, cin, cout, k, stride=1, rng=None, weight=None):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2
        if weight is None:
            self.weight = T.param(None, rng, (cout, cin, k, k))
        else:
            self.weight = T.param(weight)
        self.bias = T.param(np.zeros(cout))

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def named_params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def out_hw(self, h, w):
        return ((h + 2 * self.pad - self.k) // self.stride + 1,
                (w + 2 * self.pad - self.k) // self.stride + 1)


class ResidualBlock:
    """conv3x3 -> relu -> conv3x3, identity shortcut, relu after the add.

    The shortcut becomes a 1x1 projection when the block changes channel
    count or stride.
    """

    def __init__(self, cin, cout, stride, rng):
        self.conv1 = Conv2d(cin, cout, 3, stride, rng)
        self.conv2 = Conv2d(cout, cout, 3, 1, rng)
        self.proj = Conv2d(cin, cout, 1, stride, rng) if (cin != cout or stride != 1) else None

    def __call__(self, x):
        y = self.conv2(T.relu(self.conv1(x)))
        shortcut = self.proj(x) if self.proj is not None else x
        return T.relu(T.add(y, shortcut))

    def named_params(self, prefix):
        out = {}
        out.update(self.conv1.named_params(f"{prefix}.conv1"))
        out.update(self.conv2.named_params(f"{prefix}.conv2"))
        if self.proj is not None:
            out.update(self.proj.named_params(f"{prefix}.proj"))
        return out


class Trunk:
    """Stem (stride-2 conv + pool) followed by three residual stages."""

    def __init__(self, cfg: TrunkConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.stem = Conv2d(3, cfg.stem_channels, 3, 2, rng)
        self.stages = []
        cin = cfg.stem_channels
        for si, (nblocks, cout) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
            stride = 1 if si == 0 else 2  # stage1 keeps the post-pool stride 4
            blocks = []
            for bi in range(nblocks):
                blocks.append(ResidualBlock(cin, cout, stride if bi == 0 else 1, rng))
                cin = cout
            self.stages.append(blocks)

    def __call__(self, images):
        n, c, h, w = images.shape
        if c != 3:
            raise ShapeError(f"trunk expects 3-channel images, got {c}")
        if (h, w) != tuple(self.cfg.input_size):
            raise ShapeError(
                f"trunk configured for {self.cfg.input_size}, got input {h}x{w}")
        x = T.maxpool2x2(T.relu(self.stem(images)))
        taps = []
        for blocks in self.stages:
            for block in blocks:
                x = block(x)
            taps.append(x)
        return FeaturePyramid(*taps)

    def named_params(self, prefix=""):
        p = f"{prefix}." if prefix else ""
        out = dict(self.stem.named_params(f"{p}stem"))
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                out.update(block.named_params(f"{p}stage{si + 1}.block{bi}"))
        return out

    def feature_shapes(self, input_hw=None):
        """(channels, h, w) per tap for a given (or the configured) input size."""
        h, w = input_hw if input_hw is not None else self.cfg.input_size
        return [(c, h // s, w // s)
                for c, s in zip(self.cfg.stage_channels, (4, 8, 16))]

    def count_flops(self, input_hw=None):
        h, w = input_hw if input_hw is not None else self.cfg.input_size
        with T.Graph() as g, T.no_grad():
            self(T.Tensor(np.zeros((1, 3, h, w))))
        return g.total_flops()


def build_trunk(cfg: TrunkConfig, seed: int) -> Trunk:
    return Trunk(cfg, seed)


def forward_trunk(trunk: Trunk, images: T.Tensor) -> FeaturePyramid:
    return trunk(images)


def count_params(module) -> int:
    return sum(t.data.size for t in module.named_params().values())


def count_flops(module, input_hw=None) -> int:
    """Analytic forward cost for one image under the frozen convention:

    conv = 2*Cout*Cin*kH*kW*H'*W' + Cout*H'*W' (bias adds), relu/add = 1 per
    element, maxpool2x2 = 3 per output element, bilinear = 8 per output
    element, shape plumbing = 0. Loss ops are not part of inference cost.
    """
    return module.count_flops(input_hw)


def load_named(module, named_arrays, prefix="", strict=False):
    """Copy checkpoint arrays into matching parameters; returns loaded names."""
    loaded = []
    params = module.named_params(prefix) if prefix else module.named_params()
    for name, t in params.items():
        if name not in named_arrays:
            if strict:
                raise ConfigError(f"checkpoint is missing parameter {name}")
            continue
        arr = named_arrays[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise ConfigError(
                f"checkpoint shape mismatch for {name}: {arr.shape} vs {t.shape}")
        t.data[...] = arr
        loaded.append(name)
    return loaded
