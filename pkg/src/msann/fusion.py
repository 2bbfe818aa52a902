"""Multi-scale visual branch: a K-scale main CNN plus the companion fusion branch.

The main branch maps an image through scales ``S_1..S_K`` to feature maps
``M_1..M_K``.  The fusion branch folds them bottom-up::

    fused[s] = M[s]                                  (s = first fused layer)
    fused[l] = M[l] + F_l(fused[l-1])                l = s+1..K
    F_l      = phi2(phi1(.))

where ``phi1`` is a stride-2 3x3 Conv->BN->ReLU (spatial match) and
``phi2`` a 1x1 Conv->BN->ReLU (channel match).  The visual feature is the
global average pool of ``fused[K]``, so its width never depends on how many
scales are fused.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from . import tensor as T
from .errors import ConfigError, FusionShapeError
from .nn import ConvBNReLU, MaxPoolBNReLU, Module

FUSION_MODES = ("sum", "concat_avgpool", "maxpool_phi1", "none")


@dataclass
class FusionNetConfig:
    input_size: int = 32
    input_channels: int = 3
    spatial: tuple = (16, 8, 4, 2, 1)
    channels: tuple = (8, 16, 32, 64, 128)
    fusion_mode: str = "sum"
    fused_layers: tuple = (1, 2, 3, 4, 5)
    stage_depth: int = 1
    phi1_preserves_channels: bool = True

    def __post_init__(self):
        self.spatial = tuple(int(s) for s in self.spatial)
        self.channels = tuple(int(c) for c in self.channels)
        self.fused_layers = tuple(sorted(int(l) for l in self.fused_layers))

    @property
    def K(self):
        return len(self.spatial)

    @property
    def feature_dim(self):
        if self.fusion_mode == "concat_avgpool":
            return sum(self.channels[l - 1] for l in self.fused_layers)
        return self.channels[-1]

    @classmethod
    def desk(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides):
        base = dict(
            input_size=224,
            spatial=(112, 56, 28, 14, 7),
            channels=(64, 256, 512, 1024, 2048),
        )
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.K < 2:
            raise ConfigError(f"need at least 2 scales, got {self.K}")
        if len(self.channels) != self.K:
            raise ConfigError(f"{len(self.channels)} channel entries for {self.K} scales")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}; expected one of {FUSION_MODES}")
        if self.stage_depth < 1:
            raise ConfigError("stage_depth must be >= 1")
        prev = self.input_size
        for l, s in enumerate(self.spatial, start=1):
            if s < 1 or prev != 2 * s:
                raise ConfigError(f"scale {l}: cannot halve {prev} to {s}")
            prev = s
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel counts must be positive")
        fl = self.fused_layers
        if not fl or fl[-1] != self.K or fl != tuple(range(fl[0], self.K + 1)) or fl[0] < 1:
            raise ConfigError(f"fused layers {fl} must be a contiguous suffix ending at {self.K}")
        return self

    # -- text round trip ------------------------------------------------
    def to_text(self):
        cp = configparser.ConfigParser()
        cp["fusion"] = {
            "input_size": str(self.input_size),
            "input_channels": str(self.input_channels),
            "K": str(self.K),
            "spatial": ",".join(map(str, self.spatial)),
            "channels": ",".join(map(str, self.channels)),
            "fusion_mode": self.fusion_mode,
            "fused_layers": ",".join(map(str, self.fused_layers)),
            "stage_depth": str(self.stage_depth),
            "phi1_preserves_channels": str(self.phi1_preserves_channels).lower(),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_section(cls, section):
        def ints(key, default):
            raw = section.get(key)
            return default if raw is None else tuple(int(v) for v in raw.split(","))

        d = cls()
        try:
            cfg = cls(
                input_size=section.getint("input_size", d.input_size),
                input_channels=section.getint("input_channels", d.input_channels),
                spatial=ints("spatial", d.spatial),
                channels=ints("channels", d.channels),
                fusion_mode=section.get("fusion_mode", d.fusion_mode),
                fused_layers=ints("fused_layers", tuple(range(1, len(ints("spatial", d.spatial)) + 1))),
                stage_depth=section.getint("stage_depth", d.stage_depth),
                phi1_preserves_channels=section.getboolean("phi1_preserves_channels", d.phi1_preserves_channels),
            )
        except ValueError as exc:
            raise ConfigError(f"bad fusion config: {exc}") from exc
        if "K" in section and int(section["K"]) != cfg.K:
            raise ConfigError(f"K={section['K']} but {cfg.K} spatial entries given")
        return cfg

    @classmethod
    def from_text(cls, text):
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if "fusion" not in cp:
            raise ConfigError("missing [fusion] section")
        return cls.from_section(cp["fusion"])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


class ScaleStage(Module):
    """One scale ``S_l``: a stride-2 Conv->BN->ReLU plus optional stride-1 layers."""

    def __init__(self, in_channels, out_channels, in_spatial, depth, rng, bn_decay=0.9997):
        self.layers = [ConvBNReLU(in_channels, out_channels, 3, 2, 1, rng, bn_decay)]
        for _ in range(depth - 1):
            self.layers.append(ConvBNReLU(out_channels, out_channels, 3, 1, 1, rng, bn_decay))
        self.in_shape = (in_channels, in_spatial, in_spatial)
        self.out_shape = (out_channels, in_spatial // 2, in_spatial // 2)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class FusionBlock(Module):
    """``F_l = phi2 o phi1`` mapping ``fused[l-1]`` onto the shape of ``M_l``."""

    def __init__(self, in_channels, out_channels, rng, maxpool=False, preserve_channels=True, bn_decay=0.9997):
        mid = in_channels if (preserve_channels or maxpool) else out_channels
        if maxpool:
            self.phi1 = MaxPoolBNReLU(in_channels, 2, 2, bn_decay)
        else:
            self.phi1 = ConvBNReLU(in_channels, mid, 3, 2, 1, rng, bn_decay)
        self.phi2 = ConvBNReLU(mid, out_channels, 1, 1, 0, rng, bn_decay)

    def forward(self, x):
        return self.phi2(self.phi1(x))


@dataclass
class ForwardTrace:
    """Per-scale maps of one forward pass.

    ``M`` and ``fused`` are keyed by 1-based scale index; ``fused`` is empty
    in ``none`` and ``concat_avgpool`` modes.
    """

    M: dict
    fused: dict = field(default_factory=dict)
    mode: str = "sum"
    fused_layers: tuple = ()
    f_v: object = None


def build_main_branch(config, rng, bn_decay=0.9997):
    config.validate()
    stages, c_in, size = [], config.input_channels, config.input_size
    for c_out in config.channels:
        stages.append(ScaleStage(c_in, c_out, size, config.stage_depth, rng, bn_decay))
        c_in, size = c_out, size // 2
    return stages


def build_fusion_blocks(config, rng, mode=None, bn_decay=0.9997):
    """Blocks keyed by target scale ``l`` for every fused pair ``(l-1, l)``."""
    mode = config.fusion_mode if mode is None else mode
    if mode not in ("sum", "maxpool_phi1"):
        return {}
    first = config.fused_layers[0]
    return {
        l: FusionBlock(
            config.channels[l - 2],
            config.channels[l - 1],
            rng,
            maxpool=(mode == "maxpool_phi1"),
            preserve_channels=config.phi1_preserves_channels,
            bn_decay=bn_decay,
        )
        for l in range(first + 1, config.K + 1)
    }


def main_forward(stages, image):
    maps, x = {}, image
    for l, stage in enumerate(stages, start=1):
        x = stage(x)
        maps[l] = x
    return maps


def fuse_maps(M, blocks, mode, fused_layers):
    """Apply the fusion recursion to precomputed main-branch maps."""
    K = len(M)
    trace = ForwardTrace(M=M, mode=mode, fused_layers=tuple(fused_layers))
    if mode in ("sum", "maxpool_phi1"):
        first = fused_layers[0]
        fused = {first: M[first]}
        for l in range(first + 1, K + 1):
            if l not in blocks:
                raise FusionShapeError(l, M[l].shape, ())
            contribution = blocks[l](fused[l - 1])
            if contribution.shape != M[l].shape:
                raise FusionShapeError(l, M[l].shape, contribution.shape)
            fused[l] = T.add(M[l], contribution)
        trace.fused = fused
    elif mode not in ("concat_avgpool", "none"):
        raise ConfigError(f"unknown fusion mode {mode!r}")
    trace.f_v = visual_feature(trace)
    return trace


def fuse_forward(stages, blocks, image, mode="sum", fused_layers=None):
    M = main_forward(stages, image)
    fused_layers = tuple(range(1, len(M) + 1)) if fused_layers is None else tuple(fused_layers)
    return fuse_maps(M, blocks, mode, fused_layers)


def visual_feature(trace):
    if trace.mode == "concat_avgpool":
        feats = [T.global_avg_pool(trace.M[l]) for l in trace.fused_layers]
        out = feats[0]
        for f in feats[1:]:
            out = T.concat(out, f)
        return out
    terminal = max(trace.M)
    source = trace.fused.get(terminal, trace.M[terminal]) if trace.fused else trace.M[terminal]
    return T.global_avg_pool(source)


class VisualBranch(Module):
    """Main scales plus fusion blocks; ``mode`` may be overridden per call."""

    def __init__(self, config, rng, bn_decay=0.9997):
        config.validate()
        self.config = config
        self.main = build_main_branch(config, rng, bn_decay)
        self.fusion = build_fusion_blocks(config, rng, bn_decay=bn_decay)

    def feature_dim(self, mode=None):
        mode = self.config.fusion_mode if mode is None else mode
        if mode == "concat_avgpool":
            return sum(self.config.channels[l - 1] for l in self.config.fused_layers)
        return self.config.channels[-1]

    def forward(self, image, mode=None):
        mode = self.config.fusion_mode if mode is None else mode
        return fuse_forward(self.main, self.fusion, image, mode, self.config.fused_layers)


def random_image_batch(config, n, rng):
    return T.Tensor(rng.random((n, config.input_channels, config.input_size, config.input_size)))


def expected_shapes(config, n=1):
    """Shape walk of the main branch from the conv output-size formula."""
    shapes, size = [], config.input_size
    for c in config.channels:
        size = T.conv_output_size(size, 3, 2, 1)
        shapes.append((n, c, size, size))
    return shapes

