"""Reference forward pass of the scale-aware relay layer.

The layer sits between a backbone's feature pyramid and the neck. For each
level ``l`` with features ``x_l``:

    out_l = x_l * A_c(x_{l+1}) * A_s(x_l) + x_l

``A_c`` is channel attention computed from the next coarser (more semantic)
level: global average pool, 1x1 projection to ``C_l`` channels, a ``C -> C/r
-> C`` ReLU bottleneck and a sigmoid. ``A_s`` is spatial attention on the
level itself: channel-wise mean and max planes, a ``k x k`` convolution and a
sigmoid. The coarsest level has no coarser neighbour and attends to itself
without a projection.

This is an interpretation assembled from the method's description; the
exact block wiring is not published in text form. No normalisation layers,
no biases, forward only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .kernels import conv2d_same

DEFAULT_REDUCTION = 16
DEFAULT_KERNEL_SIZE = 7


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or min(d.shape) < 1:
            raise ShapeError(f"feature map must be (C, H, W) with every dim >= 1, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ShapeError("feature map contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Pyramid:
    levels: tuple[FeatureMap, ...]

    def __post_init__(self):
        levels = tuple(lv if isinstance(lv, FeatureMap) else FeatureMap(lv) for lv in self.levels)
        if len(levels) < 2:
            raise ShapeError(f"pyramid needs at least 2 levels, got {len(levels)}")
        for fine, coarse in zip(levels, levels[1:]):
            if fine.height != 2 * coarse.height or fine.width != 2 * coarse.width:
                raise ShapeError(
                    f"level {coarse.shape} is not a 2x downsample of {fine.shape}"
                )
        object.__setattr__(self, "levels", levels)

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [lv.shape for lv in self.levels]


@dataclass(frozen=True)
class LevelParams:
    fc1: np.ndarray  # (C/r, C)
    fc2: np.ndarray  # (C, C/r)
    spatial: np.ndarray  # (2, k, k)
    proj: np.ndarray | None  # (C, C_next); None on the coarsest level


@dataclass(frozen=True)
class RelayParams:
    levels: tuple[LevelParams, ...]
    reduction: int
    seed: int | None = None

    @property
    def channels(self) -> list[int]:
        return [lp.fc1.shape[1] for lp in self.levels]

    def zeros_like(self) -> "RelayParams":
        return RelayParams(
            levels=tuple(
                LevelParams(
                    fc1=np.zeros_like(lp.fc1),
                    fc2=np.zeros_like(lp.fc2),
                    spatial=np.zeros_like(lp.spatial),
                    proj=None if lp.proj is None else np.zeros_like(lp.proj),
                )
                for lp in self.levels
            ),
            reduction=self.reduction,
            seed=None,
        )


def init_relay_params(
    channels: Sequence[int],
    reduction: int = DEFAULT_REDUCTION,
    seed: int = 0,
    kernel_size: int = DEFAULT_KERNEL_SIZE,
) -> RelayParams:
    """Uniform ``[-k, k]`` init with ``k = 1/sqrt(fan_in)``, seeded."""
    channels = [int(c) for c in channels]
    if len(channels) < 2 or min(channels) < 1:
        raise ConfigError(f"need >= 2 positive channel counts, got {channels}")
    if reduction < 1:
        raise ConfigError(f"reduction ratio must be >= 1, got {reduction}")
    bad = [c for c in channels if c % reduction]
    if bad:
        raise ConfigError(f"reduction ratio {reduction} does not divide channel counts {bad}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"spatial kernel size must be odd, got {kernel_size}")

    # one child stream per level so adding a level leaves the others unchanged
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(channels))]

    def uniform(rng, shape, fan_in):
        k = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-k, k, size=shape)

    levels = []
    for i, (c, rng) in enumerate(zip(channels, streams)):
        mid = c // reduction
        fc1 = uniform(rng, (mid, c), c)
        fc2 = uniform(rng, (c, mid), mid)
        spatial = uniform(rng, (2, kernel_size, kernel_size), 2 * kernel_size * kernel_size)
        proj = None
        if i + 1 < len(channels):
            proj = uniform(rng, (c, channels[i + 1]), channels[i + 1])
        levels.append(LevelParams(fc1=fc1, fc2=fc2, spatial=spatial, proj=proj))
    return RelayParams(levels=tuple(levels), reduction=reduction, seed=seed)


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def global_avg_pool(f: FeatureMap | np.ndarray) -> np.ndarray:
    data = f.data if isinstance(f, FeatureMap) else np.asarray(f, dtype=np.float64)
    return data.mean(axis=(1, 2))


def channel_attention(semantic: FeatureMap, params: LevelParams, target_channels: int) -> np.ndarray:
    """Per-channel gate in (0, 1) for a level with ``target_channels`` channels."""
    v = global_avg_pool(semantic)
    if params.proj is not None:
        if params.proj.shape != (target_channels, v.shape[0]):
            raise ShapeError(
                f"projection {params.proj.shape} cannot map {v.shape[0]} -> {target_channels} channels"
            )
        v = params.proj @ v
    elif v.shape[0] != target_channels:
        raise ShapeError(f"semantic map has {v.shape[0]} channels, expected {target_channels}")
    if params.fc1.shape[1] != target_channels or params.fc2.shape[0] != target_channels:
        raise ShapeError(f"bottleneck {params.fc1.shape}/{params.fc2.shape} does not fit {target_channels} channels")
    hidden = np.maximum(params.fc1 @ v, 0.0)
    return _sigmoid(params.fc2 @ hidden)


def spatial_attention(f: FeatureMap, params: LevelParams) -> np.ndarray:
    """``(H, W)`` gate in (0, 1) from mean/max channel pooling."""
    planes = np.stack([f.data.mean(axis=0), f.data.max(axis=0)])
    return _sigmoid(conv2d_same(planes, params.spatial))


def relay_level(x: FeatureMap, semantic: FeatureMap, params: LevelParams):
    """Refine one level; returns ``(out, channel_gate, spatial_gate)``."""
    a_c = channel_attention(semantic, params, x.channels)
    a_s = spatial_attention(x, params)
    out = x.data * a_c[:, None, None] * a_s[None, :, :] + x.data
    return out, a_c, a_s


def relay_forward(p: Pyramid, params: RelayParams, return_attention: bool = False):
    """Apply the relay to every pyramid level; shapes are preserved.

    With ``return_attention`` also returns the per-level
    ``(channel_gate, spatial_gate)`` tuples.
    """
    if len(params.levels) != len(p.levels):
        raise ShapeError(f"params cover {len(params.levels)} levels, pyramid has {len(p.levels)}")
    outs = []
    gates = []
    n = len(p.levels)
    for i, (x, lp) in enumerate(zip(p.levels, params.levels)):
        semantic = p.levels[i + 1] if i + 1 < n else x
        if (lp.proj is None) != (i + 1 == n):
            raise ShapeError(f"level {i}: projection weights present only below the top level")
        out, a_c, a_s = relay_level(x, semantic, lp)
        outs.append(FeatureMap(out))
        gates.append((a_c, a_s))
    result = Pyramid(tuple(outs))
    if return_attention:
        return result, gates
    return result


def random_pyramid(shapes: Sequence[tuple[int, int, int]], seed: int = 0, scale: float = 1.0) -> Pyramid:
    """Pyramid with standard-normal features, for demos and tests."""
    rng = np.random.default_rng(seed)
    return Pyramid(tuple(FeatureMap(scale * rng.standard_normal(s)) for s in shapes))
