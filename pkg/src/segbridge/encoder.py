"""Image encoder: strided patch convolutions, pixel shuffle, mask features.

The token path turns an [h, w, 3] image into a coarse grid of feature
vectors: a stack of non-overlapping strided convolutions (patch
embeddings), a space-to-depth pixel shuffle that trades resolution for
channels, and a linear projection back to the model width. Because every
convolution kernel equals its stride, the whole path is a reshape /
permute / matmul composition and differentiates through the shared
tensor engine.

A second branch produces per-pixel mask features at (near) image
resolution from color plus fixed Fourier position encodings; object
masks are decoded against these, so mask quality is not limited by the
coarse token grid.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError

_STAGE_FACTORS = {2: (2,), 4: (2, 2), 8: (4, 2), 16: (4, 4), 32: (4, 4, 2), 64: (4, 4, 4)}


@dataclass
class Image:
    """Float RGB raster in [0, 1], shape [h, w, 3]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise DimensionError(f"image must be [h, w, 3], got {self.data.shape}")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ConfigError("image values must lie in [0, 1]")

    @property
    def h(self):
        return self.data.shape[0]

    @property
    def w(self):
        return self.data.shape[1]


@dataclass
class FeatureMap:
    """Token-grid features plus fine-grid mask features for one image.

    ``data`` holds the [h*w, c] token grid in row-major cell order;
    ``mask_data`` holds [mask_h*mask_w, mask_c] pixel features used only
    for decoding masks. ``image_h/image_w`` record the source resolution
    so prompts given in pixel coordinates can be mapped onto the grid.
    """

    h: int
    w: int
    c: int
    data: Tensor
    image_h: int = 0
    image_w: int = 0
    mask_h: int = 0
    mask_w: int = 0
    mask_c: int = 0
    mask_data: Tensor | None = None

    def __post_init__(self):
        if self.data.shape != (self.h * self.w, self.c):
            raise DimensionError(f"feature data {self.data.shape} does not match grid {self.h}x{self.w}x{self.c}")


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_stride: int = 4
    shuffle_factor: int = 2
    channels: tuple = (32, 64)
    feature_dim: int = 64
    mask_stride: int = 1
    mask_hidden: int = 64
    mask_channels: int = 32
    fourier_freqs: int = 3

    def __post_init__(self):
        if self.patch_stride not in _STAGE_FACTORS:
            raise ConfigError(f"patch_stride must be one of {sorted(_STAGE_FACTORS)}, got {self.patch_stride}")
        stages = _STAGE_FACTORS[self.patch_stride]
        if len(self.channels) != len(stages):
            raise ConfigError(f"channels {self.channels} must list one width per conv stage {stages}")
        if self.image_size % self.total_downsample != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by total downsample {self.total_downsample}")
        if self.image_size % self.mask_stride != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by mask_stride {self.mask_stride}")

    @property
    def stage_strides(self):
        return _STAGE_FACTORS[self.patch_stride]

    @property
    def total_downsample(self):
        return self.patch_stride * self.shuffle_factor

    @property
    def grid_size(self):
        return self.image_size // self.total_downsample

    @property
    def token_count(self):
        return self.grid_size * self.grid_size


# -- space-to-depth -----------------------------------------------------------


def space_to_depth(x: Tensor, h: int, w: int, r: int) -> Tensor:
    """[h*w, c] -> [(h/r)*(w/r), r*r*c]; block channels ordered (dy, dx, c)."""
    if h % r or w % r:
        raise DimensionError(f"grid {h}x{w} not divisible by shuffle factor {r}")
    c = x.shape[1]
    y = ag.reshape(x, (h // r, r, w // r, r, c))
    y = ag.permute(y, (0, 2, 1, 3, 4))
    return ag.reshape(y, ((h // r) * (w // r), r * r * c))


def depth_to_space(x: Tensor, h: int, w: int, r: int) -> Tensor:
    """Inverse of space_to_depth for an output grid of h x w cells."""
    c = x.shape[1] // (r * r)
    if x.shape[1] != r * r * c:
        raise DimensionError(f"channel count {x.shape[1]} not divisible by {r * r}")
    y = ag.reshape(x, (h, w, r, r, c))
    y = ag.permute(y, (0, 2, 1, 3, 4))
    return ag.reshape(y, (h * r * w * r, c))


def pixel_shuffle_down(f: FeatureMap, r: int) -> FeatureMap:
    data = space_to_depth(f.data, f.h, f.w, r)
    return FeatureMap(f.h // r, f.w // r, f.c * r * r, data,
                      image_h=f.image_h, image_w=f.image_w,
                      mask_h=f.mask_h, mask_w=f.mask_w, mask_c=f.mask_c, mask_data=f.mask_data)


def pixel_shuffle_up(f: FeatureMap, r: int) -> FeatureMap:
    data = depth_to_space(f.data, f.h, f.w, r)
    return FeatureMap(f.h * r, f.w * r, f.c // (r * r), data,
                      image_h=f.image_h, image_w=f.image_w,
                      mask_h=f.mask_h, mask_w=f.mask_w, mask_c=f.mask_c, mask_data=f.mask_data)


# -- positional features for the mask branch ----------------------------------


def _position_features(h: int, w: int, freqs: int) -> np.ndarray:
    ys = (np.arange(h, dtype=np.float32) + 0.5) / h
    xs = (np.arange(w, dtype=np.float32) + 0.5) / w
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    feats = [gx.reshape(-1, 1), gy.reshape(-1, 1)]
    for j in range(freqs):
        f = (2.0 ** j) * np.pi
        for grid in (gx, gy):
            feats.append(np.sin(f * grid).reshape(-1, 1))
            feats.append(np.cos(f * grid).reshape(-1, 1))
    return np.concatenate(feats, axis=1).astype(np.float32)


class TokenEncoder:
    """Trainable-but-usually-frozen perception front end."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self._params = OrderedDict()
        self._pos_cache = {}
        cin = 3
        for i, (stride, cout) in enumerate(zip(config.stage_strides, config.channels)):
            fan_in = stride * stride * cin
            self._params[f"enc.stage{i}.w"] = Tensor(
                rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, cout)).astype(np.float32), requires_grad=True)
            self._params[f"enc.stage{i}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
            cin = cout
        r = config.shuffle_factor
        proj_in = cin * r * r
        self._params["enc.proj.w"] = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / proj_in), size=(proj_in, config.feature_dim)).astype(np.float32),
            requires_grad=True)
        self._params["enc.proj.b"] = Tensor(np.zeros(config.feature_dim, dtype=np.float32), requires_grad=True)
        pos_dim = 2 + 4 * config.fourier_freqs
        m_in = 3 + pos_dim
        self._params["enc.mask.w1"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / m_in), size=(m_in, config.mask_hidden)).astype(np.float32),
            requires_grad=True)
        self._params["enc.mask.b1"] = Tensor(np.zeros(config.mask_hidden, dtype=np.float32), requires_grad=True)
        self._params["enc.mask.w2"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / config.mask_hidden),
                       size=(config.mask_hidden, config.mask_channels)).astype(np.float32),
            requires_grad=True)
        self._params["enc.mask.b2"] = Tensor(np.zeros(config.mask_channels, dtype=np.float32), requires_grad=True)

    def params(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def set_frozen(self, frozen: bool = True):
        for p in self._params.values():
            p.requires_grad = not frozen

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self._params.values())

    def _mask_inputs(self, image_data: np.ndarray) -> np.ndarray:
        cfg = self.config
        h, w = image_data.shape[:2]
        s = cfg.mask_stride
        mh, mw = h // s, w // s
        rgb = image_data.reshape(mh, s, mw, s, 3).mean(axis=(1, 3)).reshape(-1, 3)
        key = (mh, mw)
        if key not in self._pos_cache:
            self._pos_cache[key] = _position_features(mh, mw, cfg.fourier_freqs)
        return np.concatenate([rgb, self._pos_cache[key]], axis=1).astype(np.float32)

    def encode(self, image: Image) -> FeatureMap:
        cfg = self.config
        h, w = image.h, image.w
        if h % cfg.total_downsample or w % cfg.total_downsample:
            raise DimensionError(f"image {h}x{w} not divisible by total downsample {cfg.total_downsample}")
        p = self._params
        x = Tensor(image.data.reshape(h * w, 3))
        gh, gw = h, w
        for i, stride in enumerate(cfg.stage_strides):
            x = space_to_depth(x, gh, gw, stride)
            gh, gw = gh // stride, gw // stride
            x = ag.add(ag.matmul(x, p[f"enc.stage{i}.w"]), p[f"enc.stage{i}.b"])
            x = ag.gelu(x)
        r = cfg.shuffle_factor
        x = space_to_depth(x, gh, gw, r)
        gh, gw = gh // r, gw // r
        x = ag.add(ag.matmul(x, p["enc.proj.w"]), p["enc.proj.b"])

        m_in = Tensor(self._mask_inputs(image.data))
        m = ag.gelu(ag.add(ag.matmul(m_in, p["enc.mask.w1"]), p["enc.mask.b1"]))
        m = ag.add(ag.matmul(m, p["enc.mask.w2"]), p["enc.mask.b2"])

        return FeatureMap(gh, gw, cfg.feature_dim, x,
                          image_h=h, image_w=w,
                          mask_h=h // cfg.mask_stride, mask_w=w // cfg.mask_stride,
                          mask_c=cfg.mask_channels, mask_data=m)
