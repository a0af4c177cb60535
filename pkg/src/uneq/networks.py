"""Toy style-based progressive generator and its mirrored discriminator.

Parameters live in flat ``dict[str, ndarray]`` mappings. Forward functions take
the same mapping with values wrapped as :class:`~uneq.tensor.Tensor` (see
:func:`as_tensors`), so a caller decides per network whether gradients flow.
The architecture (stage count, channel widths, latent size) is read back from
parameter shapes, which is what lets a checkpoint be rendered without its
training config.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class NetworkConfig:
    latent_dim: int = 64
    embed_dim: int = 64
    channels: tuple[int, ...] = (64, 64, 32, 16)
    mapping_layers: int = 3
    # per-pixel noise injection is not implemented; must stay False
    noise: bool = False

    def __post_init__(self):
        if self.noise:
            raise ValueError("noise injection is reserved and not implemented")
        if not self.channels or min(self.channels) < 1:
            raise ValueError(f"channels must be a non-empty list of positive ints, got {self.channels}")
        if self.latent_dim < 1 or self.embed_dim < 1 or self.mapping_layers < 1:
            raise ValueError("latent_dim, embed_dim and mapping_layers must be positive")

    @property
    def max_stage(self) -> int:
        return len(self.channels) - 1


@dataclass(frozen=True)
class GrowthState:
    stage: int = 0
    alpha: float = 1.0

    def __post_init__(self):
        if self.stage < 0:
            raise ValueError(f"stage must be >= 0, got {self.stage}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def resolution(self) -> int:
        return 4 * 2 ** self.stage

    @property
    def fading(self) -> bool:
        return self.stage > 0 and self.alpha < 1.0


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# -- initialisation ----------------------------------------------------------

def _he(rng, shape, fan_in, gain=2.0, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


def init_generator(seed, config: NetworkConfig = NetworkConfig(), max_stage: int | None = None,
                   dtype=np.float32) -> dict[str, np.ndarray]:
    max_stage = config.max_stage if max_stage is None else max_stage
    if not 0 <= max_stage <= config.max_stage:
        raise ValueError(f"max_stage {max_stage} outside channel schedule {config.channels}")
    rng = np.random.default_rng(seed)
    L, ch = config.latent_dim, config.channels
    p: dict[str, np.ndarray] = {}
    for i in range(config.mapping_layers):
        p[f"mapping.{i}.weight"] = _he(rng, (L, L), L, dtype=dtype)
        p[f"mapping.{i}.bias"] = np.zeros(L, dtype)
    p["const"] = rng.standard_normal((1, ch[0], 4, 4)).astype(dtype)
    for s in range(max_stage + 1):
        cin = ch[s - 1] if s > 0 else ch[0]
        for k, (a, b) in enumerate([(cin, ch[s]), (ch[s], ch[s])], start=1):
            p[f"block{s}.conv{k}.weight"] = _he(rng, (b, a, 3, 3), a * 9, dtype=dtype)
            p[f"block{s}.conv{k}.bias"] = np.zeros(b, dtype)
            for part in ("scale", "shift"):
                p[f"block{s}.style{k}.{part}.weight"] = _he(rng, (L, b), L, gain=1.0, dtype=dtype)
                p[f"block{s}.style{k}.{part}.bias"] = np.zeros(b, dtype)
        p[f"torgb{s}.weight"] = _he(rng, (3, ch[s]), ch[s], gain=1.0, dtype=dtype)
        p[f"torgb{s}.bias"] = np.zeros(3, dtype)
    return p


def init_discriminator(seed, config: NetworkConfig = NetworkConfig(), max_stage: int | None = None,
                       dtype=np.float32) -> dict[str, np.ndarray]:
    max_stage = config.max_stage if max_stage is None else max_stage
    if not 0 <= max_stage <= config.max_stage:
        raise ValueError(f"max_stage {max_stage} outside channel schedule {config.channels}")
    rng = np.random.default_rng(seed)
    ch, E = config.channels, config.embed_dim
    p: dict[str, np.ndarray] = {}
    for s in range(max_stage + 1):
        p[f"fromrgb{s}.weight"] = _he(rng, (ch[s], 3), 3, dtype=dtype)
        p[f"fromrgb{s}.bias"] = np.zeros(ch[s], dtype)
        cout = ch[s - 1] if s > 0 else ch[0]
        p[f"block{s}.conv1.weight"] = _he(rng, (ch[s], ch[s], 3, 3), ch[s] * 9, dtype=dtype)
        p[f"block{s}.conv1.bias"] = np.zeros(ch[s], dtype)
        if s > 0:
            p[f"block{s}.conv2.weight"] = _he(rng, (cout, ch[s], 3, 3), ch[s] * 9, dtype=dtype)
            p[f"block{s}.conv2.bias"] = np.zeros(cout, dtype)
    flat = ch[0] * 16
    p["head.embed.weight"] = _he(rng, (flat, E), flat, dtype=dtype)
    p["head.embed.bias"] = np.zeros(E, dtype)
    p["head.logit.weight"] = _he(rng, (E, 1), E, gain=1.0, dtype=dtype)
    p["head.logit.bias"] = np.zeros(1, dtype)
    return p


def init_params(seed, config: NetworkConfig = NetworkConfig(), kind: str = "generator",
                max_stage: int | None = None, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-initialised weights, zero biases, N(0, 1) learned constant."""
    if kind == "generator":
        return init_generator(seed, config, max_stage, dtype)
    if kind == "discriminator":
        return init_discriminator(seed, config, max_stage, dtype)
    raise ValueError(f"unknown network kind {kind!r}")


def num_stages(params) -> int:
    n = 0
    while f"block{n}.conv1.weight" in params:
        n += 1
    return n


def latent_dim(params) -> int:
    return params["mapping.0.weight"].shape[0]


# -- forward passes ------------------------------------------------------

def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = T.matmul(x, w)
    return y + T.expand(T.reshape(b, (1, -1)), y.shape)


def _bias_map(v: Tensor, like: Tensor) -> Tensor:
    B, C = v.shape
    return T.expand(T.reshape(v, (B, C, 1, 1)), like.shape)


def mapping_forward(z: Tensor, params: dict[str, Tensor]) -> Tensor:
    """z [b, L] -> style w [b, L]."""
    x = z
    i = 0
    while f"mapping.{i}.weight" in params:
        x = T.leaky_relu(_dense(x, params[f"mapping.{i}.weight"], params[f"mapping.{i}.bias"]), LEAKY_SLOPE)
        i += 1
    return x


def _style_block(x: Tensor, w: Tensor, params, s: int) -> Tensor:
    if s > 0:
        x = T.upsample_nearest2x(x)
    for k in (1, 2):
        pre = f"block{s}.conv{k}"
        x = T.conv2d(x, params[f"{pre}.weight"], params[f"{pre}.bias"])
        st = f"block{s}.style{k}"
        scale = _dense(w, params[f"{st}.scale.weight"], params[f"{st}.scale.bias"]) + 1.0
        shift = _dense(w, params[f"{st}.shift.weight"], params[f"{st}.shift.bias"])
        x = x * _bias_map(scale, x) + _bias_map(shift, x)
        x = T.pixel_norm(T.leaky_relu(x, LEAKY_SLOPE))
    return x


def _to_rgb(x: Tensor, params, s: int) -> Tensor:
    return T.conv1x1(x, params[f"torgb{s}.weight"], params[f"torgb{s}.bias"])


def synthesis_forward(w: Tensor, params: dict[str, Tensor], growth: GrowthState) -> Tensor:
    """Style batch [b, L] -> images [b, 3, R, R] in [-1, 1]."""
    stages = num_stages(params)
    if growth.stage >= stages:
        raise ValueError(f"stage {growth.stage} exceeds generator capacity ({stages - 1})")
    B = w.shape[0]
    const = params["const"]
    x = T.expand(const, (B,) + const.shape[1:])
    prev = None
    for s in range(growth.stage + 1):
        prev = x
        x = _style_block(x, w, params, s)
    rgb = _to_rgb(x, params, growth.stage)
    if growth.fading:
        old = T.upsample_nearest2x(_to_rgb(prev, params, growth.stage - 1))
        rgb = rgb * growth.alpha + old * (1.0 - growth.alpha)
    return T.tanh(rgb)


def generate(z: Tensor, params: dict[str, Tensor], growth: GrowthState) -> Tensor:
    return synthesis_forward(mapping_forward(z, params), params, growth)


def _from_rgb(img: Tensor, params, s: int) -> Tensor:
    return T.leaky_relu(T.conv1x1(img, params[f"fromrgb{s}.weight"], params[f"fromrgb{s}.bias"]), LEAKY_SLOPE)


def _down_block(x: Tensor, params, s: int) -> Tensor:
    x = T.leaky_relu(T.conv2d(x, params[f"block{s}.conv1.weight"], params[f"block{s}.conv1.bias"]), LEAKY_SLOPE)
    x = T.leaky_relu(T.conv2d(x, params[f"block{s}.conv2.weight"], params[f"block{s}.conv2.bias"]), LEAKY_SLOPE)
    return T.avgpool2x(x)


def discriminator_forward(images: Tensor, params: dict[str, Tensor],
                          growth: GrowthState) -> tuple[Tensor, Tensor]:
    """Images [b, 3, R, R] -> (raw logit [b, 1], embedding [b, E])."""
    s = growth.stage
    if s >= num_stages(params):
        raise ValueError(f"stage {s} exceeds discriminator capacity ({num_stages(params) - 1})")
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (growth.resolution,) * 2:
        raise ValueError(f"expected images [b, 3, {growth.resolution}, {growth.resolution}], got {images.shape}")
    x = _from_rgb(images, params, s)
    if s > 0:
        x = _down_block(x, params, s)
        if growth.fading:
            skip = _from_rgb(T.avgpool2x(images), params, s - 1)
            x = x * growth.alpha + skip * (1.0 - growth.alpha)
        for t in range(s - 1, 0, -1):
            x = _down_block(x, params, t)
    x = T.leaky_relu(T.conv2d(x, params["block0.conv1.weight"], params["block0.conv1.bias"]), LEAKY_SLOPE)
    flat = T.reshape(x, (x.shape[0], -1))
    emb = T.leaky_relu(_dense(flat, params["head.embed.weight"], params["head.embed.bias"]), LEAKY_SLOPE)
    logit = _dense(emb, params["head.logit.weight"], params["head.logit.bias"])
    return logit, emb
