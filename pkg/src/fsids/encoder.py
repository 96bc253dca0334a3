"""Convolutional encoder producing a local feature map and a global embedding.

Four conv blocks (3x3 conv, batch normalization, relu, 2x2 max pool).  The
local feature map is the relu output of the configured block, taken before
that block's pooling; the global embedding is a linear head on the flattened
final block.  Defaults: channels 32/64/128/128 on 3x32x32 inputs, local map
128x8x8 after block 3, embedding dimension 64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numcore import Tensor, conv2d, matmul, max_pool2x2, relu, reshape, tmean
from .numcore.rng import stream


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    image_size: int = 32
    channels: tuple = (32, 64, 128, 128)
    embedding_dim: int = 64
    local_block: int = 3  # 1-based; local map = this block's relu output
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.image_size % (2 ** len(self.channels)) != 0:
            raise ContractError(
                f"image_size {self.image_size} must be divisible by "
                f"{2 ** len(self.channels)} (one 2x2 pool per block)")
        if not 1 <= self.local_block <= len(self.channels):
            raise ContractError(f"local_block {self.local_block} out of range")

    @property
    def local_map_shape(self) -> tuple:
        side = self.image_size // (2 ** (self.local_block - 1))
        return (self.channels[self.local_block - 1], side, side)

    @property
    def flat_dim(self) -> int:
        side = self.image_size // (2 ** len(self.channels))
        return self.channels[-1] * side * side


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict = field(default_factory=dict)    # name -> Tensor (trainable)
    buffers: dict = field(default_factory=dict)   # name -> ndarray (running stats)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    @property
    def local_map_shape(self) -> tuple:
        return self.config.local_map_shape

    def param_values(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}


def init_encoder(config: EncoderConfig, seed: int) -> EncoderModel:
    """Kaiming fan-in init, reproducible from the seed."""
    params = {}
    buffers = {}
    c_in = config.in_channels
    for i, c_out in enumerate(config.channels, start=1):
        rng = stream(seed, "encoder", i)
        fan_in = c_in * 3 * 3
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3))
        params[f"conv{i}.w"] = Tensor(w.astype(np.float32), requires_grad=True)
        params[f"norm{i}.gamma"] = Tensor(np.ones((1, c_out, 1, 1), np.float32), requires_grad=True)
        params[f"norm{i}.beta"] = Tensor(np.zeros((1, c_out, 1, 1), np.float32), requires_grad=True)
        buffers[f"norm{i}.mean"] = np.zeros((1, c_out, 1, 1), np.float32)
        buffers[f"norm{i}.var"] = np.ones((1, c_out, 1, 1), np.float32)
        c_in = c_out
    rng = stream(seed, "encoder", "head")
    w = rng.normal(0.0, np.sqrt(2.0 / config.flat_dim),
                   size=(config.flat_dim, config.embedding_dim))
    params["head.w"] = Tensor(w.astype(np.float32), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(config.embedding_dim, np.float32), requires_grad=True)
    return EncoderModel(config=config, params=params, buffers=buffers)


def _batch_norm(model: EncoderModel, i: int, x: Tensor, train: bool) -> Tensor:
    cfg = model.config
    gamma = model.params[f"norm{i}.gamma"]
    beta = model.params[f"norm{i}.beta"]
    if train:
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = tmean(centered * centered, axis=(0, 2, 3), keepdims=True)
        m = cfg.bn_momentum
        model.buffers[f"norm{i}.mean"] = (
            (1.0 - m) * model.buffers[f"norm{i}.mean"] + m * mu.data).astype(np.float32)
        model.buffers[f"norm{i}.var"] = (
            (1.0 - m) * model.buffers[f"norm{i}.var"] + m * var.data).astype(np.float32)
        xhat = centered * (var + cfg.bn_eps) ** -0.5
    else:
        mu = Tensor(model.buffers[f"norm{i}.mean"])
        var = Tensor(model.buffers[f"norm{i}.var"])
        xhat = (x - mu) * (var + cfg.bn_eps) ** -0.5
    return gamma * xhat + beta


def encode(model: EncoderModel, batch, train: bool = False):
    """Run the encoder on an NCHW batch.

    Returns (local_map, global_vec): the local feature map Tensor of shape
    (N, C', H', W') and the (N, D) embedding.  train=True uses batch
    statistics for normalization and refreshes the running averages.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
    cfg = model.config
    if x.data.ndim != 4 or x.data.shape[1] != cfg.in_channels \
            or x.data.shape[2] != cfg.image_size or x.data.shape[3] != cfg.image_size:
        raise ContractError(
            f"encoder expects (N, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}) "
            f"input, got {x.data.shape}")
    local_map = None
    for i in range(1, len(cfg.channels) + 1):
        x = conv2d(x, model.params[f"conv{i}.w"], stride=1, padding=1)
        x = _batch_norm(model, i, x, train)
        x = relu(x)
        if i == cfg.local_block:
            local_map = x
        x = max_pool2x2(x)
    flat = reshape(x, (x.data.shape[0], -1))
    global_vec = matmul(flat, model.params["head.w"]) + model.params["head.b"]
    return local_map, global_vec


def embed_images(model: EncoderModel, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Inference-mode embeddings for an image array, batched, as float64."""
    out = []
    for start in range(0, len(images), batch_size):
        _, g = encode(model, images[start:start + batch_size], train=False)
        out.append(g.data.astype(np.float64))
    return np.concatenate(out, axis=0)
