"""
Unimodal encoders: temporal convolution, global/local multi-head self-attention,
per-modality score regressors and the top-K MIL objective
"""

import logging
import math
from typing import Optional

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.config import EncoderConfig
from src.errors import ConfigError, ShapeError
from src.nn import LayerNorm, Linear, Module

logger = logging.getLogger(__name__)

# re-exported so callers can treat top-K pooling as part of the MIL toolkit
topk_mean = ad.topk_mean


def topk_count(length) -> np.ndarray:
    """K = floor(L / 16) + 1, elementwise for an int or an array of lengths"""
    return np.asarray(length, dtype=np.int64) // 16 + 1


def _mask(valid: Optional[np.ndarray], shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape[:-1], dtype=bool)
    return np.asarray(valid, dtype=bool)


def _zero_padding(x: Tensor, valid: Optional[np.ndarray]) -> Tensor:
    if valid is None:
        return x
    return x * np.asarray(valid, dtype=x.data.dtype)[..., None]


class ConvReduce(Module):
    """Single 1D convolution mapping raw features (B, T, D_in) to (B, T, D_out)"""

    def __init__(self, d_in: int, d_out: int, kernel: int, rng: np.random.Generator):
        self.weight = ad.uniform_fan_in(rng, (kernel, d_in, d_out), kernel * d_in, name="weight")
        self.bias = ad.zeros_parameter((d_out,), name="bias")

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError("conv_reduce", [x.shape, self.weight.shape],
                             f"conv_reduce: expected {self.weight.shape[1]} input dims, got {x.shape[-1]}")
        return ad.conv1d(x, self.weight, self.bias)


def attention_mask(T: int, heads: int, window: int, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Boolean (B, H, T, T) mask for GL-MHSA.

    The first heads // 2 heads see every real timestep; the others only see
    |i - j| <= window // 2. Padded keys are hidden from every head. A row left
    with no visible key falls back to attending to itself.
    """
    key_valid = np.ones((1, T), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    idx = np.arange(T)
    band = np.abs(idx[:, None] - idx[None, :]) <= window // 2
    local = np.arange(heads) >= heads // 2
    mask = np.where(local[None, :, None, None], band[None, None], True)
    mask = mask & key_valid[:, None, None, :]
    empty = ~mask.any(axis=-1, keepdims=True)
    return mask | (empty & np.eye(T, dtype=bool))


class GlMhsaLayer(Module):
    """
    Post-norm transformer block with global and local attention heads.

        x' = LN(GL-MHSA(x)) + x
        y  = LN(FFN(x')) + x'
    """

    def __init__(self, d: int, heads: int, window: int, ffn_multiplier: int, rng: np.random.Generator):
        if d % heads:
            raise ConfigError("encoder.heads", f"{heads} heads do not divide dim {d}")
        if window < 1 or window % 2 == 0:
            raise ConfigError("encoder.local_window", "must be a positive odd integer")
        self.heads = heads
        self.window = window
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.attn_norm = LayerNorm(d)
        self.ffn_in = Linear(d, d * ffn_multiplier, rng)
        self.ffn_out = Linear(d * ffn_multiplier, d, rng)
        self.ffn_norm = LayerNorm(d)

    def _split(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        return ad.transpose(ad.reshape(x, (B, T, self.heads, D // self.heads)), (0, 2, 1, 3))

    def attention(self, z: Tensor, valid: Optional[np.ndarray] = None):
        """Returns (attention output (B, T, D), attention weights (B, H, T, T))"""
        B, T, D = z.shape
        q, k, v = self._split(self.query(z)), self._split(self.key(z)), self._split(self.value(z))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) / math.sqrt(D // self.heads)
        weights = ad.softmax(scores, axis=-1, mask=attention_mask(T, self.heads, self.window, valid))
        context = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, T, D))
        return self.out(context), weights

    def forward(self, z: Tensor, valid: Optional[np.ndarray] = None) -> Tensor:
        if z.ndim != 3:
            raise ShapeError("gl_mhsa_layer", [z.shape], "gl_mhsa_layer expects (B, T, D)")
        attended, _ = self.attention(z, valid)
        h = self.attn_norm(attended) + z
        ffn = self.ffn_out(ad.gelu(self.ffn_in(h)))
        return self.ffn_norm(ffn) + h


class ModalityEncoder(Module):
    """Conv reduction followed by `layers` GL-MHSA blocks; padded steps come out as zeros"""

    def __init__(self, modality: str, d_in: int, d_out: int, cfg: EncoderConfig, rng: np.random.Generator):
        self.modality = modality
        self.d_in = d_in
        self.d_out = d_out
        self.conv = ConvReduce(d_in, d_out, cfg.conv_kernel, rng)
        self.blocks = [GlMhsaLayer(d_out, cfg.heads, cfg.local_window, cfg.ffn_multiplier, rng)
                       for _ in range(cfg.layers)]

    def forward(self, x: Tensor, valid: Optional[np.ndarray] = None) -> Tensor:
        z = _zero_padding(self.conv(x), valid)
        for block in self.blocks:
            z = block(z, valid)
        return _zero_padding(z, valid) if self.blocks else z


class Regressor(Module):
    """Three-layer MLP D -> D/2 -> D/4 -> 1 with GELU, sigmoid scores per timestep"""

    def __init__(self, d: int, rng: np.random.Generator):
        h1, h2 = max(1, d // 2), max(1, d // 4)
        self.fc1 = Linear(d, h1, rng)
        self.fc2 = Linear(h1, h2, rng)
        self.fc3 = Linear(h2, 1, rng)

    def zero_(self) -> "Regressor":
        for layer in (self.fc1, self.fc2, self.fc3):
            layer.zero_()
        return self

    def forward(self, z: Tensor) -> Tensor:
        h = ad.gelu(self.fc1(z))
        h = ad.gelu(self.fc2(h))
        logits = self.fc3(h)
        return ad.sigmoid(ad.reshape(logits, logits.shape[:-1]))


def conv_reduce(x: Tensor, module: ConvReduce) -> Tensor:
    return module(x)


def gl_mhsa_layer(z: Tensor, layer: GlMhsaLayer, valid: Optional[np.ndarray] = None) -> Tensor:
    return layer(z, valid)


def encode_modality(x: Tensor, encoder: ModalityEncoder, valid: Optional[np.ndarray] = None) -> Tensor:
    return encoder(x, valid)


def regress_scores(z: Tensor, regressor: Regressor) -> Tensor:
    return regressor(z)


def mil_loss(s_bar: Tensor, labels, eps: float = 1e-6) -> Tensor:
    """Mean binary cross-entropy of clamped bag scores against video labels"""
    y = np.asarray(labels, dtype=s_bar.data.dtype).reshape(s_bar.shape)
    c = ad.clamp(s_bar, eps, 1.0 - eps)
    bce = -(ad.log(c) * y + ad.log(1.0 - c) * (1.0 - y))
    return ad.mean(bce)


def mil_objective(scores: Tensor, labels, valid: Optional[np.ndarray] = None, eps: float = 1e-6) -> Tensor:
    """
    Top-K MIL loss for a batch of score sequences.

    Args:
        scores: (B, T) per-timestep scores
        labels: (B,) video-level labels
        valid: Optional (B, T) mask; each bag's K follows its real length
        eps: Clamp margin for the logarithms

    Returns:
        Scalar tensor, the mean over bags
    """
    mask = _mask(valid, scores.shape + (1,))
    k = topk_count(mask.sum(axis=-1))
    return mil_loss(ad.topk_mean(scores, k, valid=mask), labels, eps)
