"""
Fusion detector: concatenation of aligned features, Linear + dilated TCN encoder,
final regressor, multimodal MIL and the triplet loss over top/bottom-k features
"""

import logging
from typing import Optional, Sequence

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.config import FusionConfig
from src.encoders import Regressor, mil_objective, topk_count
from src.errors import ShapeError
from src.nn import Linear, Module

logger = logging.getLogger(__name__)


def fuse(zh_a: Tensor, z_r: Tensor, zh_f: Tensor) -> Tensor:
    """Concatenate along features in the order audio, RGB, flow"""
    if not (zh_a.shape[:-1] == z_r.shape[:-1] == zh_f.shape[:-1]):
        raise ShapeError("fuse", [zh_a.shape, z_r.shape, zh_f.shape])
    return ad.concat([zh_a, z_r, zh_f], axis=-1)


class TemporalBlock(Module):
    """h + ReLU(conv_d(h)), non-causal, same padding"""

    def __init__(self, channels: int, kernel: int, dilation: int, rng: np.random.Generator):
        self.dilation = dilation
        self.weight = ad.uniform_fan_in(rng, (kernel, channels, channels), kernel * channels, name="weight")
        self.bias = ad.zeros_parameter((channels,), name="bias")

    def zero_(self) -> "TemporalBlock":
        self.weight.data = np.zeros_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)
        return self

    def forward(self, h: Tensor) -> Tensor:
        return h + ad.relu(ad.conv1d(h, self.weight, self.bias, dilation=self.dilation))


class FusionEncoder(Module):
    """Two linear layers (d_in -> hidden -> out, GELU between) then a residual TCN"""

    def __init__(self, d_in: int, cfg: FusionConfig, rng: np.random.Generator):
        self.d_in = d_in
        self.fc1 = Linear(d_in, cfg.hidden_dim, rng)
        self.fc2 = Linear(cfg.hidden_dim, cfg.out_dim, rng)
        self.tcn = [TemporalBlock(cfg.out_dim, cfg.tcn_kernel, d, rng) for d in cfg.tcn_dilations]

    @property
    def receptive_radius(self) -> int:
        return sum(block.dilation * (block.weight.shape[0] - 1) // 2 for block in self.tcn)

    def forward(self, z: Tensor, valid: Optional[np.ndarray] = None) -> Tensor:
        if z.shape[-1] != self.d_in:
            raise ShapeError("multimodal_encode", [z.shape, (self.d_in,)])
        mask = None if valid is None else np.asarray(valid, dtype=z.data.dtype)[..., None]
        h = self.fc2(ad.gelu(self.fc1(z)))
        for block in self.tcn:
            if mask is not None:
                h = h * mask
            h = block(h)
        return h if mask is None else h * mask


def multimodal_encode(z_raf: Tensor, encoder: FusionEncoder, valid: Optional[np.ndarray] = None) -> Tensor:
    return encoder(z_raf, valid)


def final_scores(h: Tensor, regressor: Regressor) -> Tensor:
    return regressor(h)


def multimodal_mil(s_raf: Tensor, labels, valid: Optional[np.ndarray] = None, eps: float = 1e-6) -> Tensor:
    return mil_objective(s_raf, labels, valid, eps)


def _ranked(scores: np.ndarray, mask: np.ndarray, descending: bool) -> np.ndarray:
    keyed = np.where(mask, -scores if descending else scores, np.inf)
    return np.argsort(keyed, kind="stable")


def selection_weights(scores: np.ndarray, labels: Sequence[int], valid: Optional[np.ndarray] = None,
                      k=None):
    """
    Averaging weights (B, T) for the anchor, positive and negative vectors.

    anchor: mean over normal bags of the mean of their top-k features.
    positive: mean over anomalous bags of their bottom-k features.
    negative: mean over anomalous bags of their top-k features.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.ones_like(scores, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    lengths = mask.sum(axis=1)
    ks = topk_count(lengths) if k is None else np.broadcast_to(np.asarray(k, dtype=np.int64), lengths.shape)
    if np.any(ks > lengths) or np.any(ks < 1):
        raise ValueError(f"triplet k out of range: k={ks.tolist()} for lengths {lengths.tolist()}")
    normal, anomalous = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
    anchor, positive, negative = (np.zeros_like(scores) for _ in range(3))
    for b in normal:
        top = _ranked(scores[b], mask[b], descending=True)[:ks[b]]
        anchor[b, top] = 1.0 / (ks[b] * len(normal))
    for b in anomalous:
        top = _ranked(scores[b], mask[b], descending=True)[:ks[b]]
        bottom = _ranked(scores[b], mask[b], descending=False)[:ks[b]]
        negative[b, top] = 1.0 / (ks[b] * len(anomalous))
        positive[b, bottom] = 1.0 / (ks[b] * len(anomalous))
    return anchor, positive, negative


def triplet_loss(features: Tensor, scores, labels, valid: Optional[np.ndarray] = None,
                 margin: float = 1.0, k=None) -> Tensor:
    """
    Triplet loss on fused features, using scores only to pick timesteps.

    Args:
        features: (B, T, D) encoder output
        scores: (B, T) fused scores (array or tensor, read by value)
        labels: (B,) video labels
        valid: Optional (B, T) mask of real timesteps
        margin: Triplet margin
        k: Selection count; defaults to the MIL K of each bag

    Returns:
        max(0, |a - p| - |a - n| + margin) on L2-normalised vectors, or exactly
        0 when the batch lacks either class
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != features.shape[0]:
        raise ShapeError("triplet_loss", [features.shape, labels.shape])
    if not (labels == 0).any() or not (labels == 1).any():
        return Tensor(0.0)
    scores = scores.data if isinstance(scores, Tensor) else scores
    weights = ad.constant(selection_weights(scores, labels, valid, k))

    def pooled(w: np.ndarray) -> Tensor:
        return ad.l2_normalize(ad.tsum(features * w[..., None], axis=(0, 1)))

    anchor, positive, negative = (pooled(w) for w in weights)
    d_ap = ad.norm(anchor - positive)
    d_an = ad.norm(anchor - negative)
    return ad.relu(d_ap - d_an + margin)
