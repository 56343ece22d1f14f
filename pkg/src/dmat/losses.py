"""Amodal loss suite, the PatchGAN discriminator and the fixed feature extractor.

Every generator-side term consumes ``x_hat * M_amodal`` (or a mask-restricted
sum), so pixels outside the amodal region receive exactly zero gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import DiscConfig, FeatureConfig, LossWeights
from .nn import Module, he_normal, param
from .tensor import Tensor

log = logging.getLogger(__name__)


def _mask4(m, like: Tensor) -> np.ndarray:
    m = np.asarray(m)
    return m.astype(like.dtype).reshape(like.shape[0], 1, *m.shape[-2:])


class FeatureExtractor:
    """Five frozen stride-2 conv stages (3x3, SiLU) standing in for VGG-16.

    Weights come from ``seed`` alone and never receive gradients.
    """

    def __init__(self, cfg: FeatureConfig = FeatureConfig(), in_channels: int = 3, dtype=np.float32):
        rng = np.random.default_rng(cfg.seed)
        chans = (in_channels, *cfg.channels)
        self.weights = [he_normal(rng, (chans[i + 1], chans[i], 3, 3), chans[i] * 9).astype(dtype) for i in range(5)]
        self.biases = [np.zeros(c, dtype) for c in cfg.channels]
        self.channels = tuple(cfg.channels)

    def astype(self, dtype) -> "FeatureExtractor":
        self.weights = [w.astype(dtype) for w in self.weights]
        self.biases = [b.astype(dtype) for b in self.biases]
        return self

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for w, b in zip(self.weights, self.biases):
            x = T.silu(T.conv2d(x, Tensor(w), Tensor(b), stride=2, padding=1))
            feats.append(x)
        return feats


class PatchDiscriminator(Module):
    """Four stride-2 4x4 convolutions and a 3x3 head emitting a logit map."""

    def __init__(self, rng, cfg: DiscConfig = DiscConfig(), in_channels: int = 3):
        chans = (in_channels, *cfg.channels)
        self.weights = [param(he_normal(rng, (chans[i + 1], chans[i], 4, 4), chans[i] * 16)) for i in range(4)]
        self.biases = [param(np.zeros(c)) for c in cfg.channels]
        self.head_w = param(he_normal(rng, (1, chans[-1], 3, 3), chans[-1] * 9, gain=1.0))
        self.head_b = param(np.zeros(1))

    def __call__(self, x: Tensor) -> Tensor:
        for w, b in zip(self.weights, self.biases):
            x = T.silu(T.conv2d(x, w, b, stride=2, padding=1))
        return T.conv2d(x, self.head_w, self.head_b, stride=1, padding=1)


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------


def recon_loss(x_hat: Tensor, x, m_amodal, normalize: bool = True) -> Tensor:
    """L1 over amodal pixels and channels, divided by ``C * |M|`` when ``normalize``."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.dtype))
    m = _mask4(m_amodal, x_hat)
    total = T.sum_(T.abs_(x_hat - x) * m)
    if not normalize:
        return total
    area = float(m.sum()) * x_hat.shape[1]
    if area == 0:
        log.warning("recon_loss: empty amodal mask, term skipped")
        return total * 0.0
    return total / area


def adv_losses(disc: PatchDiscriminator, x, x_hat: Tensor, m_amodal) -> tuple[Tensor, Tensor]:
    """Non-saturating generator loss and discriminator loss on masked images, in logit space."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.dtype))
    m = _mask4(m_amodal, x_hat)
    fake = disc(x_hat * m)
    real = disc(x * m)
    return logit_losses(real, fake)


def logit_losses(real_logits: Tensor, fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    loss_g = T.mean(T.softplus(-fake_logits))
    loss_d = T.mean(T.softplus(-real_logits)) + T.mean(T.softplus(fake_logits))
    return loss_g, loss_d


def generator_adv_loss(disc: PatchDiscriminator, x_hat: Tensor, m_amodal) -> Tensor:
    return T.mean(T.softplus(-disc(x_hat * _mask4(m_amodal, x_hat))))


def discriminator_loss(disc: PatchDiscriminator, x, x_hat, m_amodal) -> Tensor:
    """``L_D`` with the prediction treated as a constant."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    fd = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat)
    m = np.asarray(m_amodal).astype(xd.dtype).reshape(xd.shape[0], 1, *xd.shape[-2:])
    real = disc(Tensor(xd * m))
    fake = disc(Tensor(fd * m))
    return T.mean(T.softplus(-real)) + T.mean(T.softplus(fake))


def perceptual_loss(x_hat: Tensor, x, m_amodal, fx: FeatureExtractor, target_feats=None) -> Tensor:
    """Mean absolute difference of stage-5 features of the masked images."""
    m = _mask4(m_amodal, x_hat)
    if target_feats is None:
        xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=x_hat.dtype)
        with T.no_grad():
            target_feats = fx(Tensor(xd * m))
    pred = fx(x_hat * m)
    return T.mean(T.abs_(pred[-1] - target_feats[-1].data))


def gram(f: Tensor) -> Tensor:
    """Auto-correlation ``F F^T / (C H W)`` of ``[C, H, W]`` or ``[N, C, H, W]`` features."""
    squeeze = f.ndim == 3
    if squeeze:
        f = T.reshape(f, (1, *f.shape))
    n, c, h, w = f.shape
    flat = T.reshape(f, (n, c, h * w))
    g = T.matmul(flat, T.permute(flat, (0, 2, 1))) / float(c * h * w)
    return g[0] if squeeze else g


def style_loss(x_hat: Tensor, x, m_amodal, fx: FeatureExtractor, pred_feats=None, target_feats=None) -> Tensor:
    """Sum over the five stages of the mean absolute Gram-matrix difference."""
    m = _mask4(m_amodal, x_hat)
    if target_feats is None:
        xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=x_hat.dtype)
        with T.no_grad():
            target_feats = fx(Tensor(xd * m))
    if pred_feats is None:
        pred_feats = fx(x_hat * m)
    total = None
    for p, t in zip(pred_feats, target_feats):
        term = T.mean(T.abs_(gram(p) - gram(t).data))
        total = term if total is None else total + term
    return total


@dataclass
class LossParts:
    l1: Tensor
    adv_g: Tensor | float
    adv_d: Tensor | float
    perceptual: Tensor
    style: Tensor


def total_loss(parts: LossParts, w: LossWeights = LossWeights()):
    """``(L_gen, L_disc)`` with ``L_gen = l1*L1 + adv_g*L_G + perceptual*L_P + style*L_S``."""
    gen = parts.l1 * w.l1 + parts.adv_g * w.adv_g + parts.perceptual * w.perceptual + parts.style * w.style
    disc = parts.adv_d * w.adv_d
    return gen, disc


def generator_losses(x_hat: Tensor, x, m_amodal, fx: FeatureExtractor, w: LossWeights, disc=None):
    """All generator-side terms on one batch; ``disc=None`` leaves the adversarial term at 0."""
    m = np.asarray(m_amodal)
    if not w.amodal:
        m = np.ones_like(m, dtype=bool)
    mm = _mask4(m, x_hat)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=x_hat.dtype)
    with T.no_grad():
        target_feats = fx(Tensor(xd * mm))
    pred_feats = fx(x_hat * mm)
    l1 = recon_loss(x_hat, xd, m, w.normalize_l1)
    perc = T.mean(T.abs_(pred_feats[-1] - target_feats[-1].data))
    style = style_loss(x_hat, xd, m, fx, pred_feats, target_feats)
    adv_g = generator_adv_loss(disc, x_hat, m) if disc is not None else 0.0
    parts = LossParts(l1, adv_g, 0.0, perc, style)
    gen, _ = total_loss(parts, w)
    return gen, parts
