"""Region Upsampling decoder and output compositing."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import DecoderConfig
from .masks import MaskSet, resize_mask
from .nn import Conv2d, InstanceNorm, Module
from .tensor import DimensionError, Tensor


def region_upsample(x: Tensor, m_amodal, factor: int) -> Tensor:
    """``Up(x*M)*Up(M) + Up(x*(1-M))*Up(1-M)`` with bilinear ``Up``.

    Human region and background are interpolated separately so neither bleeds
    into the other across the amodal boundary. ``m_amodal`` is ``[H, W]`` or
    ``[N, H, W]``.
    """
    m = np.asarray(m_amodal)
    if m.shape[-2:] != x.shape[-2:]:
        raise DimensionError(f"region_upsample mask spatial axes {m.shape[-2:]} != input {x.shape[-2:]}")
    m = m.astype(x.dtype).reshape(-1, 1, *m.shape[-2:])
    inv = (1 - m).astype(x.dtype)
    up_m = T.bilinear_upsample(Tensor(m), factor).data
    up_inv = T.bilinear_upsample(Tensor(inv), factor).data
    human = T.bilinear_upsample(x * m, factor) * up_m
    other = T.bilinear_upsample(x * inv, factor) * up_inv
    return human + other


class RegionUpsamplingDecoder(Module):
    def __init__(self, rng, in_channels: int, cfg: DecoderConfig):
        c1, c2, c3 = cfg.channels
        self.conv1 = Conv2d(rng, in_channels, c1, 3)
        self.norm1 = InstanceNorm(c1)
        self.conv2 = Conv2d(rng, c1, c2, 3)
        self.norm2 = InstanceNorm(c2)
        self.conv3 = Conv2d(rng, c2, c3, 3)
        self.norm3 = InstanceNorm(c3)
        self.proj = Conv2d(rng, c3, 3, 1)
        self.region_upsample = cfg.region_upsample

    def _up(self, x: Tensor, amodal: np.ndarray) -> Tensor:
        if not self.region_upsample:
            return T.bilinear_upsample(x, 2)
        h = x.shape[-1]
        return region_upsample(x, resize_mask(amodal, (h, h), "majority"), 2)

    def __call__(self, tokens: Tensor, mask_set: MaskSet) -> Tensor:
        amodal = np.asarray(mask_set.amodal).reshape(tokens.shape[0], *mask_set.amodal.shape[-2:])
        x = T.silu(self.norm1(self.conv1(self._up(tokens, amodal))))
        x = T.silu(self.norm2(self.conv2(self._up(x, amodal))))
        x = T.silu(self.norm3(self.conv3(self._up(x, amodal))))
        return T.tanh(self.proj(x))


def decoder_forward(tokens, mask_set, decoder: RegionUpsamplingDecoder) -> Tensor:
    return decoder(tokens, mask_set)


def compose_output(x, x_hat, mask_set: MaskSet):
    """Keep the occluded input except inside the invisible human region."""
    inv = np.asarray(mask_set.invisible)
    if isinstance(x_hat, Tensor):
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        m = inv.astype(x_hat.dtype).reshape(-1, 1, *inv.shape[-2:])
        return Tensor(xd) * (1 - m) + x_hat * m
    xd = np.asarray(x.data if isinstance(x, Tensor) else x)
    m = inv.reshape(-1, 1, *inv.shape[-2:]) if xd.ndim == 4 else inv[None]
    return np.where(m, np.asarray(x_hat), xd)
