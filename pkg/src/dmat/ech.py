"""Expanded Convolution Head: partial-convolution token embedding.

Each of the three blocks is a stride-2 partial convolution with an enlarged
kernel (norm, SiLU) followed by a residual stride-1 partial-conv sub-block at
the reduced resolution, so downsampling precedes the residual connection.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .config import EchConfig
from .nn import InstanceNorm, Module, he_normal, param
from .tensor import DimensionError, ParameterError, Tensor


def build_input(x: np.ndarray | Tensor, visible: np.ndarray, amodal: np.ndarray) -> Tensor:
    """Five-channel input ``stack(x * M_vis, M_vis, M_amodal)`` for NCHW images."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    vis = np.asarray(visible, dtype=xd.dtype).reshape(xd.shape[0], 1, *xd.shape[2:])
    amo = np.asarray(amodal, dtype=xd.dtype).reshape(xd.shape[0], 1, *xd.shape[2:])
    return Tensor(np.concatenate([xd * vis, vis, amo], axis=1))


class PConvLayer(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1):
        if k < 1:
            raise ParameterError(f"kernel size must be positive, got {k}")
        self.weight = param(he_normal(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = param(np.zeros(c_out))
        self.k = k
        self.stride = stride
        # even kernels (the [2,2,2] ablation) get no padding
        self.padding = (k - 1) // 2


def window_valid_count(mask: np.ndarray, k: int, stride: int, padding: int, pad_value: float = 1.0) -> np.ndarray:
    """Number of valid pixels under each kernel window, padding counted as ``pad_value``."""
    m = mask.astype(np.float64)
    if padding:
        m = np.pad(m, [(0, 0)] * (m.ndim - 2) + [(padding, padding)] * 2, constant_values=pad_value)
    win = sliding_window_view(m, (k, k), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    return win.sum(axis=(-2, -1))


def partial_conv(x: Tensor, mask, layer: PConvLayer) -> tuple[Tensor, np.ndarray]:
    """Partial convolution with renormalisation and validity update.

    ``out = conv(x * M) * k^2 / sum(M) + b`` where the window holds a valid
    pixel, else 0. ``mask`` is ``[H, W]`` or ``[N, 1, H, W]``. Zero padding
    counts toward ``sum(M)``, so an all-ones mask reproduces plain ``conv2d``,
    but only in-image valid pixels can make a window valid.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim == 2:
        mask = mask[None, None]
    if mask.shape[-2:] != x.shape[-2:]:
        raise DimensionError(f"partial_conv mask spatial axes {mask.shape[-2:]} != input {x.shape[-2:]}")
    k, s, p = layer.k, layer.stride, layer.padding
    mf = mask.astype(x.dtype)
    raw = T.conv2d(x * mf, layer.weight, None, s, p)
    count = window_valid_count(mask, k, s, p)
    new_mask = window_valid_count(mask, k, s, p, pad_value=0.0) > 0
    ratio = np.where(new_mask, (k * k) / np.maximum(count, 1.0), 0.0).astype(x.dtype)
    out = raw * ratio + T.reshape(layer.bias, (1, -1, 1, 1))
    if not new_mask.all():
        out = out * new_mask.astype(x.dtype)
    return out, new_mask


class EchBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, residual_k: int):
        self.down = PConvLayer(rng, c_in, c_out, k, stride=2)
        self.norm1 = InstanceNorm(c_out)
        self.res = PConvLayer(rng, c_out, c_out, residual_k, stride=1)
        self.norm2 = InstanceNorm(c_out)

    def __call__(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        h, mask = partial_conv(x, mask, self.down)
        h = T.silu(self.norm1(h))
        r, _ = partial_conv(h, mask, self.res)
        r = T.silu(self.norm2(r))
        return h + r, mask


class PatchEmbed(Module):
    """Baseline head for the no-ECH ablation: one stride-8 patchifying convolution."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.weight = param(he_normal(rng, (c_out, c_in, 8, 8), c_in * 64))
        self.bias = param(np.zeros(c_out))

    def __call__(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        out = T.conv2d(x, self.weight, self.bias, stride=8)
        n, _, h, w = mask.shape
        valid = mask.reshape(n, 1, h // 8, 8, w // 8, 8).any(axis=(3, 5))
        return out, valid


class ExpandedConvHead(Module):
    def __init__(self, rng, cfg: EchConfig):
        if len(cfg.kernel_sizes) != 3 or len(cfg.channels) != 3:
            raise ParameterError("the head has exactly three blocks")
        self.enabled = cfg.enabled
        if cfg.enabled:
            chans = (cfg.in_channels, *cfg.channels)
            self.blocks = [
                EchBlock(rng, chans[i], chans[i + 1], cfg.kernel_sizes[i], cfg.residual_kernel) for i in range(3)
            ]
        else:
            self.patch = PatchEmbed(rng, cfg.in_channels, cfg.channels[-1])
        self.out_channels = cfg.channels[-1]

    def __call__(self, x5: Tensor, vis_mask, return_masks: bool = False):
        n, _, h, w = x5.shape
        if h % 8 or w % 8:
            raise ParameterError(f"input {h}x{w} must be a multiple of 8")
        mask = np.asarray(vis_mask).astype(bool)
        if mask.ndim == 2:
            mask = np.broadcast_to(mask, (n, 1, h, w))
        elif mask.ndim == 3:
            mask = mask[:, None]
        history = [mask]
        if not self.enabled:
            out, mask = self.patch(x5, mask)
            history.append(mask)
        else:
            out = x5
            for block in self.blocks:
                out, mask = block(out, mask)
                history.append(mask)
        token_mask = mask[:, 0]
        if return_masks:
            return out, token_mask, history
        return out, token_mask


def ech_forward(x5: Tensor, vis_mask, head: ExpandedConvHead):
    return head(x5, vis_mask)
