"""The DMAT generator: head, transformer body and region-upsampling decoder."""

from __future__ import annotations

import numpy as np

from .body import TransformerBody
from .config import DmatConfig
from .decoder import RegionUpsamplingDecoder
from .ech import ExpandedConvHead, build_input
from .masks import MaskSet
from .nn import Module
from .tensor import ParameterError, Tensor


class Generator(Module):
    def __init__(self, cfg: DmatConfig, seed: int = 0, image_size: int | None = None):
        size = image_size or cfg.data.size
        if size % 32:
            raise ParameterError(f"image size {size} must be a multiple of 32 (8x head, 4x body)")
        rng = np.random.default_rng(seed)
        self.head = ExpandedConvHead(rng, cfg.ech)
        self.body = TransformerBody(rng, cfg.ech.channels[-1], cfg.body, size // 8)
        self.decoder = RegionUpsamplingDecoder(rng, cfg.body.channels, cfg.decoder)
        self.size = size

    def __call__(self, occluded, mask_set: MaskSet) -> Tensor:
        """``occluded`` is ``[N, 3, H, W]`` in [-1, 1]; ``mask_set`` holds ``[N, H, W]`` maps."""
        x5 = build_input(occluded, mask_set.visible, mask_set.amodal)
        tokens, token_mask = self.head(x5, mask_set.visible)
        feats = self.body(tokens, token_mask, mask_set)
        return self.decoder(feats, mask_set)
