"""Swin-style transformer body with Dynamic Human-Mask Guided Attention.

Tokens travel through five levels (two downsampling, a bottleneck, two
upsampling). Inside every window the attention logits receive a per-key
bias ``sum_t alpha_t * beta_t`` with ``beta_t = tau_t`` where mask ``t`` is set.
The bias is added before the ``1/sqrt(d_k)`` scaling and broadcast over
query rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import BodyConfig
from .masks import MaskSet, resize_mask, update_invisible_mask
from .nn import Conv2d, LayerNorm, Linear, Module, param
from .tensor import DimensionError, ParameterError, Tensor

MASK_TYPES = ("inv", "modal", "occ")
PAD_PENALTY = -1e4


# ---------------------------------------------------------------------------
# window geometry
# ---------------------------------------------------------------------------


@dataclass
class WindowGrid:
    tokens: Tensor  # [B * num_windows, wsz * wsz, C]
    window_size: int
    shift: int
    grid_hw: tuple[int, int]
    padded_hw: tuple[int, int]
    batch: int

    @property
    def num_windows(self) -> int:
        return self.tokens.shape[0]


def _padded(h: int, w: int, wsz: int) -> tuple[int, int]:
    return -(-h // wsz) * wsz, -(-w // wsz) * wsz


def window_partition(grid: Tensor, wsz: int, shift: int = 0) -> WindowGrid:
    """Split ``[B, H, W, C]`` (or ``[H, W, C]``) tokens into windows.

    The grid is zero-padded to multiples of ``wsz`` and cyclically shifted by
    ``(-shift, -shift)`` before partitioning.
    """
    squeeze = grid.ndim == 3
    if squeeze:
        grid = T.reshape(grid, (1, *grid.shape))
    b, h, w, c = grid.shape
    if shift not in (0, wsz // 2):
        raise ParameterError(f"shift must be 0 or {wsz // 2}, got {shift}")
    hp, wp = _padded(h, w, wsz)
    if wsz > hp or wsz > wp:
        raise ParameterError(f"window {wsz} larger than padded grid {hp}x{wp}")
    x = grid
    if (hp, wp) != (h, w):
        dt = grid.dtype
        if hp > h:
            x = T.concat([x, Tensor(np.zeros((b, hp - h, w, c), dt))], axis=1)
        if wp > w:
            x = T.concat([x, Tensor(np.zeros((b, hp, wp - w, c), dt))], axis=2)
    if shift:
        x = T.roll(x, (-shift, -shift), axis=(1, 2))
    x = T.reshape(x, (b, hp // wsz, wsz, wp // wsz, wsz, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b * (hp // wsz) * (wp // wsz), wsz * wsz, c))
    return WindowGrid(x, wsz, shift, (h, w), (hp, wp), b)


def window_reverse(windows: Tensor, wg: WindowGrid) -> Tensor:
    """Inverse of :func:`window_partition` for tokens laid out like ``wg``."""
    wsz, (h, w), (hp, wp), b = wg.window_size, wg.grid_hw, wg.padded_hw, wg.batch
    c = windows.shape[-1]
    x = T.reshape(windows, (b, hp // wsz, wp // wsz, wsz, wsz, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, hp, wp, c))
    if wg.shift:
        x = T.roll(x, (wg.shift, wg.shift), axis=(1, 2))
    if (hp, wp) != (h, w):
        x = x[:, :h, :w, :]
    return x


def partition_mask(m: np.ndarray, wsz: int, shift: int = 0, pad_value: bool = False) -> np.ndarray:
    """Partition ``[B, H, W]`` maps exactly like :func:`window_partition` -> ``[B*nW, wsz*wsz]``."""
    m = np.asarray(m)
    if m.ndim == 2:
        m = m[None]
    b, h, w = m.shape
    hp, wp = _padded(h, w, wsz)
    if (hp, wp) != (h, w):
        full = np.full((b, hp, wp), pad_value, dtype=m.dtype)
        full[:, :h, :w] = m
        m = full
    if shift:
        m = np.roll(m, (-shift, -shift), axis=(1, 2))
    m = m.reshape(b, hp // wsz, wsz, wp // wsz, wsz).transpose(0, 1, 3, 2, 4)
    return m.reshape(-1, wsz * wsz)


def shift_region_mask(hp: int, wp: int, wsz: int, shift: int) -> np.ndarray:
    """Standard shifted-window mask ``[nW, n, n]``: 0 within a region, PAD_PENALTY across."""
    labels = np.zeros((hp, wp), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -wsz), slice(-wsz, -shift), slice(-shift, None)):
        for ws in (slice(0, -wsz), slice(-wsz, -shift), slice(-shift, None)):
            labels[hs, ws] = cnt
            cnt += 1
    win = partition_mask(labels[None], wsz, 0)
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, PAD_PENALTY, 0.0)


# ---------------------------------------------------------------------------
# bias and attention
# ---------------------------------------------------------------------------


def tau_vector(cfg: BodyConfig) -> np.ndarray:
    return np.array([cfg.tau_inv, cfg.tau_modal, cfg.tau_occ])


def compute_bias(
    masks: dict[str, np.ndarray],
    wsz: int,
    shift: int,
    alpha: Tensor,
    tau=(-100.0, 30.0, -100.0),
    enabled=MASK_TYPES,
    invalid: np.ndarray | None = None,
    validity_penalty: float = 1e4,
) -> Tensor:
    """Per-window key bias ``[num_windows, wsz*wsz]``.

    ``masks`` maps ``inv``/``modal``/``occ`` to boolean ``[B, H, W]`` maps at
    the level's token grid. ``bias[w, n] = sum_t alpha[t, n] * beta_t[w, n]``
    with ``beta_t = tau_t`` where the mask is set. Padding tokens get
    ``PAD_PENALTY``; tokens flagged in ``invalid`` (still un-recovered) get
    ``-validity_penalty``.
    """
    any_map = next(iter(masks.values()))
    b, h, w = np.asarray(any_map).reshape(-1, *np.shape(any_map)[-2:]).shape
    dt = alpha.dtype
    beta = []
    for t, tau_t in zip(MASK_TYPES, tau):
        if t in enabled and t in masks:
            beta.append(partition_mask(masks[t], wsz, shift).astype(dt) * dt.type(tau_t))
        else:
            n_win = partition_mask(np.zeros((b, h, w), bool), wsz, shift).shape[0]
            beta.append(np.zeros((n_win, wsz * wsz), dt))
    beta = np.stack(beta, axis=1)  # [W, 3, n]
    bias = T.sum_(T.reshape(alpha, (1, 3, wsz * wsz)) * beta, axis=1)
    const = np.zeros(bias.shape, dt)
    pad = ~partition_mask(np.ones((b, h, w), bool), wsz, shift, pad_value=False)
    const[pad] += PAD_PENALTY
    if invalid is not None and validity_penalty:
        const[partition_mask(invalid, wsz, shift)] -= validity_penalty
    if const.any():
        bias = bias + const
    return bias


def dhmga_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None, extra: np.ndarray | None = None):
    """``softmax((Q K^T + bias) / sqrt(d_k)) V`` for ``[W, heads, n, d_k]`` inputs.

    ``bias`` is ``[W, n]`` (one value per key, shared by all queries and
    heads); ``extra`` is an optional constant ``[W, n, n]`` logit term.
    Returns ``(output, weights)``.
    """
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1]):
        raise DimensionError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    wn, heads, n, d = q.shape
    logits = T.matmul(q, T.permute(k, (0, 1, 3, 2)))
    if bias is not None:
        if bias.shape != (wn, n):
            raise DimensionError(f"bias shape {bias.shape} != ({wn}, {n})")
        logits = logits + T.reshape(bias, (wn, 1, 1, n))
    if extra is not None:
        logits = logits + extra[:, None].astype(q.dtype)
    weights = T.softmax(logits / math.sqrt(d), axis=-1)
    return T.matmul(weights, v), weights


class WindowAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ParameterError(f"channels {dim} not divisible by heads {heads}")
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.heads = heads

    def __call__(self, x: Tensor, bias, extra=None, return_weights=False):
        wn, n, c = x.shape
        h = self.heads
        qkv = T.reshape(self.qkv(x), (wn, n, 3, h, c // h))
        qkv = T.permute(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        out, weights = dhmga_attention(q, k, v, bias, extra)
        out = T.reshape(T.permute(out, (0, 2, 1, 3)), (wn, n, c))
        out = self.proj(out)
        return (out, weights) if return_weights else out


class TransformerBlock(Module):
    def __init__(self, rng, dim: int, mlp_dim: int, heads: int):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, mlp_dim)
        self.fc2 = Linear(rng, mlp_dim, dim)

    def __call__(self, x: Tensor, wsz: int, shift: int, bias_fn) -> Tensor:
        """``x`` is ``[B, H, W, C]``; ``bias_fn(wsz, shift)`` returns the key bias or None."""
        wg = window_partition(self.norm1(x), wsz, shift)
        extra = None
        if shift:
            region = shift_region_mask(*wg.padded_hw, wsz, shift)
            extra = np.tile(region, (wg.batch, 1, 1))
        h = self.attn(wg.tokens, bias_fn(wsz, shift), extra)
        x = x + window_reverse(h, wg)
        return x + self.fc2(T.silu(self.fc1(self.norm2(x))))


# ---------------------------------------------------------------------------
# levels
# ---------------------------------------------------------------------------


class Level(Module):
    def __init__(self, rng, depth: int, wsz: int, cfg: BodyConfig):
        self.blocks = [TransformerBlock(rng, cfg.channels, cfg.mlp_dim, cfg.num_heads) for _ in range(depth)]
        self.alpha = param(np.ones((3, wsz * wsz)))
        self.alpha.requires_grad = cfg.alpha_trainable
        self.wsz = wsz

    def __call__(self, x: Tensor, masks: dict, cfg: BodyConfig, dynamic: bool, trace: list | None = None):
        """Run the level's blocks. With ``dynamic`` the ``inv`` map is updated after every block."""
        h = x.shape[1]
        wsz = self.wsz
        masks = dict(masks)
        use_bias = bool(cfg.masks)
        tau = tau_vector(cfg)
        for i, block in enumerate(self.blocks):
            shift = wsz // 2 if (i % 2 == 1 and h > wsz) else 0

            def bias_fn(wsz_, shift_, masks=masks):
                if not use_bias:
                    return None
                invalid = masks["inv"] if (dynamic and "inv" in cfg.masks) else None
                return compute_bias(
                    masks, wsz_, shift_, self.alpha, tau, cfg.masks, invalid, cfg.validity_penalty
                )

            x = block(x, wsz, shift, bias_fn)
            if dynamic:
                masks["inv"] = update_invisible_mask(masks["inv"], wsz, shifted=bool(shift))
            if trace is not None:
                trace.append(masks["inv"].copy())
        return x, masks


def _to_nchw(x: Tensor) -> Tensor:
    return T.permute(x, (0, 3, 1, 2))


def _to_nhwc(x: Tensor) -> Tensor:
    return T.permute(x, (0, 2, 3, 1))


def level_grids(grid: int, levels: int = 5) -> list[int]:
    half = (levels - 1) // 2
    down = [grid // (2**i) for i in range(half + 1)]
    return down + down[-2::-1]


class TransformerBody(Module):
    def __init__(self, rng, in_channels: int, cfg: BodyConfig, grid: int):
        if len(cfg.depths) != 5 or len(cfg.window_sizes) != 5:
            raise ParameterError("the body has exactly five levels")
        if grid % 4:
            raise ParameterError(f"token grid {grid} must be a multiple of 4 for the level schedule")
        self.cfg = cfg
        self.grid = grid
        self.grids = level_grids(grid)
        self.in_proj = Linear(rng, in_channels, cfg.channels)
        self.levels = [
            Level(rng, d, min(wsz, g), cfg) for d, wsz, g in zip(cfg.depths, cfg.window_sizes, self.grids)
        ]
        c = cfg.channels
        self.downs = [Conv2d(rng, c, c, 3, stride=2) for _ in range(2)]
        self.ups = [Conv2d(rng, c, c, 3) for _ in range(2)]
        self.out_norm = LayerNorm(c)
        if cfg.skip == "concat":
            self.skip_proj = [Linear(rng, 2 * c, c) for _ in range(2)]
        elif cfg.skip != "add":
            raise ParameterError(f"skip must be 'add' or 'concat', got {cfg.skip!r}")

    def level_masks(self, mask_set: MaskSet, grid: int) -> dict[str, np.ndarray]:
        return {
            "inv": resize_mask(mask_set.invisible, (grid, grid), "any_valid"),
            "modal": resize_mask(mask_set.modal, (grid, grid), "any_valid"),
            "occ": resize_mask(mask_set.occlusion, (grid, grid), "any_valid"),
        }

    def __call__(self, tokens: Tensor, token_mask: np.ndarray, mask_set: MaskSet, trace: list | None = None):
        """``tokens`` is NCHW at the head's output grid; returns NCHW with body channels."""
        n, _, g, g2 = tokens.shape
        if (g, g2) != (self.grid, self.grid):
            raise DimensionError(f"token grid {g}x{g2} != configured {self.grid}")
        cfg = self.cfg
        x = self.in_proj(_to_nhwc(tokens))
        masks = self.level_masks(mask_set, g)
        masks["inv"] = masks["inv"] | ~np.asarray(token_mask, bool).reshape(n, g, g)
        skips = []
        for li in range(3):
            x, masks = self.levels[li](x, masks, cfg, dynamic=True, trace=trace)
            if li < 2:
                skips.append(x)
                x = _to_nhwc(self.downs[li](_to_nchw(x)))
                gn = self.grids[li + 1]
                valid = resize_mask(~masks["inv"], (gn, gn), "any_valid")
                masks = self.level_masks(mask_set, gn)
                masks["inv"] = ~valid
        for j, li in enumerate((3, 4)):
            up = T.bilinear_upsample(_to_nchw(x), 2)
            x = _to_nhwc(self.ups[j](up))
            skip = skips[1 - j]
            if cfg.skip == "add":
                x = x + skip
            else:
                x = self.skip_proj[j](T.concat([x, skip], axis=-1))
            masks = self.level_masks(mask_set, self.grids[li])
            x, _ = self.levels[li](x, masks, cfg, dynamic=False, trace=trace)
        return _to_nchw(self.out_norm(x))


def body_forward(tokens, token_mask, mask_set, body: TransformerBody):
    return body(tokens, token_mask, mask_set)
