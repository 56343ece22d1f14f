"""Finite-difference verification of every differentiable op and composed module.

All checks run in float64 at reduced sizes. Each loss is contracted with a
fixed random weighting so no coordinate sits at a symmetric stationary point.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .body import TransformerBlock, compute_bias
from .config import BodyConfig, DecoderConfig, DiscConfig, FeatureConfig, LossWeights
from .decoder import RegionUpsamplingDecoder, region_upsample
from .ech import EchBlock, PConvLayer, partial_conv
from .losses import (
    FeatureExtractor,
    PatchDiscriminator,
    generator_losses,
    gram,
    logit_losses,
    perceptual_loss,
    recon_loss,
    style_loss,
)
from .masks import build_mask_set
from .tensor import Tensor

TOLERANCE = 1e-2
EPS = 1e-3


def _proj(rng, shape) -> np.ndarray:
    return rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape)


def _contract(rng, f: Callable[[Tensor], Tensor]) -> Callable[[Tensor], Tensor]:
    """Scalarise ``f`` with a fixed random weighting drawn on first call."""
    weights = {}

    def g(x):
        out = f(x)
        if out.size == 1:
            return T.sum_(out)
        if "w" not in weights:
            weights["w"] = _proj(rng, out.shape)
        return T.sum_(out * weights["w"])

    return g


def _masks(rng, n, h, w):
    sets = []
    for _ in range(n):
        amodal = np.zeros((h, w), bool)
        amodal[h // 4 : 3 * h // 4 + 1, w // 4 : 3 * w // 4 + 1] = True
        occ = np.zeros((h, w), bool)
        r0 = int(rng.integers(h // 4, h // 2))
        occ[r0:, : 3 * w // 4] = True
        sets.append(build_mask_set(amodal & ~occ, amodal, occ))
    from .masks import MaskSet

    return MaskSet.stack(sets)


def _cast(mod, dtype=np.float64):
    return mod.astype(dtype)


def build_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    """Name -> zero-argument callable returning the worst relative error."""
    rng = np.random.default_rng(seed)
    u = lambda *s: rng.uniform(-1, 1, s)  # noqa: E731
    checks: dict[str, Callable[[], float]] = {}

    def op(name, f, x, params=()):
        checks[name] = lambda: T.finite_diff_check(_contract(rng, f), Tensor(x), EPS, params)

    # -- elementwise and shape ops
    b = Tensor(u(3, 4), requires_grad=True)
    op("add", lambda x: x + b, u(3, 4), [b])
    op("sub", lambda x: b - x, u(3, 4), [b])
    op("mul", lambda x: x * b, u(3, 4), [b])
    op("div", lambda x: x / (T.exp(b) + 0.5), u(3, 4), [b])
    op("power", lambda x: T.power(T.exp(x), 1.7), u(3, 4))
    op("log", lambda x: T.log(x * x + 0.5), u(3, 4))
    op("exp", T.exp, u(3, 4))
    op("tanh", T.tanh, u(3, 4))
    op("sigmoid", T.sigmoid, u(3, 4))
    op("silu", T.silu, u(3, 4))
    op("softplus", T.softplus, u(3, 4) * 4)
    op("abs", lambda x: T.abs_(x), rng.uniform(0.1, 1, (3, 4)) * rng.choice([-1, 1], (3, 4)))
    op("sum_mean", lambda x: T.sum_(x, 1, keepdims=True) * T.mean(x, 0), u(3, 4))
    op("reshape_permute", lambda x: T.permute(T.reshape(x, (2, 3, 4)), (2, 0, 1)), u(6, 4))
    op("slice_concat", lambda x: T.concat([x[:, 1:], x[:, :2] * 2.0], axis=1), u(3, 4))
    op("roll", lambda x: T.roll(x, (1, -2), axis=(0, 1)), u(3, 5))
    wm = Tensor(u(2, 4, 3), requires_grad=True)
    op("matmul", lambda x: T.matmul(x, wm), u(5, 4), [wm])
    op("softmax", lambda x: T.softmax(x * 3.0, -1), u(4, 6))
    op("softmax_sq_sum", lambda x: T.sum_(T.softmax(x, -1) * T.softmax(x, -1)), u(4, 6))
    wc = Tensor(u(3, 2, 3, 3), requires_grad=True)
    bc = Tensor(u(3), requires_grad=True)
    op("conv2d", lambda x: T.conv2d(x, wc, bc, stride=2, padding=1), u(1, 2, 5, 5), [wc, bc])
    op("bilinear_upsample", lambda x: T.bilinear_upsample(x, 2), u(1, 2, 3, 4))

    # -- partial convolution and head block
    layer = _cast(PConvLayer(np.random.default_rng(seed), 2, 3, 3, stride=2))
    pmask = rng.random((1, 1, 6, 6)) > 0.4
    op("partial_conv", lambda x: partial_conv(x, pmask, layer)[0], u(1, 2, 6, 6), layer.parameters())
    blk = _cast(EchBlock(np.random.default_rng(seed), 5, 4, 7, 3))
    bmask = np.ones((1, 1, 8, 8), bool)
    bmask[:, :, 2:6, 3:7] = False
    op("ech_block", lambda x: blk(x, bmask)[0], u(1, 5, 8, 8), blk.parameters())

    # -- DHMGA block on a single 4x4 window
    bcfg = BodyConfig(channels=8, mlp_dim=8, num_heads=2)
    tb = _cast(TransformerBlock(np.random.default_rng(seed), 8, 8, 2))
    alpha = Tensor(rng.uniform(0.5, 1.5, (3, 16)), requires_grad=True)
    lvl = {
        "inv": rng.random((1, 4, 4)) > 0.7,
        "modal": rng.random((1, 4, 4)) > 0.5,
        "occ": rng.random((1, 4, 4)) > 0.6,
    }
    scale = 0.02  # keeps bias/sqrt(d) logits in a range where softmax is not saturated

    def tb_fn(x):
        return tb(
            x,
            4,
            0,
            lambda wsz, shift: compute_bias(lvl, wsz, shift, alpha * scale, (-100.0, 30.0, -100.0), bcfg.masks),
        )

    op("dhmga_block", tb_fn, u(1, 4, 4, 8), [alpha, *tb.parameters()])

    # -- decoder
    ms = _masks(rng, 1, 16, 16)
    am = ms.amodal[0][::4, ::4]
    op("region_upsample", lambda x: region_upsample(x, am, 2), u(1, 2, 4, 4))
    dec = _cast(RegionUpsamplingDecoder(np.random.default_rng(seed), 4, DecoderConfig(channels=(4, 4, 6))))
    op("ru_decoder", lambda x: dec(x, ms), u(1, 4, 2, 2), dec.parameters())

    # -- losses
    fx = FeatureExtractor(FeatureConfig(channels=(3, 4, 4, 4, 4)), dtype=np.float64)
    ms32 = _masks(rng, 2, 32, 32)
    target = u(2, 3, 32, 32)
    # offsets bounded away from 0 keep every |x - target| off the kink
    near = target + _proj(rng, target.shape) * 0.2
    op("recon_loss", lambda x: recon_loss(x, target, ms32.amodal), near)
    op("perceptual_loss", lambda x: perceptual_loss(x, target[1:], ms32.amodal[1:], fx), u(1, 3, 32, 32))
    op("style_loss", lambda x: style_loss(x, target[1:], ms32.amodal[1:], fx), u(1, 3, 32, 32))
    op("gram", gram, u(2, 3, 4, 4))
    disc = _cast(PatchDiscriminator(np.random.default_rng(seed), DiscConfig(channels=(2, 2, 2, 2))))
    real = u(1, 1, 4, 4) * 3

    op("adv_g", lambda x: logit_losses(Tensor(real), disc(x))[0], u(1, 3, 32, 32), disc.parameters())
    op("adv_d", lambda x: logit_losses(x, Tensor(real))[1], u(1, 1, 4, 4) * 3)
    lw = LossWeights()
    op(
        "total_gen_loss",
        lambda x: generator_losses(x, target[:1], ms32.amodal[:1], fx, lw, disc)[0],
        near[:1].copy(),
    )
    return checks


def run_gradcheck(seed: int = 0, names=None, report=print) -> dict[str, float]:
    checks = build_checks(seed)
    results = {}
    for name, fn in checks.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        err = fn()
        results[name] = err
        status = "PASS" if err < TOLERANCE else "FAIL"
        if report:
            report(f"{status} {name:<18} max_rel_err={err:.3e} ({time.perf_counter() - t0:.2f}s)")
    return results
