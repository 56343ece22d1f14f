"""GAN training: alternating discriminator/generator Adam updates, staged LR, EMA weights."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import DmatConfig, Schedule
from .data import Sample, collate
from .losses import FeatureExtractor, PatchDiscriminator, discriminator_loss, generator_losses
from .masks import MaskSet
from .model import Generator
from .nn import Module
from .tensor import ContractError, Tensor


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, component: str, value: float):
        super().__init__(f"non-finite {component} loss ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.component = component


def lr_at(schedule: Schedule, iteration: int) -> float:
    """Piecewise constant; an iteration equal to a boundary already uses the next rate."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    j = sum(1 for b in schedule.boundaries if b <= iteration)
    return schedule.lrs[j]


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            p.grad = None


@dataclass
class TrainState:
    cfg: DmatConfig
    gen: Generator
    disc: PatchDiscriminator
    gen_opt: Adam
    disc_opt: Adam
    ema_shadow: dict[str, np.ndarray]
    iteration: int = 0
    seed: int = 0
    _ema_backup: dict[str, np.ndarray] | None = field(default=None, repr=False)

    @classmethod
    def create(cls, cfg: DmatConfig, seed: int | None = None) -> "TrainState":
        seed = cfg.train.seed if seed is None else seed
        gen = Generator(cfg, seed)
        disc = PatchDiscriminator(np.random.default_rng([seed, 1]), cfg.disc)
        tc = cfg.train
        gen_params = dict(gen.named_parameters())
        return cls(
            cfg=cfg,
            gen=gen,
            disc=disc,
            gen_opt=Adam(gen_params, tc.adam_beta1, tc.adam_beta2, tc.adam_eps),
            disc_opt=Adam(dict(disc.named_parameters()), tc.adam_beta1, tc.adam_beta2, tc.adam_eps),
            ema_shadow={k: p.data.copy() for k, p in gen_params.items()},
            seed=seed,
        )

    # -- EMA ------------------------------------------------------------------
    def ema_update(self) -> None:
        d = self.cfg.train.ema_rate
        for k, p in self.gen.named_parameters():
            s = self.ema_shadow[k]
            s += (d * (p.data - s)).astype(s.dtype)

    def ema_apply(self) -> None:
        if self._ema_backup is not None:
            raise ContractError("EMA weights already applied; call ema_restore first")
        params = dict(self.gen.named_parameters())
        self._ema_backup = {k: p.data for k, p in params.items()}
        for k, p in params.items():
            p.data = self.ema_shadow[k].copy()

    def ema_restore(self) -> None:
        if self._ema_backup is None:
            raise ContractError("EMA weights not applied")
        for k, p in self.gen.named_parameters():
            p.data = self._ema_backup[k]
        self._ema_backup = None


def _check(value, iteration: int, name: str) -> float:
    v = float(np.asarray(value.data if isinstance(value, Tensor) else value))
    if not math.isfinite(v):
        raise NonFiniteLossError(iteration, name, v)
    return v


def train_step(state: TrainState, batch: list[Sample], fx: FeatureExtractor) -> dict[str, float]:
    """One generator forward, one discriminator update, one generator update, one EMA update."""
    cfg = state.cfg
    it = state.iteration
    lr = lr_at(cfg.schedule, it)
    clean, occluded, masks = collate(batch)
    amodal = masks.amodal if cfg.loss.amodal else np.ones_like(masks.amodal)
    gan = cfg.train.gan

    x_hat = state.gen(occluded, masks)

    adv_d = 0.0
    if gan:
        loss_d = discriminator_loss(state.disc, clean, x_hat.data, amodal)
        adv_d = _check(loss_d, it, "adv_d")
        T.backward(loss_d * cfg.loss.adv_d)
        state.disc_opt.step(lr)

    # the discriminator stays frozen through the generator backward pass
    disc_params = state.disc.parameters()
    for p in disc_params:
        p.requires_grad = False
    try:
        gen_loss, parts = generator_losses(x_hat, clean, masks.amodal, fx, cfg.loss, state.disc if gan else None)
        metrics = {
            "iter": it,
            "lr": lr,
            "l1": _check(parts.l1, it, "l1"),
            "adv_g": _check(parts.adv_g, it, "adv_g"),
            "adv_d": adv_d,
            "perc": _check(parts.perceptual, it, "perc"),
            "style": _check(parts.style, it, "style"),
            "total": _check(gen_loss, it, "total"),
        }
        T.backward(gen_loss)
    finally:
        for p in disc_params:
            p.requires_grad = True
    state.gen_opt.step(lr)
    state.ema_update()
    state.iteration += 1
    return metrics


def batch_indices(count: int, batch: int, iteration: int, seed: int) -> list[int]:
    """Indices for ``iteration``: per-epoch permutations drawn from ``(seed, epoch)``."""
    start = iteration * batch
    out = []
    while len(out) < batch:
        epoch, offset = divmod(start + len(out), count)
        perm = np.random.default_rng([seed, 7, epoch]).permutation(count)
        out.extend(int(i) for i in perm[offset : offset + batch - len(out)])
    return out


def train(state: TrainState, samples: list[Sample], iterations: int, fx: FeatureExtractor | None = None, log_fn=None):
    fx = fx or FeatureExtractor(state.cfg.features)
    batch = state.cfg.schedule.batch
    history = []
    for _ in range(iterations):
        idx = batch_indices(len(samples), batch, state.iteration, state.seed)
        m = train_step(state, [samples[i] for i in idx], fx)
        history.append(m)
        if log_fn is not None:
            log_fn(state, m)
    return history


def predict(gen: Generator, samples: list[Sample], batch: int = 8) -> np.ndarray:
    outs = []
    with T.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            occluded = np.stack([s.occluded for s in chunk]).astype(np.float32)
            masks = MaskSet.stack([s.masks for s in chunk])
            outs.append(gen(occluded, masks).data)
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"DMATCKPT"


def save_checkpoint(path, state: TrainState) -> None:
    """Binary container: magic, u64 header length, JSON header, raw little-endian float32 arrays."""
    arrays: dict[str, np.ndarray] = {}
    for prefix, mod in (("gen", state.gen), ("disc", state.disc)):
        for k, p in mod.named_parameters():
            arrays[f"{prefix}/{k}"] = p.data
    for prefix, opt in (("gen", state.gen_opt), ("disc", state.disc_opt)):
        for k in opt.params:
            arrays[f"adam_m/{prefix}/{k}"] = opt.m[k]
            arrays[f"adam_v/{prefix}/{k}"] = opt.v[k]
    for k, v in state.ema_shadow.items():
        arrays[f"ema/{k}"] = v
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "iteration": state.iteration,
        "seed": state.seed,
        "config_hash": state.cfg.config_hash(),
        "config": state.cfg.to_ini(),
        "adam_t": {"gen": state.gen_opt.t, "disc": state.disc_opt.t},
        "arrays": entries,
    }
    hbytes = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a DMAT checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        body = fh.read()
    arrays = {}
    for e in header["arrays"]:
        arr = np.frombuffer(body, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return header, arrays


def load_checkpoint(path, cfg: DmatConfig | None = None) -> TrainState:
    header, arrays = read_checkpoint(path)
    if cfg is None:
        cfg = DmatConfig.from_ini(header["config"])
    elif cfg.config_hash() != header["config_hash"]:
        raise ConfigMismatchError(header["config_hash"], cfg.config_hash())
    state = TrainState.create(cfg, header["seed"])
    _load_module(state.gen, arrays, "gen")
    _load_module(state.disc, arrays, "disc")
    for prefix, opt in (("gen", state.gen_opt), ("disc", state.disc_opt)):
        for k in opt.params:
            opt.m[k] = arrays[f"adam_m/{prefix}/{k}"].copy()
            opt.v[k] = arrays[f"adam_v/{prefix}/{k}"].copy()
        opt.t = header["adam_t"][prefix]
    state.ema_shadow = {k: arrays[f"ema/{k}"].copy() for k in state.ema_shadow}
    state.iteration = header["iteration"]
    return state


def _load_module(mod: Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    mod.load_state_dict({k[len(prefix) + 1 :]: v for k, v in arrays.items() if k.startswith(prefix + "/")})


class ConfigMismatchError(ValueError):
    def __init__(self, stored: str, supplied: str):
        super().__init__(f"checkpoint config hash {stored} != supplied config hash {supplied}")
        self.stored = stored
        self.supplied = supplied
