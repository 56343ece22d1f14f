"""Run configuration: dataclasses, presets, ablation toggles and the INI file format.

Values in the file are JSON literals under ``[section]`` headers::

    [ech]
    kernel_sizes = [7, 7, 7]

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class EchConfig:
    kernel_sizes: tuple[int, int, int] = (7, 7, 7)
    channels: tuple[int, int, int] = (64, 128, 256)
    in_channels: int = 5
    residual_kernel: int = 3
    enabled: bool = True


@dataclass
class BodyConfig:
    depths: tuple[int, ...] = (2, 2, 6, 2, 2)
    window_sizes: tuple[int, ...] = (8, 8, 4, 8, 8)
    channels: int = 128
    mlp_dim: int = 128
    num_heads: int = 4
    tau_inv: float = -100.0
    tau_modal: float = 30.0
    tau_occ: float = -100.0
    alpha_trainable: bool = True
    masks: tuple[str, ...] = ("inv", "modal", "occ")
    validity_penalty: float = 1e4
    skip: str = "add"


@dataclass
class DecoderConfig:
    channels: tuple[int, int, int] = (256, 128, 6)
    region_upsample: bool = True


@dataclass
class DiscConfig:
    channels: tuple[int, int, int, int] = (64, 128, 256, 512)


@dataclass
class FeatureConfig:
    channels: tuple[int, int, int, int, int] = (64, 128, 256, 512, 512)
    seed: int = 1234


@dataclass
class LossWeights:
    l1: float = 15.0
    adv_g: float = 0.06
    adv_d: float = 0.6
    perceptual: float = 1.0
    style: float = 150.0
    normalize_l1: bool = True
    amodal: bool = True


@dataclass
class Schedule:
    boundaries: tuple[int, ...] = (1000, 20000, 60000, 150000)
    lrs: tuple[float, ...] = (1e-2, 1e-3, 2e-4, 1e-4, 5e-5)
    max_iter: int = 200000
    batch: int = 16

    def __post_init__(self):
        if len(self.lrs) != len(self.boundaries) + 1:
            raise ConfigError("schedule needs len(lrs) == len(boundaries) + 1")
        if any(b >= c for b, c in zip(self.boundaries, self.boundaries[1:])):
            raise ConfigError("schedule boundaries must be strictly increasing")


@dataclass
class TrainConfig:
    seed: int = 0
    ema_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gan: bool = True
    checkpoint_every: int = 1000
    eval_with_ema: bool = False


@dataclass
class DataConfig:
    size: int = 64
    count: int = 256
    seed: int = 0
    ratio_min: float = 0.0
    ratio_max: float = 0.5
    min_per_band: int = 0
    train_dir: str = ""
    eval_dir: str = ""


@dataclass
class DmatConfig:
    ech: EchConfig = field(default_factory=EchConfig)
    body: BodyConfig = field(default_factory=BodyConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: Schedule = field(default_factory=Schedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    # ------------------------------------------------------------------
    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            parser[f.name] = {k.name: json.dumps(_plain(getattr(section, k.name))) for k in dataclasses.fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "DmatConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        sections = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for name in parser.sections():
            if name not in sections:
                raise ConfigError(f"unknown config section [{name}]")
            sec_cls = sections[name].default_factory
            known = {f.name: f for f in dataclasses.fields(sec_cls)}
            values = {}
            for key, raw in parser[name].items():
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in section [{name}]")
                try:
                    val = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"[{name}] {key}: not a JSON value: {raw!r}") from exc
                values[key] = _coerce(val, known[key].default)
            kwargs[name] = sec_cls(**values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "DmatConfig":
        return cls.from_ini(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def replace(self, **sections) -> "DmatConfig":
        return dataclasses.replace(self, **sections)


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def _coerce(val: Any, default: Any):
    if isinstance(default, tuple):
        if not isinstance(val, list):
            raise ConfigError(f"expected a list, got {val!r}")
        return tuple(val)
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"expected true/false, got {val!r}")
        return val
    if isinstance(default, float):
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ConfigError(f"expected a number, got {val!r}")
        return float(val)
    if isinstance(default, int):
        if not isinstance(val, int) or isinstance(val, bool):
            raise ConfigError(f"expected an integer, got {val!r}")
        return val
    if isinstance(default, str) and not isinstance(val, str):
        raise ConfigError(f"expected a string, got {val!r}")
    return val


def full_config() -> DmatConfig:
    """Architecture and schedule at the published scale (256x256 images)."""
    return DmatConfig(data=DataConfig(size=256))


def desk_config() -> DmatConfig:
    """Reduced widths for 64x64 images, batch 4, 5k iterations on one CPU core."""
    return DmatConfig(
        ech=EchConfig(channels=(16, 32, 64)),
        body=BodyConfig(channels=32, mlp_dim=32, num_heads=4),
        decoder=DecoderConfig(channels=(32, 16, 6)),
        disc=DiscConfig(channels=(16, 32, 64, 128)),
        features=FeatureConfig(channels=(16, 32, 64, 64, 64)),
        schedule=Schedule(max_iter=5000, batch=4),
        train=TrainConfig(checkpoint_every=1000),
        data=DataConfig(size=64, count=256),
    )


# -- ablations ----------------------------------------------------------------

ABLATIONS = {
    "no-ech": "plain stride-8 patch embedding instead of the partial-conv head",
    "no-dhmga": "all mask biases off: alpha frozen, tau = 0, no mask subsets",
    "no-ru": "plain bilinear upsampling in the decoder",
    "no-amodal-loss": "losses over the whole image instead of the amodal region",
    "no-gan": "adversarial terms off",
    "no-inv": "drop the invisible mask from the attention bias",
    "no-modal": "drop the modal mask from the attention bias",
    "no-occ": "drop the occlusion mask from the attention bias",
    "freeze-alpha": "alpha fixed at its initial value",
    "kernels-2-2-2": "head kernels [2, 2, 2]",
    "kernels-7-7-5": "head kernels [7, 7, 5]",
    "kernels-9-7-5": "head kernels [9, 7, 5]",
    "kernels-11-7-7": "head kernels [11, 7, 7]",
}


def apply_ablations(cfg: DmatConfig, names) -> DmatConfig:
    if isinstance(names, str):
        names = [n for n in names.split(",") if n]
    ech, body, dec, loss, train = (
        dataclasses.replace(cfg.ech),
        dataclasses.replace(cfg.body),
        dataclasses.replace(cfg.decoder),
        dataclasses.replace(cfg.loss),
        dataclasses.replace(cfg.train),
    )
    for name in names:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        if name == "no-ech":
            ech.enabled = False
        elif name == "no-dhmga":
            body.alpha_trainable = False
            body.tau_inv = body.tau_modal = body.tau_occ = 0.0
            body.masks = ()
        elif name == "no-ru":
            dec.region_upsample = False
        elif name == "no-amodal-loss":
            loss.amodal = False
        elif name == "no-gan":
            train.gan = False
        elif name in ("no-inv", "no-modal", "no-occ"):
            body.masks = tuple(m for m in body.masks if m != name[3:])
        elif name == "freeze-alpha":
            body.alpha_trainable = False
        elif name.startswith("kernels-"):
            ech.kernel_sizes = tuple(int(v) for v in name[len("kernels-"):].split("-"))
    return dataclasses.replace(cfg, ech=ech, body=body, decoder=dec, loss=loss, train=train)
