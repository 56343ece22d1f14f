"""Synthetic occluded-figure data and the on-disk sample format.

A sample is a two-tone capsule figure (torso/head in one colour, limbs in
another) on a textured background, partially covered by a flat-coloured
rectangle or ellipse. Masks come straight from the rasteriser.

Directory layout, one group per id::

    {id}_img.png     occluded image (RGB)
    {id}_gt.png      clean image (RGB)
    {id}_modal.png, {id}_amodal.png, {id}_occ.png   masks (gray, 0/255)
    manifest.json    ids, seeds, occlusion ratios, palette
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import DataConfig
from .masks import MaskConsistencyError, MaskSet, build_mask_set, load_mask_png, save_mask_png

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 500
MIN_COLOR_DIST = 0.5


class GenerationError(RuntimeError):
    pass


@dataclass
class Sample:
    clean: np.ndarray  # [3, H, W] in [-1, 1]
    occluded: np.ndarray
    masks: MaskSet
    meta: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return self.meta.get("id", "")


def ratio_bands(lo: float, hi: float, width: float = 0.1) -> list[tuple[float, float]]:
    if hi <= lo:
        return [(lo, hi)]
    n = max(1, int(round((hi - lo) / width)))
    edges = np.linspace(lo, hi, n + 1)
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


def _grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def _capsule(yy, xx, p0, p1, r) -> np.ndarray:
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    L2 = dy * dy + dx * dx
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(L2, 1e-9), 0.0, 1.0)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= r * r


def _palette(rng: np.random.Generator, k: int) -> list[np.ndarray]:
    """k mutually distinct colours (pairwise max-channel distance >= MIN_COLOR_DIST)."""
    colors: list[np.ndarray] = []
    while len(colors) < k:
        c = rng.uniform(-0.8, 0.8, 3)
        if all(np.abs(c - o).max() >= MIN_COLOR_DIST for o in colors):
            colors.append(c)
    return colors


def _figure(rng: np.random.Generator, size: int):
    yy, xx = _grid(size)
    s = size / 64.0
    cx = rng.uniform(0.35, 0.65) * size
    top = rng.uniform(0.2, 0.26) * size
    torso_len = rng.uniform(16, 20) * s
    hip = top + torso_len
    r_torso = rng.uniform(4.5, 6.0) * s
    r_limb = rng.uniform(2.0, 3.0) * s
    head_r = rng.uniform(4.0, 5.0) * s
    torso = _capsule(yy, xx, (top, cx), (hip, cx), r_torso)
    torso |= (yy - (top - head_r - 1.0 * s)) ** 2 + (xx - cx) ** 2 <= head_r**2
    limbs = np.zeros_like(torso)
    pose = {}
    for name, origin, base in (
        ("arm_l", (top + 2 * s, cx - r_torso * 0.6), 200.0),
        ("arm_r", (top + 2 * s, cx + r_torso * 0.6), -20.0),
        ("leg_l", (hip, cx - r_torso * 0.45), 100.0),
        ("leg_r", (hip, cx + r_torso * 0.45), 80.0),
    ):
        ang = math.radians(base + rng.uniform(-35, 35) if name.startswith("arm") else base + rng.uniform(-15, 15))
        length = (rng.uniform(12, 16) if name.startswith("arm") else rng.uniform(16, 22)) * s
        end = (origin[0] + length * math.sin(ang), origin[1] + length * math.cos(ang))
        limbs |= _capsule(yy, xx, origin, end, r_limb)
        pose[name] = [round(math.degrees(ang), 3), round(length, 3)]
    limbs &= ~torso
    return torso, limbs, pose


def _background(rng: np.random.Generator, size: int, base: np.ndarray) -> np.ndarray:
    yy, xx = _grid(size)
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, 2) * 2 * math.pi / size
        ph = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.03, 0.08)
        img += amp * np.sin(fy * yy + fx * xx + ph)[None] * rng.choice([-1.0, 1.0], 3)[:, None, None]
    return img


def _occluder(rng: np.random.Generator, size: int, amodal: np.ndarray, band: tuple[float, float]):
    """Shape and placement giving an occlusion ratio inside ``band`` (bisection on scale)."""
    yy, xx = _grid(size)
    area = amodal.sum()
    lo, hi = band
    ys, xs = np.nonzero(amodal)
    y_min, y_max, x_min, x_max = ys.min(), ys.max(), xs.min(), xs.max()
    for attempt in range(MAX_ATTEMPTS):
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        aspect = rng.uniform(0.4, 2.5)
        if hi <= 0.0:
            # keep the occluder clear of the figure
            cy, cx = rng.uniform(0, size, 2)
            scale = rng.uniform(3, 10)
        else:
            cy = rng.uniform(y_min - 4, y_max + 4)
            cx = rng.uniform(x_min - 4, x_max + 4)
            scale = None
        target = rng.uniform(lo, hi) if hi > lo else lo

        def shape(sc):
            hy, hx = sc * math.sqrt(aspect), sc / math.sqrt(aspect)
            if kind == "rect":
                return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
            return ((yy - cy) / hy) ** 2 + ((xx - cx) / hx) ** 2 <= 1.0

        if scale is None:
            a, b = 0.5, float(size)
            for _ in range(24):
                mid = 0.5 * (a + b)
                if (shape(mid) & amodal).sum() / area < target:
                    a = mid
                else:
                    b = mid
            scale = b
        occ = shape(scale)
        ratio = (occ & amodal).sum() / area
        if occ.any() and lo <= ratio <= hi and (hi > 0 or ratio == 0):
            return occ, kind, attempt + 1
    raise GenerationError(f"occlusion ratio band [{lo:.2f}, {hi:.2f}] not reached in {MAX_ATTEMPTS} attempts")


def synth_sample(cfg: DataConfig, index: int) -> Sample:
    """Deterministic in ``(cfg.seed, index)``."""
    if not 0 <= index < cfg.count:
        raise IndexError(f"index {index} outside dataset of {cfg.count}")
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size
    bands = ratio_bands(cfg.ratio_min, cfg.ratio_max)
    band = bands[index % len(bands)]
    fig_c, limb_c, bg_c, occ_c = _palette(rng, 4)
    torso, limbs, pose = _figure(rng, size)
    amodal = torso | limbs
    occ, kind, attempts = _occluder(rng, size, amodal, band)
    clean = _background(rng, size, bg_c)
    clean[:, torso] = fig_c[:, None]
    clean[:, limbs] = limb_c[:, None]
    clean = np.clip(clean, -1, 1).astype(np.float32)
    occluded = clean.copy()
    occluded[:, occ] = occ_c.astype(np.float32)[:, None]
    masks = build_mask_set(amodal & ~occ, amodal, occ)
    ratio = float(masks.invisible.sum() / masks.amodal.sum())
    meta = {
        "id": f"{cfg.seed:04d}_{index:06d}",
        "seed": cfg.seed,
        "index": index,
        "occlusion_ratio": ratio,
        "band": list(band),
        "figure_color": [float(v) for v in fig_c],
        "limb_color": [float(v) for v in limb_c],
        "background_color": [float(v) for v in bg_c],
        "occluder_color": [float(v) for v in occ_c],
        "occluder": kind,
        "attempts": attempts,
        "pose": pose,
    }
    return Sample(clean, occluded, masks, meta)


def synth_dataset(cfg: DataConfig) -> list[Sample]:
    """Bands are assigned round-robin, so each gets at least ``count // n_bands`` samples."""
    n_bands = len(ratio_bands(cfg.ratio_min, cfg.ratio_max))
    if cfg.min_per_band > cfg.count // n_bands:
        raise GenerationError(
            f"{cfg.count} samples over {n_bands} bands cannot give {cfg.min_per_band} per band"
        )
    return [synth_sample(cfg, i) for i in range(cfg.count)]


def figure_color_map(sample: Sample) -> np.ndarray:
    """Per-pixel flat figure colour ``[3, H, W]`` (torso or limb colour), background elsewhere."""
    meta = sample.meta
    h, w = sample.masks.shape
    out = np.broadcast_to(np.asarray(meta["background_color"])[:, None, None], (3, h, w)).copy()
    limb = np.asarray(meta["limb_color"])
    fig = np.asarray(meta["figure_color"])
    amodal = sample.masks.amodal
    # torso pixels are the ones whose clean colour matches the torso colour best
    d_fig = np.abs(sample.clean - fig[:, None, None]).max(axis=0)
    d_limb = np.abs(sample.clean - limb[:, None, None]).max(axis=0)
    out[:, amodal & (d_fig <= d_limb)] = fig[:, None]
    out[:, amodal & (d_fig > d_limb)] = limb[:, None]
    return out


def ratio_histogram(ratios, edges=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5)) -> dict[str, int]:
    ratios = np.asarray(ratios, dtype=np.float64)
    out = {}
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        last = i == len(edges) - 2
        sel = (ratios >= a) & ((ratios <= b) if last else (ratios < b))
        out[f"{int(round(a * 100))}-{int(round(b * 100))}%"] = int(sel.sum())
    return out


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round((np.clip(img, -1, 1) + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def save_rgb_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def load_rgb_png(path) -> np.ndarray:
    from PIL import Image

    return from_uint8(np.asarray(Image.open(path).convert("RGB")))


def synth_export(samples, out_dir) -> dict:
    """Write samples and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        sid = s.id
        save_rgb_png(out / f"{sid}_img.png", s.occluded)
        save_rgb_png(out / f"{sid}_gt.png", s.clean)
        save_mask_png(out / f"{sid}_modal.png", s.masks.modal)
        save_mask_png(out / f"{sid}_amodal.png", s.masks.amodal)
        save_mask_png(out / f"{sid}_occ.png", s.masks.occlusion)
        entries.append({k: s.meta[k] for k in sorted(s.meta)})
    manifest = {
        "count": len(entries),
        "ratio_histogram": ratio_histogram([e["occlusion_ratio"] for e in entries]),
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


PARTS = ("img", "gt", "modal", "amodal", "occ")


def load_directory(path, rejected: list | None = None, require_gt: bool = True) -> Iterator[Sample]:
    """Yield samples in lexicographic id order.

    Incomplete groups are skipped with a warning; groups whose masks break a
    MaskSet invariant are rejected (appended to ``rejected`` as ``(id, reason)``).
    Without ``require_gt`` a missing ground truth leaves ``Sample.clean`` as None.
    """
    root = Path(path)
    meta_by_id = {}
    manifest = root / "manifest.json"
    if manifest.exists():
        meta_by_id = {e["id"]: e for e in json.loads(manifest.read_text()).get("samples", [])}
    ids = sorted({p.name.rsplit("_", 1)[0] for p in root.glob("*.png") if p.stem.rsplit("_", 1)[-1] in PARTS})
    for sid in ids:
        files = {part: root / f"{sid}_{part}.png" for part in PARTS}
        missing = [p for p, f in files.items() if not f.exists() and (require_gt or p != "gt")]
        if missing:
            log.warning("sample %s skipped: missing %s", sid, ", ".join(missing))
            continue
        try:
            masks = build_mask_set(
                load_mask_png(files["modal"]), load_mask_png(files["amodal"]), load_mask_png(files["occ"])
            )
        except MaskConsistencyError as exc:
            log.warning("sample %s rejected: %s", sid, exc)
            if rejected is not None:
                rejected.append((sid, str(exc)))
            continue
        meta = dict(meta_by_id.get(sid, {}))
        meta["id"] = sid
        if masks.amodal.any():
            meta.setdefault("occlusion_ratio", float(masks.invisible.sum() / masks.amodal.sum()))
        clean = load_rgb_png(files["gt"]) if files["gt"].exists() else None
        yield Sample(clean, load_rgb_png(files["img"]), masks, meta)


def missing_ground_truth(path) -> list[str]:
    root = Path(path)
    ids = sorted({p.name.rsplit("_", 1)[0] for p in root.glob("*_img.png")})
    return [sid for sid in ids if not (root / f"{sid}_gt.png").exists()]


def collate(samples: list[Sample]):
    """Stack samples into ``(clean [N,3,H,W], occluded [N,3,H,W], MaskSet [N,H,W])``."""
    clean = np.stack([s.clean for s in samples]).astype(np.float32)
    occluded = np.stack([s.occluded for s in samples]).astype(np.float32)
    return clean, occluded, MaskSet.stack([s.masks for s in samples])
