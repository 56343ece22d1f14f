"""Binary mask algebra: the five DMAT masks, region labels, resizing, updates.

Masks are boolean numpy arrays whose last two axes are spatial. Leading axes
(e.g. a batch axis) are carried through by every function here.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import ParameterError


class MaskConsistencyError(ValueError):
    """Masks violate a MaskSet invariant."""


def _binary(m, name: str) -> np.ndarray:
    arr = np.asarray(m)
    if arr.dtype == bool:
        return arr
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1, 255))):
        raise MaskConsistencyError(f"{name} mask is not binary: values {vals[:6]}")
    return arr > 0


@dataclass(frozen=True)
class MaskSet:
    modal: np.ndarray
    amodal: np.ndarray
    invisible: np.ndarray
    visible: np.ndarray
    occlusion: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.modal.shape

    def validate(self) -> None:
        maps = {
            "modal": self.modal,
            "amodal": self.amodal,
            "invisible": self.invisible,
            "visible": self.visible,
            "occlusion": self.occlusion,
        }
        shapes = {k: v.shape for k, v in maps.items()}
        if len(set(shapes.values())) != 1:
            raise MaskConsistencyError(f"mask shapes differ: {shapes}")
        for k, v in maps.items():
            if v.dtype != bool:
                raise MaskConsistencyError(f"{k} mask must be boolean, got {v.dtype}")
        bad = int(np.count_nonzero(self.modal & ~self.amodal))
        if bad:
            raise MaskConsistencyError(f"modal mask not contained in amodal mask: {bad} violating pixels")
        if not np.array_equal(self.invisible, self.amodal & ~self.modal):
            raise MaskConsistencyError("invisible != amodal AND NOT modal")
        if not np.array_equal(self.visible, ~self.invisible):
            raise MaskConsistencyError("visible != NOT invisible")

    def __getitem__(self, idx) -> "MaskSet":
        """Index the leading (batch) axes of every map."""
        return MaskSet(
            self.modal[idx], self.amodal[idx], self.invisible[idx], self.visible[idx], self.occlusion[idx]
        )

    @staticmethod
    def stack(sets: list["MaskSet"]) -> "MaskSet":
        return MaskSet(
            *(np.stack([getattr(s, f) for s in sets]) for f in ("modal", "amodal", "invisible", "visible", "occlusion"))
        )


def build_mask_set(modal, amodal, occlusion) -> MaskSet:
    """Derive invisible = amodal & ~modal and visible = ~invisible."""
    modal = _binary(modal, "modal")
    amodal = _binary(amodal, "amodal")
    occlusion = _binary(occlusion, "occlusion")
    if not (modal.shape == amodal.shape == occlusion.shape):
        raise MaskConsistencyError(
            f"mask shapes differ: modal {modal.shape}, amodal {amodal.shape}, occlusion {occlusion.shape}"
        )
    bad = int(np.count_nonzero(modal & ~amodal))
    if bad:
        raise MaskConsistencyError(f"modal mask not contained in amodal mask: {bad} violating pixels")
    invisible = amodal & ~modal
    ms = MaskSet(modal.copy(), amodal.copy(), invisible, ~invisible, occlusion.copy())
    return ms


class Region(enum.IntEnum):
    VISIBLE_HUMAN = 0
    INVISIBLE_HUMAN = 1
    OCCLUDER = 2
    OTHER = 3


def label_regions(m: MaskSet) -> np.ndarray:
    """Four-way partition; human labels win over the occluder on overlap."""
    labels = np.full(m.shape, Region.OTHER, dtype=np.uint8)
    labels[m.occlusion] = Region.OCCLUDER
    labels[m.invisible] = Region.INVISIBLE_HUMAN
    labels[m.modal] = Region.VISIBLE_HUMAN
    return labels


def _ratio(src: int, dst: int) -> tuple[str, int]:
    if src == dst:
        return "same", 1
    if src > dst and src % dst == 0:
        return "down", src // dst
    if dst > src and dst % src == 0:
        return "up", dst // src
    raise ParameterError(f"resize_mask needs an integer ratio, got {src} -> {dst}")


def resize_mask(m, target: tuple[int, int], mode: str = "any_valid") -> np.ndarray:
    """Resize a binary mask by an integer factor.

    Downsampling: ``any_valid`` sets a cell when any source pixel is set
    (max-pool); ``majority`` when at least half are set. Upsampling repeats
    pixels (nearest neighbour), identical for both modes.
    """
    if mode not in ("any_valid", "majority"):
        raise ParameterError(f"unknown resize mode {mode!r}")
    m = np.asarray(m).astype(bool)
    h, w = m.shape[-2:]
    th, tw = target
    kind_h, fh = _ratio(h, th)
    kind_w, fw = _ratio(w, tw)
    if {kind_h, kind_w} == {"down", "up"}:
        raise ParameterError(f"mixed up/down resize {h}x{w} -> {th}x{tw}")
    lead = m.shape[:-2]
    if "up" in (kind_h, kind_w):
        return np.repeat(np.repeat(m, fh, axis=-2), fw, axis=-1)
    if (fh, fw) == (1, 1):
        return m.copy()
    cells = m.reshape(*lead, th, fh, tw, fw)
    if mode == "any_valid":
        return cells.any(axis=(-3, -1))
    counts = cells.sum(axis=(-3, -1))
    return 2 * counts >= fh * fw


def _window_any_valid(m_inv: np.ndarray, wsz: int) -> np.ndarray:
    *lead, h, w = m_inv.shape
    cells = m_inv.reshape(*lead, h // wsz, wsz, w // wsz, wsz)
    valid = (~cells).any(axis=(-3, -1), keepdims=True)
    out = cells & ~valid
    return out.reshape(m_inv.shape)


def update_invisible_mask(m_inv, window_size: int, shifted: bool = False) -> np.ndarray:
    """Window validity propagation for the invisible mask.

    A window holding at least one valid token (``m_inv == 0``) becomes fully
    valid; windows with no valid token stay invalid. ``shifted`` applies the
    rule on windows displaced by ``window_size // 2`` (cyclic, as the
    attention windows are).
    """
    m_inv = np.asarray(m_inv).astype(bool)
    h, w = m_inv.shape[-2:]
    if h % window_size or w % window_size:
        raise ParameterError(f"grid {h}x{w} not divisible by window {window_size}")
    if not shifted:
        return _window_any_valid(m_inv, window_size)
    s = window_size // 2
    rolled = np.roll(m_inv, (-s, -s), axis=(-2, -1))
    return np.roll(_window_any_valid(rolled, window_size), (s, s), axis=(-2, -1))


def save_mask_png(path, m) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(m).astype(np.uint8) * 255, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("L"))
    return arr >= 128
