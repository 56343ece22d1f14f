import dataclasses
import json
import logging

import numpy as np
import pytest

from dmat.config import DataConfig
from dmat.data import (
    GenerationError,
    collate,
    figure_color_map,
    load_directory,
    missing_ground_truth,
    ratio_histogram,
    synth_dataset,
    synth_export,
    synth_sample,
)
from dmat.masks import build_mask_set, save_mask_png

CFG = DataConfig(size=64, count=20, seed=3)


@pytest.fixture(scope="module")
def samples():
    return synth_dataset(CFG)


def test_same_seed_index_bit_identical():
    a, b = synth_sample(CFG, 7), synth_sample(CFG, 7)
    assert np.array_equal(a.clean, b.clean) and np.array_equal(a.occluded, b.occluded)
    for f in ("modal", "amodal", "occlusion"):
        assert np.array_equal(getattr(a.masks, f), getattr(b.masks, f))
    assert a.meta == b.meta


def test_different_seed_differs():
    a = synth_sample(CFG, 0)
    b = synth_sample(dataclasses.replace(CFG, seed=4), 0)
    assert not np.array_equal(a.clean, b.clean)


def test_index_out_of_range():
    with pytest.raises(IndexError):
        synth_sample(CFG, CFG.count)


def test_sample_invariants(samples):
    for s in samples:
        ms = s.masks
        again = build_mask_set(ms.modal, ms.amodal, ms.occlusion)
        assert np.array_equal(again.invisible, ms.invisible)
        assert np.array_equal(s.occluded[:, ~ms.occlusion], s.clean[:, ~ms.occlusion])
        assert s.meta["occlusion_ratio"] == pytest.approx(ms.invisible.sum() / ms.amodal.sum(), abs=1e-6)
        lo, hi = s.meta["band"]
        assert lo <= s.meta["occlusion_ratio"] <= hi
        assert s.clean.min() >= -1 and s.clean.max() <= 1 and s.clean.dtype == np.float32


def test_zero_band_gives_empty_invisible():
    cfg = DataConfig(size=64, count=3, seed=1, ratio_min=0.0, ratio_max=0.0)
    for s in synth_dataset(cfg):
        assert not s.masks.invisible.any()
        amodal = s.masks.amodal
        assert np.array_equal(s.occluded[:, amodal], s.clean[:, amodal])


def test_band_coverage_and_minimum(samples):
    hist = ratio_histogram([s.meta["occlusion_ratio"] for s in samples])
    assert all(v >= CFG.count // 5 for v in hist.values())
    with pytest.raises(GenerationError, match="per band"):
        synth_dataset(dataclasses.replace(CFG, min_per_band=5))


def test_palette_separation(samples):
    for s in samples:
        m = s.meta
        fig = np.asarray(m["figure_color"])
        for other in ("background_color", "occluder_color", "limb_color"):
            assert np.abs(fig - np.asarray(m[other])).max() >= 0.5


def test_figure_color_map(samples):
    s = samples[0]
    fmap = figure_color_map(s)
    assert fmap.shape == (3, 64, 64)
    visible_fig = s.masks.modal
    assert np.abs(fmap[:, visible_fig] - s.clean[:, visible_fig]).max() < 1e-6


def test_export_load_roundtrip(tmp_path, samples):
    manifest = synth_export(samples[:5], tmp_path)
    assert manifest["count"] == 5
    stored = json.loads((tmp_path / "manifest.json").read_text())
    assert [e["id"] for e in stored["samples"]] == [s.id for s in samples[:5]]
    loaded = list(load_directory(tmp_path))
    assert [s.id for s in loaded] == sorted(s.id for s in samples[:5])
    for a, b in zip(loaded, sorted(samples[:5], key=lambda s: s.id)):
        assert np.abs(a.clean - b.clean).max() <= 1 / 127.5 + 1e-6
        assert np.abs(a.occluded - b.occluded).max() <= 1 / 127.5 + 1e-6
        assert np.array_equal(a.masks.invisible, b.masks.invisible)
        assert a.meta["occlusion_ratio"] == b.meta["occlusion_ratio"]


def test_empty_directory(tmp_path):
    assert list(load_directory(tmp_path)) == []


def test_missing_file_skipped(tmp_path, samples, caplog):
    synth_export(samples[:2], tmp_path)
    (tmp_path / f"{samples[0].id}_occ.png").unlink()
    with caplog.at_level(logging.WARNING):
        loaded = list(load_directory(tmp_path))
    assert [s.id for s in loaded] == [samples[1].id]
    assert "missing occ" in caplog.text


def test_missing_gt_allowed_when_not_required(tmp_path, samples):
    synth_export(samples[:2], tmp_path)
    (tmp_path / f"{samples[0].id}_gt.png").unlink()
    assert missing_ground_truth(tmp_path) == [samples[0].id]
    loaded = list(load_directory(tmp_path, require_gt=False))
    assert loaded[0].clean is None and loaded[1].clean is not None


def test_bad_masks_rejected(tmp_path, samples):
    synth_export(samples[:1], tmp_path)
    sid = samples[0].id
    save_mask_png(tmp_path / f"{sid}_modal.png", np.ones((64, 64), bool))
    rejected = []
    assert list(load_directory(tmp_path, rejected)) == []
    assert rejected[0][0] == sid and "modal" in rejected[0][1]


def test_collate(samples):
    clean, occ, ms = collate(samples[:3])
    assert clean.shape == occ.shape == (3, 3, 64, 64)
    assert ms.invisible.shape == (3, 64, 64)
