"""Evaluation metrics: masked L1, Fréchet feature distances and the attention-shift score.

Feature statistics come from the fixed ``FeatureExtractor`` pooled at its last
stage, so absolute values are only comparable between runs that share the
extractor seed and width. Orderings between configurations are what matters.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Sample, collate, figure_color_map
from .decoder import compose_output
from .losses import FeatureExtractor
from .tensor import Tensor

log = logging.getLogger(__name__)

BUCKET_EDGES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
RIDGE = 1e-6
NEG_EIG_TOL = 1e-6


class NumericalError(FloatingPointError):
    pass


def l1_metric(composite, gt, m_amodal) -> float:
    """Mean absolute error over amodal pixels and channels; NaN for an empty mask."""
    composite = np.asarray(composite, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = np.asarray(m_amodal, bool)
    if not m.any():
        return math.nan
    return float(np.abs(composite - gt)[..., m].mean())


@dataclass
class FrechetResult:
    value: float
    ridged: bool


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _ill_conditioned(cov: np.ndarray, n: int) -> bool:
    if n <= cov.shape[0]:
        return True
    w = np.linalg.eigvalsh(cov)
    return bool(w[0] <= max(w[-1], 1e-300) * 1e-12)


def frechet_stats(feats_a, feats_b) -> FrechetResult:
    """Fréchet distance between Gaussian fits of two ``[n, d]`` feature sets.

    ``tr sqrt(Sa Sb)`` is taken as ``tr sqrt(Ra Sb Ra)`` with ``Ra = sqrt(Sa)``,
    which is symmetric and so admits an eigendecomposition. A rank-deficient
    covariance gets a ``1e-6 I`` ridge on both sides and is flagged.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("frechet_distance needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise T.DimensionError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[1] > 512:
        raise T.DimensionError(f"feature dim {a.shape[1]} exceeds 512")
    mu_a, mu_b = a.mean(0), b.mean(0)
    sa = np.atleast_2d(np.cov(a, rowvar=False))
    sb = np.atleast_2d(np.cov(b, rowvar=False))
    ridged = _ill_conditioned(sa, a.shape[0]) or _ill_conditioned(sb, b.shape[0])
    if ridged:
        eye = np.eye(sa.shape[0]) * RIDGE
        sa, sb = sa + eye, sb + eye
    ra = _sqrt_psd(sa)
    prod = ra @ sb @ ra
    w = np.linalg.eigvalsh((prod + prod.T) / 2)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -NEG_EIG_TOL * scale:
        raise NumericalError(f"covariance product has eigenvalue {w.min():.3e}")
    tr_sqrt = float(np.sqrt(np.clip(w, 0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2 * tr_sqrt)
    return FrechetResult(max(value, 0.0), ridged)


def frechet_distance(feats_a, feats_b) -> float:
    return frechet_stats(feats_a, feats_b).value


def pooled_features(images, fx: FeatureExtractor, batch: int = 16) -> np.ndarray:
    """Global-average-pooled last-stage features, ``[n, C5]`` in float64."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            f = fx(Tensor(images[i : i + batch]))[-1].data
            out.append(f.mean(axis=(2, 3)))
    return np.concatenate(out).astype(np.float64)


def _mask_images(images, masks) -> np.ndarray:
    m = np.asarray(masks, bool)
    return np.asarray(images) * m.reshape(m.shape[0], 1, *m.shape[1:])


def hfd_stats(composites, gts, amodal_masks, fx: FeatureExtractor) -> FrechetResult:
    return frechet_stats(
        pooled_features(_mask_images(composites, amodal_masks), fx),
        pooled_features(_mask_images(gts, amodal_masks), fx),
    )


def hfd_metric(composites, gts, amodal_masks, fx: FeatureExtractor) -> float:
    """Fréchet distance of pooled features of the human-masked images."""
    return hfd_stats(composites, gts, amodal_masks, fx).value


def fd_stats(composites, gts, fx: FeatureExtractor) -> FrechetResult:
    return frechet_stats(pooled_features(composites, fx), pooled_features(gts, fx))


def fd_metric(composites, gts, fx: FeatureExtractor) -> float:
    return fd_stats(composites, gts, fx).value


def attention_shift_score(composite, gt, masks, figure_color, background_color) -> float:
    """Mean over invisible pixels of ``|p - bg| - |p - fig|`` (Euclidean in RGB).

    Positive means the recovered pixels look like the figure, negative means
    they drifted toward the background. ``figure_color`` is an RGB triple or
    a per-pixel ``[3, H, W]`` map. Returns NaN when nothing is invisible.
    """
    del gt  # the reference colours carry everything the score needs
    inv = np.asarray(masks.invisible if hasattr(masks, "invisible") else masks, bool)
    if not inv.any():
        return math.nan
    comp = np.asarray(composite, dtype=np.float64)
    h, w = inv.shape
    fig = np.asarray(figure_color, dtype=np.float64)
    fig = fig.reshape(3, 1, 1) if fig.size == 3 else fig.reshape(3, h, w)
    bg = np.asarray(background_color, dtype=np.float64).reshape(3, 1, 1)
    d_bg = np.sqrt(((comp - bg) ** 2).sum(0))
    d_fig = np.sqrt(((comp - fig) ** 2).sum(0))
    return float((d_bg - d_fig)[inv].mean())


def bucket_of(ratio: float, edges=BUCKET_EDGES) -> int | None:
    """Index of the half-open bucket holding ``ratio``; the top edge is inclusive."""
    for i in range(len(edges) - 1):
        if edges[i] <= ratio < edges[i + 1] or (i == len(edges) - 2 and ratio == edges[-1]):
            return i
    return None


@dataclass
class MetricReport:
    labels: list[str]
    counts: dict[str, int]
    l1: dict[str, float]
    fd: dict[str, float]
    hfd: dict[str, float]
    shift: dict[str, float]
    ridged: dict[str, bool] = field(default_factory=dict)
    note: str = "FD/HFD use the fixed random feature extractor; only orderings between runs are meaningful."

    ROWS = ("l1", "fd", "hfd", "shift")

    def to_dict(self) -> dict:
        def clean(d):
            return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

        return {
            "buckets": self.labels,
            "counts": self.counts,
            **{r: clean(getattr(self, r)) for r in self.ROWS},
            "ridged": self.ridged,
            "note": self.note,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_table(self) -> str:
        cols = self.labels
        width = max(9, *(len(c) for c in cols)) + 1
        lines = ["metric".ljust(8) + "".join(c.rjust(width) for c in cols)]
        lines.append("n".ljust(8) + "".join(str(self.counts[c]).rjust(width) for c in cols))
        for r in self.ROWS:
            vals = getattr(self, r)
            cells = []
            for c in cols:
                v = vals.get(c, math.nan)
                cells.append(("-" if math.isnan(v) else f"{v:.4f}").rjust(width))
            lines.append(r.ljust(8) + "".join(cells))
        lines.append(self.note)
        return "\n".join(lines)


def build_report(composites, gts, samples: list[Sample], fx: FeatureExtractor, edges=BUCKET_EDGES) -> MetricReport:
    """Per-bucket and all-sample metrics for aligned composites and ground truths."""
    composites = np.asarray(composites, dtype=np.float32)
    gts = np.asarray(gts, dtype=np.float32)
    amodal = np.stack([s.masks.amodal for s in samples])
    labels = [f"{int(round(a * 100))}-{int(round(b * 100))}%" for a, b in zip(edges[:-1], edges[1:])] + ["total"]
    l1s = np.array([l1_metric(c, g, m) for c, g, m in zip(composites, gts, amodal)])
    shifts = np.array(
        [
            attention_shift_score(c, g, s.masks, figure_color_map(s), s.meta["background_color"])
            if "background_color" in s.meta
            else math.nan
            for c, g, s in zip(composites, gts, samples)
        ]
    )
    ratios = [s.meta.get("occlusion_ratio", float(s.masks.invisible.sum() / max(s.masks.amodal.sum(), 1))) for s in samples]
    groups = {lab: [] for lab in labels}
    for i, r in enumerate(ratios):
        b = bucket_of(r, edges)
        if b is not None:
            groups[labels[b]].append(i)
        groups["total"].append(i)

    def nanmean(x):
        x = x[~np.isnan(x)]
        return float(x.mean()) if x.size else math.nan

    counts, l1, fd, hfd, shift, ridged = {}, {}, {}, {}, {}, {}
    feats_c = pooled_features(composites, fx)
    feats_g = pooled_features(gts, fx)
    hfeats_c = pooled_features(_mask_images(composites, amodal), fx)
    hfeats_g = pooled_features(_mask_images(gts, amodal), fx)
    for lab, idx in groups.items():
        idx = np.asarray(idx, dtype=int)
        counts[lab] = int(idx.size)
        l1[lab] = nanmean(l1s[idx]) if idx.size else math.nan
        shift[lab] = nanmean(shifts[idx]) if idx.size else math.nan
        if idx.size >= 2:
            a = frechet_stats(feats_c[idx], feats_g[idx])
            h = frechet_stats(hfeats_c[idx], hfeats_g[idx])
            fd[lab], hfd[lab] = a.value, h.value
            ridged[lab] = a.ridged or h.ridged
        else:
            fd[lab] = hfd[lab] = math.nan
            ridged[lab] = False
    if any(ridged.values()):
        log.info("Fréchet covariance ridge applied for buckets %s", [k for k, v in ridged.items() if v])
    return MetricReport(labels, counts, l1, fd, hfd, shift, ridged)


def evaluate(gen, samples: list[Sample], fx: FeatureExtractor, batch: int = 8):
    """Run ``gen`` on ``samples``, composite, and build the report. Returns ``(report, preds, composites)``."""
    from .train import predict

    preds = predict(gen, samples, batch)
    gts, occluded, masks = collate(samples)
    composites = compose_output(occluded, preds, masks)
    return build_report(composites, gts, samples, fx), preds, composites
