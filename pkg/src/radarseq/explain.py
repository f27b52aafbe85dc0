"""Grad-CAM heatmaps, per-axis permutation importance and a PCA view of h_c."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as M
from .domain import FEATURES
from .render import DEFAULT_GEOMETRY, RadarGeometry, render_batch, sector_weights, write_pgm

MIN_WINDOWS = 50


@dataclass(frozen=True)
class CamMap:
    t: int
    heat: np.ndarray      # (H, W) in [0, 1]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.heat)


def grad_cam(model, sequence) -> list[CamMap]:
    """One heatmap per frame of a window, from the last conv block.

    ``sequence`` is a WindowedSequence or a (T, H, W) image stack. Channel
    weights are spatially averaged gradients of the logit (not the
    probability); every position is treated as its own frame even when
    images repeat, so padded steps get their own map.
    """
    if not model.config.uses_frames:
        raise TypeError("Grad-CAM needs an image model")
    images = np.asarray(getattr(sequence, "images", sequence), dtype=model.config.np_dtype)
    T = model.config.T
    if images.shape[0] != T:
        raise ValueError(f"expected {T} frames, got {images.shape[0]}")
    was = model.training
    model.training = False
    try:
        rep, extra = model.representation(images, np.arange(T)[None])
        logit = model.head(rep)
        act = extra["activation"]
        logit.backward(np.ones_like(logit.data))
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
        A = act.data.astype(np.float64)
    finally:
        for p in model.params.values():
            p.zero_grad()
        model.training = was
    rows = extra["frame_rows"]                              # positions that reached the CNN
    weights = grad.astype(np.float64).mean(axis=(1, 2))     # (n, C)
    cam = np.maximum(np.einsum("nhwc,nc->nhw", A, weights), 0.0)
    H, W = images.shape[1:]
    fy, fx = H // cam.shape[1], W // cam.shape[2]
    cam = np.repeat(np.repeat(cam, fy, axis=1), fx, axis=2)
    heats = np.zeros((T, H, W))
    heats[rows] = cam
    peak = heats.max(axis=(1, 2), keepdims=True)
    heats = np.divide(heats, peak, out=np.zeros_like(heats), where=peak > 0)
    maps = [CamMap(t, heats[t]) for t in range(T)]
    if all(m.is_zero for m in maps):
        warnings.warn("all Grad-CAM maps are zero (untrained or degenerate model)")
    return maps


def sector_heat_share(heat, geometry: RadarGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Fraction of a heatmap's mass falling in each axis sector (sums to 1, or zeros)."""
    w = sector_weights(geometry)
    mass = np.einsum("hw,hwk->k", np.asarray(heat, dtype=np.float64), w)
    total = mass.sum()
    return mass / total if total > 0 else mass


# ---------------------------------------------------------------- permutation importance

@dataclass(frozen=True)
class AxisImportance:
    feature: str
    importance: float        # mean AUC drop
    se: float
    repeats: int
    baseline_auc: float
    drops: tuple[float, ...]


def _used_rows(dataset) -> np.ndarray:
    rows = np.unique(dataset.index)
    return rows[rows > 0]


def _auc_with_features(model, dataset, features, rows, geometry, workers):
    if model.config.uses_frames:
        frames = dataset.frames.copy()
        frames[rows] = render_batch(features[rows], geometry, workers=workers)
        ds = dataset.with_frames(frames, features)
    else:
        ds = dataset.with_frames(dataset.frames, features)
    return M.roc_auc(model.predict_proba(ds), dataset.labels)


def permutation_importance(model, dataset, features=None, repeats: int = 5, seed: int = 0,
                           geometry: RadarGeometry | None = None, workers: int = 1,
                           baseline: float | None = None) -> list[AxisImportance]:
    """AUC drop when one feature's values are shuffled across the dataset's frames.

    ``features`` is a list of names or indices (default: all 14); the special
    name ``"all"`` shuffles every feature independently at once. Shuffling
    happens on the normalized vectors, and each frame is re-rendered.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    if geometry is None:
        h, w = dataset.image_shape
        geometry = RadarGeometry(height=h, width=w, d=len(FEATURES))
    if len(dataset) < MIN_WINDOWS:
        warnings.warn(f"only {len(dataset)} windows; importance estimates will be noisy")
    rows = _used_rows(dataset)
    if baseline is None:
        baseline = M.roc_auc(model.predict_proba(dataset), dataset.labels)
    targets = list(range(len(FEATURES))) if features is None else list(features)
    out = []
    for target in targets:
        cols = list(range(len(FEATURES))) if target == "all" else [
            FEATURES.index(target) if isinstance(target, str) else int(target)]
        name = "all" if target == "all" else FEATURES[cols[0]]
        col_seed = len(FEATURES) if target == "all" else cols[0]
        rng = np.random.default_rng([seed, col_seed])
        drops = []
        for _ in range(repeats):
            feats = dataset.features.copy()
            for c in cols:
                feats[rows, c] = feats[rng.permutation(rows), c]
            drops.append(baseline - _auc_with_features(model, dataset, feats, rows, geometry, workers))
        d = np.array(drops)
        se = float(d.std(ddof=1) / np.sqrt(repeats)) if repeats > 1 else float("inf")
        out.append(AxisImportance(name, float(d.mean()), se, repeats, float(baseline), tuple(drops)))
    return out


def write_importance_csv(path, entries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "importance", "se", "repeats", "baseline_auc"])
        for e in entries:
            w.writerow([e.feature, repr(round(e.importance, 10)), repr(round(e.se, 10)), e.repeats,
                        repr(round(e.baseline_auc, 10))])


# ---------------------------------------------------------------- projection

@dataclass
class Projection:
    coords: np.ndarray             # (n, 2)
    labels: np.ndarray
    components: np.ndarray         # (2, D), orthonormal rows
    explained: tuple | None        # variance fractions of the two components
    degenerate: bool


def pca_2d(X, labels=None) -> Projection:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 3:
        raise ValueError("need at least 3 embeddings for a projection")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (len(X) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    comps = vecs[:, :2].T.copy()
    if comps.shape[0] < 2:                                   # one-dimensional embeddings
        comps = np.vstack([comps, np.zeros_like(comps)])
    # sign convention: largest-magnitude loading positive
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] *= -1
    total = float(vals.clip(min=0).sum())
    degenerate = total <= 1e-12 * max(1.0, float(np.abs(X).max()) ** 2)
    explained = None if degenerate else tuple(float(v / total) for v in vals[:2].clip(min=0))
    coords = np.zeros((len(X), 2)) if degenerate else Xc @ comps.T
    lab = np.zeros(len(X), dtype=np.int8) if labels is None else np.asarray(labels)
    return Projection(coords, lab, comps, explained, degenerate)


def project_embeddings(model, dataset) -> Projection:
    """PCA of the classifier input (h_c for the sequence models) over every window."""
    if len(dataset) < 3:
        raise ValueError("need at least 3 windows for a projection")
    return pca_2d(model.embed(dataset), dataset.labels)


def write_projection_csv(path, dataset, proj: Projection) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["courier_id", "end_date", "label", "pc1", "pc2"])
        for cid, d, y, (a, b) in zip(dataset.courier_ids, dataset.end_dates, proj.labels, proj.coords):
            w.writerow([cid, str(d), int(y), repr(round(float(a), 10)), repr(round(float(b), 10))])


def write_cams(directory, courier_id: str, end_date, cams) -> list[Path]:
    """One PGM per frame: ``<courier>_<end date>_t<step>.pgm``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [write_pgm(directory / f"{courier_id}_{end_date}_t{c.t:02d}.pgm", c.heat) for c in cams]
