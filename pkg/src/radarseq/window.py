"""Sliding windows over courier timelines and the packed sequence dataset.

A dataset keeps one table of unique rendered frames and, per window, ``T``
indices into it. Frame 0 is always the padding chart, so a window's images
are ``frames[index[i]]``.
"""

from __future__ import annotations

import csv
import hashlib
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import (
    CHURN_HORIZON, N_FEATURES, SPLITS, ChurnLabel, CourierTimeline, DataError, NormStats,
    SplitAssignment, assign_label, normalize,
)
from .render import DEFAULT_GEOMETRY, RadarGeometry, render_batch, render_padding

T_DEFAULT = 50
MAGIC = b"RSEQ"
VERSION = 1
INDEX_HEADER = ("courier_id", "end_date", "pad_count", "label", "split")


@dataclass(frozen=True)
class WindowPlan:
    stride: int = 5
    include_censored: bool = False
    T: int = T_DEFAULT

    def __post_init__(self):
        if self.stride < 1 or self.T < 1:
            raise ValueError("stride and T must be positive")


def enumerate_windows(L: int, T: int = T_DEFAULT, stride: int = 5) -> list[tuple[int, int]]:
    """Inclusive (start, end) day indices of every window over an L-day history."""
    if L < 1 or stride < 1:
        raise ValueError("need L >= 1 and stride >= 1")
    if L < T:
        return [(0, L - 1)]
    ends = range(T - 1, L, stride)
    return [(e - T + 1, e) for e in ends]


@dataclass(frozen=True)
class WindowedSequence:
    courier_id: str
    images: np.ndarray          # (T, H, W)
    pad_count: int
    end_date: np.datetime64
    label: ChurnLabel
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ValueError("images must be (T, H, W)")
        assert self.label.reference_date == self.end_date.astype(object)


def _day_vectors(feats, has_row, stats):
    """Normalized vectors; days without a row become the all-zero (hub-only) chart."""
    v = normalize(feats, stats)
    v[~has_row] = 0.0
    return v


def build_sequence(timeline: CourierTimeline, window: tuple[int, int], stats: NormStats,
                   geometry: RadarGeometry = DEFAULT_GEOMETRY, T: int = T_DEFAULT,
                   dataset_end=None, split: str = "train") -> WindowedSequence:
    """Render one window; leading missing days become padding, in-window gaps zero charts."""
    start, end = window
    if start < 0 or end < start or end - start + 1 > T:
        raise ValueError(f"invalid window {window} for T={T}")
    d0 = timeline.first_date
    feats, has_row = timeline.dense(d0 + start, d0 + end)
    pad = T - len(feats)
    imgs = np.empty((T,) + geometry.shape, dtype=np.float32)
    imgs[:pad] = render_padding(geometry)
    imgs[pad:] = render_batch(_day_vectors(feats, has_row, stats), geometry)
    label = assign_label(timeline, d0 + end, CHURN_HORIZON, dataset_end)
    return WindowedSequence(timeline.courier_id, imgs, pad, d0 + end, label, split)


# ---------------------------------------------------------------- dataset

@dataclass
class SequenceDataset:
    """Packed windows: ``frames[index]`` gives each window's T images."""

    frames: np.ndarray           # (n_frames, H, W) float32; frame 0 = padding
    features: np.ndarray         # (n_frames, 14) float32 normalized vectors; padding row = 0
    index: np.ndarray            # (count, T) int32
    courier_ids: np.ndarray      # (count,) str
    end_dates: np.ndarray        # (count,) datetime64[D]
    pad_counts: np.ndarray       # (count,) int32
    labels: np.ndarray           # (count,) int8
    splits: np.ndarray           # (count,) str
    frame_owner: np.ndarray | None = None   # (n_frames,) courier of each frame, "" for padding
    report: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.index)

    @property
    def T(self) -> int:
        return self.index.shape[1]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]

    def subset(self, mask_or_split) -> "SequenceDataset":
        """Windows of one split (or boolean mask); the frame table is shared, not copied."""
        if isinstance(mask_or_split, str):
            mask = self.splits == mask_or_split
        else:
            mask = np.asarray(mask_or_split)
        return SequenceDataset(self.frames, self.features, self.index[mask], self.courier_ids[mask],
                               self.end_dates[mask], self.pad_counts[mask], self.labels[mask],
                               self.splits[mask], self.frame_owner, {})

    def sequence(self, i: int) -> WindowedSequence:
        label = ChurnLabel(int(self.labels[i]), self.end_dates[i].astype(object))
        return WindowedSequence(str(self.courier_ids[i]), self.frames[self.index[i]],
                                int(self.pad_counts[i]), self.end_dates[i], label, str(self.splits[i]))

    def with_frames(self, frames: np.ndarray, features: np.ndarray | None = None) -> "SequenceDataset":
        return SequenceDataset(frames, self.features if features is None else features, self.index,
                               self.courier_ids, self.end_dates, self.pad_counts, self.labels,
                               self.splits, self.frame_owner, dict(self.report))

    def summary(self) -> dict:
        out = {}
        for s in SPLITS:
            m = self.splits == s
            out[s] = {"windows": int(m.sum()), "positives": int(self.labels[m].sum()),
                      "couriers": int(len(np.unique(self.courier_ids[m])))}
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.frames, self.features, self.index, self.labels, self.pad_counts):
            h.update(np.ascontiguousarray(a).tobytes())
        for a in (self.courier_ids, self.end_dates.astype(str), self.splits):
            h.update("\x1f".join(map(str, a)).encode())
        return h.hexdigest()


def _empty(T, shape):
    return SequenceDataset(
        np.ones((1,) + shape, np.float32), np.zeros((1, N_FEATURES), np.float32),
        np.zeros((0, T), np.int32), np.array([], dtype=object), np.array([], dtype="datetime64[D]"),
        np.zeros(0, np.int32), np.zeros(0, np.int8), np.array([], dtype=object), np.array([""], dtype=object))


def build_dataset(timelines, plan: WindowPlan, stats: NormStats, splits: SplitAssignment,
                  geometry: RadarGeometry = DEFAULT_GEOMETRY, test_plan: WindowPlan | None = None,
                  dataset_end=None, workers: int = 1) -> SequenceDataset:
    """Window every courier (span: first row .. dataset end), label, render and pack.

    ``test_plan`` applies to test couriers (the fine sweep); ``plan`` to the rest.
    """
    if stats.fitted_on != "train":
        raise DataError("normalization statistics must be fitted on the train split")
    timelines = sorted(timelines, key=lambda tl: tl.courier_id)
    if not timelines:
        raise DataError("no timelines")
    T = plan.T
    if test_plan is not None and test_plan.T != T:
        raise ValueError("train and test plans must share T")
    end = np.datetime64(dataset_end, "D") if dataset_end is not None else max(tl.last_date for tl in timelines)

    vec_rows = []                 # normalized day vectors to render, one chunk per courier
    owners, ids, ends, pads, labels, split_col, index_rows = [], [], [], [], [], [], []
    dropped = Counter()
    n_frames = 1
    for tl in timelines:
        split = splits[tl.courier_id]
        p = test_plan if (split == "test" and test_plan is not None) else plan
        L = int((end - tl.first_date).astype(int)) + 1
        kept = []
        for (s, e) in enumerate_windows(L, T, p.stride):
            lab = assign_label(tl, tl.first_date + e, CHURN_HORIZON, end)
            if lab.censored and not p.include_censored:
                dropped["censored"] += 1
                continue
            kept.append((s, e, lab.value))
        if not kept:
            continue
        last = max(e for _, e, _ in kept)
        first = min(s for s, _, _ in kept)
        feats, has_row = tl.dense(tl.first_date + first, tl.first_date + last)
        vec_rows.append(_day_vectors(feats, has_row, stats))
        owners.extend([tl.courier_id] * len(feats))
        for s, e, y in kept:
            n = e - s + 1
            row = np.zeros(T, np.int32)
            row[T - n:] = n_frames + (s - first) + np.arange(n)
            index_rows.append(row)
            ids.append(tl.courier_id)
            ends.append(tl.first_date + e)
            pads.append(T - n)
            labels.append(y)
            split_col.append(split)
        n_frames += len(feats)

    if not index_rows:
        warnings.warn("no windows produced")
        return _empty(T, geometry.shape)
    vecs = np.concatenate(vec_rows, axis=0)
    frames = np.empty((n_frames,) + geometry.shape, np.float32)
    frames[0] = render_padding(geometry)
    frames[1:] = render_batch(vecs, geometry, workers=workers)
    features = np.zeros((n_frames, N_FEATURES), np.float32)
    features[1:] = vecs
    ds = SequenceDataset(
        frames, features, np.stack(index_rows), np.array(ids, dtype=object),
        np.array(ends, dtype="datetime64[D]"), np.array(pads, np.int32), np.array(labels, np.int8),
        np.array(split_col, dtype=object), np.array([""] + owners, dtype=object))
    ds.report = {"dropped": dict(dropped), **ds.summary()}
    for s in SPLITS:
        if ds.report[s]["windows"] == 0:
            warnings.warn(f"split {s!r} has no windows")
    return ds


# ---------------------------------------------------------------- IO

def save_dataset(path, ds: SequenceDataset) -> tuple[Path, Path]:
    """Binary frame/feature/index tables plus the sidecar index CSV (``<path>.index.csv``)."""
    path = Path(path)
    n_frames, H, W = ds.frames.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<6I", VERSION, ds.T, H, W, len(ds), n_frames))
        fh.write(np.ascontiguousarray(ds.frames, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.index, dtype="<i4").tobytes())
        owner = ds.frame_owner if ds.frame_owner is not None else np.array([""] * n_frames)
        fh.write("\n".join(map(str, owner)).encode("utf-8"))
    side = index_path(path)
    with open(side, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_HEADER)
        for row in zip(ds.courier_ids, ds.end_dates, ds.pad_counts, ds.labels, ds.splits):
            w.writerow([row[0], str(row[1]), int(row[2]), int(row[3]), row[4]])
    return path, side


def index_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".index.csv")


def load_dataset(path) -> SequenceDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    if raw[:4] != MAGIC or len(raw) < 28:
        raise DataError(f"{path}: not a sequence dataset")
    version, T, H, W, count, n_frames = struct.unpack("<6I", raw[4:28])
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    off = 28
    sizes = [n_frames * H * W * 4, n_frames * N_FEATURES * 4, count * T * 4]
    if len(raw) < off + sum(sizes):
        raise DataError(f"{path}: truncated")
    frames = np.frombuffer(raw, "<f4", n_frames * H * W, off).reshape(n_frames, H, W).astype(np.float32)
    off += sizes[0]
    features = np.frombuffer(raw, "<f4", n_frames * N_FEATURES, off).reshape(n_frames, N_FEATURES).astype(np.float32)
    off += sizes[1]
    index = np.frombuffer(raw, "<i4", count * T, off).reshape(count, T).astype(np.int32)
    off += sizes[2]
    owner = np.array(raw[off:].decode("utf-8").split("\n"), dtype=object)
    with open(index_path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader)) != INDEX_HEADER:
            raise DataError(f"{index_path(path)}: bad header")
        rows = list(reader)
    if len(rows) != count:
        raise DataError(f"{path}: index has {len(rows)} rows, header says {count}")
    cols = list(zip(*rows)) if rows else [[]] * 5
    return SequenceDataset(
        frames, features, index, np.array(cols[0], dtype=object),
        np.array(cols[1], dtype="datetime64[D]"), np.array(cols[2], dtype=np.int32),
        np.array(cols[3], dtype=np.int8), np.array(cols[4], dtype=object),
        owner if len(owner) == n_frames else None)
