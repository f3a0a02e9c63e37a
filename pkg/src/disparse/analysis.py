"""Task relatedness from trunk masks: layer-wise IoU and watershed detection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import LayerSpan, Mask


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class IoUProfile:
    layer_ids: tuple[str, ...]
    iou: tuple[float, ...]
    k: int
    # Layers whose union keep-set is empty; reported as IoU 1.
    degenerate: tuple[bool, ...] = ()
    watershed_layer: str | None = None

    def __len__(self) -> int:
        return len(self.layer_ids)


def _stack(masks: Sequence[Mask | np.ndarray]) -> np.ndarray:
    arrays = [np.asarray(m.bits if isinstance(m, Mask) else m, dtype=bool).reshape(-1) for m in masks]
    if len({a.size for a in arrays}) != 1:
        raise AnalysisError(f"mask lengths differ: {sorted({a.size for a in arrays})}")
    return np.vstack(arrays)


def layerwise_iou(masks: Sequence[Mask | np.ndarray], layout: Sequence[LayerSpan] | None = None) -> IoUProfile:
    """K-way |AND| / |OR| of keep-sets per layer."""
    if len(masks) < 2:
        raise AnalysisError("IoU needs at least two masks")
    stack = _stack(masks)
    if layout is None:
        if not isinstance(masks[0], Mask):
            raise AnalysisError("plain bit arrays need an explicit layout")
        layout = masks[0].layout
    if (layout[-1].stop if layout else 0) != stack.shape[1]:
        raise AnalysisError("layout does not cover the masks")
    ids, values, flags = [], [], []
    for span in layout:
        block = stack[:, span.start : span.stop]
        inter = int(block.all(axis=0).sum())
        union = int(block.any(axis=0).sum())
        ids.append(span.layer_id)
        flags.append(union == 0)
        values.append(1.0 if union == 0 else inter / union)
    return IoUProfile(tuple(ids), tuple(values), stack.shape[0], tuple(flags))


def pairwise_iou(masks: Sequence[Mask | np.ndarray], layout: Sequence[LayerSpan] | None = None) -> np.ndarray:
    """Array ``(K, K, n_layers)`` of two-mask layer-wise IoU."""
    k = len(masks)
    layout = layout if layout is not None else masks[0].layout
    out = np.ones((k, k, len(layout)))
    for i, j in combinations(range(k), 2):
        prof = layerwise_iou([masks[i], masks[j]], layout)
        out[i, j] = out[j, i] = prof.iou
    return out


def density_profile(mask: Mask) -> dict[str, float]:
    return {s.layer_id: float(mask.bits[s.start : s.stop].mean()) for s in mask.layout}


def detect_watershed(profile: IoUProfile, drop_threshold: float = 0.15) -> str | None:
    """First layer whose IoU falls at least ``drop_threshold`` below the
    layer before it."""
    if len(profile) == 0:
        raise AnalysisError("empty IoU profile")
    for l in range(len(profile) - 1):
        if profile.iou[l] - profile.iou[l + 1] >= drop_threshold:
            return profile.layer_ids[l + 1]
    return None


def with_watershed(profile: IoUProfile, drop_threshold: float = 0.15) -> IoUProfile:
    return IoUProfile(
        profile.layer_ids, profile.iou, profile.k, profile.degenerate, detect_watershed(profile, drop_threshold)
    )


def write_iou_table(profile: IoUProfile, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer_id", "iou"])
        for lid, v in zip(profile.layer_ids, profile.iou):
            writer.writerow([lid, repr(float(v))])


def read_iou_table(path: str | Path) -> list[tuple[str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(lid, float(v)) for lid, v in rows[1:]]
