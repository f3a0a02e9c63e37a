"""Merging per-task trunk masks into one, and stitching full-model masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import SHARED, Mask, MaskSet, PartitionError, make_layout

ARBITERS = ("or", "majority")


class ArbiterError(ValueError):
    pass


@dataclass(frozen=True)
class ArbiterKind:
    kind: str = "or"
    tie_keep: bool = True

    def __post_init__(self):
        if self.kind not in ARBITERS:
            raise ArbiterError(f"unknown arbiter {self.kind!r}; expected one of {ARBITERS}")


def merge_bits(bits: Sequence[np.ndarray], arbiter: ArbiterKind) -> np.ndarray:
    if len(bits) == 0:
        raise ArbiterError("need at least one mask to merge")
    lengths = {b.size for b in bits}
    if len(lengths) != 1:
        raise ArbiterError(f"mask lengths differ: {sorted(lengths)}")
    stack = np.vstack([np.asarray(b, dtype=bool).reshape(-1) for b in bits])
    k = stack.shape[0]
    if arbiter.kind == "or":
        return stack.any(axis=0)
    if k < 3:
        raise ArbiterError(f"majority vote needs at least 3 tasks, got {k}")
    votes = stack.sum(axis=0)
    # Integer form of votes > K/2 (or >= K/2 with tie_keep).
    if arbiter.tie_keep:
        return 2 * votes >= k
    return 2 * votes > k


def merge(masks: Sequence[Mask], arbiter: ArbiterKind | str = "or") -> Mask:
    if isinstance(arbiter, str):
        arbiter = ArbiterKind(arbiter)
    if not masks:
        raise ArbiterError("need at least one mask to merge")
    layouts = {m.layout for m in masks}
    if len(layouts) != 1:
        lengths = sorted({len(m) for m in masks})
        raise ArbiterError(f"masks cover different spans (lengths {lengths})")
    return Mask(SHARED, merge_bits([m.bits for m in masks], arbiter), masks[0].layout)


def split_task_mask(task_mask: Mask, m_c: int, task_id: str) -> tuple[Mask, Mask]:
    """Cut a trunk-plus-head mask into its trunk part and its head part."""
    shared_spans = [s for s in task_mask.layout if s.stop <= m_c]
    if (shared_spans[-1].stop if shared_spans else 0) != m_c:
        raise PartitionError(f"m_c={m_c} does not fall on a layer boundary")
    head_spans = [s for s in task_mask.layout if s.start >= m_c]
    shared = Mask(SHARED, task_mask.bits[:m_c], make_layout((s.layer_id, s.shape) for s in shared_spans))
    private = Mask(task_id, task_mask.bits[m_c:], make_layout((s.layer_id, s.shape) for s in head_spans))
    return shared, private


def assemble_full_mask(
    shared: Mask, private: Mapping[str, Mask], expected_layers: Sequence[str] | None = None
) -> Mask:
    """Concatenate trunk mask and head masks into one model-wide mask
    (trunk first, then heads in the given order).  With ``expected_layers``
    the masks must cover exactly those layers."""
    seen: set[str] = set()
    spans = []
    for m in [shared, *private.values()]:
        for s in m.layout:
            if s.layer_id in seen:
                raise PartitionError(f"layer {s.layer_id!r} covered by more than one mask")
            seen.add(s.layer_id)
            spans.append((s.layer_id, s.shape))
    if expected_layers is not None and seen != set(expected_layers):
        missing = sorted(set(expected_layers) - seen)
        extra = sorted(seen - set(expected_layers))
        raise PartitionError(f"mask spans do not match the model: missing {missing}, unexpected {extra}")
    bits = np.concatenate([shared.bits, *[m.bits for m in private.values()]]) if spans else np.zeros(0, bool)
    return Mask("full", bits, make_layout(spans))


def split_full_mask(full: Mask, template: MaskSet) -> MaskSet:
    """Inverse of :func:`assemble_full_mask` given the per-group layouts."""
    expected = sum(len(m) for m in template.all_masks())
    if len(full) != expected:
        raise PartitionError(f"full mask has {len(full)} bits, partition needs {expected}")
    pos = 0
    out = []
    for m in template.all_masks():
        out.append(Mask(m.group, full.bits[pos : pos + len(m)], m.layout))
        pos += len(m)
    return MaskSet(out[0], {m.group: m for m in out[1:]})
