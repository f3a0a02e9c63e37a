"""Per-task importance scores over a task's trunk-plus-head parameters.

All three criteria start from the same quantity, the gradient of the task
loss with respect to the *effective* weight ``w * mask``.  The gradient with
respect to a mask bit then follows from the chain rule,
``dL/dmask = dL/d(w*mask) * w``, so no mask variables ever enter the graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import (
    SHARED,
    LayerSpan,
    MaskSet,
    MultitaskMLP,
    make_layout,
    multitask_loss,
    per_task_loss,
)

CRITERIA = ("static", "dynamic-grow", "pretrained")
ACCUMULATION = ("signed", "abs")

# A batch is (inputs, {task_id: target}).
Batch = tuple[np.ndarray, Mapping[str, np.ndarray]]


class SaliencyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SaliencyVector:
    task_id: str
    criterion: str
    scores: np.ndarray
    layout: tuple[LayerSpan, ...]
    batch_count: int

    def __len__(self) -> int:
        return self.scores.size


def _effective_leaves(model: MultitaskMLP, masks: MaskSet | None) -> dict[str, Tensor]:
    """Fresh leaf tensors holding w * mask for every parameter."""
    mask_arrays = {}
    if masks is not None:
        for m in masks.all_masks():
            for span in m.layout:
                mask_arrays[span.layer_id] = m.bits[span.start : span.stop].reshape(span.shape)
    leaves = {}
    for lid, t in model.parameters():
        data = t.data * mask_arrays[lid] if lid in mask_arrays else t.data
        leaves[lid] = Tensor(data, requires_grad=True, name=lid)
    return leaves


def _groups_for(model: MultitaskMLP, task_id: str | None) -> list[str]:
    if task_id is None:
        return [SHARED, *model.task_ids]
    return [SHARED, task_id]


def _layout(model: MultitaskMLP, groups: Sequence[str]):
    part = model.partition
    return make_layout((lid, t.shape) for g in groups for lid, t in part.maskable(g))


def effective_gradients(
    model: MultitaskMLP,
    masks: MaskSet | None,
    task_id: str | None,
    batches: Sequence[Batch],
    accumulation: str = "signed",
) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[LayerSpan, ...]]:
    """Accumulated dL/d(w*mask) over ``batches``, flattened over the maskable
    parameters of ``task_id``'s trunk-plus-head span (``None`` = the whole
    model with the weighted multitask loss).

    Returns ``(grads, weights, effective, layout)``.
    """
    if not batches:
        raise SaliencyError("saliency needs at least one batch")
    if accumulation not in ACCUMULATION:
        raise ValueError(f"accumulation must be one of {ACCUMULATION}")
    if task_id is not None:
        model.task(task_id)
    groups = _groups_for(model, task_id)
    layout = _layout(model, groups)
    ids = [s.layer_id for s in layout]

    leaves = _effective_leaves(model, masks)
    acc = {lid: np.zeros(leaves[lid].shape) for lid in ids}
    for x, targets in batches:
        for leaf in leaves.values():
            leaf.grad = None

        def objective(inp):
            preds = model.apply(leaves, inp)
            if task_id is None:
                return multitask_loss(preds, targets, model.tasks)
            return per_task_loss(preds, targets, model.tasks, task_id)

        _, tape = ag.forward(objective, Tensor(x))
        ag.backward(tape)
        for lid in ids:
            g = leaves[lid].grad
            if g is None:
                continue
            acc[lid] += g if accumulation == "signed" else np.abs(g)

    params = dict(model.parameters())
    grads = np.concatenate([acc[lid].reshape(-1) for lid in ids])
    weights = np.concatenate([params[lid].data.reshape(-1) for lid in ids])
    effective = np.concatenate([leaves[lid].data.reshape(-1) for lid in ids])
    return grads, weights, effective, layout


def connection_sensitivity(grads: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """|dL/dmask| = |dL/d(w*mask) * w|, normalised to sum to one."""
    raw = np.abs(grads * weights)
    total = raw.sum()
    if not total > 0:
        raise SaliencyError(
            "all mask gradients are zero; cannot normalise "
            "(check for a dead network or constant targets)"
        )
    return raw / total


def gradient_magnitude(grads: np.ndarray) -> np.ndarray:
    return np.abs(grads)


def gradient_times_square(grads: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """|dL/dw| * w**2."""
    return np.abs(grads) * weights**2


def static_saliency(
    model: MultitaskMLP,
    masks: MaskSet | None,
    task_id: str | None,
    batches: Sequence[Batch],
    accumulation: str = "signed",
) -> SaliencyVector:
    """Connection sensitivity |dL/dmask|, normalised to sum to one."""
    grads, weights, _, layout = effective_gradients(model, masks, task_id, batches, accumulation)
    try:
        scores = connection_sensitivity(grads, weights)
    except SaliencyError as exc:
        raise SaliencyError(f"task {task_id!r}: {exc}") from None
    return SaliencyVector(task_id or "*", "static", scores, layout, len(batches))


def grow_saliency(
    model: MultitaskMLP,
    masks: MaskSet | None,
    task_id: str | None,
    batches: Sequence[Batch],
    accumulation: str = "signed",
) -> SaliencyVector:
    """|dL/dw| for every connection, active or not (unnormalised)."""
    grads, _, _, layout = effective_gradients(model, masks, task_id, batches, accumulation)
    return SaliencyVector(task_id or "*", "dynamic-grow", gradient_magnitude(grads), layout, len(batches))


def pretrained_saliency(
    model: MultitaskMLP,
    masks: MaskSet | None,
    task_id: str | None,
    batches: Sequence[Batch],
    accumulation: str = "signed",
) -> SaliencyVector:
    """|dL/dw| * w^2 on a trained model."""
    grads, _, effective, layout = effective_gradients(model, masks, task_id, batches, accumulation)
    return SaliencyVector(
        task_id or "*", "pretrained", gradient_times_square(grads, effective), layout, len(batches)
    )


SALIENCY_FNS = {
    "static": static_saliency,
    "dynamic-grow": grow_saliency,
    "pretrained": pretrained_saliency,
}


def dump_saliency(sv: SaliencyVector, path: str | Path) -> None:
    """Write per-layer score summaries as JSON (debugging aid)."""
    layers = []
    for span in sv.layout:
        s = sv.scores[span.start : span.stop]
        layers.append(
            {
                "layer_id": span.layer_id,
                "size": span.size,
                "sum": float(s.sum()),
                "mean": float(s.mean()),
                "max": float(s.max()),
                "min": float(s.min()),
                "nonzero": int(np.count_nonzero(s)),
            }
        )
    record = {
        "task_id": sv.task_id,
        "criterion": sv.criterion,
        "batch_count": sv.batch_count,
        "length": len(sv),
        "layers": layers,
    }
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
