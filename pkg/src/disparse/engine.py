"""Mask generation for the three sparsification paradigms.

* static: one-shot connection-sensitivity masks before training, with an
  optional search over the per-task request so the merged model still hits
  the requested sparsity;
* dynamic: periodic magnitude prune / gradient grow with a cosine-decayed
  update fraction;
* pretrained: one-shot gradient-times-squared-weight masks on a trained
  model, followed by masked finetuning.

Every paradigm supports the per-task scheme (one mask per task over its
trunk-plus-head parameters, trunk masks merged by an arbiter) and the
combined-loss, random and magnitude controls.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .arbiter import ArbiterKind, merge_bits, split_task_mask
from .model import (
    SHARED,
    LayerSpan,
    Mask,
    MaskSet,
    MultitaskMLP,
    ParamPartition,
    achieved_sparsity,
    make_layout,
)
from .saliency import SALIENCY_FNS, Batch, SaliencyVector, grow_saliency

log = logging.getLogger(__name__)

METHODS = ("disparse", "baseline-combined", "random", "magnitude")
SCOPES = ("global", "erk")


class EngineError(ValueError):
    pass


@dataclass(frozen=True)
class SparsityTarget:
    sparsity: float
    scope: str = "global"

    def __post_init__(self):
        if not 0.0 < self.sparsity < 1.0:
            raise EngineError(f"sparsity must lie in (0, 1), got {self.sparsity}")
        if self.scope not in SCOPES:
            raise EngineError(f"scope must be one of {SCOPES}, got {self.scope!r}")


@dataclass
class PruneState:
    masks: MaskSet
    sparsity: float
    # Pre-merge trunk masks, one per task (per-task method only).
    task_shared_masks: dict[str, Mask] = field(default_factory=dict)
    requested_sparsity: float | None = None
    internal_sparsity: float | None = None
    calibration_steps: int = 0
    iteration: int = 0
    # Per-layer active counts the dynamic schedule maintains.
    layer_targets: dict[str, int] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    def active_indices(self, group: str) -> np.ndarray:
        mask = self.masks.shared if group == SHARED else self.masks.private[group]
        return np.flatnonzero(mask.bits)


def keep_count(sparsity: float, n: int) -> int:
    """floor((1 - S) * n), guarded against (1 - 0.9) * 10 = 0.999... artefacts."""
    return min(n, max(0, math.floor((1.0 - sparsity) * n + 1e-9)))


def top_k_bits(scores: np.ndarray, count: int) -> np.ndarray:
    """Keep the ``count`` highest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if not 0 <= count <= n:
        raise EngineError(f"count={count} outside [0, {n}]")
    if np.isnan(scores).any():
        raise EngineError("scores contain NaN")
    order = np.argsort(-scores, kind="stable")
    bits = np.zeros(n, dtype=bool)
    bits[order[:count]] = True
    return bits


def top_k_mask(sv: SaliencyVector, count: int) -> Mask:
    return Mask(sv.task_id, top_k_bits(sv.scores, count), sv.layout)


# -- ERK ----------------------------------------------------------------------


def _layer_shapes(layers) -> list[tuple[str, tuple[int, ...]]]:
    if isinstance(layers, ParamPartition):
        groups = [SHARED, *layers.task_ids]
        return [(lid, t.shape) for g in groups for lid, t in layers.maskable(g)]
    if layers and isinstance(layers[0], LayerSpan):
        return [(s.layer_id, s.shape) for s in layers]
    return [(lid, tuple(shape)) for lid, shape in layers]


def _erk_solution(shapes, sparsity):
    if not 0.0 < sparsity < 1.0:
        raise EngineError(f"sparsity must lie in (0, 1), got {sparsity}")
    sizes = {lid: int(np.prod(s)) for lid, s in shapes}
    raw = {lid: float(np.sum(s)) / sizes[lid] for lid, s in shapes}
    budget_total = (1.0 - sparsity) * sum(sizes.values())
    dense: set[str] = set()
    while True:
        budget = budget_total - sum(sizes[lid] for lid in dense)
        divisor = sum(raw[lid] * sizes[lid] for lid in sizes if lid not in dense)
        if budget < 0 or divisor <= 0:
            raise EngineError(f"ERK allocation infeasible at sparsity {sparsity}")
        eps = budget / divisor
        over = [lid for lid in sizes if lid not in dense and eps * raw[lid] > 1.0]
        if not over:
            break
        dense.update(over)
    density = {lid: 1.0 if lid in dense else eps * raw[lid] for lid in sizes}
    return sizes, density


def erk_allocation(layers, sparsity: float) -> dict[str, float]:
    """Per-layer sparsity with density proportional to (fan_in + fan_out) /
    (fan_in * fan_out), capped at 1 with the excess spread over the rest."""
    _, density = _erk_solution(_layer_shapes(layers), sparsity)
    return {lid: 1.0 - d for lid, d in density.items()}


def erk_layer_counts(layers, sparsity: float) -> dict[str, int]:
    """Integer ERK budgets summing to round((1 - S) * m) exactly
    (largest-remainder rounding, ties to the earlier layer)."""
    shapes = _layer_shapes(layers)
    sizes, density = _erk_solution(shapes, sparsity)
    total = int(round((1.0 - sparsity) * sum(sizes.values())))
    exact = {lid: density[lid] * sizes[lid] for lid in sizes}
    counts = {lid: min(sizes[lid], int(math.floor(v))) for lid, v in exact.items()}
    short = total - sum(counts.values())
    ranked = sorted(sizes, key=lambda lid: -(exact[lid] - math.floor(exact[lid])))
    for lid in ranked * 2:
        if short <= 0:
            break
        if counts[lid] < sizes[lid]:
            counts[lid] += 1
            short -= 1
    return counts


# -- one-shot masks ----------------------------------------------------------


def _select(scores: np.ndarray, layout: Sequence[LayerSpan], sparsity: float, scope: str) -> np.ndarray:
    if scope == "global":
        return top_k_bits(scores, keep_count(sparsity, scores.size))
    counts = erk_layer_counts(list(layout), sparsity)
    bits = np.zeros(scores.size, dtype=bool)
    for span in layout:
        bits[span.start : span.stop] = top_k_bits(scores[span.start : span.stop], counts[span.layer_id])
    return bits


def masks_from_scores(
    partition: ParamPartition,
    saliencies: Mapping[str, SaliencyVector],
    sparsity: float,
    arbiter: ArbiterKind,
    scope: str = "global",
) -> PruneState:
    """top-k per task over its trunk-plus-head scores, heads assigned
    directly, trunk masks merged by ``arbiter``."""
    m_c = partition.m_c
    trunk_bits, private, task_shared = [], {}, {}
    for task_id in partition.task_ids:
        sv = saliencies[task_id]
        if sv.layout != partition.task_layout(task_id):
            raise EngineError(f"saliency layout for {task_id!r} does not match the partition")
        bits = _select(sv.scores, sv.layout, sparsity, scope)
        shared_mask, private[task_id] = split_task_mask(Mask(task_id, bits, sv.layout), m_c, task_id)
        task_shared[task_id] = shared_mask
        trunk_bits.append(shared_mask.bits)
    shared = Mask(SHARED, merge_bits(trunk_bits, arbiter), partition.layout(SHARED))
    masks = MaskSet(shared, private)
    return PruneState(
        masks=masks,
        sparsity=achieved_sparsity(masks),
        task_shared_masks=task_shared,
        requested_sparsity=sparsity,
        internal_sparsity=sparsity,
    )


def calibrate_from_scores(
    partition: ParamPartition,
    saliencies: Mapping[str, SaliencyVector],
    sparsity: float,
    arbiter: ArbiterKind,
    tol: float = 0.005,
    scope: str = "global",
    max_iters: int = 60,
) -> PruneState:
    """Search the per-task request until the merged sparsity lands in
    [S, S + tol].  The achieved sparsity is monotone in the request because
    top-k sets are nested, so bisection applies."""
    if tol <= 0:
        raise EngineError("tol must be positive")

    def run(s):
        return masks_from_scores(partition, saliencies, s, arbiter, scope)

    state = run(sparsity)
    steps = 1
    if sparsity <= state.sparsity <= sparsity + tol:
        state.calibration_steps = steps
        return state
    lo, hi = (sparsity, 1.0) if state.sparsity < sparsity else (0.0, sparsity)
    best = state if state.sparsity >= sparsity else None
    while steps < max_iters:
        mid = 0.5 * (lo + hi)
        if not 0.0 < mid < 1.0 or hi - lo < 1e-12:
            break
        cand = run(mid)
        steps += 1
        if cand.sparsity < sparsity:
            lo = mid
        else:
            if best is None or cand.sparsity < best.sparsity:
                best = cand
            if cand.sparsity <= sparsity + tol:
                break
            hi = mid
    result = best if best is not None else state
    result.requested_sparsity = sparsity
    result.calibration_steps = steps
    if not sparsity <= result.sparsity <= sparsity + tol:
        msg = (
            f"calibration did not reach [{sparsity}, {sparsity + tol}] after {steps} steps; "
            f"best achieved {result.sparsity:.6f} at request {result.internal_sparsity:.6f}"
        )
        log.warning(msg)
        result.diagnostics.append(msg)
    return result


def task_saliencies(
    model: MultitaskMLP,
    criterion: str,
    batches: Sequence[Batch],
    masks: MaskSet | None = None,
    accumulation: str = "signed",
) -> dict[str, SaliencyVector]:
    fn = SALIENCY_FNS[criterion]
    return {k: fn(model, masks, k, batches, accumulation) for k in model.task_ids}


def _whole_model_masks(partition: ParamPartition, bits: np.ndarray) -> MaskSet:
    pos = 0
    groups = {}
    for g in [SHARED, *partition.task_ids]:
        layout = partition.layout(g)
        n = layout[-1].stop if layout else 0
        groups[g] = Mask(g, bits[pos : pos + n], layout)
        pos += n
    shared = groups.pop(SHARED)
    return MaskSet(shared, groups)


def _full_layout(partition: ParamPartition):
    return make_layout(_layer_shapes(partition))


def static_sparsify(
    model: MultitaskMLP,
    target: SparsityTarget,
    arbiter: ArbiterKind,
    batches: Sequence[Batch],
    accumulation: str = "signed",
) -> PruneState:
    """Per-task one-shot masks at the requested per-task sparsity."""
    sal = task_saliencies(model, "static", batches, None, accumulation)
    return masks_from_scores(model.partition, sal, target.sparsity, arbiter, target.scope)


def calibrate_static_sparsity(
    model: MultitaskMLP,
    target: SparsityTarget,
    arbiter: ArbiterKind,
    batches: Sequence[Batch],
    tol: float = 0.005,
    accumulation: str = "signed",
    criterion: str = "static",
    max_iters: int = 60,
) -> PruneState:
    sal = task_saliencies(model, criterion, batches, None, accumulation)
    return calibrate_from_scores(
        model.partition, sal, target.sparsity, arbiter, tol, target.scope, max_iters
    )


def generate_masks(
    model: MultitaskMLP,
    method: str,
    criterion: str,
    target: SparsityTarget,
    arbiter: ArbiterKind,
    batches: Sequence[Batch],
    rng: np.random.Generator | None = None,
    calibrate: bool = True,
    tol: float = 0.005,
    accumulation: str = "signed",
) -> PruneState:
    """One-shot masks for the static and pretrained paradigms."""
    partition = model.partition
    if method == "disparse":
        if calibrate:
            return calibrate_static_sparsity(
                model, target, arbiter, batches, tol, accumulation, criterion
            )
        sal = task_saliencies(model, criterion, batches, None, accumulation)
        return masks_from_scores(partition, sal, target.sparsity, arbiter, target.scope)

    layout = _full_layout(partition)
    if method == "baseline-combined":
        sv = SALIENCY_FNS[criterion](model, None, None, batches, accumulation)
        scores = sv.scores
    elif method == "magnitude":
        scores = np.abs(np.concatenate([partition.flatten(g) for g in [SHARED, *partition.task_ids]]))
    elif method == "random":
        if rng is None:
            raise EngineError("random masks need an rng")
        scores = rng.random(layout[-1].stop)
    else:
        raise EngineError(f"unknown method {method!r}; expected one of {METHODS}")
    bits = _select(scores, layout, target.sparsity, target.scope)
    masks = _whole_model_masks(partition, bits)
    return PruneState(
        masks=masks,
        sparsity=achieved_sparsity(masks),
        requested_sparsity=target.sparsity,
        internal_sparsity=target.sparsity,
    )


def prune_pretrained(
    model: MultitaskMLP,
    target: SparsityTarget,
    arbiter: ArbiterKind,
    batches: Sequence[Batch],
    method: str = "disparse",
    finetune: Callable[[MultitaskMLP, MaskSet], object] | None = None,
    rng: np.random.Generator | None = None,
    calibrate: bool = True,
    tol: float = 0.005,
    accumulation: str = "signed",
) -> tuple[PruneState, object]:
    """One-shot prune of a trained model, then optional masked finetuning."""
    state = generate_masks(
        model, method, "pretrained", target, arbiter, batches, rng, calibrate, tol, accumulation
    )
    model.apply_masks_(state.masks)
    result = finetune(model, state.masks) if finetune is not None else None
    return state, result


# -- dynamic ------------------------------------------------------------------


def compensated_prune_rate(target_sparsity: float, achieved: float, prune_rate: float) -> float:
    """Prune rate that brings an over-grown model back to ``target_sparsity``
    after the usual prune/grow cycle:
    1 - (1 - target) / (1 - achieved) * (1 - prune_rate)."""
    return 1.0 - (1.0 - target_sparsity) / (1.0 - achieved) * (1.0 - prune_rate)


@dataclass(frozen=True)
class DynamicSchedule:
    alpha: float = 0.3
    total_iterations: int = 5000
    end_fraction: float = 0.75
    update_interval: int = 100

    def __post_init__(self):
        if self.update_interval < 1:
            raise EngineError("update_interval must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise EngineError("alpha must lie in [0, 1]")
        if self.t_end >= self.total_iterations:
            raise EngineError("the last update must come before the final iteration")

    @property
    def t_end(self) -> int:
        return math.floor(self.end_fraction * self.total_iterations)

    def decay(self, t: int) -> float:
        """Cosine decay from alpha at t=0 to 0 at t_end."""
        if t >= self.t_end:
            return 0.0
        return 0.5 * self.alpha * (1.0 + math.cos(math.pi * t / self.t_end))

    def is_update(self, t: int) -> bool:
        return 0 < t <= self.t_end and t % self.update_interval == 0


def init_dynamic_state(model: MultitaskMLP, target: SparsityTarget, rng: np.random.Generator) -> PruneState:
    """Random masks with ERK per-layer budgets; switched-off weights zeroed."""
    partition = model.partition
    counts = erk_layer_counts(partition, target.sparsity)
    groups = {}
    for g in [SHARED, *partition.task_ids]:
        layout = partition.layout(g)
        bits = np.zeros(layout[-1].stop if layout else 0, dtype=bool)
        for span in layout:
            keep = rng.permutation(span.size)[: counts[span.layer_id]]
            bits[span.start + keep] = True
        groups[g] = Mask(g, bits, layout)
    shared = groups.pop(SHARED)
    masks = MaskSet(shared, groups)
    model.apply_masks_(masks)
    return PruneState(
        masks=masks,
        sparsity=achieved_sparsity(masks),
        requested_sparsity=target.sparsity,
        layer_targets=counts,
    )


def _layer_views(masks: MaskSet):
    """(group, span, bits-view) for every maskable layer."""
    for m in masks.all_masks():
        for span in m.layout:
            yield m.group, span, m.bits[span.start : span.stop]


def dynamic_step(
    state: PruneState,
    model: MultitaskMLP,
    schedule: DynamicSchedule,
    arbiter: ArbiterKind,
    batches: Sequence[Batch],
    t: int,
    method: str = "disparse",
    accumulation: str = "signed",
    on_change: Callable[[str, np.ndarray], None] | None = None,
) -> tuple[PruneState, dict]:
    """One prune/grow update at iteration ``t``.

    Per layer: drop the smallest-magnitude active weights, then grow the
    highest-gradient inactive ones back (just-pruned weights excluded).  The
    prune count is compensated so that, absent arbiter overshoot, the layer
    returns exactly to its target count.  ``on_change(layer_id, flat_idx)``
    is called with every pruned or grown index so optimiser state can be
    reset.
    """
    if not schedule.is_update(t):
        raise EngineError(f"iteration {t} is not on the update grid (t_end={schedule.t_end})")
    if method not in ("disparse", "baseline-combined"):
        raise EngineError(f"dynamic updates support disparse and baseline-combined, not {method!r}")
    rate = schedule.decay(t)
    masks = state.masks.copy()
    params = dict(model.parameters())
    targets = state.layer_targets

    pruned_total = 0
    grow_request: dict[str, int] = {}
    just_pruned: dict[str, np.ndarray] = {}
    adjusted_rates: dict[str, float] = {}
    for group, span, bits in _layer_views(masks):
        lid = span.layer_id
        target = targets[lid]
        if target >= span.size:
            continue
        active = int(bits.sum())
        n_grow = min(math.floor(rate * target + 0.5), span.size - target)
        if active > 0 and active < span.size:
            adjusted_rates[lid] = compensated_prune_rate(
                1.0 - target / span.size, 1.0 - active / span.size, rate
            )
        # Integer form of compensated_prune_rate(...) * active.
        n_prune = max(0, min(active, active - target + n_grow))
        idx_active = np.flatnonzero(bits)
        mags = np.abs(params[lid].data.reshape(-1)[idx_active])
        drop = idx_active[np.argsort(mags, kind="stable")[:n_prune]]
        bits[drop] = False
        just_pruned[lid] = drop
        grow_request[lid] = target - int(bits.sum())
        pruned_total += drop.size

    # Prune before scoring growth: gradients are taken at the pruned network.
    model.apply_masks_(masks)
    grown: dict[str, np.ndarray] = {}
    # Growth actually possible per layer: the request capped by eligible slots.
    grantable: dict[str, int] = {}

    def pick(scores_layer, bits_layer, lid):
        eligible = ~bits_layer
        eligible[just_pruned[lid]] = False
        want = max(0, min(grow_request[lid], int(eligible.sum())))
        grantable[lid] = want
        s = np.where(eligible, scores_layer, -np.inf)
        return top_k_bits(s, want) & eligible

    if method == "baseline-combined":
        sv = grow_saliency(model, masks, None, batches, accumulation)
        layer_scores = {s.layer_id: sv.scores[s.start : s.stop] for s in sv.layout}
        for group, span, bits in _layer_views(masks):
            if span.layer_id in grow_request:
                grown[span.layer_id] = pick(layer_scores[span.layer_id], bits, span.layer_id)
    else:
        shared_votes: dict[str, list[np.ndarray]] = {}
        for task_id in model.task_ids:
            sv = grow_saliency(model, masks, task_id, batches, accumulation)
            layer_scores = {s.layer_id: sv.scores[s.start : s.stop] for s in sv.layout}
            for group, span, bits in _layer_views(masks):
                lid = span.layer_id
                if lid not in grow_request or group not in (SHARED, task_id):
                    continue
                g = pick(layer_scores[lid], bits, lid)
                if group == SHARED:
                    shared_votes.setdefault(lid, []).append(g)
                else:
                    grown[lid] = g
        for lid, votes in shared_votes.items():
            grown[lid] = merge_bits(votes, arbiter)

    grown_total = 0
    overshoot = deficit = 0
    shortfall = sum(max(0, grow_request[lid] - grantable[lid]) for lid in grantable)
    # Connections the arbiter added beyond (or, for majority, withheld from)
    # what a single task was allowed to grow.
    merge_excess = 0
    for group, span, bits in _layer_views(masks):
        lid = span.layer_id
        if lid in grown:
            bits |= grown[lid]
            grown_total += int(grown[lid].sum())
            merge_excess += int(grown[lid].sum()) - grantable[lid]
        if lid in targets and targets[lid] < span.size:
            excess = int(bits.sum()) - targets[lid]
            overshoot += max(excess, 0)
            deficit += max(-excess, 0)
        if on_change is not None:
            changed = np.concatenate([just_pruned.get(lid, np.zeros(0, int)), np.flatnonzero(grown.get(lid, []))])
            if changed.size:
                on_change(lid, changed.astype(int))

    # Grown weights start at zero; they were zeroed when they went inactive.
    model.apply_masks_(masks)
    new_state = PruneState(
        masks=masks,
        sparsity=achieved_sparsity(masks),
        requested_sparsity=state.requested_sparsity,
        iteration=t,
        layer_targets=targets,
        diagnostics=list(state.diagnostics),
    )
    if shortfall:
        msg = f"t={t}: growth short by {shortfall} connections (not enough eligible slots)"
        log.info(msg)
        new_state.diagnostics.append(msg)
    record = {
        "iteration": t,
        "prune_rate": rate,
        "pruned": pruned_total,
        "grown": grown_total,
        "active": masks.kept,
        "target_active": sum(targets.values()),
        "overshoot": overshoot,
        "deficit": deficit,
        "merge_excess": merge_excess,
        "shortfall": shortfall,
        "sparsity": new_state.sparsity,
        "adjusted_prune_rate": {k: adjusted_rates[k] for k in sorted(adjusted_rates)},
        "layer_density": {
            span.layer_id: float(bits.mean()) for _, span, bits in _layer_views(masks)
        },
    }
    return new_state, record
