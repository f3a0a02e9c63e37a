"""Training loops for the dense, static, dynamic and pretrained paradigms."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import autograd as ag
from ..arbiter import ArbiterKind
from ..autograd import Tensor
from ..config import ExperimentConfig
from ..engine import (
    DynamicSchedule,
    PruneState,
    SparsityTarget,
    dynamic_step,
    generate_masks,
    init_dynamic_state,
    prune_pretrained,
)
from ..model import (
    MaskSet,
    MultitaskMLP,
    achieved_sparsity,
    mask_tensors,
    masked_forward,
    multitask_loss,
    per_task_loss,
)
from .data import SyntheticTaskSuite, generate_suite
from .optim import Adam, step_decay

log = logging.getLogger(__name__)

RUN_SCHEMA = "disparse.run/1"


class TrainingError(RuntimeError):
    pass


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose ("data", "init", ...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def derived_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(2**31 - 1))


def suite_for(config: ExperimentConfig, seed: int) -> SyntheticTaskSuite:
    return generate_suite(config.suite, derived_seed(seed, "data"))


def build_model(config: ExperimentConfig, suite: SyntheticTaskSuite, seed: int) -> MultitaskMLP:
    m = config.model
    return MultitaskMLP(
        suite.spec.input_dim,
        suite.tasks,
        trunk_widths=m.trunk_widths,
        head_hidden=m.head_hidden,
        activation=m.activation,
        mask_biases=m.mask_biases,
        rng=stream(seed, "init"),
    )


def sample_batches(suite: SyntheticTaskSuite, n: int, batch_size: int, rng: np.random.Generator):
    n_train = suite.x_train.shape[0]
    return [suite.batch(rng.integers(0, n_train, size=batch_size)) for _ in range(n)]


# -- evaluation ---------------------------------------------------------------


def task_losses(model: MultitaskMLP, masks: MaskSet | None, x, targets) -> dict[str, float]:
    """Per-task loss and the weighted total, evaluated without a tape."""
    preds = masked_forward(model, masks, x)
    out = {k: float(per_task_loss(preds, targets, model.tasks, k).data) for k in model.task_ids}
    out["total"] = float(multitask_loss(preds, targets, model.tasks).data)
    return out


def evaluate(model: MultitaskMLP, masks: MaskSet | None, suite: SyntheticTaskSuite, split: str = "val") -> dict:
    """Validation metrics per task plus the multitask loss."""
    x, y = suite.val_set() if split == "val" else suite.train_set()
    preds = masked_forward(model, masks, x)
    metrics: dict = {}
    for task in model.tasks:
        p = preds[task.task_id].data
        t = y[task.task_id]
        row = {"loss": float(per_task_loss(preds, y, model.tasks, task.task_id).data)}
        if task.loss_kind == "cross-entropy":
            row["accuracy"] = float((p.argmax(axis=1) == t).mean())
        elif task.loss_kind == "cosine":
            pn = p / (np.linalg.norm(p, axis=1, keepdims=True) + 1e-12)
            tn = t / (np.linalg.norm(t, axis=1, keepdims=True) + 1e-12)
            cos = np.clip((pn * tn).sum(axis=1), -1.0, 1.0)
            row["cosine_error"] = float((1.0 - cos).mean())
            row["mean_angle_deg"] = float(np.degrees(np.arccos(cos)).mean())
        else:
            row["l1"] = float(np.abs(p - t).mean())
            row["mse"] = float(((p - t) ** 2).mean())
        metrics[task.task_id] = row
    metrics["multitask_loss"] = float(multitask_loss(preds, y, model.tasks).data)
    return metrics


# -- the inner loop ------------------------------------------------------------


@dataclass
class LossCurve:
    task_ids: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def add(self, iteration: int, losses: dict[str, float]) -> None:
        self.rows.append([iteration, losses["total"], *[losses[k] for k in self.task_ids]])

    def header(self) -> list[str]:
        return ["iteration", "total", *self.task_ids]

    def as_dict(self) -> dict:
        cols = list(zip(*self.rows)) if self.rows else [[] for _ in self.header()]
        return {h: [int(v) if h == "iteration" else v for v in col] for h, col in zip(self.header(), cols)}


def fit(
    model: MultitaskMLP,
    masks: MaskSet | None,
    suite: SyntheticTaskSuite,
    iterations: int,
    config: ExperimentConfig,
    rng: np.random.Generator,
    lr: float | None = None,
    curve: LossCurve | None = None,
    start: int = 0,
    hook: Callable[[int, Adam], MaskSet | None] | None = None,
    observer: Callable[[int, MaskSet | None, MultitaskMLP], None] | None = None,
) -> MaskSet | None:
    """Adam on the weighted multitask loss.  Switched-off weights are held at
    exactly zero.  ``hook(t, optimizer)`` runs after step ``t`` and may
    return replacement masks; ``observer(t, masks, model)`` sees the state
    at the end of every step."""
    o = config.optim
    base_lr = o.lr if lr is None else lr
    params = model.parameters()
    opt = Adam(params, base_lr, (o.beta1, o.beta2), o.eps)
    n_train = suite.x_train.shape[0]
    mask_arrays = mask_tensors(model.partition, masks) if masks is not None else {}
    if masks is not None:
        model.apply_masks_(masks)

    for t in range(1, iterations + 1):
        x, targets = suite.batch(rng.integers(0, n_train, size=o.batch_size))

        def objective(inp):
            eff = {lid: (ag.mul(p, mask_arrays[lid]) if lid in mask_arrays else p) for lid, p in params}
            preds = model.apply(eff, inp)
            total = multitask_loss(preds, targets, model.tasks)
            objective.per_task = {
                k: float(per_task_loss(preds, targets, model.tasks, k).data) for k in model.task_ids
            }
            return total

        opt.zero_grad()
        loss, tape = ag.forward(objective, Tensor(x))
        ag.backward(tape)
        opt.step(step_decay(base_lr, t - 1, o.lr_decay, o.lr_decay_every))
        if masks is not None:
            model.apply_masks_(masks)
        if t % config.log_every == 0 or t == iterations:
            log.debug("iteration %d: loss %.6f", start + t, float(loss.data))
            if curve is not None:
                curve.add(start + t, {"total": float(loss.data), **objective.per_task})
        if hook is not None:
            new = hook(t, opt)
            if new is not None:
                masks = new
                mask_arrays = mask_tensors(model.partition, masks)
        if observer is not None:
            observer(start + t, masks, model)
    return masks


# -- paradigms -----------------------------------------------------------------


@dataclass
class RunResult:
    record: dict
    model: MultitaskMLP
    masks: MaskSet | None
    curve: LossCurve
    state: PruneState | None = None
    updates: list[dict] = field(default_factory=list)


def _layer_density(masks: MaskSet | None) -> dict[str, float]:
    if masks is None:
        return {}
    return {
        s.layer_id: float(m.bits[s.start : s.stop].mean()) for m in masks.all_masks() for s in m.layout
    }


def train(
    model: MultitaskMLP,
    suite: SyntheticTaskSuite,
    paradigm: str,
    method: str,
    config: ExperimentConfig,
    seed: int,
    observer: Callable[[int, MaskSet | None, MultitaskMLP], None] | None = None,
) -> RunResult:
    """Run one paradigm end to end.  For ``pretrained`` the model passed in
    must be the trained dense checkpoint.  ``observer`` is handed to every
    training loop (see :func:`fit`)."""
    if paradigm == "pretrained" and model.trained_iterations <= 0:
        raise TrainingError("the pretrained paradigm needs a trained dense checkpoint")
    arbiter = ArbiterKind(config.arbiter, config.tie_keep)
    target = SparsityTarget(config.sparsity, config.scope)
    curve = LossCurve(model.task_ids)
    rec: dict = {
        "schema": RUN_SCHEMA,
        "config": config.for_seed(seed).to_dict(),
        "seed": seed,
        "suite_seed": suite.seed,
        "paradigm": paradigm,
        "method": method,
        "requested_sparsity": None if paradigm == "dense" else config.sparsity,
    }
    masks: MaskSet | None = None
    state: PruneState | None = None
    updates: list[dict] = []
    x_tr, y_tr = suite.train_set()
    rec["initial_train_loss"] = task_losses(model, None, x_tr, y_tr)

    if paradigm == "dense":
        fit(model, None, suite, config.optim.iterations, config, stream(seed, "batches"), curve=curve, observer=observer)

    elif paradigm == "static":
        batches = sample_batches(suite, config.saliency.batches, config.optim.batch_size, stream(seed, "saliency"))
        state = generate_masks(
            model, method, "static", target, arbiter, batches,
            rng=stream(seed, "masks"), calibrate=config.calibrate,
            tol=config.calibration_tol, accumulation=config.saliency.accumulation,
        )
        masks = state.masks
        rec["initial_train_loss"] = task_losses(model, masks, x_tr, y_tr)
        fit(model, masks, suite, config.optim.iterations, config, stream(seed, "batches"), curve=curve, observer=observer)

    elif paradigm == "dynamic":
        state = init_dynamic_state(model, target, stream(seed, "masks"))
        masks = state.masks
        rec["initial_train_loss"] = task_losses(model, masks, x_tr, y_tr)
        schedule = DynamicSchedule(
            config.schedule.alpha, config.optim.iterations,
            config.schedule.end_fraction, config.schedule.update_interval,
        )
        grow_rng = stream(seed, "grow")
        holder = {"state": state}

        def hook(t, opt):
            if method == "random" or not schedule.is_update(t):
                return None
            batches = sample_batches(suite, config.schedule.grow_batches, config.optim.batch_size, grow_rng)
            new_state, record = dynamic_step(
                holder["state"], model, schedule, arbiter, batches, t, method,
                config.saliency.accumulation, on_change=opt.reset,
            )
            holder["state"] = new_state
            updates.append(record)
            return new_state.masks

        masks = fit(
            model, masks, suite, config.optim.iterations, config, stream(seed, "batches"),
            curve=curve, hook=hook, observer=observer,
        )
        state = holder["state"]
        rec["t_end"] = schedule.t_end

    elif paradigm == "pretrained":
        batches = sample_batches(suite, config.saliency.batches, config.optim.batch_size, stream(seed, "saliency"))
        x_va, y_va = suite.val_set()
        rec["pre_prune_val_loss"] = task_losses(model, None, x_va, y_va)
        post: dict = {}

        def finetune(m, mk):
            post.update(task_losses(m, mk, x_va, y_va))
            fit(
                m, mk, suite, config.pretrain.finetune_iterations, config,
                stream(seed, "finetune"), lr=config.pretrain.finetune_lr, curve=curve, observer=observer,
            )

        state, _ = prune_pretrained(
            model, target, arbiter, batches, method, finetune,
            rng=stream(seed, "masks"), calibrate=config.calibrate,
            tol=config.calibration_tol, accumulation=config.saliency.accumulation,
        )
        masks = state.masks
        rec["post_prune_val_loss"] = post
    else:
        raise TrainingError(f"unknown paradigm {paradigm!r}")

    rec["final_train_loss"] = task_losses(model, masks, x_tr, y_tr)
    rec["val_metrics"] = evaluate(model, masks, suite)
    rec["achieved_sparsity"] = None if masks is None else achieved_sparsity(masks)
    if state is not None:
        rec["internal_sparsity"] = state.internal_sparsity
        rec["calibration_steps"] = state.calibration_steps
        rec["diagnostics"] = list(state.diagnostics)
    rec["dynamic_updates"] = len(updates)
    rec["layer_density"] = _layer_density(masks)
    rec["loss_curve"] = curve.as_dict()
    model.trained_iterations += (
        config.optim.iterations if paradigm != "pretrained" else config.pretrain.finetune_iterations
    )
    return RunResult(rec, model, masks, curve, state, updates)
