"""Independent oracles shared by several test modules."""

from __future__ import annotations

import numpy as np

from disparse import autograd as ag
from disparse.model import MaskSet, MultitaskMLP, TaskSpec, masked_forward, multitask_loss


def central_difference(f, params: list[np.ndarray], eps: float = 1e-6) -> list[np.ndarray]:
    """Numerical gradient of the scalar ``f()`` w.r.t. each array in ``params``
    (perturbed in place)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = f()
            flat[i] = old - eps
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, floor: float = 1e-8) -> bool:
    """Element-wise |a - n| <= rtol * max(|a|, |n|), with an absolute floor for
    entries at the finite-difference noise level."""
    return bool(np.all(np.abs(analytic - numeric) <= rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + floor))


LOSSES = ("cross-entropy", "mse", "l1", "cosine")


def random_small_model(rng: np.random.Generator):
    """A tiny random multitask model, batch and targets."""
    input_dim = int(rng.integers(2, 5))
    widths = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(1, 4)))]
    k = int(rng.integers(1, 4))
    tasks = []
    for i in range(k):
        kind = LOSSES[int(rng.integers(len(LOSSES)))]
        out = int(rng.integers(2, 4))
        tasks.append(TaskSpec(f"t{i}", kind, out, float(rng.uniform(0.5, 1.5))))
    act = "relu" if rng.random() < 0.5 else "tanh"
    model = MultitaskMLP(input_dim, tasks, widths, int(rng.integers(2, 5)), act, rng=rng)
    # Zero biases would put ReLU inputs exactly on the kink behind a dead unit.
    for lid, p in model.parameters():
        if lid.endswith(".bias"):
            p.data[...] = rng.normal(scale=0.5, size=p.shape)
    n = int(rng.integers(3, 6))
    x = rng.normal(size=(n, input_dim))
    y = {}
    for t in tasks:
        if t.loss_kind == "cross-entropy":
            y[t.task_id] = rng.integers(0, t.out_dim, size=n)
        else:
            y[t.task_id] = rng.normal(size=(n, t.out_dim))
    return model, x, y


def random_masks(model: MultitaskMLP, rng: np.random.Generator, density: float = 0.7) -> MaskSet:
    ms = model.partition.ones_masks()
    return MaskSet(
        ms.shared.with_bits(rng.random(ms.shared.bits.size) < density),
        {k: m.with_bits(rng.random(m.bits.size) < density) for k, m in ms.private.items()},
    )


def loss_value(model: MultitaskMLP, x, y, masks: MaskSet | None = None) -> float:
    return float(multitask_loss(masked_forward(model, masks, x), y, model.tasks).data)


def tape_gradients(model: MultitaskMLP, x, y, masks: MaskSet | None = None) -> dict[str, np.ndarray]:
    model.zero_grad()
    loss, tape = ag.forward(lambda inp: multitask_loss(masked_forward(model, masks, inp), y, model.tasks), ag.Tensor(x))
    ag.backward(tape)
    return {lid: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for lid, p in model.parameters()}


def small_config(paradigm="static", method="disparse", **overrides):
    """A fast experiment configuration on the reference two-task suite."""
    from disparse.config import ExperimentConfig
    from disparse.harness.data import SuiteSpec

    cfg = ExperimentConfig(paradigm=paradigm, method=method, suite=SuiteSpec(n_train=256, n_val=128))
    cfg.model.trunk_widths = [16, 16]
    cfg.model.head_hidden = 8
    cfg.optim.iterations = 200
    cfg.saliency.batches = 5
    cfg.schedule.update_interval = 20
    cfg.log_every = 50
    for key, value in overrides.items():
        obj = cfg
        *path, last = key.split("__")
        for p in path:
            obj = getattr(obj, p)
        setattr(obj, last, value)
    return cfg.validate()
