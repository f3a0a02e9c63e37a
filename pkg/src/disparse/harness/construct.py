"""Models with a known point where two tasks stop sharing trunk features."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..model import MultitaskMLP, TaskSpec


def copy_head(model: MultitaskMLP, src: str, dst: str) -> None:
    """Give task ``dst`` exactly the head parameters of task ``src``."""
    heads = model.partition.task_heads
    for (_, s), (_, d) in zip(heads[src], heads[dst]):
        if s.shape != d.shape:
            raise ValueError(f"heads of {src} and {dst} have different shapes")
        d.data[...] = s.data


def divergent_model(
    input_dim: int,
    tasks: Sequence[TaskSpec],
    split_layer: int,
    trunk_widths: Sequence[int] = (64, 64, 64, 64),
    head_hidden: int = 32,
    rng: np.random.Generator | None = None,
) -> MultitaskMLP:
    """Two-task MLP whose trunk becomes two private mirror-image halves at
    ``split_layer``.

    The output units of trunk layer ``split_layer`` and every later trunk
    layer are split in half: the first task's head reads only the first half
    of the trunk output, the second task's head only the second half, and
    trunk layers after the split are block-diagonal.  The second half is an
    exact copy of the first, and so is the second head.  On two tasks with
    identical targets both tasks then see the same gradients on every shared
    weight below the split and disjoint ones from the split on.
    """
    if len(tasks) != 2:
        raise ValueError("the divergent construction needs exactly two tasks")
    if not 0 < split_layer < len(trunk_widths):
        raise ValueError(f"split_layer must be in [1, {len(trunk_widths) - 1}]")
    if any(w % 2 for w in trunk_widths[split_layer:]):
        raise ValueError("trunk widths at and after the split must be even")
    rng = np.random.default_rng(0) if rng is None else rng
    model = MultitaskMLP(input_dim, tasks, trunk_widths, head_hidden, rng=rng)
    params = dict(model.parameters())

    for i in range(split_layer, len(trunk_widths)):
        w = params[f"trunk.{i}.weight"].data
        b = params[f"trunk.{i}.bias"].data
        h_out = w.shape[1] // 2
        if i == split_layer:
            w[:, h_out:] = w[:, :h_out]
        else:
            h_in = w.shape[0] // 2
            w[:h_in, h_out:] = 0.0
            w[h_in:, :h_out] = 0.0
            w[h_in:, h_out:] = w[:h_in, :h_out]
        b[h_out:] = b[:h_out]

    first, second = (t.task_id for t in tasks)
    copy_head(model, first, second)
    half = trunk_widths[-1] // 2
    a = params[f"head.{first}.0.weight"].data
    b = params[f"head.{second}.0.weight"].data
    b[half:, :] = a[:half, :]
    a[half:, :] = 0.0
    b[:half, :] = 0.0
    return model
