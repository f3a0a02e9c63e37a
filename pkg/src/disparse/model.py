"""Shared-trunk multitask perceptron with an explicit parameter partition.

Parameters are split into the shared trunk and one private head per task.
Masks cover the *maskable* parameters of a group (weights only, unless
``mask_biases`` is set) in a fixed flat layout: layers in forward order,
each flattened row-major.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

SHARED = "shared"
LOSS_KINDS = ("cross-entropy", "cosine", "l1", "mse")
CHECKPOINT_SCHEMA = "disparse.checkpoint/1"


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    loss_kind: str
    out_dim: int = 1
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}; expected one of {LOSS_KINDS}")
        if self.loss_weight < 0:
            raise ValueError(f"task {self.task_id}: loss weight must be >= 0, got {self.loss_weight}")
        if self.out_dim < 1:
            raise ValueError(f"task {self.task_id}: out_dim must be positive")


def check_tasks(tasks: Sequence[TaskSpec]) -> None:
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids in {ids}")
    if not any(t.loss_weight > 0 for t in tasks):
        raise ValueError("at least one task needs a positive loss weight")


@dataclass(frozen=True)
class LayerSpan:
    layer_id: str
    start: int
    stop: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.stop - self.start


def make_layout(layers: Iterable[tuple[str, tuple[int, ...]]]) -> tuple[LayerSpan, ...]:
    spans, offset = [], 0
    for layer_id, shape in layers:
        n = int(np.prod(shape))
        spans.append(LayerSpan(layer_id, offset, offset + n, tuple(shape)))
        offset += n
    return tuple(spans)


def layout_size(layout: Sequence[LayerSpan]) -> int:
    return layout[-1].stop if layout else 0


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary keep-vector over one parameter group (1 = active)."""

    group: str
    bits: np.ndarray
    layout: tuple[LayerSpan, ...]

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.dtype != np.bool_:
            if bits.size and not np.isin(bits, (0, 1)).all():
                raise PartitionError(f"mask {self.group!r} has non-binary entries")
            bits = bits.astype(bool)
        object.__setattr__(self, "bits", bits.reshape(-1))
        if self.bits.size != layout_size(self.layout):
            raise PartitionError(
                f"mask {self.group!r}: {self.bits.size} bits for a layout of "
                f"{layout_size(self.layout)} parameters"
            )
        pos = 0
        for span in self.layout:
            if span.start != pos or span.stop < span.start:
                raise PartitionError(f"mask {self.group!r}: layer offsets do not tile the span")
            pos = span.stop

    def __len__(self) -> int:
        return self.bits.size

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Mask)
            and self.group == other.group
            and self.layout == other.layout
            and np.array_equal(self.bits, other.bits)
        )

    @property
    def kept(self) -> int:
        return int(self.bits.sum())

    def layer_bits(self, layer_id: str) -> np.ndarray:
        for span in self.layout:
            if span.layer_id == layer_id:
                return self.bits[span.start : span.stop].reshape(span.shape)
        raise KeyError(layer_id)

    def with_bits(self, bits: np.ndarray, group: str | None = None) -> "Mask":
        return Mask(self.group if group is None else group, np.asarray(bits, dtype=bool), self.layout)

    @classmethod
    def ones(cls, group: str, layout: Sequence[LayerSpan]) -> "Mask":
        return cls(group, np.ones(layout_size(layout), dtype=bool), tuple(layout))


@dataclass
class MaskSet:
    """Trunk mask plus one head mask per task."""

    shared: Mask
    private: dict[str, Mask]

    def all_masks(self) -> list[Mask]:
        return [self.shared, *self.private.values()]

    @property
    def kept(self) -> int:
        return sum(m.kept for m in self.all_masks())

    @property
    def size(self) -> int:
        return sum(len(m) for m in self.all_masks())

    def copy(self) -> "MaskSet":
        return MaskSet(
            self.shared.with_bits(self.shared.bits.copy()),
            {k: m.with_bits(m.bits.copy()) for k, m in self.private.items()},
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MaskSet)
            and self.shared == other.shared
            and self.private.keys() == other.private.keys()
            and all(self.private[k] == other.private[k] for k in self.private)
        )


def achieved_sparsity(masks: MaskSet) -> float:
    """Fraction of maskable parameters that are switched off."""
    return 1.0 - masks.kept / masks.size


@dataclass
class ParamPartition:
    shared_layers: list[tuple[str, Tensor]]
    task_heads: dict[str, list[tuple[str, Tensor]]]
    mask_biases: bool = False

    def __post_init__(self):
        seen: set[str] = set()
        for layer_id, _ in self.all_layers():
            if layer_id in seen:
                raise PartitionError(f"parameter {layer_id!r} appears twice")
            seen.add(layer_id)

    def all_layers(self) -> list[tuple[str, Tensor]]:
        out = list(self.shared_layers)
        for layers in self.task_heads.values():
            out.extend(layers)
        return out

    @property
    def task_ids(self) -> list[str]:
        return list(self.task_heads)

    def is_maskable(self, layer_id: str) -> bool:
        return self.mask_biases or not layer_id.endswith(".bias")

    def group_layers(self, group: str) -> list[tuple[str, Tensor]]:
        if group == SHARED:
            return self.shared_layers
        try:
            return self.task_heads[group]
        except KeyError:
            raise PartitionError(f"unknown task {group!r}") from None

    def maskable(self, group: str) -> list[tuple[str, Tensor]]:
        return [(lid, t) for lid, t in self.group_layers(group) if self.is_maskable(lid)]

    def layout(self, group: str) -> tuple[LayerSpan, ...]:
        return make_layout((lid, t.shape) for lid, t in self.maskable(group))

    def task_layout(self, task_id: str) -> tuple[LayerSpan, ...]:
        """Layout of everything one task uses: shared layers first, then its head."""
        return make_layout(
            (lid, t.shape) for lid, t in self.maskable(SHARED) + self.maskable(task_id)
        )

    @property
    def m_c(self) -> int:
        return layout_size(self.layout(SHARED))

    def m_k(self, task_id: str) -> int:
        return layout_size(self.layout(task_id))

    @property
    def m(self) -> int:
        return self.m_c + sum(self.m_k(k) for k in self.task_heads)

    def ones_masks(self) -> MaskSet:
        return MaskSet(
            Mask.ones(SHARED, self.layout(SHARED)),
            {k: Mask.ones(k, self.layout(k)) for k in self.task_heads},
        )

    def flatten(self, group: str, maskable_only: bool = True) -> np.ndarray:
        layers = self.maskable(group) if maskable_only else self.group_layers(group)
        if not layers:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for _, t in layers])

    def unflatten(self, group: str, flat: np.ndarray, maskable_only: bool = True) -> None:
        layers = self.maskable(group) if maskable_only else self.group_layers(group)
        total = sum(t.size for _, t in layers)
        if flat.size != total:
            raise PartitionError(f"group {group!r}: expected {total} values, got {flat.size}")
        pos = 0
        for _, t in layers:
            t.data[...] = flat[pos : pos + t.size].reshape(t.shape)
            pos += t.size

    def flatten_task(self, task_id: str) -> np.ndarray:
        return np.concatenate([self.flatten(SHARED), self.flatten(task_id)])



def check_masks(partition: ParamPartition, masks: MaskSet) -> None:
    if masks.shared.layout != partition.layout(SHARED):
        raise PartitionError("shared mask does not align with the trunk parameters")
    if set(masks.private) != set(partition.task_heads):
        raise PartitionError(
            f"private masks {sorted(masks.private)} vs heads {sorted(partition.task_heads)}"
        )
    for k, mask in masks.private.items():
        if mask.layout != partition.layout(k):
            raise PartitionError(f"mask for task {k!r} does not align with its head")


class MultitaskMLP:
    """Fully-connected trunk shared by all tasks plus a 2-layer head per task.

    Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
    """

    def __init__(
        self,
        input_dim: int,
        tasks: Sequence[TaskSpec],
        trunk_widths: Sequence[int] = (64, 64, 64, 64),
        head_hidden: int = 32,
        activation: str = "relu",
        mask_biases: bool = False,
        rng: np.random.Generator | None = None,
    ):
        check_tasks(tasks)
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.input_dim = input_dim
        self.tasks = list(tasks)
        self.trunk_widths = tuple(trunk_widths)
        self.head_hidden = head_hidden
        self.activation = activation
        # Optimizer steps taken so far; a checkpoint with 0 is not "trained".
        self.trained_iterations = 0
        rng = np.random.default_rng(0) if rng is None else rng

        shared: list[tuple[str, Tensor]] = []
        fan_in = input_dim
        for i, width in enumerate(self.trunk_widths):
            shared += self._linear(f"trunk.{i}", fan_in, width, rng)
            fan_in = width
        heads: dict[str, list[tuple[str, Tensor]]] = {}
        for task in self.tasks:
            layers = self._linear(f"head.{task.task_id}.0", fan_in, head_hidden, rng)
            layers += self._linear(f"head.{task.task_id}.1", head_hidden, task.out_dim, rng)
            heads[task.task_id] = layers
        self.partition = ParamPartition(shared, heads, mask_biases=mask_biases)

    @staticmethod
    def _linear(prefix, fan_in, fan_out, rng):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        return [
            (f"{prefix}.weight", Tensor(w, requires_grad=True, name=f"{prefix}.weight")),
            (f"{prefix}.bias", Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.bias")),
        ]

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"unknown task {task_id!r}")

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.partition.all_layers()

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def _act(self, h):
        return ag.relu(h) if self.activation == "relu" else ag.tanh(h)

    def apply(self, params: Mapping[str, Tensor], x) -> dict[str, Tensor]:
        """Forward pass using ``params`` (layer_id -> Tensor) in place of the
        stored parameters."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ag.ShapeError("trunk", f"expected batch of shape (n, {self.input_dim}), got {x.shape}")
        h = x
        for i in range(len(self.trunk_widths)):
            h = self._act(h @ params[f"trunk.{i}.weight"] + params[f"trunk.{i}.bias"])
        preds = {}
        for task in self.tasks:
            p = f"head.{task.task_id}"
            z = self._act(h @ params[f"{p}.0.weight"] + params[f"{p}.0.bias"])
            preds[task.task_id] = z @ params[f"{p}.1.weight"] + params[f"{p}.1.bias"]
        return preds

    def __call__(self, x) -> dict[str, Tensor]:
        return self.apply(dict(self.parameters()), x)

    def apply_masks_(self, masks: MaskSet) -> None:
        """Zero every switched-off parameter in place."""
        check_masks(self.partition, masks)
        for mask in masks.all_masks():
            for span in mask.layout:
                t = dict(self.partition.group_layers(mask.group))[span.layer_id]
                t.data *= mask.bits[span.start : span.stop].reshape(span.shape)

    def copy(self) -> "MultitaskMLP":
        clone = MultitaskMLP.__new__(MultitaskMLP)
        clone.__dict__.update(self.__dict__)
        clone.tasks = list(self.tasks)

        def dup(layers):
            return [(lid, Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)) for lid, t in layers]

        p = self.partition
        clone.partition = ParamPartition(
            dup(p.shared_layers), {k: dup(v) for k, v in p.task_heads.items()}, p.mask_biases
        )
        return clone

    def architecture(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "trunk_widths": list(self.trunk_widths),
            "head_hidden": self.head_hidden,
            "activation": self.activation,
            "mask_biases": self.partition.mask_biases,
            "tasks": [
                {"task_id": t.task_id, "loss_kind": t.loss_kind, "out_dim": t.out_dim, "loss_weight": t.loss_weight}
                for t in self.tasks
            ],
        }


def mask_tensors(partition: ParamPartition, masks: MaskSet) -> dict[str, np.ndarray]:
    out = {}
    for mask in masks.all_masks():
        for span in mask.layout:
            out[span.layer_id] = mask.bits[span.start : span.stop].reshape(span.shape).astype(np.float64)
    return out


def masked_params(model: MultitaskMLP, masks: MaskSet | None) -> dict[str, Tensor]:
    params = dict(model.parameters())
    if masks is None:
        return params
    check_masks(model.partition, masks)
    for layer_id, bits in mask_tensors(model.partition, masks).items():
        params[layer_id] = ag.mul(params[layer_id], bits)
    return params


def masked_forward(model: MultitaskMLP, masks: MaskSet | None, batch) -> dict[str, Tensor]:
    """Per-task predictions with every parameter multiplied by its mask bit."""
    return model.apply(masked_params(model, masks), batch)


def _task_loss(kind: str, pred: Tensor, target) -> Tensor:
    if kind == "cross-entropy":
        return ag.softmax_cross_entropy(pred, target)
    if kind == "mse":
        return ag.mse_loss(pred, target)
    if kind == "l1":
        return ag.l1_loss(pred, target)
    return ag.cosine_loss(pred, target)


def per_task_loss(preds: Mapping[str, Tensor], targets: Mapping, tasks: Sequence[TaskSpec], task_id: str) -> Tensor:
    """Loss of a single task, unweighted."""
    for task in tasks:
        if task.task_id == task_id:
            break
    else:
        raise KeyError(f"unknown task {task_id!r}")
    if task_id not in preds or task_id not in targets:
        raise KeyError(f"missing prediction or target for task {task_id!r}")
    return _task_loss(task.loss_kind, preds[task_id], targets[task_id])


def multitask_loss(preds: Mapping[str, Tensor], targets: Mapping, tasks: Sequence[TaskSpec]) -> Tensor:
    """Sum over tasks of each task's weight times its loss."""
    total = None
    for task in tasks:
        if task.task_id not in targets:
            raise KeyError(f"missing target for task {task.task_id!r}")
        term = per_task_loss(preds, targets, tasks, task.task_id)
        if task.loss_weight != 1.0:
            term = ag.mul(term, task.loss_weight)
        total = term if total is None else ag.add(total, term)
    if total is None:
        raise ValueError("no tasks given")
    return total


# -- checkpoints --------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def write_npz(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    """Deterministic .npz: fixed entry timestamps so identical content gives
    identical bytes.  ``meta`` is stored as a JSON string under ``__meta__``."""
    entries = dict(arrays)
    entries["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(entries):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(entries[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def read_npz(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
        meta = json.loads(str(data["__meta__"]))
    return arrays, meta


def layout_to_meta(layout: Sequence[LayerSpan]) -> list:
    return [[s.layer_id, s.start, s.stop, list(s.shape)] for s in layout]


def layout_from_meta(raw) -> tuple[LayerSpan, ...]:
    return tuple(LayerSpan(lid, start, stop, tuple(shape)) for lid, start, stop, shape in raw)


def masks_to_arrays(masks: MaskSet, prefix: str = "mask") -> tuple[dict, dict]:
    arrays, layouts = {}, {}
    for m in masks.all_masks():
        arrays[f"{prefix}/{m.group}"] = m.bits.astype(np.uint8)
        layouts[m.group] = layout_to_meta(m.layout)
    order = [masks.shared.group, *masks.private]
    return arrays, {"groups": order, "layouts": layouts}


def masks_from_arrays(arrays: Mapping[str, np.ndarray], meta: dict, prefix: str = "mask") -> MaskSet:
    built = {
        g: Mask(g, arrays[f"{prefix}/{g}"].astype(bool), layout_from_meta(meta["layouts"][g]))
        for g in meta["groups"]
    }
    shared = built.pop(meta["groups"][0])
    return MaskSet(shared, built)


def save_checkpoint(path: str | Path, model: MultitaskMLP, masks: MaskSet | None = None) -> None:
    arrays = {f"param/{lid}": t.data for lid, t in model.parameters()}
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "architecture": model.architecture(),
        "trained_iterations": int(model.trained_iterations),
        "partition": {
            SHARED: [lid for lid, _ in model.partition.shared_layers],
            "heads": {k: [lid for lid, _ in v] for k, v in model.partition.task_heads.items()},
        },
    }
    if masks is not None:
        mask_arrays, mask_meta = masks_to_arrays(masks)
        arrays.update(mask_arrays)
        meta["masks"] = mask_meta
    write_npz(path, arrays, meta)


def load_checkpoint(path: str | Path) -> tuple[MultitaskMLP, MaskSet | None]:
    arrays, meta = read_npz(path)
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise PartitionError(f"{path}: not a model checkpoint (schema {meta.get('schema')!r})")
    arch = meta["architecture"]
    tasks = [TaskSpec(**t) for t in arch["tasks"]]
    model = MultitaskMLP(
        arch["input_dim"],
        tasks,
        trunk_widths=arch["trunk_widths"],
        head_hidden=arch["head_hidden"],
        activation=arch["activation"],
        mask_biases=arch["mask_biases"],
    )
    expected = [lid for lid, _ in model.parameters()]
    stored = meta["partition"][SHARED] + [lid for v in meta["partition"]["heads"].values() for lid in v]
    if expected != stored:
        raise PartitionError(f"{path}: stored partition does not match the architecture")
    for lid, t in model.parameters():
        arr = arrays[f"param/{lid}"]
        if arr.shape != t.shape:
            raise PartitionError(f"{path}: {lid} has shape {arr.shape}, expected {t.shape}")
        t.data[...] = arr
    model.trained_iterations = int(meta.get("trained_iterations", 0))
    masks = masks_from_arrays(arrays, meta["masks"]) if "masks" in meta else None
    if masks is not None:
        check_masks(model.partition, masks)
    return model, masks
