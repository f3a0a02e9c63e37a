"""Synthetic multitask suites.

Every task reads the same hidden feature map ``h = act(x @ W)`` and applies
its own transform on top, so a shared trunk genuinely helps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..model import TaskSpec

TASK_KINDS = ("classification", "regression", "vector-regression")
DEFAULT_LOSS = {
    "classification": "cross-entropy",
    "regression": "l1",
    "vector-regression": "cosine",
}


@dataclass
class TaskDef:
    task_id: str
    kind: str
    out_dim: int = 0
    loss: str | None = None
    loss_weight: float = 1.0
    # Reuse the targets of an earlier task (a duplicated task).
    copy_of: str | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task {self.task_id}: unknown kind {self.kind!r}")
        if self.out_dim == 0:
            self.out_dim = {"classification": 4, "regression": 1, "vector-regression": 3}[self.kind]
        if self.loss is None:
            self.loss = DEFAULT_LOSS[self.kind]

    def task_spec(self) -> TaskSpec:
        return TaskSpec(self.task_id, self.loss, self.out_dim, self.loss_weight)


def reference_tasks() -> list[TaskDef]:
    return [TaskDef("cls", "classification"), TaskDef("reg", "regression")]


@dataclass
class SuiteSpec:
    input_dim: int = 16
    latent_dim: int = 8
    n_train: int = 2048
    n_val: int = 512
    noise: float = 0.1
    latent: str = "tanh"
    tasks: list[TaskDef] = field(default_factory=reference_tasks)
    # Break the shared structure by permuting each task's targets separately.
    shuffle_tasks: bool = False

    def __post_init__(self):
        self.tasks = [t if isinstance(t, TaskDef) else TaskDef(**t) for t in self.tasks]
        for name in ("input_dim", "latent_dim", "n_train", "n_val"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.latent not in ("tanh", "linear"):
            raise ValueError(f"latent must be 'tanh' or 'linear', got {self.latent!r}")
        if not self.tasks:
            raise ValueError("a suite needs at least one task")
        seen: dict[str, TaskDef] = {}
        for t in self.tasks:
            if t.copy_of is not None:
                src = seen.get(t.copy_of)
                if src is None:
                    raise ValueError(f"task {t.task_id}: copy_of must name an earlier task")
                if (src.kind, src.out_dim) != (t.kind, t.out_dim):
                    raise ValueError(f"task {t.task_id}: kind and out_dim must match {src.task_id}")
            seen[t.task_id] = t

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticTaskSuite:
    spec: SuiteSpec
    seed: int
    x_train: np.ndarray
    x_val: np.ndarray
    y_train: dict[str, np.ndarray]
    y_val: dict[str, np.ndarray]

    @property
    def tasks(self) -> list[TaskSpec]:
        return [t.task_spec() for t in self.spec.tasks]

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        return self.x_train[idx], {k: v[idx] for k, v in self.y_train.items()}

    def train_set(self):
        return self.x_train, self.y_train

    def val_set(self):
        return self.x_val, self.y_val


def generate_suite(spec: SuiteSpec, seed: int) -> SyntheticTaskSuite:
    rng = np.random.default_rng(seed)
    n = spec.n_train + spec.n_val
    x = rng.normal(size=(n, spec.input_dim))
    w = rng.normal(size=(spec.input_dim, spec.latent_dim)) / np.sqrt(spec.input_dim)
    h = x @ w
    if spec.latent == "tanh":
        h = np.tanh(1.5 * h)

    targets: dict[str, np.ndarray] = {}
    for task in spec.tasks:
        if task.copy_of is not None:
            targets[task.task_id] = targets[task.copy_of].copy()
            continue
        a = rng.normal(size=(spec.latent_dim, task.out_dim)) / np.sqrt(spec.latent_dim)
        z = h @ a
        z = z / (z.std() + 1e-12)
        eps = rng.normal(size=z.shape)
        if task.kind == "classification":
            targets[task.task_id] = np.argmax(z + spec.noise * eps, axis=1).astype(np.int64)
        else:
            targets[task.task_id] = z + spec.noise * eps
        if spec.shuffle_tasks:
            targets[task.task_id] = targets[task.task_id][rng.permutation(n)]

    tr, va = slice(0, spec.n_train), slice(spec.n_train, n)
    return SyntheticTaskSuite(
        spec=spec,
        seed=seed,
        x_train=x[tr],
        x_val=x[va],
        y_train={k: v[tr] for k, v in targets.items()},
        y_val={k: v[va] for k, v in targets.items()},
    )
