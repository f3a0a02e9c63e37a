"""Synthetic data, optimizer and training loops."""

from .data import SuiteSpec, SyntheticTaskSuite, TaskDef, generate_suite, reference_tasks
from .optim import Adam, step_decay

__all__ = ["Adam", "SuiteSpec", "SyntheticTaskSuite", "TaskDef", "generate_suite", "reference_tasks", "step_decay"]
