"""Run directories: one seed of one config, with every artifact on disk."""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import time
from pathlib import Path

import numpy as np

from .analysis import layerwise_iou, with_watershed, write_iou_table
from .config import ExperimentConfig, save_config
from .model import (
    Mask,
    MaskSet,
    MultitaskMLP,
    layout_from_meta,
    layout_to_meta,
    load_checkpoint,
    masks_to_arrays,
    read_npz,
    save_checkpoint,
    write_npz,
)
from .harness.train import RunResult, TrainingError, build_model, suite_for, train

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DISPARSE_OUTPUT_ROOT"
MASKS_SCHEMA = "disparse.masks/1"


def output_root(cli_value: str | None, config: ExperimentConfig | None = None) -> Path:
    """CLI flag, then the environment variable, then the config's output_dir."""
    if cli_value:
        return Path(cli_value)
    if os.environ.get(OUTPUT_ROOT_ENV):
        return Path(os.environ[OUTPUT_ROOT_ENV])
    return Path(config.output_dir if config is not None else "runs")


def run_name(config: ExperimentConfig, seed: int) -> str:
    if config.paradigm == "dense":
        return f"dense-seed{seed}"
    return f"{config.paradigm}-{config.method}-S{config.sparsity:g}-seed{seed}"


# -- mask files -----------------------------------------------------------------


def save_masks(path: str | Path, masks: MaskSet) -> None:
    arrays, meta = masks_to_arrays(masks)
    write_npz(path, arrays, {"schema": MASKS_SCHEMA, "kind": "maskset", **meta})


def save_task_masks(path: str | Path, masks: dict[str, Mask]) -> None:
    """Per-task trunk masks before merging, keyed by task id."""
    arrays = {f"mask/{k}": m.bits.astype(np.uint8) for k, m in masks.items()}
    meta = {
        "schema": MASKS_SCHEMA,
        "kind": "task-shared",
        "groups": list(masks),
        "layouts": {k: layout_to_meta(m.layout) for k, m in masks.items()},
    }
    write_npz(path, arrays, meta)


def load_trunk_masks(path: str | Path) -> list[Mask]:
    """Trunk masks stored in a mask file: all per-task ones, or the merged one."""
    arrays, meta = read_npz(path)
    if meta.get("schema") != MASKS_SCHEMA:
        raise ValueError(f"{path}: not a mask file")
    groups = meta["groups"] if meta["kind"] == "task-shared" else meta["groups"][:1]
    return [
        Mask(g, arrays[f"mask/{g}"].astype(bool), layout_from_meta(meta["layouts"][g])) for g in groups
    ]


# -- artifacts -------------------------------------------------------------------


def write_json(path: str | Path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_loss_curve(path: str | Path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(result.curve.header())
        for row in result.curve.rows:
            writer.writerow([int(row[0]), *[repr(float(v)) for v in row[1:]]])


def write_artifacts(run_dir: Path, config: ExperimentConfig, result: RunResult) -> None:
    rec = result.record
    save_config(config.for_seed(rec["seed"]), run_dir / "config.yaml")
    write_loss_curve(run_dir / "loss_curve.csv", result)
    save_checkpoint(run_dir / "model.npz", result.model, result.masks)
    if result.masks is not None:
        save_masks(run_dir / "masks.npz", result.masks)
    shared = result.state.task_shared_masks if result.state is not None else {}
    if shared:
        save_task_masks(run_dir / "task_shared_masks.npz", shared)
        if len(shared) >= 2:
            profile = with_watershed(layerwise_iou(list(shared.values())), config.watershed_threshold)
            write_iou_table(profile, run_dir / "iou_profile.csv")
            rec["iou_profile"] = dict(zip(profile.layer_ids, profile.iou))
            rec["watershed_layer"] = profile.watershed_layer
    if result.updates:
        with open(run_dir / "updates.jsonl", "w") as fh:
            for u in result.updates:
                fh.write(json.dumps(u, sort_keys=True) + "\n")
    write_json(run_dir / "run_record.json", rec)


def _load_pretrained(config: ExperimentConfig, suite, seed: int, run_dir: Path) -> MultitaskMLP:
    ckpt = config.pretrain.checkpoint
    if ckpt is None:
        # No checkpoint given: train the dense model first, inside this run.
        dense_cfg = config.for_seed(seed)
        dense_cfg.paradigm, dense_cfg.method = "dense", "dense"
        model = build_model(dense_cfg, suite, seed)
        result = train(model, suite, "dense", "dense", dense_cfg, seed)
        sub = run_dir / "dense"
        sub.mkdir()
        write_artifacts(sub, dense_cfg, result)
        return result.model
    if not Path(ckpt).exists():
        raise TrainingError(f"checkpoint {ckpt} does not exist")
    model, _ = load_checkpoint(ckpt)
    if [t.task_id for t in model.tasks] != [t.task_id for t in suite.tasks]:
        raise TrainingError(f"checkpoint {ckpt} was trained on different tasks")
    return model


def execute_run(config: ExperimentConfig, seed: int, root: str | Path, overwrite: bool = False) -> Path:
    """Train one seed and write its run directory.  Nothing is left behind
    if the run fails."""
    config.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    final = root / run_name(config, seed)
    if final.exists():
        if not overwrite:
            raise FileExistsError(f"{final} already exists")
        shutil.rmtree(final)
    work = root / (final.name + ".partial")
    if work.exists():
        shutil.rmtree(work)
    work.mkdir()
    started = time.perf_counter()
    try:
        suite = suite_for(config, seed)
        if config.paradigm == "pretrained":
            model = _load_pretrained(config, suite, seed, work)
        else:
            model = build_model(config, suite, seed)
        result = train(model, suite, config.paradigm, config.method, config, seed)
        write_artifacts(work, config, result)
        write_json(work / "timing.json", {"wall_clock_s": time.perf_counter() - started})
    except BaseException:
        shutil.rmtree(work, ignore_errors=True)
        raise
    work.rename(final)
    log.info("wrote %s", final)
    return final


def load_record(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "run_record.json"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir}: no run_record.json")
    return json.loads(path.read_text())
