"""End-to-end experiment execution, evaluation, metrics CSV and sweeps."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..codist import run_merged_codist, run_periodic_codist
from ..data import ExperimentData, audit_disjointness, available_distill_size, build_experiment_data
from ..errors import ConfigValidationError, EmptyEvaluation, MissingSupervision, WriteError
from ..fedcore import DualPoolSetup, DualState, run_dual_fedavg, stream_rng
from ..numerics import Batch, MlpSpec, ParamVector, forward_logits, init_params, log_softmax_temp
from .config import ExperimentConfig, config_from_dict, config_to_dict, patch

log = logging.getLogger(__name__)

METRICS_HEADER = ["round", "model", "split", "accuracy", "loss"]


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    model: str
    split: str
    accuracy: float
    loss: float

    def sort_key(self):
        return (self.round, self.model, self.split)


def evaluate(spec: MlpSpec, params: ParamVector, batch: Batch) -> tuple[float, float]:
    """Accuracy (argmax, ties to the lowest class) and mean cross-entropy."""
    if len(batch) == 0:
        raise EmptyEvaluation("cannot evaluate on an empty batch")
    if batch.labels is None:
        raise MissingSupervision("evaluation needs labels")
    logits = forward_logits(spec, params, batch.features)
    pred = np.argmax(logits, axis=1)
    acc = float(np.mean(pred == batch.labels))
    logp = log_softmax_temp(logits, 1.0)
    loss = float(-logp[np.arange(len(batch)), batch.labels].mean())
    return acc, loss


def resolve_distill_size(cfg: ExperimentConfig) -> int:
    available = available_distill_size(cfg.partition, cfg.data)
    size = cfg.distill_set.size
    if size == "full":
        return available
    if isinstance(size, str):
        return int(round(float(size[:-1]) / 100.0 * available))
    return size


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    data = build_experiment_data(
        cfg.task,
        cfg.partition,
        cfg.data,
        cfg.distill_set.source,
        resolve_distill_size(cfg),
        cfg.seed,
        ood_shift=cfg.distill_set.ood_shift,
    )
    audit_disjointness(data)
    return data


def build_setup(cfg: ExperimentConfig, data: ExperimentData) -> tuple[DualPoolSetup, DualState]:
    setup = DualPoolSetup(
        small_spec=cfg.small_spec,
        large_spec=cfg.large_spec,
        pool=data.pool,
        round_cfg=cfg.round,
        server_lr_small=cfg.server_schedule_small,
        server_lr_large=cfg.server_schedule_large,
        seed=cfg.seed,
    )
    init = setup.initial_state(
        init_params(cfg.small_spec, stream_rng(cfg.seed, "init_small")),
        init_params(cfg.large_spec, stream_rng(cfg.seed, "init_large")),
    )
    return setup, init


def run_experiment(cfg: ExperimentConfig, hook=None) -> list[MetricsRecord]:
    """Run ``cfg`` and return metrics for both models at every eval point.

    ``hook(t, state, codistilled)`` is forwarded to the training loop for
    callers that need to observe raw state.
    """
    data = prepare_data(cfg)
    setup, init = build_setup(cfg, data)
    splits = data.splits()
    eval_sets = [(name, splits[name]) for name in cfg.eval_splits]
    records: list[MetricsRecord] = []

    def on_round(t: int, state: DualState, codistilled: bool) -> None:
        if hook is not None:
            hook(t, state, codistilled)
        if t % cfg.eval_every:
            return
        for model, spec, params in (
            ("small", setup.small_spec, state.small.params),
            ("large", setup.large_spec, state.large.params),
        ):
            for name, batch in eval_sets:
                acc, loss = evaluate(spec, params, batch)
                records.append(MetricsRecord(t, model, name, acc, loss))

    log.info("running %s for %d rounds (seed %d)", cfg.method, cfg.total_rounds, cfg.seed)
    if cfg.method == "fedavg":
        run_dual_fedavg(setup, init, cfg.total_rounds, on_round)
    else:
        runner = run_periodic_codist if cfg.method == "periodic" else run_merged_codist
        runner(
            setup, init, cfg.total_rounds, cfg.codist_schedule,
            cfg.distill_config("small"), cfg.distill_config("large"),
            data.distill.batch, on_round,
        )
    return sorted(records, key=MetricsRecord.sort_key)


def format_metrics(records: Sequence[MetricsRecord]) -> str:
    lines = [",".join(METRICS_HEADER)]
    for r in sorted(records, key=MetricsRecord.sort_key):
        lines.append(f"{r.round},{r.model},{r.split},{r.accuracy:.6f},{r.loss:.6f}")
    return "\n".join(lines) + "\n"


def write_metrics(records: Sequence[MetricsRecord], path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(format_metrics(records))
    except OSError as exc:
        raise WriteError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        return [
            MetricsRecord(int(r["round"]), r["model"], r["split"], float(r["accuracy"]), float(r["loss"]))
            for r in reader
        ]


def final_accuracy(records: Sequence[MetricsRecord], model: str, split: str = "test_mixed") -> float:
    last = max(r.round for r in records)
    for r in records:
        if r.round == last and r.model == model and r.split == split:
            return r.accuracy
    raise KeyError((model, split))


# ---------------------------------------------------------------------------
# Sweeps


SUMMARY_HEADER = ["value", "seeds", "small_accuracy", "large_accuracy", "mean_accuracy"]


@dataclass(frozen=True)
class SweepRow:
    value: object
    seeds: tuple[int, ...]
    small_accuracy: float
    large_accuracy: float

    @property
    def mean_accuracy(self) -> float:
        return 0.5 * (self.small_accuracy + self.large_accuracy)


def _numeric_axis(base: dict, axis: str) -> None:
    node = base
    for k in axis.split("."):
        if not isinstance(node, dict) or k not in node:
            raise ConfigValidationError(axis, "not a config field")
        node = node[k]
    if axis == "distill_set.size":
        return
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigValidationError(axis, "sweep axis must be a numeric field")


def sweep_configs(base_cfg: ExperimentConfig, axis: str, values: Sequence, seeds: Sequence[int]):
    """``[(value, seed, cfg)]`` in input order; each cfg differs from the base
    only at ``axis`` (and ``seed``)."""
    base = config_to_dict(base_cfg)
    _numeric_axis(base, axis)
    cells = []
    for value in values:
        patched = patch(base, axis, value)
        config_from_dict(patched)  # validate before running anything
        for seed in seeds:
            cells.append((value, seed, config_from_dict(patch(patched, "seed", int(seed)))))
    return cells


def _run_cell(cfg: ExperimentConfig) -> list[MetricsRecord]:
    return run_experiment(cfg)


def sweep(
    base_cfg: ExperimentConfig,
    axis: str,
    values: Sequence,
    seeds: Sequence[int],
    out_dir=None,
    workers: int = 1,
    split: str = "test_mixed",
) -> list[SweepRow]:
    """Grid over ``values`` x ``seeds``; mean final accuracy per value."""
    if not values or not seeds:
        raise ConfigValidationError(axis, "need at least one value and one seed")
    cells = sweep_configs(base_cfg, axis, values, seeds)
    cfgs = [c for _, _, c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cfgs))
    else:
        results = [_run_cell(c) for c in cfgs]

    if out_dir is not None:
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise WriteError(str(exc)) from exc
        for i, ((value, seed, _), recs) in enumerate(zip(cells, results)):
            write_metrics(recs, out_dir / f"cell{i:03d}_seed{seed}.csv")

    rows = []
    for value in values:
        picked = [r for (v, _, _), r in zip(cells, results) if v == value]
        rows.append(
            SweepRow(
                value,
                tuple(int(s) for s in seeds),
                float(np.mean([final_accuracy(r, "small", split) for r in picked])),
                float(np.mean([final_accuracy(r, "large", split) for r in picked])),
            )
        )
    if out_dir is not None:
        write_summary(rows, out_dir / "summary.csv")
    return rows


def format_summary(rows: Sequence[SweepRow]) -> str:
    lines = [",".join(SUMMARY_HEADER)]
    for r in rows:
        seeds = " ".join(str(s) for s in r.seeds)
        lines.append(
            f"{r.value},{seeds},{r.small_accuracy:.6f},{r.large_accuracy:.6f},{r.mean_accuracy:.6f}"
        )
    return "\n".join(lines) + "\n"


def write_summary(rows: Sequence[SweepRow], path) -> None:
    try:
        Path(path).write_text(format_summary(rows))
    except OSError as exc:
        raise WriteError(f"cannot write summary to {path}: {exc}") from exc
