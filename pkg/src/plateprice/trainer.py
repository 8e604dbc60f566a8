"""Training loop with best-validation-state reload, metrics, multi-run statistics and sweeps."""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rnn_model as rm
from .numerics import NonFiniteError, clip_global_norm, make_rng
from .plate_data import DatasetSplit, Samples, batch_iterator

logger = logging.getLogger(__name__)

RESULTS_COLUMNS = ("config_id", "run_seed", "best_epoch", "train_rmse", "valid_rmse", "test_rmse",
                   "train_r2", "valid_r2", "test_r2", "seconds")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass(frozen=True)
class MetricPair:
    rmse: float
    r2: float


def evaluate(predictions, targets) -> MetricPair:
    y = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if y.shape != t.shape or y.ndim != 1:
        raise ValueError(f"predictions {y.shape} and targets {t.shape} must be equal-length vectors")
    if len(t) < 2:
        raise ValueError("need at least two samples")
    sse = float(np.sum((y - t) ** 2))
    tss = float(np.sum((t - t.mean()) ** 2))
    if tss == 0.0:
        raise ValueError("targets have zero variance; R^2 is undefined")
    return MetricPair(float(np.sqrt(sse / len(t))), 1.0 - sse / tss)


@dataclass
class TrainRunResult:
    config: rm.ModelConfig
    seed: int
    train_trace: list = field(default_factory=list)
    valid_trace: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid_rmse: float = float("inf")
    train: MetricPair | None = None
    valid: MetricPair | None = None
    test: MetricPair | None = None
    initial_train_rmse: float = float("nan")
    seconds: float = 0.0

    def row(self) -> list:
        return [self.config.label, self.seed, self.best_epoch,
                self.train.rmse, self.valid.rmse, self.test.rmse if self.test else float("nan"),
                self.train.r2, self.valid.r2, self.test.r2 if self.test else float("nan"),
                self.seconds]


def train(config: rm.ModelConfig, split: DatasetSplit, seed: int, epochs: int = 40,
          batch_size: int = 256, lr: float = 0.001, clip: float = 15.0,
          checkpoint: str | os.PathLike | None = None,
          init_bias_to_mean: bool = True) -> tuple[TrainRunResult, rm.Network]:
    """Fixed-epoch Adagrad training; the lowest-validation-RMSE state is reloaded at the end.

    The train trace holds the RMSE of the train-mode mini-batch losses of each
    epoch.  Validation is evaluated in inference mode after every epoch.
    """
    if len(split.train) == 0 or len(split.valid) < 2:
        raise ValueError("split needs training rows and at least two validation rows")
    start = time.perf_counter()
    init_rng, data_rng = make_rng(seed).spawn(2)
    net = rm.init_params(config, init_rng)
    if init_bias_to_mean:
        # start the output at the target mean so the weights do not have to carry the offset
        net.params[f"fc{config.fc_layers - 1}.b"][:] = float(np.mean(split.train.targets))
    opt = rm.AdagradState.for_params(net.params, lr)
    names = list(net.params)
    res = TrainRunResult(config, seed)
    res.initial_train_rmse = evaluate(rm.predict(net, split.train.tokens), split.train.targets).rmse
    best = None
    for epoch in range(1, epochs + 1):
        sse = 0.0
        for batch in batch_iterator(split.train, batch_size, data_rng):
            if len(batch.indices) < 2:
                continue  # a lone sample has no batch statistics
            y, cache = rm.forward(net, batch.tokens, "train", data_rng)
            loss, grads = rm.backward(net, cache, batch.targets)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, "non-finite loss")
            try:
                clipped, _ = clip_global_norm([grads[k] for k in names], clip, names)
                rm.adagrad_step(net.params, dict(zip(names, clipped)), opt)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, str(exc)) from None
            sse += loss * len(batch.indices)
        res.train_trace.append(float(np.sqrt(sse / len(split.train))))
        valid_pred = rm.predict(net, split.valid.tokens)
        if not np.all(np.isfinite(valid_pred)):
            raise TrainingDiverged(epoch, "non-finite validation predictions")
        v = evaluate(valid_pred, split.valid.targets).rmse
        res.valid_trace.append(v)
        if v < res.best_valid_rmse:
            res.best_valid_rmse, res.best_epoch = v, epoch
            best = net.copy()
        logger.debug("seed %d epoch %d train %.4f valid %.4f", seed, epoch, res.train_trace[-1], v)
    net = best if best is not None else net
    res.train = evaluate(rm.predict(net, split.train.tokens), split.train.targets)
    res.valid = evaluate(rm.predict(net, split.valid.tokens), split.valid.targets)
    if len(split.test) >= 2:
        res.test = evaluate(rm.predict(net, split.test.tokens), split.test.targets)
    if checkpoint is not None:
        rm.save_params(net, checkpoint)
    res.seconds = time.perf_counter() - start
    return res, net


# ------------------------------------------------------------- multi-run

def _strip(split: DatasetSplit) -> DatasetSplit:
    """Drop record objects so worker processes only receive arrays."""
    def s(p: Samples):
        return Samples((None,) * len(p), p.tokens, p.targets)
    return DatasetSplit(s(split.train), s(split.valid), s(split.test), split.seed)


def _train_one(args):
    config, split, seed, kwargs = args
    return train(config, split, seed, **kwargs)[0]


@dataclass
class MultiRunSummary:
    n_runs: int
    median_valid_rmse: float
    iqr_valid_rmse: float
    std_valid_rmse: float
    std_valid_rmse_excl_worst: float
    median_test_rmse: float
    median_train_r2: float
    median_valid_r2: float
    median_test_r2: float
    seeds: tuple


def summarize(runs: Sequence[TrainRunResult]) -> MultiRunSummary:
    v = np.array([r.valid.rmse for r in runs])
    q75, q25 = np.percentile(v, [75, 25])
    excl = np.delete(v, np.argmax(v)) if len(v) > 2 else v
    test = [r.test for r in runs if r.test is not None]
    return MultiRunSummary(
        n_runs=len(runs),
        median_valid_rmse=float(np.median(v)),
        iqr_valid_rmse=float(q75 - q25),
        std_valid_rmse=float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
        std_valid_rmse_excl_worst=float(np.std(excl, ddof=1)) if len(excl) > 1 else 0.0,
        median_test_rmse=float(np.median([m.rmse for m in test])) if test else float("nan"),
        median_train_r2=float(np.median([r.train.r2 for r in runs])),
        median_valid_r2=float(np.median([r.valid.r2 for r in runs])),
        median_test_r2=float(np.median([m.r2 for m in test])) if test else float("nan"),
        seeds=tuple(r.seed for r in runs),
    )


def multi_run(config: rm.ModelConfig, split: DatasetSplit, n_runs: int = 30, base_seed: int = 0,
              workers: int = 1, **train_kwargs) -> tuple[list[TrainRunResult], MultiRunSummary]:
    """``n_runs`` independent trainings with seeds ``base_seed .. base_seed + n_runs - 1``."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    seeds = [base_seed + i for i in range(n_runs)]
    train_kwargs.pop("checkpoint", None)
    if workers > 1:
        light = _strip(split)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_train_one, (config, light, s, train_kwargs)) for s in seeds]
            runs = []
            for i, fut in enumerate(futures):
                try:
                    runs.append(fut.result())
                except Exception as exc:
                    raise RuntimeError(f"run {i} (seed {seeds[i]}) failed: {exc}") from exc
    else:
        runs = []
        for i, s in enumerate(seeds):
            try:
                runs.append(train(config, split, s, **train_kwargs)[0])
            except Exception as exc:
                raise RuntimeError(f"run {i} (seed {s}) failed: {exc}") from exc
    return runs, summarize(runs)


def sweep(grid: Sequence[rm.ModelConfig], split: DatasetSplit, n_runs: int = 30, base_seed: int = 0,
          workers: int = 1, **train_kwargs) -> tuple[list[tuple[rm.ModelConfig, MultiRunSummary]], list]:
    """Multi-run each config; returns rows ranked by median validation RMSE and all per-run results."""
    if not grid:
        raise ValueError("empty grid")
    table, all_runs = [], []
    for cfg in grid:
        runs, summary = multi_run(cfg, split, n_runs, base_seed, workers, **train_kwargs)
        table.append((cfg, summary))
        all_runs.extend(runs)
    table.sort(key=lambda row: row[1].median_valid_rmse)
    return table, all_runs


# ----------------------------------------------------------------- output

def write_results_csv(runs: Sequence[TrainRunResult], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_COLUMNS)
        for r in runs:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r.row()])


SUMMARY_COLUMNS = ("config_id", "n_runs", "median_valid_rmse", "iqr_valid_rmse", "std_valid_rmse",
                   "std_valid_rmse_excl_worst", "median_test_rmse", "median_train_r2",
                   "median_valid_r2", "median_test_r2")


def write_summary_csv(table, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for cfg, s in table:
            w.writerow([cfg.label, s.n_runs] + [repr(getattr(s, c)) for c in SUMMARY_COLUMNS[2:]])
