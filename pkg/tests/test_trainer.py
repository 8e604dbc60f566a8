import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from plateprice import rnn_model as rm
from plateprice import synth, trainer
from plateprice.numerics import make_rng
from plateprice.plate_data import Samples, preprocess, split_dataset
from plateprice.rnn_model import ModelConfig

TINY = ModelConfig(embed_dim=4, recurrent_layers=1, fc_layers=1, hidden_units=8, dropout_rate=0.0)


@pytest.fixture(scope="module")
def small_split():
    records, _ = synth.generate(synth.SynthConfig(n_records=400, seed=2))
    samples, _ = preprocess(records)
    return split_dataset(samples, 0)


def test_evaluate_perfect_and_mean():
    t = np.array([1.0, 2.0, 4.0])
    assert trainer.evaluate(t, t) == trainer.MetricPair(0.0, 1.0)
    assert trainer.evaluate(np.full(3, t.mean()), t).r2 == pytest.approx(0.0, abs=1e-15)


def test_evaluate_hand_computed():
    m = trainer.evaluate(np.array([1.0, 2.0]), np.array([1.0, 4.0]))
    assert m.rmse == pytest.approx(math.sqrt(2), abs=1e-15)
    assert m.r2 == pytest.approx(1 - 4 / 4.5, abs=1e-15)


def test_evaluate_errors():
    with pytest.raises(ValueError):
        trainer.evaluate(np.ones(3), np.full(3, 2.0))
    with pytest.raises(ValueError):
        trainer.evaluate(np.ones(1), np.ones(1))
    with pytest.raises(ValueError):
        trainer.evaluate(np.ones(3), np.arange(4.0))


def test_evaluate_permutation_invariant():
    rng = make_rng(0)
    y, t = rng.normal(size=50), rng.normal(size=50)
    p = rng.permutation(50)
    a, b = trainer.evaluate(y, t), trainer.evaluate(y[p], t[p])
    assert a.rmse == pytest.approx(b.rmse, rel=1e-14) and a.r2 == pytest.approx(b.r2, rel=1e-14)


def test_noise_lowers_r2():
    rng = make_rng(1)
    t = rng.normal(size=200)
    y = t + rng.normal(0, 0.2, size=200)
    base = trainer.evaluate(y, t).r2
    worse = sum(trainer.evaluate(y + rng.normal(0, 0.5 * t.std(), 200), t).r2 < base for _ in range(100))
    assert worse == 100


def _linear_split(n=200):
    rng = make_rng(5)
    tok = rng.integers(1, 11, size=(n, 6))
    y = 0.3 * tok[:, 0] - 0.1 * tok[:, 3] + 5.0
    s = Samples(tuple(range(n)), tok, y)
    return split_dataset(s, 1)


def test_training_reduces_error():
    split = _linear_split()
    res, _ = trainer.train(TINY, split, seed=0, epochs=5, batch_size=16, lr=0.05)
    assert res.train.rmse < res.initial_train_rmse
    assert res.best_valid_rmse == min(res.valid_trace)
    assert len(res.train_trace) == len(res.valid_trace) == 5


def test_training_is_deterministic():
    split = _linear_split()
    cfg = replace(TINY, dropout_rate=0.1)
    a, _ = trainer.train(cfg, split, 3, epochs=3, batch_size=16, lr=0.05)
    b, _ = trainer.train(cfg, split, 3, epochs=3, batch_size=16, lr=0.05)
    assert a.train_trace == b.train_trace and a.valid_trace == b.valid_trace
    assert a.test == b.test


def test_best_state_reload_reproduces_valid(tmp_path):
    split = _linear_split()
    ckpt = tmp_path / "best.ckpt"
    res, net = trainer.train(TINY, split, 0, epochs=4, batch_size=16, lr=0.05, checkpoint=ckpt)
    assert res.valid.rmse == res.best_valid_rmse
    back = rm.load_params(ckpt)
    v = trainer.evaluate(rm.predict(back, split.valid.tokens), split.valid.targets).rmse
    assert v == res.best_valid_rmse


def test_divergence_reports_epoch():
    split = _linear_split()
    bad = Samples(split.train.records, split.train.tokens, split.train.targets * np.inf)
    with np.errstate(invalid="ignore"), pytest.raises(trainer.TrainingDiverged, match="epoch 1"):
        trainer.train(TINY, type(split)(bad, split.valid, split.test, 0), 0, epochs=2, batch_size=16)


def test_summary_statistics():
    runs = []
    for i, v in enumerate([0.5, 0.6, 0.7]):
        r = trainer.TrainRunResult(TINY, i)
        r.train = r.valid = r.test = trainer.MetricPair(v, 1 - v)
        runs.append(r)
    s = trainer.summarize(runs)
    assert s.median_valid_rmse == 0.6
    assert s.std_valid_rmse_excl_worst == pytest.approx(np.std([0.5, 0.6], ddof=1))
    assert s.seeds == (0, 1, 2)


def test_multi_run_single_matches_train(small_split):
    runs, summary = trainer.multi_run(TINY, small_split, n_runs=1, base_seed=4, epochs=2, batch_size=32)
    single, _ = trainer.train(TINY, small_split, 4, epochs=2, batch_size=32)
    assert summary.median_valid_rmse == single.valid.rmse == runs[0].valid.rmse
    assert summary.seeds == (4,)


def test_multi_run_workers_match_serial(small_split):
    serial, _ = trainer.multi_run(TINY, small_split, n_runs=2, base_seed=0, epochs=2, batch_size=32)
    pooled, _ = trainer.multi_run(TINY, small_split, n_runs=2, base_seed=0, workers=2, epochs=2, batch_size=32)
    assert [r.valid_trace for r in serial] == [r.valid_trace for r in pooled]


def test_sweep_ranks_and_writes(small_split, tmp_path):
    grid = [TINY, replace(TINY, hidden_units=4)]
    table, runs = trainer.sweep(grid, small_split, n_runs=2, base_seed=0, epochs=2, batch_size=32)
    assert len(table) == 2 and len(runs) == 4
    meds = [s.median_valid_rmse for _, s in table]
    assert meds == sorted(meds)
    one, _ = trainer.sweep(grid[:1], small_split, n_runs=1, epochs=1, batch_size=32)
    assert len(one) == 1
    trainer.write_results_csv(runs, tmp_path / "r.csv")
    trainer.write_summary_csv(table, tmp_path / "s.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == trainer.RESULTS_COLUMNS
    assert rows[1][0] in {c.label for c in grid}
    assert float(rows[1][4]) == runs[0].valid.rmse  # repr round-trips exactly


def test_multi_run_rejects_zero():
    with pytest.raises(ValueError):
        trainer.multi_run(TINY, _linear_split(), n_runs=0)
