"""Command-line entry point: ``plateprice <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import itertools
import json
import logging
import math
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__, ensemble, hedonic, retrain_sim, synth, trainer
from . import rnn_model as rm
from .numerics import NonFiniteError, ShapeError
from .plate_data import DataError, load_auction_csv, preprocess, split_dataset, tokenize_many, \
    validate_plate, write_auction_csv

logger = logging.getLogger("plateprice")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _words(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


# key -> (parser, default)
CONFIG_KEYS = {
    # data and output
    "data": (str, ""),
    "out_dir": (str, "out"),
    # model
    "embed_dim": (int, 24),
    "recurrent_layers": (int, 3),
    "fc_layers": (int, 1),
    "hidden_units": (int, 128),
    "dropout_rate": (float, 0.05),
    # training
    "epochs": (int, 40),
    "batch_size": (int, 256),
    "lr": (float, 0.001),
    "clip": (float, 15.0),
    "seed": (int, 0),
    "split_seed": (int, 0),
    "n_runs": (int, 1),
    "workers": (int, 1),
    "record_timing": (_bool, True),
    # sweep grid (comma-separated lists; empty means "use the single model setting")
    "grid.embed_dim": (_ints, ()),
    "grid.recurrent_layers": (_ints, ()),
    "grid.fc_layers": (_ints, ()),
    "grid.hidden_units": (_ints, ()),
    "grid.dropout_rate": (_floats, ()),
    # baselines and stacking
    "hedonic_preset": (str, "woo2008"),
    "ensemble_variant": (str, "combined_extra"),
    # retraining simulation
    "schedules": (_words, retrain_sim.SCHEDULES),
    "kind": (str, "rnn"),
    "initial_years": (int, 8),
    "horizon_years": (int, 5),
    "window_size": (int, 0),
    "valid_fraction": (float, 0.2),
    "n_repeats": (int, 30),
    # synthetic data
    "n_records": (int, 50_000),
    "n_years": (int, 13),
    "noise_std": (float, 0.3),
    "unsold_fraction": (float, 0.05),
    "drift": (_bool, False),
    "synth_seed": (int, 0),
}


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value, f"{origin}:{lineno}")
    return out


def _coerce(key, value, where):
    if key not in CONFIG_KEYS:
        known = ", ".join(sorted(CONFIG_KEYS))
        raise UsageError(f"{where}: unknown config key {key!r} (known keys: {known})")
    try:
        return CONFIG_KEYS[key][0](value)
    except ValueError as exc:
        raise UsageError(f"{where}: bad value for {key!r}: {exc}") from None


def resolve_config(path: str | None, overrides=()) -> dict:
    cfg = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        cfg[k] = _coerce(k, v, "--set")
    return cfg


def model_config(cfg: dict) -> rm.ModelConfig:
    return rm.ModelConfig(embed_dim=cfg["embed_dim"], recurrent_layers=cfg["recurrent_layers"],
                          fc_layers=cfg["fc_layers"], hidden_units=cfg["hidden_units"],
                          dropout_rate=cfg["dropout_rate"])


def train_kwargs(cfg: dict) -> dict:
    return dict(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], clip=cfg["clip"])


def synth_config(cfg: dict) -> synth.SynthConfig:
    sc = synth.SynthConfig(n_records=cfg["n_records"], n_years=cfg["n_years"], seed=cfg["synth_seed"],
                           noise_std=cfg["noise_std"], unsold_fraction=cfg["unsold_fraction"])
    return sc.with_drift(**synth.DRIFT_PRESET) if cfg["drift"] else sc


# --------------------------------------------------------------- manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, seeds, inputs: dict) -> dict:
    """Echo the resolved config and provenance into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: _render(v) for k, v in sorted(cfg.items())}
    (out_dir / "config.resolved").write_text("".join(f"{k} = {v}\n" for k, v in resolved.items()),
                                             encoding="utf-8")
    manifest = {
        "tool": "plateprice",
        "version": __version__,
        "command": command,
        "config": resolved,
        "seeds": [int(s) for s in seeds],
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in sorted(inputs.items())},
        "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


# ------------------------------------------------------------ subcommands

def _need_file(path, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what}; pass it as a flag or set it in the config")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_split(cfg):
    data = _need_file(cfg["data"], "data CSV (--data)")
    samples, dropped = preprocess(load_auction_csv(data))
    if dropped:
        logger.info("dropped %d unsold records", dropped)
    return data, split_dataset(samples, cfg["split_seed"])


def _out(cfg) -> Path:
    p = Path(cfg["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_gen_data(cfg, args):
    out = _out(cfg)
    sc = synth_config(cfg)
    records, decomp = synth.generate(sc)
    write_auction_csv(records, out / "data.csv")
    synth.write_oracle_csv(decomp, out / "oracle.csv")
    write_manifest(out, "gen-data", cfg, [sc.seed], {})
    print(f"wrote {len(records)} records to {out / 'data.csv'} (R2 ceiling {synth.oracle_r2_ceiling(decomp):.4f})")


def _finish_runs(runs, cfg):
    if not cfg["record_timing"]:
        for r in runs:
            r.seconds = 0.0
    return runs


def cmd_train(cfg, args):
    data, split = _load_split(cfg)
    out = _out(cfg)
    mc = model_config(cfg)
    seeds = [cfg["seed"] + i for i in range(cfg["n_runs"])]
    runs, best_net, best_v = [], None, math.inf
    for s in seeds:
        res, net = trainer.train(mc, split, s, **train_kwargs(cfg))
        runs.append(res)
        if res.valid.rmse < best_v:
            best_net, best_v = net, res.valid.rmse
    rm.save_params(best_net, out / "model.ckpt")
    trainer.write_results_csv(_finish_runs(runs, cfg), out / "results.csv")
    write_manifest(out, "train", cfg, seeds, {"data": data})
    for r in runs:
        print(f"seed {r.seed}: best epoch {r.best_epoch} valid RMSE {r.valid.rmse:.4f} "
              f"test RMSE {r.test.rmse:.4f} test R2 {r.test.r2:.4f}")


def cmd_sweep(cfg, args):
    data, split = _load_split(cfg)
    out = _out(cfg)
    base = model_config(cfg)
    axes = {f.name: cfg[f"grid.{f.name}"] or (getattr(base, f.name),)
            for f in fields(rm.ModelConfig) if f"grid.{f.name}" in cfg}
    grid = [replace(base, **dict(zip(axes, combo))) for combo in itertools.product(*axes.values())]
    table, runs = trainer.sweep(grid, split, cfg["n_runs"], cfg["seed"], cfg["workers"], **train_kwargs(cfg))
    trainer.write_summary_csv(table, out / "summary.csv")
    trainer.write_results_csv(_finish_runs(runs, cfg), out / "results.csv")
    write_manifest(out, "sweep", cfg, sorted({r.seed for r in runs}), {"data": data})
    for c, s in table:
        print(f"{c.label}: median valid RMSE {s.median_valid_rmse:.4f} (IQR {s.iqr_valid_rmse:.4f})")


def cmd_evaluate(cfg, args):
    model = _need_file(args.model, "model checkpoint (--model)")
    net = rm.load_params(model)
    data = _need_file(cfg["data"], "data CSV (--data)")
    samples, _ = preprocess(load_auction_csv(data))
    parts = {"all": samples}
    if args.split != "all":
        parts = {args.split: getattr(split_dataset(samples, cfg["split_seed"]), args.split)}
    out = _out(cfg)
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["part", "n", "rmse", "r2"])
        for name, part in parts.items():
            m = trainer.evaluate(rm.predict(net, part.tokens), part.targets)
            w.writerow([name, len(part), repr(m.rmse), repr(m.r2)])
            print(f"{name}: n={len(part)} RMSE {m.rmse:.4f} R2 {m.r2:.4f}")
    write_manifest(out, "evaluate", cfg, [], {"data": data, "model": model})


def cmd_predict(cfg, args):
    plates = list(args.plate or [])
    if args.plates_file:
        plates += [ln.strip() for ln in _need_file(args.plates_file, "plates file").read_text().splitlines()
                   if ln.strip()]
    if not plates:
        raise UsageError("give at least one --plate or a --plates-file")
    plates = [validate_plate(p) for p in plates]
    net = rm.load_params(_need_file(args.model, "model checkpoint (--model)"))
    preds = rm.predict(net, tokenize_many(plates))
    for p, y in zip(plates, preds):
        # plain exponentiation of the log estimate, no retransformation correction
        print(f"{p} {y:.6f} {math.exp(y):.0f}")


def cmd_baseline(cfg, args):
    data, split = _load_split(cfg)
    out = _out(cfg)
    model = hedonic.fit_hedonic(split.train.plates, split.train.targets, cfg["hedonic_preset"])
    hedonic.save_coefficients(model, out / f"hedonic_{cfg['hedonic_preset']}.csv")
    write_manifest(out, "baseline", cfg, [cfg["split_seed"]], {"data": data})
    for name in ("train", "valid", "test"):
        part = getattr(split, name)
        m = trainer.evaluate(hedonic.predict_many(model, part.plates), part.targets)
        print(f"hedonic {cfg['hedonic_preset']} {name}: RMSE {m.rmse:.4f} R2 {m.r2:.4f}")


def cmd_ensemble(cfg, args):
    data, split = _load_split(cfg)
    out = _out(cfg)
    model_path = _need_file(args.model, "model checkpoint (--model)")
    hed_path = _need_file(args.hedonic, "hedonic coefficients (--hedonic)")
    net = rm.load_params(model_path)
    hed = hedonic.load_coefficients(hed_path)
    variant = cfg["ensemble_variant"]

    def cols(part):
        return (rm.predict(net, part.tokens), hedonic.predict_many(hed, part.plates),
                ensemble.extras_matrix(part.records))

    r, h, x = cols(split.train)
    model = ensemble.fit_ensemble(variant, r, h, x, split.train.targets)
    ensemble.save_coefficients(model, out / f"ensemble_{variant}.csv")
    write_manifest(out, "ensemble", cfg, [cfg["split_seed"]],
                   {"data": data, "model": model_path, "hedonic": hed_path})
    for name in ("train", "test"):
        part = getattr(split, name)
        r, h, x = cols(part)
        m = trainer.evaluate(ensemble.predict_ensemble(model, r, h, x), part.targets)
        print(f"{variant} {name}: RMSE {m.rmse:.4f} R2 {m.r2:.4f}")


def cmd_retrain_sim(cfg, args):
    data = _need_file(cfg["data"], "data CSV (--data)")
    samples, _ = preprocess(load_auction_csv(data))
    samples = retrain_sim.sort_by_date(samples)
    out = _out(cfg)
    kind = cfg["kind"]
    mc = model_config(cfg) if kind != "hedonic" else None
    results = {}
    for sched in cfg["schedules"]:
        plan = retrain_sim.RetrainPlan(sched, cfg["initial_years"], cfg["horizon_years"],
                                       cfg["window_size"] or None, cfg["valid_fraction"])
        res = retrain_sim.simulate(plan, samples, kind, cfg["n_repeats"], cfg["seed"], mc, **train_kwargs(cfg))
        retrain_sim.write_trace_csv(res, out / f"trace_{sched}.csv")
        results[sched] = res
        print(f"{kind} {sched}: horizon median RMSE {res.horizon_rmse:.4f}")
    tests = retrain_sim.compare_schedules(results)
    retrain_sim.write_summary_csv(results, tests, out / "summary.csv")
    for a, b, t in tests:
        print(f"wilcoxon {a} vs {b}: z={t.z:.3f} p={t.p:.4g}")
    write_manifest(out, "retrain-sim", cfg, [cfg["seed"]], {"data": data})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
    "retrain-sim": cmd_retrain_sim,
    "baseline": cmd_baseline,
    "ensemble": cmd_ensemble,
}


HELP = {
    "gen-data": "write a synthetic auction CSV and its oracle decomposition",
    "train": "train the RNN over n_runs seeds and keep the best checkpoint",
    "sweep": "multi-run every config of the grid.* keys, ranked by validation RMSE",
    "evaluate": "RMSE and R2 of a checkpoint on the data splits",
    "predict": "price plates with a checkpoint",
    "retrain-sim": "walk-forward retraining simulation over the schedules",
    "baseline": "fit the hedonic regression",
    "ensemble": "stack RNN and hedonic predictions",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plateprice", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"plateprice {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", help="output directory (config key out_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name not in ("gen-data", "predict"):
            p.add_argument("--data", help="auction CSV (config key data)")
        if name in ("train", "sweep", "retrain-sim", "gen-data"):
            p.add_argument("--seed", type=int, help="base seed (config key seed, or synth_seed for gen-data)")
        if name in ("evaluate", "predict", "ensemble"):
            p.add_argument("--model", help="model checkpoint")
        if name == "evaluate":
            p.add_argument("--split", choices=("all", "train", "valid", "test"), default="all")
        if name == "predict":
            p.add_argument("--plate", action="append", help="plate to price (repeatable)")
            p.add_argument("--plates-file", help="file with one plate per line")
        if name == "ensemble":
            p.add_argument("--hedonic", help="hedonic coefficient CSV from the baseline subcommand")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("plateprice: a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
        logger.setLevel(logging.DEBUG if args.verbose else logging.INFO)
        overrides = list(args.set)
        if getattr(args, "data", None):
            overrides.append(f"data={args.data}")
        if args.out:
            overrides.append(f"out_dir={args.out}")
        if getattr(args, "seed", None) is not None:
            overrides.append(f"{'synth_seed' if args.command == 'gen-data' else 'seed'}={args.seed}")
        cfg = resolve_config(args.config, overrides)
        COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, NonFiniteError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, rm.CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:  # worker failures wrap the original error
        cause = exc.__cause__
        code = EXIT_NUMERIC if isinstance(cause, FloatingPointError) else EXIT_DATA
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
