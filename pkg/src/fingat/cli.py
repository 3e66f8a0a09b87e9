"""Command-line entry point: ``fingat <command> [options]``.

Every command reads an optional JSON config (``--config``) and applies
command-line overrides on top. Exit codes: 0 success, 1 runtime or numeric
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .autodiff import AutodiffError, no_grad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import (MetricError, evaluate_predictions, oracle_days, predict_days,
                         rank_order, write_detail_csv)
from .gradcheck import format_table, run_gradcheck
from .market import (FEATURE_SETS, ConfigError, DatasetSplit, MarketDataError, build_instances,
                     load_instances, load_prices, load_sectors, normalize_instance, save_instances,
                     split_chronological, trading_calendar)
from .model import VARIANTS, FinGAT, ModelConfig, attention_summary, capture_attention, ATTENTION_HEADER
from .synth import SynthConfig, write_market
from .training import LEARNING_RATES, TrainConfig, TrainingError, train

logger = logging.getLogger("fingat")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


@dataclass
class RunConfig:
    prices: str = "data/prices.csv"
    sectors: str = "data/sectors.csv"
    cache_dir: str = "cache"
    run_dir: str = "runs/default"
    feature_set: str = "full"
    ma_literal: bool = False
    split: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    k_list: list = field(default_factory=lambda: [5, 10, 20])
    seeds: list = field(default_factory=lambda: [0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            model = ModelConfig.from_dict(d.pop("model", {}))
            train_cfg = TrainConfig.from_dict(d.pop("train", {}))
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        return cls(model=model, train=train_cfg, **d)

    def cache_path(self, weeks: int | None = None) -> Path:
        weeks = self.model.weeks if weeks is None else weeks
        tag = "_literal" if self.ma_literal else ""
        name = f"instances_w{weeks}_d{self.model.days_per_week}_{self.feature_set}{tag}.jsonl"
        return Path(self.cache_dir) / name


# --- config resolution ------------------------------------------------------

def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def load_config(args) -> RunConfig:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(raw)
    simple = {"prices": "prices", "sectors": "sectors", "cache_dir": "cache_dir", "run_dir": "run_dir",
              "feature_set": "feature_set", "k_list": "k", "seeds": "seeds"}
    for attr, opt in simple.items():
        value = getattr(args, opt, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "ma_literal", False):
        cfg.ma_literal = True
    model_over = {"variant": "variant", "hidden_dim": "hidden", "weeks": "weeks"}
    train_over = {"learning_rate": "lr", "batch_size": "batch_size", "delta": "delta", "l2": "l2",
                  "max_epochs": "epochs", "patience": "patience"}
    try:
        m = cfg.model.to_dict()
        m.update({k: getattr(args, o) for k, o in model_over.items() if getattr(args, o, None) is not None})
        m["feature_dim"] = len(FEATURE_SETS[cfg.feature_set]) if cfg.feature_set in FEATURE_SETS else 0
        t = cfg.train.to_dict()
        t.update({k: getattr(args, o) for k, o in train_over.items() if getattr(args, o, None) is not None})
        t["k_list"] = list(cfg.k_list)
        cfg.model = ModelConfig.from_dict(m)
        cfg.train = TrainConfig.from_dict(t)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if cfg.feature_set not in FEATURE_SETS:
        raise UsageError(f"unknown feature set {cfg.feature_set!r}")
    if not cfg.seeds:
        raise UsageError("at least one seed is required")
    return cfg


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _attach_log(run_dir: Path, name: str) -> logging.Handler:
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / f"{name}.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("fingat").addHandler(handler)
    return handler


def _detach_log(handler: logging.Handler) -> None:
    logging.getLogger("fingat").removeHandler(handler)
    handler.close()


# --- data helpers -----------------------------------------------------------

def _ingest(cfg: RunConfig, weeks: int | None = None):
    for label, p in (("prices", cfg.prices), ("sectors", cfg.sectors)):
        if not Path(p).exists():
            raise UsageError(f"{label} file not found: {p}")
    bars = load_prices(cfg.prices)
    catalog = load_sectors(cfg.sectors)
    weeks = cfg.model.weeks if weeks is None else weeks
    instances = build_instances(bars, catalog, weeks, cfg.model.days_per_week, cfg.feature_set,
                                ma_literal=cfg.ma_literal)
    if not instances:
        raise MarketDataError("price history too short to build any instance window")
    catalog = catalog.restrict(bars)
    summary = {"stocks": len(bars), "sectors": len(catalog.sectors),
               "days": len(trading_calendar(bars)), "instances": len(instances),
               "first_date": instances[0].prediction_date.isoformat(),
               "last_date": instances[-1].prediction_date.isoformat()}
    return instances, catalog, summary


def _load_cache(cfg: RunConfig, weeks: int | None = None):
    path = cfg.cache_path(weeks)
    if not path.exists():
        raise UsageError(f"instance cache {path} not found; run `fingat ingest` first")
    instances, catalog, header = load_instances(path)
    return instances, catalog


def _split(instances, ratios, feature_names, mean=None, std=None) -> DatasetSplit:
    """Chronological split; ``mean``/``std`` replace the train statistics when given."""
    split = split_chronological(instances, ratios, feature_names)
    if mean is None:
        return split
    n_train, n_val = len(split.train), len(split.validation)
    norm = [normalize_instance(i, np.asarray(mean), np.asarray(std)) for i in instances]
    return DatasetSplit(norm[:n_train], norm[n_train:n_train + n_val], norm[n_train + n_val:],
                        np.asarray(mean), np.asarray(std), list(feature_names))


def _load_model(path):
    params, meta = load_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: checkpoint has no model config")
    model = FinGAT(ModelConfig.from_dict(meta["model"]))
    try:
        model.load_state_dict(params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model, meta


def _checkpoints(path) -> list:
    """A checkpoint file, or every ``seed_*/best.ckpt`` under a run directory."""
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("seed_*/best.ckpt"))
        if not found and (path / "best.ckpt").exists():
            found = [path / "best.ckpt"]
        if not found:
            raise UsageError(f"no best.ckpt under {path}")
        return found
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return [path]


def _prepared(cfg: RunConfig, meta: dict):
    weeks = meta["model"]["weeks"]
    instances, catalog = _load_cache(cfg, weeks)
    split = _split(instances, cfg.split, meta.get("feature_names", FEATURE_SETS[cfg.feature_set]),
                   meta.get("norm_mean"), meta.get("norm_std"))
    return split, catalog


def _find_day(split: DatasetSplit, date: str):
    days = split.train + split.validation + split.test
    try:
        when = dt.date.fromisoformat(date)
    except ValueError:
        raise UsageError(f"bad date {date!r}; expected YYYY-MM-DD") from None
    for inst in days:
        if inst.prediction_date == when:
            return inst
    raise UsageError(f"no complete instance window for {date}; earliest valid date is "
                     f"{days[0].prediction_date.isoformat()}, latest {days[-1].prediction_date.isoformat()}")


# --- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(n_stocks=args.stocks, n_sectors=args.sectors, weeks=args.weeks, seed=args.seed)
    paths = write_market(args.out, cfg)
    print(json.dumps(paths, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = load_config(args)
    instances, catalog, summary = _ingest(cfg)
    path = cfg.cache_path()
    save_instances(path, instances, catalog,
                   {"weeks": cfg.model.weeks, "days_per_week": cfg.model.days_per_week,
                    "feature_set": cfg.feature_set, "ma_literal": cfg.ma_literal, "feature_names": FEATURE_SETS[cfg.feature_set]})
    summary["cache"] = str(path)
    logger.info("ingest: %s", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _train_one(cfg: RunConfig, split, catalog, seed: int, run_dir: Path, lr: float):
    model_cfg = ModelConfig.from_dict({**cfg.model.to_dict(), "seed": seed})
    train_cfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed, "learning_rate": lr})
    model, report = train(split, catalog, model_cfg, train_cfg, run_dir)
    _write_loss_csv(run_dir / "epochs.csv", report)
    plotting.plot_training_curves(report, run_dir / "training_curves.png")
    return model, report


def _write_loss_csv(path, report) -> None:
    ks = sorted(report.epochs[0].validation.keys() - {"acc", "n_days"}, key=int)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "rank", "move", "l2", "total"] + [f"val_mrr@{k}" for k in ks] + ["val_acc"])
        for e in report.epochs:
            w.writerow([e.epoch, repr(e.rank), repr(e.move), repr(e.l2), repr(e.total)]
                       + [repr(e.validation[k]["mrr"]) for k in ks] + [repr(e.validation["acc"])])


def cmd_train(args) -> int:
    cfg = load_config(args)
    instances, catalog = _load_cache(cfg)
    split = _split(instances, cfg.split, FEATURE_SETS[cfg.feature_set])
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", cfg.to_dict())
    handler = _attach_log(run_dir, "train")
    summary = {"variant": cfg.model.variant, "seeds": {}}
    try:
        for seed in cfg.seeds:
            seed_dir = run_dir / f"seed_{seed}"
            grid = LEARNING_RATES if args.lr_search else (cfg.train.learning_rate,)
            results = []
            for lr in grid:
                sub = seed_dir / f"lr_{lr:g}" if args.lr_search else seed_dir
                model, report = _train_one(cfg, split, catalog, seed, sub, lr)
                results.append((report.best_metric, -grid.index(lr), lr, sub, model, report))
            best_metric, _, lr, sub, model, report = max(results, key=lambda r: r[:2])
            if args.lr_search:
                params, meta = load_checkpoint(sub / "best.ckpt")
                save_checkpoint(seed_dir / "best.ckpt", params, meta)
                _write_json(seed_dir / "lr_search.json",
                            {f"{r[2]:g}": r[0] for r in results} | {"selected": lr})
            summary["seeds"][str(seed)] = {"best_epoch": report.best_epoch, "best_metric": best_metric,
                                           "select_metric": report.select_metric, "learning_rate": lr,
                                           "epochs_run": len(report.epochs)}
            print(f"seed {seed}: best {report.select_metric} {best_metric:.4f} at epoch "
                  f"{report.best_epoch} (lr {lr:g}, {len(report.epochs)} epochs)")
    finally:
        _detach_log(handler)
    _write_json(run_dir / "summary.json", summary)
    return EXIT_OK


def _eval_json(reports: list, seeds: list) -> dict:
    base = reports[0]
    out = {}
    for k in base.k_list:
        mrr = [r.mrr[k] for r in reports]
        prec = [r.precision[k] for r in reports]
        out[str(k)] = {"mrr": float(np.mean(mrr)), "precision": float(np.mean(prec))}
        if len(reports) > 1:
            out[str(k)].update({"mrr_std": float(np.std(mrr)), "precision_std": float(np.std(prec))})
    out["acc"] = float(np.mean([r.acc for r in reports]))
    if len(reports) > 1:
        out["acc_std"] = float(np.std([r.acc for r in reports]))
    out["n_days"] = base.n_days
    out["seeds"] = seeds
    return out


def _usable_k(k_list, days) -> list:
    """Drop K values larger than the smallest cross-section, with a warning."""
    n = min(len(d.stock_ids) for d in days)
    keep = [k for k in k_list if k <= n]
    for k in k_list:
        if k > n:
            logger.warning("skipping K=%d: only %d stocks on some days", k, n)
    if not keep:
        raise UsageError(f"every K in {k_list} exceeds the {n}-stock universe")
    return keep


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    out_dir = Path(args.out) if args.out else Path(cfg.run_dir) / "eval"
    reports, seeds = [], []
    if args.oracle:
        instances, _ = _load_cache(cfg)
        split = _split(instances, cfg.split, FEATURE_SETS[cfg.feature_set])
        days = oracle_days(getattr(split, args.split))
        k_list = _usable_k(cfg.k_list, days)
        rep = evaluate_predictions(days, k_list)
        write_detail_csv(out_dir / "detail.csv", days)
        reports.append(rep)
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint or --oracle")
        for ckpt in _checkpoints(args.checkpoint):
            model, meta = _load_model(ckpt)
            split, catalog = _prepared(cfg, meta)
            days = predict_days(model, getattr(split, args.split), catalog)
            k_list = _usable_k(cfg.k_list, days)
            rep = evaluate_predictions(days, k_list)
            seed = model.config.seed
            name = "detail.csv" if len(reports) == 0 and not Path(args.checkpoint).is_dir() \
                else f"detail_seed_{seed}.csv"
            write_detail_csv(out_dir / name, days)
            reports.append(rep)
            seeds.append(seed)
    result = _eval_json(reports, seeds)
    _write_json(out_dir / "evaluation.json", result)
    plotting.plot_metrics(result, k_list, out_dir / "metrics.png")
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_recommend(args) -> int:
    cfg = load_config(args)
    ckpt = _checkpoints(args.checkpoint)[0]
    model, meta = _load_model(ckpt)
    split, catalog = _prepared(cfg, meta)
    inst = _find_day(split, args.date)
    if not 1 <= args.top <= inst.n_stocks:
        raise UsageError(f"K must lie in [1, {inst.n_stocks}] for {args.date}")
    [day] = predict_days(model, [inst], catalog)
    order = rank_order(day.pred_return, list(day.stock_ids))[:args.top]
    out_dir = Path(args.out) if args.out else Path(cfg.run_dir) / "recommend"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"recommend_{args.date}.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "stock_id", "pred_return", "pred_move"])
        for r, i in enumerate(order, start=1):
            w.writerow([r, day.stock_ids[i], repr(float(day.pred_return[i])), repr(float(day.pred_move[i]))])
            print(f"{r:3d}  {day.stock_ids[i]:<12} {day.pred_return[i]: .6f}  p(up)={day.pred_move[i]:.3f}")
    plotting.plot_recommendation([day.stock_ids[i] for i in order], day.pred_return[order],
                                 out_dir / f"recommend_{args.date}.png", f"top-{args.top} for {args.date}")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    cfg = load_config(args)
    ckpt = _checkpoints(args.checkpoint)[0]
    model, meta = _load_model(ckpt)
    split, catalog = _prepared(cfg, meta)
    inst = _find_day(split, args.date)
    with no_grad():
        batch = model.forward(inst, catalog, capture=True).batch
    rows = capture_attention(batch)
    out_dir = Path(args.out) if args.out else Path(cfg.run_dir) / "attention"
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / f"attention_{args.date}.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTENTION_HEADER)
        for r in rows:
            w.writerow(list(r[:5]) + [repr(r[5])])
    summary = attention_summary(rows)
    _write_json(out_dir / f"attention_{args.date}_summary.json", summary)
    for level, table in (("temporal", batch.temporal), ("intra", batch.intra), ("inter", batch.inter)):
        for context, (row_ids, col_ids, weights) in table.items():
            slug = context.replace("/", "_")
            plotting.plot_attention_heatmap(row_ids, col_ids, weights,
                                            out_dir / f"{level}_{slug}_{args.date}.png", f"{level}: {context}")
    plotting.plot_attention_distribution(rows, out_dir / f"distribution_{args.date}.png")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    weeks_grid = args.weeks_grid or [cfg.model.weeks]
    hidden_grid = args.hidden_grid or [cfg.model.hidden_dim]
    delta_grid = args.delta_grid or [cfg.train.delta]
    run_dir = Path(cfg.run_dir)
    _write_json(run_dir / "config.json", {**cfg.to_dict(), "sweep": {
        "weeks": weeks_grid, "hidden_dim": hidden_grid, "delta": delta_grid}})
    rows = sweep(cfg, weeks_grid, hidden_grid, delta_grid, run_dir)
    header = list(rows[0])
    with (run_dir / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(run_dir / "sweep.json", rows)
    select = cfg.train.select_k
    plotting.plot_sweep(rows, run_dir / "sweep.png", metric=f"test_mrr@{select}")
    for r in rows:
        print(", ".join(f"{k}={v}" for k, v in r.items()))
    return EXIT_OK


def sweep(cfg: RunConfig, weeks_grid, hidden_grid, delta_grid, run_dir=None) -> list:
    """Train and test one model per grid cell; returns one row dict per cell."""
    rows = []
    data = {}
    for weeks in weeks_grid:
        if cfg.cache_path(weeks).exists():
            data[weeks] = _load_cache(cfg, weeks)
        else:
            instances, catalog, _ = _ingest(cfg, weeks)
            data[weeks] = (instances, catalog)
    for weeks in weeks_grid:
        instances, catalog = data[weeks]
        split = _split(instances, cfg.split, FEATURE_SETS[cfg.feature_set])
        for hidden in hidden_grid:
            for delta in delta_grid:
                seed = cfg.seeds[0]
                mcfg = ModelConfig.from_dict({**cfg.model.to_dict(), "weeks": weeks,
                                              "hidden_dim": hidden, "seed": seed})
                tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "delta": delta, "seed": seed,
                                              "checkpoint_every": 0})
                cell_dir = None if run_dir is None else Path(run_dir) / f"w{weeks}_h{hidden}_d{delta:g}"
                model, report = train(split, catalog, mcfg, tcfg, cell_dir)
                days = predict_days(model, split.test, catalog)
                ks = _usable_k(cfg.k_list, days)
                test = evaluate_predictions(days, ks)
                row = {"weeks": weeks, "hidden_dim": hidden, "delta": delta, "seed": seed,
                       "best_epoch": report.best_epoch, "val_" + report.select_metric: report.best_metric}
                for k in ks:
                    row[f"test_mrr@{k}"] = test.mrr[k]
                    row[f"test_precision@{k}"] = test.precision[k]
                row["test_acc"] = test.acc
                rows.append(row)
    return rows


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(args.seed)
    print(format_table(rows))
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "max_rel_error", "n_checked", "n_skipped", "passed"])
            for r in rows:
                w.writerow([r.name, repr(r.max_rel_error), r.n_checked, r.n_skipped, int(r.passed)])
    failed = [r for r in rows if not r.passed]
    for r in failed:
        print(f"FAILED {r.name}: max relative error {r.max_rel_error:.3e}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_RUNTIME


# --- argument parsing -------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--prices")
    p.add_argument("--sectors")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--feature-set", dest="feature_set", choices=sorted(FEATURE_SETS))
    p.add_argument("--ma-literal", dest="ma_literal", action="store_true",
                   help="moving-average ratio as mean / (adj_close - 1)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--hidden", type=int)
    p.add_argument("--weeks", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--k", type=_int_list, help="comma-separated K list")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fingat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the seeded synthetic momentum market")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stocks", type=int, default=12)
    p.add_argument("--sectors", type=int, default=3)
    p.add_argument("--weeks", type=int, default=40)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build the instance cache from price and sector CSVs")
    _common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one model per seed")
    _common(p)
    p.add_argument("--lr-search", action="store_true", help="try every learning rate in the grid")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="top-K metrics of a checkpoint (or run directory)")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="use realised returns as predictions")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-K stocks for one prediction date")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--date", required=True)
    p.add_argument("--top", type=int, default=5, help="number of stocks to list")
    p.add_argument("--out")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("export-attention", help="dump attention weights for one date")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--date", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("sweep", help="grid over weeks, hidden size and delta")
    _common(p)
    p.add_argument("--weeks-grid", type=_int_list)
    p.add_argument("--hidden-grid", type=_int_list)
    p.add_argument("--delta-grid", type=_float_list)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and variant")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional CSV of the table")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("fingat")
    root.setLevel(logging.INFO)
    root.handlers = [h for h in root.handlers if not isinstance(h, logging.StreamHandler)
                     or isinstance(h, logging.FileHandler)]
    root.addHandler(console)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint integrity error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (MarketDataError, MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, MarketDataError) else EXIT_RUNTIME
    except (TrainingError, AutodiffError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
