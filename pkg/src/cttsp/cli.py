"""``cttsp`` command line: one command per process, artifacts written atomically."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from filelock import FileLock, Timeout

from . import __version__
from .bench import run_bench
from .config import ConfigError, RunConfig, load_config
from .data import DataError, Dataset, ingest, load_dataset, load_split, preprocess, save_dataset, split
from .evaluation import DEFAULT_KS, MetricReport, average_reports, baseline_report, evaluate, rank, score_queries
from .memory import MemoryOrderError
from .model import cold_scores
from .numerics.io import atomic_write_text, save_arrays
from .setbatch import PlanError, build_batch_plan
from .training import TrainingError, load_checkpoint, run_training, save_checkpoint

log = logging.getLogger("cttsp")


class CliError(RuntimeError):
    pass


EXPECTED_ERRORS = (CliError, ConfigError, DataError, PlanError, TrainingError, MemoryOrderError,
                   FileNotFoundError, ValueError, OSError, KeyError)


# --------------------------------------------------------------------------- helpers

def _parse_ks(text: Optional[str]) -> tuple[int, ...]:
    if not text:
        return DEFAULT_KS
    try:
        ks = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise CliError(f"--k expects comma-separated integers, got {text!r}") from None
    if min(ks) < 1:
        raise CliError("--k values must be positive")
    return ks


def _parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise CliError(f"--seeds expects e.g. 0-9 or 0,1,2, got {text!r}") from None
    return seeds


@contextlib.contextmanager
def _locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".cttsp.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise CliError(f"{out_dir} is locked by another cttsp process") from None
    try:
        yield
    finally:
        lock.release()


def _load_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    if getattr(args, "out", None):
        overrides["out"] = args.out
    if getattr(args, "k", None):
        overrides["ks"] = _parse_ks(args.k)
    return cfg.with_overrides(**overrides)


def _dataset_and_split(path, mode: Optional[str] = None, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Load a dataset; without ``mode`` use its stored split (transductive if none)."""
    if not path:
        raise CliError("no dataset given (use --dataset or the config key 'dataset')")
    ds = load_dataset(path)
    if mode is None:
        return ds, load_split(path, ds) or split(ds, "transductive")
    return ds, split(ds, mode, ratios, seed)


def _print_stats(stats: dict) -> None:
    keys = list(stats)
    print(" ".join(f"{k:>8}" for k in keys))
    print(" ".join(f"{stats[k]:>8}" for k in keys))


# --------------------------------------------------------------------------- commands

def cmd_preprocess(args) -> int:
    raw = ingest(args.input, args.format)
    ds = preprocess(raw, args.coverage, args.min_len, args.max_len)
    sp = split(ds, args.mode, _ratios(args.ratios), args.split_seed) if args.mode else None
    out = Path(args.out)
    with _locked(out):
        save_dataset(ds, out, sp, {"preprocess": {"coverage": args.coverage, "min_len": args.min_len,
                                                  "max_len": args.max_len, "source": str(args.input)}})
    _print_stats(ds.statistics())
    return 0


def _ratios(text: Optional[str]):
    if not text:
        return (0.7, 0.1, 0.2)
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise CliError(f"--ratios expects three comma-separated numbers, got {text!r}") from None


def cmd_batch_plan(args) -> int:
    ds, sp = _dataset_and_split(args.dataset)
    index = None if args.stage == "all" else sp.stage(args.stage)[0]
    plan = build_batch_plan(ds.events, index=index)
    out = Path(args.out)
    with _locked(out.parent):
        plan.save(out)
    print(json.dumps(plan.summary()))
    return 0


def _train_one(cfg: RunConfig, ds: Dataset, sp, out: Path) -> tuple[MetricReport, MetricReport]:
    out.mkdir(parents=True, exist_ok=True)
    result = run_training(ds, sp, cfg.model_config(), cfg.train_config(), log_path=out / "train_log.jsonl",
                          on_epoch=lambda e: log.info("epoch %d loss %.4f avg-ndcg %.4f", e.epoch, e.loss, e.avg_ndcg))
    meta = {"config": cfg.to_dict(), "dataset": str(Path(cfg.dataset).resolve()), "split": sp.to_json(),
            "best_epoch": result.best_epoch, "best_validation": result.best_report.flat(),
            "epochs_run": len(result.log), "version": __version__}
    save_checkpoint(out / "checkpoint", result.model, result.optimizer, result.bank, result.history, meta)
    result.best_report.save(out / "validation")
    test = evaluate(result.model, ds, sp, "test", ks=cfg.ks)
    test.save(out / "test")
    return result.best_report, test


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.out:
        raise CliError("no output directory given (use --out or the config key 'out')")
    ds, sp = _dataset_and_split(cfg.dataset, cfg.mode, cfg.ratios, cfg.split_seed)
    out = Path(cfg.out)
    seeds = _parse_seeds(args.seeds) if args.seeds else [cfg.seed]
    with _locked(out):
        atomic_write_text(out / "config.txt", cfg.to_text())
        tests = []
        for seed in seeds:
            run_cfg = cfg.with_overrides(seed=seed)
            run_dir = out if len(seeds) == 1 else out / f"seed{seed}"
            val, test = _train_one(run_cfg, ds, sp, run_dir)
            tests.append(test)
            print(f"seed {seed}: validation avg-ndcg {val.average_ndcg():.4f}, "
                  f"test recall@{cfg.ks[0]} {test.mean('recall', cfg.ks[0]):.4f}")
        if len(seeds) > 1:
            avg = average_reports(tests)
            doc = {"seeds": seeds, "mean": {m: {str(k): v for k, v in per.items()} for m, per in avg.items()}}
            atomic_write_text(out / "summary.json", json.dumps(doc, indent=1))
    return 0


def cmd_evaluate(args) -> int:
    ks = _parse_ks(args.k)
    reports = []
    for stem in args.checkpoint:
        ckpt = load_checkpoint(stem)
        ds, sp = _dataset_and_split(args.dataset or ckpt.meta.get("dataset"), ckpt.meta["split"]["mode"],
                                    tuple(ckpt.meta["split"]["ratios"]), ckpt.meta["split"]["seed"])
        if args.protocol and args.protocol != sp.mode:
            raise CliError(f"protocol {args.protocol!r} does not match the checkpoint's {sp.mode!r} split")
        if args.baseline:
            reports.append(baseline_report(ds, sp, args.stage, args.baseline, ks))
        else:
            reports.append(evaluate(ckpt.model, ds, sp, args.stage, ks=ks))
    if len(reports) == 1:
        report = reports[0]
        text = report.to_csv()
        if args.out:
            with _locked(Path(args.out).parent):
                report.save(Path(args.out))
    else:
        avg = average_reports(reports)
        text = "metric," + ",".join(f"K={k}" for k in ks) + "\n" + "".join(
            f"{m}," + ",".join(f"{avg[m][k]:.4f}" for k in ks) + "\n" for m in avg)
        if args.out:
            with _locked(Path(args.out).parent):
                atomic_write_text(Path(args.out).with_suffix(".csv"), text)
    sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    ds = load_dataset(args.dataset or ckpt.meta.get("dataset"))
    if args.user in ds.user_keys:
        u = ds.user_keys.index(args.user)
        last = ds.per_user[u][-1]
        scores = score_queries(model, ds.events, list(range(len(ds.events))), [last])[last]
    elif args.cold:
        _, history = model.new_state()
        scores = cold_scores(model, history)
    else:
        raise CliError(f"unknown user {args.user!r} (pass --cold to score a user without history)")
    top = rank(scores)[:args.top]
    rows = [{"rank": r + 1, "element": ds.element_keys[j], "score": float(scores[j])} for r, j in enumerate(top)]
    if args.json:
        print(json.dumps({"user": args.user, "predictions": rows}))
    else:
        for row in rows:
            print(f"{row['rank']}\t{row['element']}\t{row['score']:.6f}")
    return 0


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    p = ckpt.model.parameter_values()
    arrays = {"element_embeddings": p["element_embeddings"], "user_embedding": p["user_embedding"],
              "user_memory": ckpt.bank.user_memory, "element_memory": ckpt.bank.element_memory}
    out = Path(args.out)
    with _locked(out):
        save_arrays(out / "embeddings", arrays, {"shapes": {k: list(v.shape) for k, v in arrays.items()}})
        for name in ("element_embeddings", "element_memory", "user_memory"):
            atomic_write_text(out / f"{name}.csv", "\n".join(
                ",".join(repr(float(x)) for x in row) for row in arrays[name]) + "\n")
    print(json.dumps({k: list(v.shape) for k, v in arrays.items()}))
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    if args.synthetic:
        from . import synthetic
        makers = {"taobao": synthetic.taobao_like_dataset, "periodic": synthetic.periodic_dataset,
                  "collaborative": synthetic.collaborative_dataset}
        ds = makers[args.synthetic]()
        sp = split(ds, "transductive")
    else:
        ds, sp = _dataset_and_split(cfg.dataset, cfg.mode, cfg.ratios, cfg.split_seed)
    report = run_bench(ds, sp, cfg.model_config(), cfg.lr, cfg.seed, args.repeats)
    text = json.dumps(report, indent=1)
    if cfg.out:
        out = Path(cfg.out)
        with _locked(out):
            atomic_write_text(out / "bench.json", text)
    print(text)
    return 0


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cttsp", description="Continuous-time temporal sets prediction.")
    p.add_argument("--version", action="version", version=f"cttsp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="filter, crop, re-index and split a raw interaction log")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "jsonl"])
    s.add_argument("--coverage", type=float, default=0.8)
    s.add_argument("--min-len", type=int, default=4)
    s.add_argument("--max-len", type=int, default=20)
    s.add_argument("--mode", choices=["transductive", "inductive"], default="transductive")
    s.add_argument("--ratios", help="inductive user ratios, e.g. 0.7,0.1,0.2")
    s.add_argument("--split-seed", type=int, default=0)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("batch-plan", help="build and save the set-batch plan")
    s.add_argument("--dataset", required=True)
    s.add_argument("--stage", choices=["train", "validation", "test", "all"], default="train")
    s.add_argument("--out", required=True, help="plan JSON path")
    s.set_defaults(func=cmd_batch_plan)

    s = sub.add_parser("train", help="train and keep the best-validation checkpoint")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--seeds", help="e.g. 0-9; trains once per seed and averages test reports")
    s.add_argument("--k", help="cut-offs, e.g. 10,20,30,40")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a checkpoint on a protocol stage")
    s.add_argument("--checkpoint", required=True, action="append", help="checkpoint stem; repeat to average")
    s.add_argument("--dataset")
    s.add_argument("--protocol", choices=["transductive", "inductive"])
    s.add_argument("--stage", choices=["validation", "test"], default="test")
    s.add_argument("--baseline", choices=["TOP", "PTOP"], help="score a frequency baseline instead")
    s.add_argument("--k")
    s.add_argument("--out", help="report stem; writes .json and .csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="top-K next-set elements for one user")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset")
    s.add_argument("--user", required=True)
    s.add_argument("--cold", action="store_true", help="allow users absent from the dataset")
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("export-embeddings", help="write embeddings and memory banks")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("bench", help="time set-batch against sequential processing")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--synthetic", choices=["taobao", "periodic", "collaborative"])
    s.add_argument("--repeats", type=int, default=1)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except EXPECTED_ERRORS as err:
        msg = str(err).splitlines()[0] if str(err) else type(err).__name__
        print(f"cttsp {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
