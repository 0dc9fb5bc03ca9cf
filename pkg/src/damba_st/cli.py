"""Command line: gen-data, train, eval, verify, bench-scan.

Exit codes: 0 success, 1 validation error (bad input, failed check), 2 runtime
or numerical error.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from .bench import bench_scan, write_bench_csv
from .checkpoint import CheckpointError, file_digest, load_checkpoint, read_checkpoint, save_checkpoint
from .config import ConfigError, load_gen_spec, load_run_config
from .data import IngestionError, generate_domain, load_dataset, prepare_domain
from .numerics import NonFiniteGradient
from .spatial import GraphError
from .ssm import ContractError
from .training import EpochLog, TrainingAborted, TrainState, evaluate, train_epoch, write_metrics_csv
from .verify import run_checks

log = logging.getLogger("damba_st")

VALIDATION_ERRORS = (ConfigError, ContractError, IngestionError, GraphError, CheckpointError,
                     FileNotFoundError, KeyError)
RUNTIME_ERRORS = (TrainingAborted, NonFiniteGradient, FloatingPointError)


def worker_count() -> int:
    raw = os.environ.get("DAMBA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"DAMBA_THREADS must be an integer, got {raw!r}") from None


def run_dir(out: Path, command: str) -> Path:
    """Fresh timestamped subdirectory; never reuses an existing one."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{command}-{stamp}"
    d, n = base, 1
    while d.exists():
        d = base.with_name(f"{base.name}-{n}")
        n += 1
    d.mkdir(parents=True)
    return d


def _same_tree(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all((a / f).read_bytes() == (b / f).read_bytes() for f in fa)


# -- commands -----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = load_gen_spec(args.config)
    out = Path(args.out) if args.out else spec.out_dir
    domains = spec.domains
    if args.seed is not None:
        domains = [replace(d, seed=args.seed + i) for i, d in enumerate(domains)]
    for d in domains:
        target = out / d.name
        with tempfile.TemporaryDirectory() as tmp:
            fresh = generate_domain(d, Path(tmp) / d.name)
            if target.exists():
                if not _same_tree(fresh, target):
                    raise ConfigError(f"{target} exists with different contents; refusing to overwrite")
                print(f"{d.name}: unchanged at {target}")
                continue
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copytree(fresh, target)
        print(f"{d.name}: wrote {target}")
    return 0


def _load_bundles(paths, mc, train_fraction, offset: int = 0, indexed: bool = True):
    workers = worker_count()
    bundles = []
    for i, p in enumerate(paths):
        loaded = load_dataset(p)
        if loaded.series.shape[2] != mc.c_in:
            raise ConfigError(f"{p}: {loaded.series.shape[2]} channels, model expects {mc.c_in}")
        bundles.append(prepare_domain(loaded, mc.history, mc.horizon, mc.k_eig, mc.max_lag,
                                      train_fraction, index=(offset + i) if indexed else None,
                                      workers=workers))
    return bundles


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if not cfg.domains:
        raise ConfigError("config lists no training domains")
    cfg.check_paths()
    bundles = _load_bundles(cfg.domains, cfg.model, cfg.train_fraction)
    state = TrainState.create(cfg.model, [b.context.name for b in bundles], cfg.train)
    out = run_dir(Path(args.out) if args.out else cfg.out_dir, "train")
    shutil.copy(args.config, out / "run.cfg")
    epoch_log = EpochLog(out / "epoch_log.csv")
    extra = {"train_fraction": cfg.train_fraction}
    try:
        for _ in range(cfg.train.epochs):
            rows = train_epoch(state, bundles)
            epoch_log.append(rows)
            log.info("epoch %d  l1 %s", state.epoch, " ".join(f"{r.domain}={r.l1:.4f}" for r in rows))
    except RUNTIME_ERRORS:
        save_checkpoint(state, out / "checkpoint_at_abort.bin", extra)
        print(f"aborted; partial log in {out / 'epoch_log.csv'}", file=sys.stderr)
        raise
    ckpt = save_checkpoint(state, out / "checkpoint.bin", extra)
    print(f"checkpoint {ckpt}")
    print(f"epoch log  {out / 'epoch_log.csv'}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    if not args.dataset:
        raise ConfigError("eval needs --dataset")
    before = file_digest(args.checkpoint)
    print(f"checkpoint sha256 before {before}")
    header, _ = read_checkpoint(args.checkpoint)
    state = load_checkpoint(args.checkpoint)
    mc = state.model.cfg
    fraction = float(header.get("extra", {}).get("train_fraction", 0.8))
    reports = []
    for path in args.dataset:
        loaded = load_dataset(path)
        known = loaded.name in state.domains
        if not known and not args.zero_shot:
            raise ConfigError(f"domain {loaded.name!r} is not in the checkpoint "
                              f"({', '.join(state.domains)}); pass --zero-shot")
        index = state.domains.index(loaded.name) if known else None
        bundle = prepare_domain(loaded, mc.history, mc.horizon, mc.k_eig, mc.max_lag,
                                fraction if known else 1.0, index=index, workers=worker_count())
        if args.zero_shot:
            if not known:
                # an unseen domain contributes every window as test data
                bundle.test = bundle.train
            reports.append(evaluate(state.model, bundle, "zero_shot"))
        else:
            reports.append(evaluate(state.model, bundle, "in_distribution"))
    after = file_digest(args.checkpoint)
    if before != after:
        print("checkpoint changed during evaluation", file=sys.stderr)
        return 2
    out = run_dir(Path(args.out) if args.out else Path(args.checkpoint).parent, "eval")
    write_metrics_csv(reports, out / "metrics.csv")
    for r in reports:
        print(f"{r.dataset:<16} {r.mode:<16} MAE {r.mae:.4f}  RMSE {r.rmse:.4f}  "
              f"MAPE {r.mape:.2f}% (excluded {r.mape_excluded})")
    print(f"metrics    {out / 'metrics.csv'}")
    print(f"checkpoint sha256 after  {after} (unchanged)")
    return 0


def cmd_verify(args) -> int:
    results = run_checks(seed=args.seed or 0, corrupt_scan=args.corrupt_scan)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bench_scan(args) -> int:
    try:
        lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
    res = bench_scan(lengths, dim=args.dim, seed=args.seed or 0)
    out = run_dir(Path(args.out) if args.out else Path("runs"), "bench")
    write_bench_csv(res, out / "bench_scan.csv")
    for L, ms in zip(res.lengths, res.ms):
        print(f"L={L:<6d} {ms:9.3f} ms")
    if res.slope is not None:
        ratios = ", ".join(f"{r:.2f}" for r in res.doubling_ratios())
        print(f"slope {res.slope:.5f} ms/step  R^2 {res.r2:.4f}  successive ratios [{ratios}]")
    print(f"timings    {out / 'bench_scan.csv'}")
    return 0


# -- entry point --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="damba-st", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required: bool):
        sp.add_argument("--config", required=config_required, help="config or spec file")
        sp.add_argument("--seed", type=int, default=None, help="override the seed (u64)")
        sp.add_argument("--out", default=None, help="output directory")

    g = sub.add_parser("gen-data", help="write synthetic datasets from a spec file")
    common(g, True)
    t = sub.add_parser("train", help="train and write a checkpoint plus epoch log")
    common(t, True)
    e = sub.add_parser("eval", help="metrics for a checkpoint on datasets")
    common(e, False)
    e.add_argument("--checkpoint", help="checkpoint file")
    e.add_argument("--dataset", action="append", help="dataset directory (repeatable)")
    e.add_argument("--zero-shot", action="store_true", help="route domains through the frozen zero-shot policy")
    v = sub.add_parser("verify", help="run the oracle and invariant checks")
    common(v, False)
    v.add_argument("--corrupt-scan", action="store_true", help="inject a fault into the parallel scan (negative control)")
    b = sub.add_parser("bench-scan", help="time the selective scan against sequence length")
    common(b, False)
    b.add_argument("--lengths", default="384,768,1536,3072", help="ascending comma-separated lengths")
    b.add_argument("--dim", type=int, default=16, help="model width D")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
            "bench-scan": cmd_bench_scan}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
