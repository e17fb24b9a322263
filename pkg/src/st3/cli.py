"""Command-line front end: ``st3 {train,sweep,ablate,lrr,report}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from filelock import FileLock

from . import config as C
from .metrics import CsvLog, read_csv
from .sparsify import SparsifyConfig

log = logging.getLogger("st3")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def resolve_config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config)
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "dataset_root", None):
        overrides.append(f"data.root={args.dataset_root}")
    if getattr(args, "full_dataset", False):
        overrides.append("data.full=true")
    if getattr(args, "out", None):
        overrides.append(f"out_dir={args.out}")
    if overrides:
        cfg = C.apply_overrides(cfg, overrides)
    return cfg


def with_run(cfg: C.ExperimentConfig, seed: int | None = None, sparsity: float | None = None,
             sparsify: SparsifyConfig | None = None, name: str | None = None) -> C.ExperimentConfig:
    train = cfg.train
    if sparsity is not None:
        train = dataclasses.replace(train, schedule=dataclasses.replace(train.schedule, s_final=sparsity))
    if sparsify is not None:
        train = dataclasses.replace(train, sparsify=sparsify)
    return dataclasses.replace(cfg, train=train, seed=cfg.seed if seed is None else seed,
                               name=name or cfg.name).validate()


def _run_one(cfg_text: str, out_dir: str, kind: str = "train") -> dict:
    """Worker entry point (picklable): one run into ``out_dir``; returns its summary."""
    from .train import load_dataset, lrr_run, train_run
    cfg = C.parse(cfg_text)
    dataset = load_dataset(cfg)
    if kind == "lrr":
        res = lrr_run(cfg, dataset, out_dir=out_dir)
    else:
        res = train_run(cfg, dataset, out_dir=out_dir)
    return json.loads((Path(out_dir) / "summary.json").read_text()) if out_dir else res.final


def _append_manifest(root: Path, run_dir: Path) -> None:
    with FileLock(str(root / "manifest.csv.lock")):
        CsvLog(root / "manifest.csv", ["run_dir"]).write([{"run_dir": str(run_dir.relative_to(root))}])


def run_jobs(root: Path, jobs: list[tuple[C.ExperimentConfig, Path]], n_workers: int = 1) -> list[dict]:
    """Run every (config, dir) pair not yet completed; completion = ``final.ckpt`` present."""
    root.mkdir(parents=True, exist_ok=True)
    pending = [(c, d) for c, d in jobs if not (d / "final.ckpt").exists()]
    skipped = len(jobs) - len(pending)
    if skipped:
        log.info("skipping %d completed runs", skipped)
    if n_workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            futs = [(ex.submit(_run_one, C.dump(c), str(d)), d) for c, d in pending]
            for fut, d in futs:
                fut.result()
                _append_manifest(root, d)
    else:
        for c, d in pending:
            _run_one(C.dump(c), str(d))
            _append_manifest(root, d)
    return [json.loads((d / "summary.json").read_text()) for _, d in jobs]


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg = with_run(cfg, seed=args.seed, sparsity=args.sparsity)
    out = Path(cfg.out_dir)
    summary = _run_one(C.dump(cfg), str(out))
    print(f"{cfg.name}: test_acc={summary['test_acc']:.4f} sparsity={summary['achieved_sparsity']:.4f} "
          f"flops={summary['sparse_flops']:.4g}/{summary['dense_flops']:.4g} out={out}")
    return EXIT_OK


def plan_sweep(cfg: C.ExperimentConfig, root: Path, sparsities, seeds):
    return [(with_run(cfg, seed=s, sparsity=sp, name=f"{cfg.name}-sp{sp}-seed{s}"),
             root / f"sp{sp}" / f"seed{s}") for sp in sparsities for s in seeds]


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    sparsities = args.sparsity if args.sparsity is not None else cfg.sparsities
    seeds = args.seed if args.seed is not None else cfg.seeds
    root = Path(cfg.out_dir)
    jobs = plan_sweep(cfg, root, sparsities, seeds)
    summaries = run_jobs(root, jobs, args.jobs)
    rows = []
    for sp in sparsities:
        accs = [s["test_acc"] for s, (c, _) in zip(summaries, jobs) if c.train.schedule.s_final == sp]
        flops = [s["sparse_flops"] for s, (c, _) in zip(summaries, jobs) if c.train.schedule.s_final == sp]
        ach = [s["achieved_sparsity"] for s, (c, _) in zip(summaries, jobs) if c.train.schedule.s_final == sp]
        m, sd = _mean_std(accs)
        rows.append({"sparsity": sp, "n_runs": len(accs), "mean_acc": m, "std_acc": sd,
                     "mean_achieved_sparsity": statistics.fmean(ach), "mean_sparse_flops": statistics.fmean(flops)})
    _write_table(root / "sweep.csv", rows)
    for r in rows:
        print(f"sparsity {r['sparsity']}: acc {r['mean_acc']:.4f} +- {r['std_acc']:.4f} ({r['n_runs']} runs)")
    return EXIT_OK


def ablation_arms(cfg: C.ExperimentConfig) -> list[SparsifyConfig]:
    a = cfg.ablate
    return [SparsifyConfig(t, r, al) for t in a.threshold_modes for r in a.rescale for al in a.allocations]


def arm_slug(arm: SparsifyConfig) -> str:
    return f"{arm.threshold_mode}{'+rescale' if arm.rescale else ''}-{arm.allocation}"


def plan_ablation(cfg: C.ExperimentConfig, root: Path, sparsities, seeds):
    base = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, method="st3"))
    return [(with_run(base, seed=s, sparsity=sp, sparsify=arm, name=f"{arm_slug(arm)}-sp{sp}-seed{s}"),
             root / arm_slug(arm) / f"sp{sp}" / f"seed{s}")
            for arm in ablation_arms(cfg) for sp in sparsities for s in seeds]


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    sparsities = args.sparsity if args.sparsity is not None else cfg.sparsities
    seeds = args.seed if args.seed is not None else cfg.seeds
    root = Path(cfg.out_dir)
    jobs = plan_ablation(cfg, root, sparsities, seeds)
    summaries = run_jobs(root, jobs, args.jobs)
    rows = []
    for arm in ablation_arms(cfg):
        for sp in sparsities:
            accs = [s["test_acc"] for s, (c, _) in zip(summaries, jobs)
                    if c.train.sparsify == arm and c.train.schedule.s_final == sp]
            m, sd = _mean_std(accs)
            rows.append({"arm": arm_slug(arm), "threshold_mode": arm.threshold_mode, "rescale": arm.rescale,
                         "allocation": arm.allocation, "sparsity": sp, "n_runs": len(accs),
                         "mean_acc": m, "std_acc": sd, "collapsed": False})
    for sp in sparsities:
        best = max(r["mean_acc"] for r in rows if r["sparsity"] == sp)
        for r in rows:
            if r["sparsity"] == sp:
                r["collapsed"] = r["mean_acc"] < cfg.ablate.collapse_fraction * best
    _write_table(root / "ablation.csv", rows)
    for r in rows:
        flag = "  COLLAPSED" if r["collapsed"] else ""
        print(f"{r['arm']:>24s} @ {r['sparsity']}: acc {r['mean_acc']:.4f} +- {r['std_acc']:.4f}{flag}")
    return EXIT_OK


def cmd_lrr(args) -> int:
    cfg = resolve_config(args)
    over = []
    if args.cycles is not None:
        over.append(f"lrr.cycles={args.cycles}")
    if args.prune_fraction is not None:
        over.append(f"lrr.prune_fraction={args.prune_fraction}")
    if args.inner is not None:
        over.append(f"lrr.inner_method={args.inner}")
    if over:
        cfg = C.apply_overrides(cfg, over)
    seeds = args.seed if args.seed is not None else [cfg.seed]
    root = Path(cfg.out_dir)
    jobs = [(with_run(cfg, seed=s, name=f"{cfg.name}-lrr-{cfg.lrr.inner_method}-seed{s}"),
             root / f"lrr-{cfg.lrr.inner_method}" / f"seed{s}") for s in seeds]
    root.mkdir(parents=True, exist_ok=True)
    for c, d in jobs:
        if not (d / "final.ckpt").exists():
            _run_one(C.dump(c), str(d), kind="lrr")
            _append_manifest(root, d)
        summary = json.loads((d / "summary.json").read_text())
        for cyc in summary["cycles"]:
            print(f"seed {c.seed} cycle {cyc['cycle']}: target {cyc['target']:.4f} test_acc {cyc['test_acc']:.4f}")
    return EXIT_OK


def _write_table(path: Path, rows: list[dict]) -> None:
    if path.exists():
        path.unlink()
    if rows:
        CsvLog(path, list(rows[0])).write(rows)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def report_rows(run_dir: Path) -> list[dict]:
    rows = []
    for summary_path in sorted(run_dir.rglob("summary.json")):
        d = summary_path.parent
        s = json.loads(summary_path.read_text())
        records = read_csv(d / "runrecord.csv") if (d / "runrecord.csv").exists() else []
        layers = read_csv(d / "layers.csv") if (d / "layers.csv").exists() else []
        sparse_flops = dense_flops = float("nan")
        if layers:
            last = max(int(r["epoch"]) for r in layers)
            sel = [r for r in layers if int(r["epoch"]) == last]
            sparse_flops = 2 * sum(float(r["mac_sparse"]) for r in sel)
            dense_flops = 2 * sum(float(r["mac_dense"]) for r in sel)
        sp = float(s["achieved_sparsity"])
        rows.append({
            "run": str(d.relative_to(run_dir)) if d != run_dir else ".",
            "method": s.get("method", ""),
            "target_sparsity": float(s["sp_ratio"]),
            "achieved_sparsity": sp,
            "log10_density": math.log10(1 - sp) if sp < 1 else float("-inf"),
            "test_acc": float(s["test_acc"]),
            "dense_flops": dense_flops,
            "sparse_flops": sparse_flops,
            "log10_sparse_flops": math.log10(sparse_flops) if sparse_flops > 0 else float("nan"),
            "flops_reduction": dense_flops / sparse_flops if sparse_flops > 0 else float("nan"),
            "epochs": len(records),
        })
    return rows


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    rows = report_rows(run_dir) if run_dir.is_dir() else []
    if not rows:
        print(f"no runs found under {run_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_table(run_dir / "report.csv", rows)
    cols = list(rows[0])
    lines = ["# accuracy vs sparsity / FLOPS (FLOPS = 2 x multiply-adds per sample)", "\t".join(cols)]
    lines += ["\t".join(_fmt(r[c]) for c in cols) for r in rows]
    lines.append(f"# runs: {len(rows)}  epoch rows: {sum(r['epochs'] for r in rows)}")
    for sw in sorted(run_dir.rglob("switches.csv")):
        sw_rows = read_csv(sw)
        lines.append(f"\n# switch histogram ({sw.parent.relative_to(run_dir) if sw.parent != run_dir else '.'}): "
                     "group, final_state, switch_count, n_weights")
        lines += [f"{r['group']}\t{r['final_state']}\t{r['switch_count']}\t{r['n_weights']}" for r in sw_rows]
    text = "\n".join(lines) + "\n"
    (run_dir / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="st3", description="Sparse training with soft-thresholding and STE.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, multi: bool):
        p.add_argument("--config", required=True, help="YAML file or preset name")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--dataset-root", help="dataset directory (falls back to $ST3_DATA_ROOT)")
        p.add_argument("--full-dataset", action="store_true", help="use the full training set, not the desk subset")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        if multi:
            p.add_argument("--seed", type=_ints, help="comma-separated seeds")
            p.add_argument("--sparsity", type=_floats, help="comma-separated target sparsities")
            p.add_argument("--jobs", type=int, default=1, help="parallel runs")
        else:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="single training run")
    common(p, multi=False)
    p.add_argument("--sparsity", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="(sparsity x seed) grid")
    common(p, multi=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="threshold x rescale x allocation grid")
    common(p, multi=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("lrr", help="learning-rate-rewinding cycles")
    common(p, multi=False)
    p.set_defaults(seed=None)
    p.add_argument("--cycles", type=int)
    p.add_argument("--prune-fraction", type=float)
    p.add_argument("--inner", choices=["st3", "hard_prune"])
    p.set_defaults(func=cmd_lrr)

    p = sub.add_parser("report", help="tables from a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "lrr" and args.seed is not None:
        args.seed = [args.seed]
    try:
        return args.func(args)
    except C.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        log.debug("run failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
