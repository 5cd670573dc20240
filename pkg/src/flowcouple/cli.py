"""``flowcouple`` command line: train, sample, eval, score, oracle.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import editlab, experiments, sampler, scorebench, trainer
from .coupling import INDEPENDENT, LOCAL_GAUSSIAN
from .fsutil import atomic_write_text
from .numcore import CheckpointError, load_checkpoint
from .rng import derive

log = logging.getLogger("flowcouple")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SAMPLE_HEADER = ["instance", "task_id", "seed", "nfe", "preserved_rmse", "edited_rmse",
                 "context_score", "over_edit_index"]


class UsageError(Exception):
    pass


def worker_count() -> int:
    raw = os.environ.get("FLOWCOUPLE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FLOWCOUPLE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"FLOWCOUPLE_THREADS must be a positive integer, got {raw!r}")
    return n


def _resolve_config(args, steps_key: str | None = "max_steps"):
    values = cfgmod.load_config(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.regime is not None:
        values["coupling_regime"] = args.regime
    if args.alpha is not None:
        values["alpha"] = args.alpha
    if steps_key and args.steps is not None:
        values[steps_key] = int(args.steps)
    # a short run without an explicit warmup is all warmup
    if "warmup_steps" not in values and values.get("max_steps", 1000) < 300:
        values["warmup_steps"] = values["max_steps"]
    try:
        return cfgmod.build(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _write_manifest(out: Path, manifest: dict, name: str = "manifest.json") -> Path:
    path = out / name
    manifest["outputs"] = sorted({*manifest.get("outputs", []), name})
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _rel(out: Path, p) -> str:
    return str(Path(p).relative_to(out))


def cmd_train(args) -> int:
    train_cfg, schedule, data_cfg = _resolve_config(args)
    if args.out is None:
        raise UsageError("train needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = worker_count()
    start = time.perf_counter()
    train_set, _ = experiments.suite_datasets(train_cfg.seed, data_cfg.train_per_task, data_cfg.eval_per_task,
                                              train_cfg.d_s, train_cfg.d_v)
    outputs = []
    cfg_path = atomic_write_text(out / "config.txt", cfgmod.dump_config(train_cfg, schedule, data_cfg))
    outputs.append(cfg_path)
    data_path = out / "dataset.csv"
    editlab.dump_dataset(train_set, data_path)
    outputs.append(data_path)

    result = trainer.train_run(train_cfg, train_set, schedule, out_dir=out)
    outputs += result.checkpoints
    if result.metrics_path is not None:
        outputs.append(result.metrics_path)
    manifest = {
        "command": "train",
        "code_version": __version__,
        "seed": train_cfg.seed,
        "config": cfgmod.parse_config(cfgmod.dump_config(train_cfg, schedule, data_cfg)),
        "schedule": {"warmup_steps": schedule.warmup_steps, "warmup_local_frac": schedule.warmup_local_frac,
                     "main_local_frac": schedule.main_local_frac, "max_steps": schedule.max_steps},
        "coupling_counts": result.coupling_counts,
        "aborted_steps": result.aborted_steps,
        "reflow_dropped": result.reflow_dropped,
        "threads": threads,
        "wallclock_s": round(time.perf_counter() - start, 3),
        "outputs": [_rel(out, p) for p in outputs],
    }
    _write_manifest(out, manifest)
    print(f"trained {schedule.max_steps} steps ({train_cfg.coupling_regime}); outputs in {out}")
    return EXIT_OK


def _parse_steps(raw) -> list[int]:
    if raw is None:
        return []
    try:
        ks = [int(k) for k in str(raw).split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--steps must be an integer or comma-separated list, got {raw!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--steps values must be >= 1")
    return ks


def _load_run(path):
    p = Path(path)
    ckpt = p / "final.fckp" if p.is_dir() else p
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    try:
        net, _ = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise UsageError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    cfg_file = ckpt.parent / "config.txt"
    return net, ckpt, cfg_file if cfg_file.exists() else None


def cmd_sample(args) -> int:
    if args.checkpoint is None:
        raise UsageError("sample needs --checkpoint (file or run directory)")
    net, ckpt, run_cfg = _load_run(args.checkpoint)
    if args.config is None and run_cfg is not None:
        args.config = str(run_cfg)
    train_cfg, _, data_cfg = _resolve_config(args, steps_key=None)
    if train_cfg.d_s != net.d_s or train_cfg.context_dim != net.context_dim:
        raise UsageError(f"config dims (d_s={train_cfg.d_s}, context={train_cfg.context_dim}) do not match "
                         f"checkpoint (d_s={net.d_s}, context={net.context_dim})")
    ks = _parse_steps(args.steps) or [sampler.DEFAULT_STEPS[args.init]]
    if args.out is None:
        raise UsageError("sample needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, evals = experiments.suite_datasets(train_cfg.seed, data_cfg.train_per_task, data_cfg.eval_per_task,
                                          train_cfg.d_s, train_cfg.d_v)
    contexts = np.stack([inst.context for inst in evals])
    x0 = np.stack([sampler.init_inference_state(inst, args.init, derive(train_cfg.seed, "sample.init", i))
                   for i, inst in enumerate(evals)])
    outputs = []
    start = time.perf_counter()
    for k in ks:
        calls = []
        trajs = sampler.euler_sample_batch(net, x0, contexts, k, on_eval=lambda step, t: calls.append(step))
        if len(calls) != k:  # pragma: no cover - NFE accounting guard
            raise RuntimeError(f"expected {k} network evaluations, counted {len(calls)}")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SAMPLE_HEADER)
        for i, (tr, inst) in enumerate(zip(trajs, evals)):
            if tr.valid:
                edit = sampler.decode_edit(tr, inst)
                m = editlab.edit_metrics(edit, inst)
                row = [m.preserved_rmse, m.edited_rmse, m.context_score, editlab.over_edit_index(edit, inst)]
            else:
                row = [float("nan")] * 4
            w.writerow([i, inst.task_id, inst.seed, tr.nfe, *(repr(float(v)) for v in row)])
        path = atomic_write_text(out / f"metrics_K{k}.csv", buf.getvalue())
        outputs.append(path)
        for i in range(min(args.dump_trajectories, len(trajs))):
            tpath = out / f"trajectory_K{k}_i{i}.csv"
            sampler.dump_trajectory(trajs[i], tpath)
            outputs.append(tpath)
    manifest = {
        "command": "sample",
        "code_version": __version__,
        "seed": train_cfg.seed,
        "checkpoint": str(ckpt),
        "init": args.init,
        "steps": ks,
        "threads": worker_count(),
        "wallclock_s": round(time.perf_counter() - start, 3),
        "outputs": [_rel(out, p) for p in outputs],
    }
    _write_manifest(out, manifest, "manifest_sample.json")
    print(f"sampled {len(evals)} instances at K={ks}; outputs in {out}")
    return EXIT_OK


def _read_sample_metrics(directory: Path) -> dict[int, list[dict]]:
    found = {}
    for path in sorted(directory.glob("metrics_K*.csv")):
        k = int(path.stem.split("_K", 1)[1])
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != SAMPLE_HEADER:
                raise UsageError(f"{path}: header {reader.fieldnames} != {SAMPLE_HEADER}")
            found[k] = list(reader)
    if not found:
        raise UsageError(f"no metrics_K*.csv files in {directory}")
    return found


EVAL_HEADER = ["K", "n", "median_preserved_rmse_a", "median_preserved_rmse_b", "delta_preserved_rmse",
               "median_edited_rmse_a", "median_edited_rmse_b", "delta_edited_rmse",
               "median_over_edit_a", "median_over_edit_b", "delta_over_edit",
               "over_edit_flag_a", "over_edit_flag_b"]


def compare_regimes(a: dict, b: dict, threshold: float = 1.0) -> list[list]:
    """Paired medians per K shared by both sample sets (``delta = b - a``)."""
    rows = []
    for k in sorted(set(a) & set(b)):
        ids_a = [(r["instance"], r["task_id"], r["seed"]) for r in a[k]]
        ids_b = [(r["instance"], r["task_id"], r["seed"]) for r in b[k]]
        if ids_a != ids_b:
            raise UsageError(f"instance sets differ at K={k}; regimes must be sampled on the same instances")
        row = [k, len(ids_a)]
        meds = {}
        for col in ("preserved_rmse", "edited_rmse", "over_edit_index"):
            ma = float(np.median([float(r[col]) for r in a[k]]))
            mb = float(np.median([float(r[col]) for r in b[k]]))
            meds[col] = (ma, mb)
            row += [ma, mb, mb - ma]
        oa, ob = meds["over_edit_index"]
        row += [int(oa > threshold), int(ob > threshold)]
        rows.append(row)
    if not rows:
        raise UsageError("the two sample sets share no step count K")
    return rows


def cmd_eval(args) -> int:
    if not args.a or not args.b:
        raise UsageError("eval needs --a DIR and --b DIR")
    rows = compare_regimes(_read_sample_metrics(Path(args.a)), _read_sample_metrics(Path(args.b)), args.threshold)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_HEADER)
    for r in rows:
        w.writerow([r[0], r[1], *(f"{v:.6f}" for v in r[2:11]), r[11], r[12]])
    text = buf.getvalue()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = atomic_write_text(out / "eval_report.csv", text)
        _write_manifest(out, {"command": "eval", "code_version": __version__, "a": str(args.a), "b": str(args.b),
                              "threshold": args.threshold, "outputs": [_rel(out, path)]}, "manifest_eval.json")
    return EXIT_OK


def cmd_score(args) -> int:
    if bool(args.file) == bool(args.fixture):
        raise UsageError("score needs exactly one of FILE or --fixture")
    try:
        if args.fixture:
            rows = scorebench.aggregate(scorebench.parse_scores(scorebench.fixture_text(args.fixture)))
        else:
            rows = scorebench.aggregate_file(args.file)
    except scorebench.ScoreFileError as exc:
        for lineno, msg in exc.problems:
            print(f"line {lineno}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(scorebench.format_table(rows))
    if args.csv_out:
        atomic_write_text(args.csv_out, scorebench.format_csv(rows))
    return EXIT_OK


def cmd_oracle(args) -> int:
    only = args.only or None
    if only:
        bad = [o for o in only if o not in experiments.ORACLES]
        if bad:
            raise UsageError(f"unknown oracle(s) {bad}; choose from {list(experiments.ORACLES)}")
    if "gaussian" in (only or experiments.ORACLES):
        print(f"gaussian target: k(0.5) = {experiments.gaussian_k(0.5):.4f}")
    results = experiments.run_oracles(only, seed=args.seed or 0, inject_failure=args.inject_failure,
                                      gaussian_steps=args.gaussian_steps)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: {r.message} -- {json.dumps(r.measured, sort_keys=True)}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", help="training steps (train) or Euler steps K, comma-separated (sample)")
    p.add_argument("--regime", choices=trainer.REGIMES)
    p.add_argument("--alpha", type=float)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 already; keep the message format uniform
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowcouple", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a velocity field on the synthetic edit suite")
    _shared(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="Euler-sample held-out edits from a checkpoint")
    _shared(p)
    p.add_argument("--checkpoint", help="checkpoint file or train output directory")
    p.add_argument("--init", choices=(LOCAL_GAUSSIAN, INDEPENDENT), default=LOCAL_GAUSSIAN)
    p.add_argument("--dump-trajectories", type=int, default=0, metavar="N",
                   help="write step,t,coordinate_index,value CSVs for the first N instances")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="paired comparison of two sample output directories")
    _shared(p)
    p.add_argument("--a", help="sample output directory of regime A")
    p.add_argument("--b", help="sample output directory of regime B")
    p.add_argument("--threshold", type=float, default=1.0, help="over-edit flag threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="aggregate judge scores (model,sc,pq,lsc,lpq)")
    _shared(p)
    p.add_argument("file", nargs="?")
    p.add_argument("--fixture", choices=scorebench.FIXTURES)
    p.add_argument("--csv-out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("oracle", help="run the independent-oracle checks")
    _shared(p)
    p.add_argument("--only", nargs="+", metavar="NAME")
    p.add_argument("--inject-failure", action="store_true", help="plant a known defect; must exit 1")
    p.add_argument("--gaussian-steps", type=int, default=16000)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
