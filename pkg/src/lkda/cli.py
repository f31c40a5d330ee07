"""Command-line entry point: ``lkda {gen,train,eval,sweep,report}``.

Run directories have a fixed layout::

    out/manifest.json        written last, atomically
    out/checkpoint.json      (train)
    out/logs/*.csv           training logs, predictions, curves
    out/plots/*.svg          (sweep)

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import explain
from .autodiff import ContractError, DimensionError
from .config import ConfigKeyError, RunConfig, load_config
from .data import SPLITS, ConfigError, CorpusParseError, SchemaVersionError, generate_corpus, load_corpus, save_corpus
from .metrics import fidelity_fkg, report
from .model import FusionModel, InputError, ModelConfig
from .svgplot import write_line_chart
from .training import (CheckpointError, DivergenceError, _atomic_write, evaluate,
                       load_checkpoint, save_checkpoint, train)

log = logging.getLogger("lkda")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3
POLICY_ORDER = ("original", "random", "top")


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- helpers


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins timestamps for fully reproducible manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = (dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch
           else dt.datetime.now(dt.timezone.utc))
    return now.isoformat(timespec="seconds")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def corpus_hash(corpus_dir) -> str:
    h = hashlib.sha256()
    for split in SPLITS:
        h.update(split.encode())
        h.update(Path(corpus_dir, f"{split}.jsonl").read_bytes())
    return h.hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class Run:
    """Collects outputs for one command and writes the manifest at the end."""

    def __init__(self, command: str, out_dir, config: dict, seed):
        self.out = Path(out_dir)
        self.command = command
        self.config = config
        self.seed = seed
        self.started = _timestamp()
        self.extra: dict = {}
        self.outputs: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        _atomic_write(p, text)
        self.outputs.append(p)
        return p

    def add(self, path: Path) -> None:
        self.outputs.append(Path(path))

    def finish(self) -> dict:
        inventory = {str(p.relative_to(self.out)): _sha256(p) for p in sorted(set(self.outputs))}
        manifest = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "tool_version": __version__,
            "started_at": self.started,
            "finished_at": _timestamp(),
            "outputs": inventory,
            **self.extra,
        }
        self.out.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.out / "manifest.json", _dump_json(manifest))
        return manifest


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, gen=dataclasses.replace(cfg.gen, seed=args.seed)) \
            if args.command == "gen" else cfg.with_seed(args.seed)
    return cfg


def _load_split(corpus_dir, split: str):
    path = Path(corpus_dir, f"{split}.jsonl")
    if not path.exists():
        raise DataError(f"missing corpus file {path}")
    return load_corpus(path)


def _check_compatible(model_cfg: ModelConfig, gen_cfg) -> None:
    pairs = [("d_node", model_cfg.d_node, gen_cfg.d_node),
             ("vocab_size", model_cfg.vocab_size, gen_cfg.vocab_size),
             ("n_relations", model_cfg.n_relations, gen_cfg.relation_count)]
    for name, m, c in pairs:
        if m != c:
            raise DataError(f"model {name}={m} does not match corpus ({c})")


def _load_model(path, gen_cfg=None):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    model, tc = load_checkpoint(path)
    if gen_cfg is not None:
        _check_compatible(model.config, gen_cfg)
    return model, tc


def _report_dict(rep) -> dict:
    return json.loads(rep.to_json())


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    cfg.gen.validate()
    corpus = generate_corpus(cfg.gen)
    run = Run("gen", args.out, {"gen": dataclasses.asdict(cfg.gen)}, cfg.gen.seed)
    for split, instances in zip(SPLITS, corpus):
        p = run.path(f"{split}.jsonl")
        save_corpus(p, instances, cfg.gen, split)
        run.add(p)
    run.extra["corpus_hash"] = corpus_hash(run.out)
    run.extra["counts"] = {s: len(i) for s, i in zip(SPLITS, corpus)}
    run.finish()
    print(f"corpus {run.extra['corpus_hash'][:12]} written to {run.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.mode:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, mode=args.mode))
    cfg.model.validate()
    cfg.train.validate()
    train_set, gen_cfg = _load_split(args.corpus, "train")
    dev_set, _ = _load_split(args.corpus, "dev")
    _check_compatible(cfg.model, gen_cfg)

    run = Run("train", args.out, {"model": dataclasses.asdict(cfg.model),
                                  "train": dataclasses.asdict(cfg.train),
                                  "gen": dataclasses.asdict(gen_cfg)}, cfg.train.seed)
    run.out.mkdir(parents=True, exist_ok=True)
    if args.init_from:
        # warm start from an existing checkpoint instead of a fresh init
        model, _ = _load_model(args.init_from, gen_cfg)
        if model.config != cfg.model:
            raise DataError(f"{args.init_from}: model config differs from the run config")
    else:
        model = FusionModel(cfg.model, seed=cfg.train.seed)
    state = run.out / "train_state.json"
    model, tlog = train(cfg.train, train_set, dev_set, model, state_path=state, resume=args.resume)
    ckpt = run.out / "checkpoint.json"
    save_checkpoint(ckpt, model, cfg.train)
    run.add(ckpt)
    run.write("logs/train_log.csv", tlog.to_csv())
    rep = report(evaluate(model, dev_set), cfg.train.jsd_weight)
    run.write("metrics_dev.json", rep.to_json())
    run.extra.update({
        "mode": cfg.train.mode,
        "corpus_hash": corpus_hash(args.corpus),
        "checkpoints": {"model": "checkpoint.json", "init_from": args.init_from},
        "metrics": {"split": "dev", **_report_dict(rep)},
    })
    run.finish()
    print(f"dev accuracy={rep.accuracy_full:.4f} f_kg={rep.f_kg:.4f} c_lk={rep.c_lk:.6f}")
    return EXIT_OK


def _predictions_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    C = len(records[0].full) if records else 0
    w.writerow(["index", "gold", "pred_full", "pred_detached"]
               + [f"p_full_{c}" for c in range(C)] + [f"p_detached_{c}" for c in range(C)])
    for i, r in enumerate(records):
        w.writerow([i, r.gold_index, r.predicted_full, r.predicted_detached]
                   + [repr(float(x)) for x in r.full] + [repr(float(x)) for x in r.detached])
    return buf.getvalue()


def cmd_eval(args) -> int:
    instances, gen_cfg = _load_split(args.corpus, args.split)
    model, tc = _load_model(args.checkpoint, gen_cfg)
    lam = tc.jsd_weight if tc is not None else 0.5
    records = evaluate(model, instances)
    rep = report(records, lam)
    if abs(rep.f_kg - fidelity_fkg(records)) > 0:
        raise ContractError("f_kg disagrees with the per-instance recount")
    text = rep.to_json()
    if args.out:
        run = Run("eval", args.out, {"checkpoint": str(args.checkpoint), "split": args.split},
                  args.seed)
        run.write(f"metrics_{args.split}.json", text)
        run.write(f"logs/predictions_{args.split}.csv", _predictions_csv(records))
        run.extra.update({
            "mode": tc.mode if tc is not None else None,
            "corpus_hash": corpus_hash(args.corpus),
            "checkpoints": {"model": str(args.checkpoint)},
            "metrics": {"split": args.split, **_report_dict(rep)},
        })
        run.finish()
    sys.stdout.write(text)
    return EXIT_OK


def _mean_rows(curves) -> list[list]:
    by_key: dict[tuple, list[float]] = {}
    for c in curves:
        for s, a in c.points:
            by_key.setdefault((c.policy, s), []).append(a)
    return [[p, repr(float(s)), repr(float(np.mean(v))), "mean", "seed_mean"]
            for (p, s), v in by_key.items()]


def cmd_sweep(args) -> int:
    instances, gen_cfg = _load_split(args.corpus, args.split)
    baseline, _ = _load_model(args.baseline, gen_cfg)
    lkda_model, _ = _load_model(args.lkda, gen_cfg)
    seeds = args.seeds if args.seeds else [args.seed if args.seed is not None else 0]
    grid = tuple(args.grid) if args.grid else explain.DEFAULT_GRID
    chash = corpus_hash(args.corpus)

    jobs = [(policy, seed) for seed in seeds for policy in POLICY_ORDER]

    def run_job(job):
        policy, seed = job
        model_id = "baseline_ce" if policy == "original" else "lkda"
        return explain.sweep(lkda_model, instances, policy, grid, seed, baseline=baseline,
                             model_id=model_id, corpus_id=chash[:12])

    # results are keyed by job, so worker count cannot change any output
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        curves = list(pool.map(run_job, jobs))

    run = Run("sweep", args.out, {"baseline": str(args.baseline), "lkda": str(args.lkda),
                                  "split": args.split, "grid": list(grid), "seeds": seeds}, seeds)
    for curve in curves:
        run.write(f"logs/curve_{curve.policy}_seed{curve.seed}.csv", explain.curves_to_csv([curve]))
    for seed in seeds:
        run.write(f"logs/curves_seed{seed}.csv",
                  explain.curves_to_csv([c for c in curves if c.seed == seed]))
    run.write("logs/curves.csv", explain.curves_to_csv(curves))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(explain.CURVE_COLUMNS)
    mean_rows = _mean_rows(curves)
    w.writerows(mean_rows)
    run.write("logs/curves_mean.csv", buf.getvalue())

    series = []
    for policy in POLICY_ORDER:
        rows = [r for r in mean_rows if r[0] == policy]
        series.append((policy, [float(r[1]) for r in rows], [float(r[2]) for r in rows]))
    plot = run.path("plots/fidelity_sparsity.svg")
    write_line_chart(plot, series, title="Fidelity vs. sparsity", x_label="sparsity",
                     y_label="accuracy", y_range=(0.0, 1.0))
    run.add(plot)

    auc = {p: float(np.mean([explain.auc_drop(c) for c in curves if c.policy == p]))
           for p in POLICY_ORDER}
    recovery = explain.gold_recovery(lkda_model, instances)
    summary = {"auc_drop": auc, "recovery": recovery}
    run.write("sweep_summary.json", _dump_json(summary))
    run.extra.update({"corpus_hash": chash,
                      "checkpoints": {"baseline": str(args.baseline), "lkda": str(args.lkda)},
                      "summary": summary})
    run.finish()
    for p in POLICY_ORDER:
        print(f"auc_drop[{p}] = {auc[p]:.4f}")
    return EXIT_OK


REPORT_COLUMNS = ("run", "mode", "split", "accuracy", "f_kg", "c_lk",
                  "d_accuracy", "d_f_kg", "d_c_lk")


def cmd_report(args) -> int:
    rows = []
    for d in args.run_dirs:
        mpath = Path(d, "manifest.json")
        if not mpath.exists():
            log.warning("skipping %s: no manifest.json", d)
            continue
        m = json.loads(mpath.read_text())
        metrics = m.get("metrics")
        if not metrics:
            log.warning("skipping %s: manifest has no metrics", d)
            continue
        rows.append({"run": str(d), "mode": m.get("mode") or "", "split": metrics["split"],
                     "accuracy": metrics["accuracy_full"], "f_kg": metrics["f_kg"],
                     "c_lk": metrics["c_lk"]})
    if not rows:
        raise DataError("no run directory with a usable manifest")
    base = next((r for r in rows if r["mode"] == "baseline_ce"), None)
    for r in rows:
        for k in ("accuracy", "f_kg", "c_lk"):
            r[f"d_{k}"] = None if base is None else r[k] - base[k]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(float(r[c])) if isinstance(r[c], float) else r[c])
                    for c in REPORT_COLUMNS])
    table = [f"{'run':<28} {'mode':<12} {'split':<6} {'acc':>7} {'f_kg':>7} {'c_lk':>9} "
             f"{'d_acc':>8} {'d_f_kg':>8} {'d_c_lk':>9}"]
    for r in rows:
        def sgn(v, width, prec):
            return f"{'':>{width}}" if v is None else f"{v:>+{width}.{prec}f}"
        table.append(f"{Path(r['run']).name[:28]:<28} {r['mode']:<12} {r['split']:<6} "
                     f"{r['accuracy']:>7.4f} {r['f_kg']:>7.4f} {r['c_lk']:>9.6f} "
                     f"{sgn(r['d_accuracy'], 8, 4)} {sgn(r['d_f_kg'], 8, 4)} {sgn(r['d_c_lk'], 9, 6)}")
    text = "\n".join(table) + "\n"
    if args.out:
        run = Run("report", args.out, {"run_dirs": [str(d) for d in args.run_dirs]}, None)
        run.write("report.csv", buf.getvalue())
        run.write("report.txt", text)
        run.finish()
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("--out", help="output run directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="lkda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    p.set_defaults(func=cmd_gen, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=("baseline_ce", "lkda"))
    p.add_argument("--resume", action="store_true", help="continue from out/train_state.json")
    p.add_argument("--init-from", help="warm-start from this checkpoint")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate full and detached predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("sweep", parents=[common], help="fidelity-sparsity sweeps")
    p.add_argument("--baseline", required=True, help="baseline_ce checkpoint")
    p.add_argument("--lkda", required=True, help="lkda checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--grid", type=float, nargs="+")
    p.set_defaults(func=cmd_sweep, needs_out=True)

    p = sub.add_parser("report", parents=[common], help="tabulate runs")
    p.add_argument("run_dirs", nargs="+")
    p.set_defaults(func=cmd_report, needs_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.needs_out and not args.out:
        parser.error(f"{args.command} requires --out")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigKeyError, ConfigError, CorpusParseError, SchemaVersionError, CheckpointError,
            DataError, InputError, DimensionError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
