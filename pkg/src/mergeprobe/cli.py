"""Command-line entry point: metrics, merge, loto, analyze, synth.

Every command reads an optional JSON run configuration (``--config``); flags
override its fields. Outputs go under ``--out DIR`` next to a
``manifest.json`` recording the sha256 of each artifact.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, crossval, synthbench
from .errors import MergeProbeError, MetricError, MissingInput
from .linopt import MlpConfig, OptimizerConfig
from .merging import METHODS, MergeConfig, merge
from .metrics import (
    CATEGORIES,
    METRIC_NAMES,
    MetricConfig,
    SpectralDecomposition,
    compute_metric_vector,
    read_metric_csv,
    write_metric_csv,
)
from .tensorstore import load_pack, load_probe, save_pack, save_probe, task_vector

log = logging.getLogger("mergeprobe")


class UsageError(Exception):
    """Bad flags or configuration; exit code 2."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    pretrained: Path | None = None
    tasks: list = field(default_factory=list)  # [{"id", "pack", "probe"}]
    accuracy: Path | None = None
    metrics_csv: Path | None = None
    methods: list = field(default_factory=lambda: list(METHODS))
    optimizer: dict = field(default_factory=dict)
    mlp: dict = field(default_factory=dict)
    l1_lambda: float = 1.0
    metric: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    out: Path | None = None

    @property
    def task_ids(self) -> list[str]:
        return [t["id"] for t in self.tasks]

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**self.optimizer)

    def mlp_config(self) -> MlpConfig:
        return MlpConfig(**self.mlp)

    def metric_config(self) -> MetricConfig:
        return MetricConfig(**self.metric)

    def metrics_path(self) -> Path:
        return self.metrics_csv or self.out / "metrics.csv"


def _resolve(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_config(args) -> RunConfig:
    raw = {}
    base = Path.cwd()
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        base = path.parent
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config fields: {sorted(unknown)}")
    cfg = RunConfig(**raw)
    cfg.pretrained = _resolve(base, cfg.pretrained)
    cfg.accuracy = _resolve(base, cfg.accuracy)
    cfg.metrics_csv = _resolve(base, cfg.metrics_csv)
    cfg.out = _resolve(base, cfg.out)
    tasks = []
    for t in cfg.tasks:
        if not isinstance(t, dict) or "id" not in t:
            raise UsageError("each task entry needs an 'id'")
        tasks.append({"id": str(t["id"]), "pack": _resolve(base, t.get("pack")), "probe": _resolve(base, t.get("probe"))})
    cfg.tasks = tasks

    # flag overrides
    for name in ("seed", "workers", "l1_lambda"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "methods", None):
        cfg.methods = list(args.methods)
    if getattr(args, "accuracy", None):
        cfg.accuracy = Path(args.accuracy)
    if getattr(args, "metrics", None):
        cfg.metrics_csv = Path(args.metrics)
    if getattr(args, "out", None):
        cfg.out = Path(args.out)
    if cfg.out is None:
        raise UsageError("an output directory is required (--out or config 'out')")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}; expected a subset of {list(METHODS)}")
    if cfg.workers < 1:
        raise UsageError("workers must be >= 1")
    if len(set(cfg.task_ids)) != len(cfg.task_ids):
        raise UsageError("task ids must be unique")
    try:
        cfg.optimizer_config()
        cfg.mlp_config()
        cfg.metric_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad optimizer/metric settings: {exc}")
    return cfg


def _require_files(paths) -> None:
    missing = [str(p) for p in paths if p is None or not Path(p).is_file()]
    if missing:
        raise UsageError(f"referenced files do not exist: {missing}")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(out: Path, paths) -> Path:
    manifest = out / "manifest.json"
    entries = {}
    if manifest.exists():
        entries = json.loads(manifest.read_text()).get("artifacts", {})
    for p in paths:
        entries[Path(p).resolve().relative_to(out.resolve()).as_posix()] = sha256_file(p)
    text = json.dumps({"artifacts": dict(sorted(entries.items()))}, indent=1) + "\n"
    if not manifest.exists() or manifest.read_text() != text:
        manifest.write_text(text)
    return manifest


def _write_text(path: Path, text: str) -> None:
    # leave identical files untouched so reruns are no-ops
    if path.exists() and path.read_text() == text:
        return
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _dump_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def cmd_metrics(cfg: RunConfig, args) -> int:
    if len(cfg.tasks) < 2:
        raise UsageError("need at least two tasks")
    _require_files([cfg.pretrained] + [t["pack"] for t in cfg.tasks] + [t["probe"] for t in cfg.tasks])
    out_csv = cfg.metrics_path()
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    pairs = list(itertools.combinations(cfg.task_ids, 2))

    done = {}
    if out_csv.exists():
        for a, b, mv in read_metric_csv(out_csv):
            done[frozenset((a, b))] = (a, b, mv)
    todo = [pair for pair in pairs if frozenset(pair) not in done]
    log.info("%d pairs, %d already present", len(pairs), len(pairs) - len(todo))

    failures = {}
    if todo:
        needed = sorted({t for pair in todo for t in pair})
        theta0 = load_pack(cfg.pretrained)
        by_id = {t["id"]: t for t in cfg.tasks}
        mcfg = cfg.metric_config()

        def prepare(tid):
            tau = task_vector(load_pack(by_id[tid]["pack"]), theta0)
            return tid, tau, SpectralDecomposition.from_delta(tau), load_probe(by_id[tid]["probe"])

        def run_pair(pair):
            a, b = pair
            ta, tb = cache[a], cache[b]
            try:
                return pair, compute_metric_vector(ta[0], tb[0], ta[2], tb[2], mcfg, spectra_a=ta[1], spectra_b=tb[1]), None
            except MetricError as exc:
                return pair, None, exc

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            cache = {tid: (tau, spec, probe) for tid, tau, spec, probe in pool.map(prepare, needed)}
            results = list(pool.map(run_pair, todo))
        for (a, b), mv, exc in results:
            if exc is None:
                done[frozenset((a, b))] = (a, b, mv)
            else:
                failures[f"{a}|{b}"] = list(exc.metric_ids)
                log.error("pair %s/%s failed for metrics %s: %s", a, b, ", ".join(exc.metric_ids), exc)
        rows = [done[frozenset(pair)] for pair in pairs if frozenset(pair) in done]
        write_metric_csv(out_csv, rows)

    written = [out_csv] if out_csv.exists() else []
    if failures:
        err = cfg.out / "metrics_errors.json"
        _dump_json(err, failures)
        written.append(err)
    if out_csv.resolve().is_relative_to(cfg.out.resolve()):
        update_manifest(cfg.out, [p for p in written if p.resolve().is_relative_to(cfg.out.resolve())])
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------

def cmd_merge(cfg: RunConfig, args) -> int:
    by_id = {t["id"]: t for t in cfg.tasks}
    ids = args.tasks or cfg.task_ids
    unknown = [t for t in ids if t not in by_id]
    if unknown:
        raise UsageError(f"unknown task ids {unknown}")
    if len(ids) < 2:
        raise UsageError("merging needs at least two tasks")
    _require_files([cfg.pretrained] + [by_id[t]["pack"] for t in ids])
    theta0 = load_pack(cfg.pretrained)
    finetuned = [load_pack(by_id[t]["pack"]) for t in ids]
    mc = MergeConfig(args.method, args.alpha, args.num_tasks)
    result = merge(mc, theta0, finetuned)

    cfg.out.mkdir(parents=True, exist_ok=True)
    stem = f"merged_{args.method}_{'_'.join(ids)}"
    pack = cfg.out / f"{stem}.mpk"
    diag = cfg.out / f"{stem}_diagnostics.json"
    merged32 = result.merged.astype(np.float32)
    if not pack.exists() or load_pack(pack).digest() != merged32.digest():
        save_pack(merged32, pack)
    _dump_json(diag, {
        "method": args.method,
        "alpha": mc.resolved_alpha,
        "tasks": ids,
        "layers": result.diagnostics,
    })
    update_manifest(cfg.out, [pack, diag])
    return 0


# ---------------------------------------------------------------------------
# loto
# ---------------------------------------------------------------------------

def load_datasets(cfg: RunConfig) -> dict:
    metrics_csv = cfg.metrics_path()
    if not metrics_csv.is_file():
        raise MissingInput(f"metrics CSV not found: {metrics_csv}")
    if cfg.accuracy is None or not Path(cfg.accuracy).is_file():
        raise MissingInput(f"accuracy CSV not found: {cfg.accuracy}")
    rows = read_metric_csv(metrics_csv)
    targets = crossval.read_accuracy_csv(cfg.accuracy)
    datasets = {}
    for method in cfg.methods:
        if method not in targets:
            raise MissingInput(f"accuracy CSV has no rows for method {method}")
        datasets[method] = crossval.build_dataset(rows, targets[method], method)
    return datasets


def _fitter(cfg: RunConfig, args):
    if args.mlp:
        return crossval.mlp_fitter(cfg.mlp_config()), "_mlp"
    if args.l1:
        return crossval.l1_fitter(cfg.l1_lambda, cfg.optimizer_config()), "_l1"
    return crossval.linear_fitter(cfg.optimizer_config()), ""


def _fmt(x) -> str:
    return "" if x is None else format(float(x), ".17g")


def cmd_loto(cfg: RunConfig, args) -> int:
    if args.l1 and args.mlp:
        raise UsageError("--l1 and --mlp are mutually exclusive")
    datasets = load_datasets(cfg)
    fit, suffix = _fitter(cfg, args)
    results = [crossval.run_loto(ds, fit, cfg.seed, cfg.workers) for ds in datasets.values()]

    cfg.out.mkdir(parents=True, exist_ok=True)
    res_path = cfg.out / f"loto{suffix}_results.json"
    _write_text(res_path, json.dumps([r.to_dict() for r in results], indent=1, allow_nan=False) + "\n")
    lines = ["method,train_r_mean,train_r_std,val_r_mean,val_r_std,n_folds,n_failed"]
    for r in results:
        a = r.aggregate
        lines.append(",".join([r.method, _fmt(a.train_r_mean), _fmt(a.train_r_std), _fmt(a.val_r_mean),
                               _fmt(a.val_r_std), str(a.n_folds), str(len(a.failed))]))
    agg_path = cfg.out / f"aggregate{suffix}.csv"
    _write_text(agg_path, "\n".join(lines) + "\n")
    written = [res_path, agg_path]

    linear = [r for r in results if r.aggregate.w_mean is not None]
    if linear:
        heat = cfg.out / f"coefficient_heatmap{suffix}.csv"
        analysis.write_coefficient_table(
            heat,
            {r.method: r.aggregate.w_mean for r in linear},
            {r.method: r.aggregate.w_std for r in linear},
        )
        written.append(heat)
        if args.l1:
            freq = cfg.out / "nonzero_frequency.csv"
            analysis.write_coefficient_table(freq, {r.method: r.aggregate.nonzero_freq for r in linear})
            written.append(freq)
    update_manifest(cfg.out, written)

    failed = 0
    for r in results:
        a = r.aggregate
        log.info("%s: train %s, val %s", r.method, crossval.format_mean_std(a.train_r_mean, a.train_r_std),
                 crossval.format_mean_std(a.val_r_mean, a.val_r_std))
        for f in a.failed:
            failed += 1
            log.error("%s fold %s (%s) failed: %s", r.method, f["fold"], f["held_out"], f["error"])
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(cfg: RunConfig, args) -> int:
    correlations = None
    ablations = None
    if args.fixture:
        if args.fixture == "builtin":
            means, _ = analysis.builtin_table13()
        else:
            if not Path(args.fixture).is_file():
                raise MissingInput(f"fixture not found: {args.fixture}")
            means, _ = analysis.read_coefficient_table(args.fixture)
    else:
        loto_path = Path(args.loto) if args.loto else cfg.out / "loto_results.json"
        if not loto_path.is_file():
            raise MissingInput(f"LOTO results not found: {loto_path}; run the loto command first")
        results = crossval.load_loto(loto_path)
        means = {r.method: np.asarray(r.aggregate.w_mean) for r in results if r.aggregate.w_mean is not None}
        if not means:
            raise MissingInput(f"{loto_path} holds no linear coefficients")
        if cfg.accuracy is not None:
            datasets = load_datasets(cfg)
            correlations = analysis.individual_correlations(datasets)
            if args.ablation:
                fit = crossval.linear_fitter(cfg.optimizer_config())
                ablations = {cat: analysis.category_ablation(datasets, cat, fit, cfg.seed) for cat in CATEGORIES}
    written = analysis.write_reports(cfg.out, means, correlations, ablations, top_k=args.top_k)
    update_manifest(cfg.out, written)
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    w_star = None
    if args.w_star:
        w_star = json.loads(Path(args.w_star).read_text())
    spec = synthbench.SynthSpec(num_tasks=args.tasks, rank=args.rank, noise=args.noise, seed=cfg.seed,
                                w_star=w_star)
    try:
        spec.validate()
    except MergeProbeError as exc:
        raise UsageError(str(exc))
    if spec.num_tasks < 3:
        raise UsageError("need at least 3 tasks")
    models = synthbench.gen_models(spec)
    rows = synthbench.pair_metrics(models, cfg.metric_config())
    X = np.vstack([mv.as_array() for _, _, mv in rows])
    pairs = [(a, b) for a, b, _ in rows]

    out = cfg.out
    (out / "models").mkdir(parents=True, exist_ok=True)
    written = []
    pre = out / "models" / "pretrained.mpk"
    save_pack(models.pretrained, pre)
    written.append(pre)
    tasks = []
    for tid, ft, probe in zip(models.task_ids, models.finetuned, models.probes):
        pack = out / "models" / f"{tid}.mpk"
        prb = out / "models" / f"{tid}_probe.mpk"
        save_pack(ft, pack)
        save_probe(probe, prb)
        written += [pack, prb]
        tasks.append({"id": tid, "pack": f"models/{tid}.mpk", "probe": f"models/{tid}_probe.mpk"})

    acc_rows = []
    planted = {}
    for i, method in enumerate(cfg.methods):
        w = spec.planted() if w_star is not None else synthbench.default_w_star(cfg.seed + i)
        rng = np.random.Generator(np.random.PCG64(cfg.seed + 104729 + i))
        p = synthbench.planted_targets(X, w, spec.noise, rng)
        ds = crossval.Dataset(X, p, pairs, method)
        acc_rows += synthbench.accuracy_rows(ds, cfg.seed)
        planted[method] = w.tolist()
    acc = out / "accuracy.csv"
    crossval.write_accuracy_csv(acc, acc_rows)
    written.append(acc)

    spec_path = out / "synth_spec.json"
    _dump_json(spec_path, {**spec.to_dict(), "planted": planted, "metric_names": list(METRIC_NAMES)})
    written.append(spec_path)
    conf = out / "config.json"
    _dump_json(conf, {
        "pretrained": "models/pretrained.mpk",
        "tasks": tasks,
        "accuracy": "accuracy.csv",
        "methods": list(cfg.methods),
        "seed": cfg.seed,
        "out": ".",
    })
    written.append(conf)
    update_manifest(out, written)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mergeprobe", description="Pairwise mergeability metrics and merge-performance predictors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="base seed")
        p.add_argument("--workers", type=int, help="worker threads")

    p = sub.add_parser("metrics", help="compute the pairwise metrics CSV (resumable)")
    common(p)
    p.add_argument("--metrics", help="metrics CSV path (default OUT/metrics.csv)")

    p = sub.add_parser("merge", help="merge fine-tuned models with one method")
    common(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--tasks", nargs="+", help="task ids to merge (default: all)")
    p.add_argument("--alpha", type=float, help="scaling coefficient for TA and ISO")
    p.add_argument("--num-tasks", type=int, help="task count used for the TSV budget")

    p = sub.add_parser("loto", help="leave-one-task-out fits per merge method")
    common(p)
    p.add_argument("--metrics", help="metrics CSV path")
    p.add_argument("--accuracy", help="accuracy CSV path")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--l1", action="store_true", help="L1-penalized fit without the sum constraint")
    p.add_argument("--lam", dest="l1_lambda", type=float, help="L1 strength (default 1.0)")
    p.add_argument("--mlp", action="store_true", help="MLP baseline instead of the linear fit")

    p = sub.add_parser("analyze", help="coefficient tables, overlaps, stable metrics, ablations")
    common(p)
    p.add_argument("--loto", help="LOTO results JSON (default OUT/loto_results.json)")
    p.add_argument("--metrics", help="metrics CSV path")
    p.add_argument("--accuracy", help="accuracy CSV path")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--fixture", nargs="?", const="builtin",
                   help="analyze a metric x method coefficient CSV instead ('builtin' = bundled table)")
    p.add_argument("--ablation", action="store_true", help="rerun LOTO without each metric category")
    p.add_argument("--top-k", type=int, default=5)

    p = sub.add_parser("synth", help="write a synthetic planted benchmark (packs, accuracy CSV, config)")
    common(p)
    p.add_argument("--tasks", type=int, default=20)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--w-star", help="JSON file with 28 planted coefficients (used for every method)")
    return parser


COMMANDS = {
    "metrics": cmd_metrics,
    "merge": cmd_merge,
    "loto": cmd_loto,
    "analyze": cmd_analyze,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except (MergeProbeError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
