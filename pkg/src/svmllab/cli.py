"""Command-line front door.

Subcommands: ``fetch``, ``train``, ``benchmark``, ``gradcheck``, ``surface``.
Exit codes: 0 success, 1 check failure, 2 usage error, 3 runtime/fit error.
Every command is deterministic given its flags and ``--seed`` (default
20110101); the cache directory honors ``SVMLLAB_CACHE``.  A ``--config`` JSON
file may pre-set training knobs; explicit flags win over file values.
"""

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import datasets as ds
from .evaluation import (
    BenchmarkSpec,
    GridSpec,
    cv_select,
    render_table,
    run_benchmark,
    surface_grid,
)
from .metrics import LinearMetric
from .svm import RbfSvm, SvmFitError
from .svml import SVML, run_gradient_check

DEFAULT_SEED = 20110101

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _load_config(path):
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _config_override(args, config, names):
    """Fill argparse values that were left at None from the config file."""
    for name in names:
        if getattr(args, name, None) is None and name in config:
            setattr(args, name, config[name])


def _emit(payload, as_json):
    if as_json:
        print(json.dumps(payload))
    else:
        for key, value in payload.items():
            print(f"{key}: {value}")


def _load_training_data(args):
    """Resolve --data into (Dataset, standardization applied flag)."""
    target = args.data
    if target in ds.SOURCES:
        data = ds.load_source(target, cache_dir=args.cache)
    else:
        path = Path(target)
        if not path.exists():
            raise ds.UnknownSourceError(
                f"{target!r} is neither a registered dataset id nor a file")
        label_column = args.label_column if args.label_column is not None else -1
        if args.positive_label is None:
            raise ds.UnknownSourceError("--positive-label is required for CSV paths")
        data = ds.load_csv(path, label_column, args.positive_label)
    if not args.no_standardize:
        data = ds.apply_standardization(ds.standardize(data), data)
    return data


def cmd_fetch(args):
    code = EXIT_OK
    for source in args.ids:
        try:
            spec = ds.SOURCES.get(source)
            cache = Path(args.cache) if args.cache else ds._default_cache_dir()
            cached = spec is not None and (cache / spec.source_id / spec.filename).exists()
            path = ds.fetch(source, cache_dir=args.cache)
            note = " (cached)" if cached else ""
            print(f"{source}: {path}{note}")
        except ds.UnknownSourceError as err:
            print(f"{source}: {err}", file=sys.stderr)
            return EXIT_USAGE
        except (ds.FetchError, ds.DigestMismatchError) as err:
            print(f"{source}: {err}", file=sys.stderr)
            code = EXIT_RUNTIME
    return code


def cmd_train(args):
    config = _load_config(args.config)
    _config_override(args, config, ["steepness", "reg_weight", "max_outer_iter",
                                    "patience", "initial_c", "optimizer", "rank"])
    try:
        data = _load_training_data(args)
    except (ds.UnknownSourceError, FileNotFoundError, ValueError) as err:
        print(str(err), file=sys.stderr)
        return EXIT_USAGE
    except (ds.FetchError, ds.DigestMismatchError) as err:
        print(str(err), file=sys.stderr)
        return EXIT_RUNTIME

    method = args.method
    if args.shape is not None and method == "svml":
        method = "svml" if args.shape == "full" else f"svml-{args.shape}"
    grid_spec = GridSpec.from_json_dict(config.get("grid", {}))

    try:
        summary = {"method": method, "seed": args.seed, "n": data.n, "d": data.d}
        if method.startswith("svml"):
            shape = "full"
            rank = None
            parts = method.split("-")
            if len(parts) > 1:
                shape = parts[1]
                if shape == "rect":
                    rank = int(parts[2]) if len(parts) > 2 else (args.rank or 2)
            model = SVML(
                shape=shape, rank=rank, seed=args.seed,
                steepness=args.steepness if args.steepness is not None else 5.0,
                reg_weight=args.reg_weight,
                initial_c=args.initial_c if args.initial_c is not None else 1.0,
                optimizer=args.optimizer if args.optimizer is not None else "cg",
                max_outer_iter=args.max_outer_iter if args.max_outer_iter is not None else 200,
                patience=args.patience if args.patience is not None else 5,
            ).fit(data.features, data.labels)
            svm = model.export_svm()
            trace_path = args.trace or (str(args.out) + ".trace.csv")
            model.trace_.save_csv(trace_path)
            summary.update({"shape": shape, "C": model.c_,
                            "trace": str(trace_path),
                            "outer_iterations": len(model.trace_) - 1,
                            "stop_reason": model.stop_reason_})
        elif method.startswith("euclid-cv") or method.endswith("-svm") or "-svm-" in method:
            folds = int(method.rsplit("-", 1)[1]) if method[-1].isdigit() else 5
            if method.startswith("euclid-cv"):
                features = data.features
                base = None
            else:
                from .evaluation import _make_learner
                learner = _make_learner(method.split("-")[0], args.seed)
                base = learner.fit(data.features, data.labels).metric_
                features = base.transform(data.features)
            selection = cv_select(features, data.labels,
                                  GridSpec(grid_spec.sigma_sq_multipliers,
                                           grid_spec.c_candidates, folds),
                                  seed=args.seed)
            scale = 1.0 / math.sqrt(selection.sigma_sq)
            if base is None:
                metric = LinearMetric.spherical(scale, d=data.d)
            else:
                metric = LinearMetric.full(base.matrix * scale)
            svm = RbfSvm(metric=metric, c=selection.c).fit(data.features, data.labels)
            summary.update({"sigma_sq": selection.sigma_sq, "C": selection.c,
                            "cv_error": selection.cv_error})
        else:
            print(f"unknown training method {method!r}", file=sys.stderr)
            return EXIT_USAGE
        svm.save_json(args.out)
        summary.update({"model": str(args.out),
                        "support_vectors": int(svm.support_idx_.size),
                        "training_error": svm.error_rate(data.features, data.labels)})
        _emit(summary, args.format == "json")
        return EXIT_OK
    except SvmFitError as err:
        print(f"training failed: {err}", file=sys.stderr)
        if err.diagnostics:
            print(f"diagnostics: {err.diagnostics}", file=sys.stderr)
        return EXIT_RUNTIME


def cmd_benchmark(args):
    try:
        spec = BenchmarkSpec.from_json_file(args.spec)
    except (OSError, KeyError, ValueError) as err:
        print(f"invalid benchmark spec: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        rows = run_benchmark(spec, journal_path=args.journal, jobs=args.jobs,
                             progress=(None if args.quiet else _print_progress))
    except (ds.FetchError, ds.DigestMismatchError, ds.UnknownSourceError) as err:
        print(str(err), file=sys.stderr)
        return EXIT_RUNTIME
    text = render_table(rows, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def _print_progress(record):
    status = "FAIL" if record.get("error") is None else f"{record['error']:.4f}"
    print(f"  [{record['dataset']}/{record['method']}] repeat {record['repeat']}: {status}",
          file=sys.stderr)


def cmd_gradcheck(args):
    shapes = ["full", "diag", "sphere", "rect"] if args.shape == "all" else [args.shape]
    worst = 0.0
    all_ok = True
    for shape in shapes:
        report = run_gradient_check(seed=args.seed, shape=shape,
                                    steepness=args.steepness if args.steepness is not None else 5.0,
                                    learn_c=not args.no_learn_c,
                                    corrupt=args.corrupt)
        ok = report is not None and report.passed
        all_ok &= ok
        if report is None:
            print(f"FAIL shape={shape}: no support-stable point found")
            continue
        worst = max(worst, report.max_rel_error)
        print(f"{'PASS' if ok else 'FAIL'} shape={shape} "
              f"max_rel_error={report.max_rel_error:.3e} "
              f"support_stable={report.support_stable} seed={report.seed}")
    print(f"max relative error over shapes: {worst:.3e}")
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


def cmd_surface(args):
    try:
        payload = json.loads(Path(args.model).read_text(encoding="utf-8"))
        metric = LinearMetric.from_json_dict(payload["metric"])
        if metric.shape != "rect" or metric.r != 2:
            print(f"surface export needs a rectangular rank-2 metric, "
                  f"got {metric.shape} (r={metric.r})", file=sys.stderr)
            return EXIT_USAGE
        data = _load_training_data(args)
        model = RbfSvm.from_json_dict(payload, data.features, data.labels)
        surface = surface_grid(model, args.resolution)
    except FileNotFoundError as err:
        print(str(err), file=sys.stderr)
        return EXIT_USAGE
    except (ds.UnknownSourceError, ValueError) as err:
        print(str(err), file=sys.stderr)
        return EXIT_USAGE
    grid_path = Path(str(args.out) + ".grid.csv")
    support_path = Path(str(args.out) + ".support.csv")
    grid_path.write_text(surface.grid_csv(), encoding="utf-8")
    support_path.write_text(surface.support_csv(), encoding="utf-8")
    _emit({"grid": str(grid_path), "rows": surface.grid.shape[0],
           "support": str(support_path), "support_vectors": surface.support.shape[0]},
          args.format == "json")
    return EXIT_OK


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="svmllab",
        description="Metric-learning kernel SVMs: joint training, baselines, benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fetch = sub.add_parser("fetch", help="download benchmark datasets into the cache")
    p_fetch.add_argument("ids", nargs="+", help="dataset ids or raw URLs")
    p_fetch.add_argument("--cache", default=None, help="cache directory override")
    p_fetch.set_defaults(func=cmd_fetch)

    p_train = sub.add_parser("train", help="train one model and write it as JSON")
    p_train.add_argument("--data", required=True, help="dataset id or CSV path")
    p_train.add_argument("--label-column", default=None,
                         help="label column (name or index) for CSV paths")
    p_train.add_argument("--positive-label", default=None)
    p_train.add_argument("--method", default="svml",
                         help="svml[-diag|-sphere|-rect-R], euclid-cv[-K], "
                              "itml-svm[-K], nca-svm[-K], lmnn-svm[-K]")
    p_train.add_argument("--shape", choices=["full", "diag", "sphere", "rect"],
                         default=None, help="metric shape override for method=svml")
    p_train.add_argument("--rank", type=int, default=None)
    p_train.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p_train.add_argument("--out", required=True, help="output model JSON path")
    p_train.add_argument("--trace", default=None, help="trace CSV path (svml only)")
    p_train.add_argument("--config", default=None, help="JSON config file")
    p_train.add_argument("--steepness", type=float, default=None)
    p_train.add_argument("--reg-weight", type=float, default=None, dest="reg_weight")
    p_train.add_argument("--initial-c", type=float, default=None, dest="initial_c")
    p_train.add_argument("--optimizer", choices=["cg", "gd"], default=None)
    p_train.add_argument("--max-outer-iter", type=int, default=None, dest="max_outer_iter")
    p_train.add_argument("--patience", type=int, default=None)
    p_train.add_argument("--cache", default=None)
    p_train.add_argument("--no-standardize", action="store_true")
    p_train.add_argument("--format", choices=["text", "json"], default="text")
    p_train.set_defaults(func=cmd_train)

    p_bench = sub.add_parser("benchmark", help="run a repeated-split benchmark spec")
    p_bench.add_argument("--spec", required=True, help="benchmark spec JSON file")
    p_bench.add_argument("--journal", default=None,
                         help="resumable NDJSON journal path")
    p_bench.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                         help="worker processes (default: logical cores)")
    p_bench.add_argument("--format", choices=["markdown", "csv", "json"],
                         default="markdown")
    p_bench.add_argument("--out", default=None, help="write the table here")
    p_bench.add_argument("--quiet", action="store_true")
    p_bench.set_defaults(func=cmd_benchmark)

    p_grad = sub.add_parser("gradcheck",
                            help="compare analytic and finite-difference gradients")
    p_grad.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p_grad.add_argument("--shape", choices=["full", "diag", "sphere", "rect", "all"],
                        default="all")
    p_grad.add_argument("--steepness", type=float, default=None)
    p_grad.add_argument("--no-learn-c", action="store_true")
    p_grad.add_argument("--corrupt", action="store_true",
                        help=argparse.SUPPRESS)  # negative control for the gate
    p_grad.set_defaults(func=cmd_gradcheck)

    p_surface = sub.add_parser("surface",
                               help="export decision-surface data for a rank-2 model")
    p_surface.add_argument("--model", required=True, help="model JSON path")
    p_surface.add_argument("--data", required=True,
                           help="the model's training dataset (id or CSV path)")
    p_surface.add_argument("--label-column", default=None)
    p_surface.add_argument("--positive-label", default=None)
    p_surface.add_argument("--resolution", type=int, default=100)
    p_surface.add_argument("--out", required=True, help="output path prefix")
    p_surface.add_argument("--cache", default=None)
    p_surface.add_argument("--no-standardize", action="store_true")
    p_surface.add_argument("--format", choices=["text", "json"], default="text")
    p_surface.set_defaults(func=cmd_surface)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except Exception as err:  # last-resort: runtime failure, not a crash
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
