"""Command-line entry point: characterize, train, tune, predict, rank, experiment.

Exit codes: 0 success, 2 parse or usage error, 3 execution error, 4 I/O
error, 5 model/input schema mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .characterizer import (DEFAULT_HISTORY, CharacterizationError, characterize,
                            feature_csv_header, feature_csv_row)
from .dataset import SIZES, Dataset, DatasetError, SynthConfig, bundled_paths, load, synthesize
from .forest import DegenerateResponseError, Forest, ForestParams, ModelFormatError, SchemaMismatchError, fit
from .microkernel import (ExecutionError, KernelSyntaxError, NDRange, TraceFormatError, execute, parse_kernel,
                          read_trace, write_trace)
from .seeding import SEED_ENV, derive, root_seed
from .tuner import ObjectiveError, Schedule, SearchSpace, tune_forest

log = logging.getLogger("aiwcpred")

EXIT_OK, EXIT_PARSE, EXIT_EXEC, EXIT_IO, EXIT_SCHEMA = 0, 2, 3, 4, 5
EMBED_PREFIX = "# aiwc: v1 "


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument types

def _triple(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return parts


def _pair(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def _assignment(text: str) -> tuple[str, int]:
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected NAME=INT, got {text!r}")
    try:
        return name.strip(), int(value, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NAME=INT, got {text!r}") from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


# ---------------------------------------------------------------------------
# parser

def _add_data_args(p):
    p.add_argument("--features", type=Path, help="feature CSV (default: the bundled synthetic sample)")
    p.add_argument("--runtimes", type=Path, help="runtime CSV (default: the bundled synthetic sample)")
    p.add_argument("--iterations", type=Path, help="optional per-iteration runtime CSV")


def _add_forest_args(p, defaults=(500, 30, 9)):
    p.add_argument("--num-trees", type=_positive, default=defaults[0], help="trees in the forest")
    p.add_argument("--mtry", type=_positive, default=defaults[1], help="candidate columns per split")
    p.add_argument("--min-node-size", type=_positive, default=defaults[2],
                   help="smallest node weight that may be split (halved per child)")


def _add_schedule_args(p, max_evals=None):
    p.add_argument("--max-evaluations", type=_positive, default=max_evals,
                   help="objective evaluation budget per annealing run")
    p.add_argument("--initial-temperature", type=float,
                   help="starting temperature (default: 10%% of the starting error)")
    p.add_argument("--cooling-factor", type=float, default=0.85, help="temperature multiplier per cooling step")
    p.add_argument("--steps-per-temperature", type=_positive, default=10,
                   help="proposals between cooling steps")
    p.add_argument("--stop-temperature", type=float,
                   help="stop once the temperature falls below this (default: T0/1000)")


def _schedule(args, default: Schedule) -> Schedule:
    return Schedule(initial_temperature=args.initial_temperature, cooling_factor=args.cooling_factor,
                    steps_per_temperature=args.steps_per_temperature, stop_temperature=args.stop_temperature,
                    max_evaluations=args.max_evaluations or default.max_evaluations)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aiwc-predict",
        description="Predict kernel execution time on each device from architecture-independent features.",
        epilog=f"Exit codes: 2 parse error, 3 execution error, 4 I/O error, 5 schema mismatch. "
               f"${SEED_ENV} supplies the seed when --seed is absent.")
    parser.add_argument("--seed", type=int, help=f"root seed for all randomness (fallback: ${SEED_ENV}, then 0)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (repeat for debug)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("characterize", help="run a kernel or read a trace and emit its feature row")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("kernel", nargs="?", type=Path, help="microkernel source file")
    src.add_argument("--trace", type=Path, help="characterize a recorded trace file instead of a kernel")
    p.add_argument("--global", dest="global_size", type=_triple, default=(1, 1, 1),
                   help="global NDRange X,Y,Z (default 1,1,1)")
    p.add_argument("--local", dest="local_size", type=_triple, help="work-group size X,Y,Z (default: global)")
    p.add_argument("--arg", action="append", type=_assignment, default=[], metavar="NAME=INT",
                   help="kernel parameter value; repeatable")
    p.add_argument("--history", type=int, default=DEFAULT_HISTORY, help="branch history length in bits (1-24)")
    p.add_argument("--fuel", type=_positive, help="per-work-item event limit")
    p.add_argument("--application", help="application label for the CSV row (default: kernel name)")
    p.add_argument("--name", help="kernel label for the CSV row (default: .kernel name or file stem)")
    p.add_argument("--size", choices=SIZES, default="tiny", help="problem-size label for the CSV row")
    p.add_argument("--header", action="store_true", help="print the CSV header before the row")
    p.add_argument("--output", type=Path, help="append the row to this CSV (header written if new)")
    p.add_argument("--save-trace", type=Path, help="also write the execution trace to this file")
    p.add_argument("--embed", action="store_true",
                   help="rewrite the kernel source with a '# aiwc: v1 {...}' feature comment")

    p = sub.add_parser("train", help="fit a forest with explicit parameters and write a model file")
    _add_data_args(p)
    _add_forest_args(p)
    p.add_argument("--response", choices=("log10", "raw"), default="log10", help="regression target")
    p.add_argument("--jobs", type=_positive, default=1, help="threads for tree growing")
    p.add_argument("--model", type=Path, required=True, help="model file to write")

    p = sub.add_parser("tune", help="anneal (num_trees, mtry, min_node_size) on OOB error")
    _add_data_args(p)
    p.add_argument("--start", type=_triple, default=(500, 32, 9), help="starting NUM_TREES,MTRY,MIN_NODE_SIZE")
    p.add_argument("--num-trees-range", type=_pair, default=(10, 10000), help="num_trees search range LO,HI")
    p.add_argument("--fix", action="append", type=_assignment, default=[], metavar="NAME=INT",
                   help="hold a dimension fixed, e.g. min_node_size=9; repeatable")
    _add_schedule_args(p)
    p.add_argument("--response", choices=("log10", "raw"), default="log10", help="regression target")
    p.add_argument("--trace-out", type=Path, help="write the evaluation trace CSV here")
    p.add_argument("--model", type=Path, help="fit the best parameters and write the model here")

    for name, helptext in (("predict", "predicted seconds for feature rows on one device"),
                           ("rank", "all devices ordered by predicted time for one feature row")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", type=Path, required=True, help="model file from train or tune")
        p.add_argument("--features", type=Path, required=True,
                       help="feature CSV, or a kernel source carrying an embedded '# aiwc:' line")
        p.add_argument("--row", type=int, help="0-based row of the feature CSV (default: all for predict, "
                                               "required for rank when there are several)")
        if name == "predict":
            p.add_argument("--device", required=True, help="device to predict for")

    p = sub.add_parser("experiment", help="reproduce a study on a dataset")
    exsub = p.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", type=Path, default=Path("results"), help="directory for output files")
    common.add_argument("--jobs", type=_positive, default=1, help="worker threads; output order is canonical")
    common.add_argument("--plot", choices=("svg",), help="also write a plot in this format")
    common.add_argument("--full-scale", action="store_true",
                        help="use the long-running budgets instead of the desk-scale defaults")

    q = exsub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    q.add_argument("--kernels", type=_positive, default=37, help="number of kernels")
    q.add_argument("--devices", type=_positive, default=15, help="number of devices")
    q.add_argument("--noise", type=float, default=0.01, help="per-iteration log10 noise sd")
    q.add_argument("--runs", type=_positive, default=50, help="timed iterations per measurement")

    q = exsub.add_parser("min-node-scan", parents=[common], help="OOB error against min_node_size 1..50")
    _add_data_args(q)
    q.add_argument("--num-trees", type=_positive, default=300, help="trees per forest")
    q.add_argument("--mtry", type=_positive, default=30, help="candidate columns per split")

    q = exsub.add_parser("heatmap", parents=[common], help="multi-start annealing over (num_trees, mtry)")
    _add_data_args(q)
    q.add_argument("--num-trees-range", type=_pair, help="num_trees range LO,HI")
    q.add_argument("--min-node-size", type=_positive, default=9, help="fixed min_node_size")
    _add_schedule_args(q)

    q = exsub.add_parser("loko", parents=[common], help="retune with each kernel left out")
    _add_data_args(q)
    q.add_argument("--start", type=_triple, help="starting NUM_TREES,MTRY,MIN_NODE_SIZE")
    q.add_argument("--num-trees-range", type=_pair, help="num_trees range LO,HI")
    q.add_argument("--min-node-size", type=_positive, default=9, help="fixed min_node_size")
    _add_schedule_args(q)

    q = exsub.add_parser("learning-curve", parents=[common], help="prediction error against training kernels")
    _add_data_args(q)
    q.add_argument("--samples", type=_positive, help="shuffles per kernel count")
    q.add_argument("--params", type=_triple, help="forest NUM_TREES,MTRY,MIN_NODE_SIZE")
    q.add_argument("--response", choices=("log10", "raw"), default="log10", help="regression target")

    q = exsub.add_parser("evaluate", parents=[common], help="hold-one-kernel-out predictions and ranking")
    _add_data_args(q)
    q.add_argument("--params", type=_triple, help="forest NUM_TREES,MTRY,MIN_NODE_SIZE")
    q.add_argument("--response", choices=("log10", "raw"), default="log10", help="regression target")
    return parser


# ---------------------------------------------------------------------------
# helpers

def _load_data(args) -> Dataset:
    if (args.features is None) != (args.runtimes is None):
        raise UsageError("--features and --runtimes must be given together")
    if args.features is None:
        p = bundled_paths()
        return load(p["features"], p["runtimes"])
    return load(args.features, args.runtimes, args.iterations)


def _read_text(path: Path) -> str:
    return Path(path).read_text()


def embedded_features(source: str) -> dict | None:
    """The JSON payload of a ``# aiwc: v1`` line, or None."""
    for line in source.splitlines():
        if line.startswith(EMBED_PREFIX):
            return json.loads(line[len(EMBED_PREFIX):])
    return None


def embed(source: str, payload: dict) -> str:
    """Source with exactly one ``# aiwc: v1`` line, at the top."""
    kept = [ln for ln in source.splitlines(keepends=True) if not ln.startswith(EMBED_PREFIX)]
    line = EMBED_PREFIX + json.dumps(payload, separators=(",", ":")) + "\n"
    return line + "".join(kept)


def feature_rows(path: Path) -> list[tuple[str, list[str], list[float]]]:
    """(label, feature names, values) per row of a feature CSV or embedded comment."""
    text = _read_text(path)
    payload = embedded_features(text)
    if payload is not None:
        feats = payload["features"]
        return [(payload.get("kernel", path.stem), list(feats), [float(v) for v in feats.values()])]
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DatasetError(f"{path}: empty feature file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if header[:3] != ["application", "kernel", "size"]:
        raise DatasetError(f"{path}: feature CSV must start with application,kernel,size")
    out = []
    for n, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DatasetError(f"{path} line {n}: expected {len(header)} fields")
        try:
            out.append((f"{r[1]}/{r[2]}", header[3:], [float(v) for v in r[3:]]))
        except ValueError:
            raise DatasetError(f"{path} line {n}: non-numeric feature value") from None
    return out


def _select_rows(rows, index):
    if index is None:
        return rows
    if not 0 <= index < len(rows):
        raise UsageError(f"--row {index} out of range (file has {len(rows)} rows)")
    return [rows[index]]


def _plot(args, name: str, svg: str) -> None:
    if args.plot == "svg":
        path = ex.write_text(args.out_dir / f"{name}.svg", svg)
        log.info("wrote %s", path)


def _write(args, name: str, text: str) -> Path:
    path = ex.write_text(args.out_dir / name, text)
    log.info("wrote %s", path)
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_characterize(args, seed: int, out) -> int:
    if args.trace is not None:
        with open(args.trace) as fh:
            trace = read_trace(fh)
        kernel_name = args.name or args.trace.stem
    else:
        source = _read_text(args.kernel)
        kernel = parse_kernel(source, name=args.kernel.stem)
        nd = NDRange(args.global_size, args.local_size or args.global_size)
        kwargs = {"fuel": args.fuel} if args.fuel else {}
        trace = execute(kernel, nd, dict(args.arg), **kwargs)
        kernel_name = args.name or kernel.name
        if args.save_trace is not None:
            with open(args.save_trace, "w") as fh:
                write_trace(trace, fh)
    fv = characterize(trace, args.history)
    row = feature_csv_row(args.application or kernel_name, kernel_name, args.size, fv)

    if args.embed:
        if args.trace is not None:
            raise UsageError("--embed needs a kernel source file")
        payload = {"kernel": kernel_name, "global": list(nd.global_size), "local": list(nd.local_size),
                   "args": dict(sorted(args.arg)), "history": args.history, "features": fv.as_dict()}
        updated = embed(source, payload)
        if updated != source:
            args.kernel.write_text(updated)
    if args.output is not None:
        new = not args.output.exists() or args.output.stat().st_size == 0
        with open(args.output, "a") as fh:
            if new:
                fh.write(feature_csv_header() + "\n")
            fh.write(row + "\n")
    if args.header:
        print(feature_csv_header(), file=out)
    print(row, file=out)
    return EXIT_OK


def cmd_train(args, seed: int, out) -> int:
    data = _load_data(args)
    params = ForestParams(args.num_trees, args.mtry, args.min_node_size, seed=derive(seed, "forest"))
    forest = fit(data, params, response=args.response, jobs=args.jobs)
    forest.save(args.model)
    err = "n/a" if forest.oob_error_pct is None else f"{forest.oob_error_pct:.6g}"
    r2 = "n/a" if forest.r_squared is None else f"{forest.r_squared:.6g}"
    print(f"rows={len(data)} num_trees={params.num_trees} mtry={params.mtry} "
          f"min_node_size={params.min_node_size} oob_error_pct={err} r_squared={r2}", file=out)
    return EXIT_OK


def cmd_tune(args, seed: int, out) -> int:
    data = _load_data(args)
    width = len(data.feature_names) + len(data.devices)
    space = SearchSpace.for_width(width, num_trees=args.num_trees_range)
    best, trace = tune_forest(data, args.start, _schedule(args, Schedule()), forest_seed=derive(seed, "forest"),
                              sa_seed=derive(seed, "sa"), space=space, fix=dict(args.fix),
                              trace_path=args.trace_out, response=args.response)
    print(f"num_trees={best.num_trees} mtry={best.mtry} min_node_size={best.min_node_size} "
          f"oob_error_pct={trace.best.error_pct:.6g} evaluations={len(trace)}", file=out)
    if args.model is not None:
        fit(data, best, response=args.response).save(args.model)
    return EXIT_OK


def cmd_predict(args, seed: int, out) -> int:
    forest = Forest.load(args.model)
    rows = _select_rows(feature_rows(args.features), args.row)
    forest.check_schema(rows[0][1] if rows else forest.feature_names, [args.device])
    for _, names, values in rows:
        forest.check_schema(names)
        print(f"{forest.predict_row(values, args.device):.9g}", file=out)
    return EXIT_OK


def cmd_rank(args, seed: int, out) -> int:
    forest = Forest.load(args.model)
    rows = feature_rows(args.features)
    if len(rows) != 1 and args.row is None:
        raise UsageError(f"{args.features} has {len(rows)} rows; choose one with --row")
    (_, names, values), = _select_rows(rows, args.row if args.row is not None else 0)
    forest.check_schema(names)
    for device, seconds in forest.rank_devices(values):
        print(f"{device},{seconds:.9g}", file=out)
    return EXIT_OK


def cmd_experiment(args, seed: int, out) -> int:
    full = args.full_scale
    name = args.experiment

    if name == "synth":
        cfg = SynthConfig(kernel_count=args.kernels, device_count=args.devices, noise=args.noise,
                          iterations=args.runs, seed=seed)
        paths = synthesize(cfg).write(args.out_dir)
        for p in paths.values():
            print(p, file=out)
        return EXIT_OK

    data = _load_data(args)
    if name == "min-node-scan":
        scan = ex.min_node_scan(data, args.num_trees, args.mtry, seed=seed, jobs=args.jobs)
        print(_write(args, "min_node_scan.csv", scan.to_csv()), file=out)
        _plot(args, "min_node_scan", ex.svg_plot({"oob": scan.points}, "OOB error by min_node_size",
                                                 "min_node_size", "OOB error (%)"))

    elif name == "heatmap":
        default = ex.FULL_SCALE["heatmap_schedule"] if full else ex.HEATMAP_SCHEDULE
        trees = args.num_trees_range or (ex.FULL_SCALE["heatmap_num_trees"] if full else ex.HEATMAP_NUM_TREES)
        hm = ex.heatmap_scan(data, _schedule(args, default), seed=seed, num_trees=trees,
                             min_node_size=args.min_node_size)
        print(_write(args, "heatmap.csv", hm.to_csv()), file=out)
        print(_write(args, "heatmap_traces.csv", hm.traces_csv()), file=out)
        _plot(args, "heatmap", ex.svg_plot({"evaluated": [(m, e) for _, m, e in hm.points()]},
                                           "OOB error of annealing evaluations", "mtry", "OOB error (%)",
                                           kind="scatter"))

    elif name == "loko":
        default = ex.FULL_SCALE["loko_schedule"] if full else ex.LOKO_SCHEDULE
        start = args.start or (ex.FULL_SCALE["loko_start"] if full else ex.LOKO_START)
        trees = args.num_trees_range or (ex.FULL_SCALE["loko_num_trees"] if full else ex.LOKO_NUM_TREES)
        res = ex.loko(data, start, _schedule(args, default), seed=seed, num_trees=trees,
                      min_node_size=args.min_node_size, jobs=args.jobs)
        print(_write(args, "loko.csv", res.to_csv()), file=out)
        m = res.medians
        print(f"median num_trees={m['num_trees']:g} mtry={m['mtry']:g} min_node_size={m['min_node_size']:g} "
              f"error_pct={m['error_pct']:.6g} error_iqr={res.error_iqr:.6g}", file=out)

    elif name == "learning-curve":
        samples = args.samples or (ex.FULL_SCALE["learning_curve_samples"] if full else ex.LEARNING_CURVE_SAMPLES)
        params = args.params or (ex.FULL_SCALE["learning_curve_params"] if full else ex.LEARNING_CURVE_PARAMS)
        lc = ex.learning_curve(data, samples, params, seed=seed, jobs=args.jobs, response=args.response)
        print(_write(args, "learning_curve.csv", lc.to_csv()), file=out)
        _plot(args, "learning_curve", ex.svg_plot(
            {"mae": [(p.kernel_count, p.mean_absolute_error) for p in lc.points]},
            "Prediction error by training kernels", "kernels in training set", "mean absolute error"))

    elif name == "evaluate":
        triple = args.params or (ex.FULL_SCALE["evaluate_params"] if full else ex.EVALUATE_PARAMS)
        params = ForestParams(*triple, seed=derive(seed, "forest"))
        ev = ex.evaluate(data, params, seed=seed, predictor=ex.forest_predictor(params, args.response),
                         jobs=args.jobs)
        report = ev.rank_report()
        print(_write(args, "predictions.csv", ev.predictions_csv()), file=out)
        print(_write(args, "error_heatmap.csv", ev.heatmap_csv()), file=out)
        print(_write(args, "ranking.csv", report.to_csv()), file=out)
        agree, total = report.pair_counts
        print(f"pairwise_accuracy={report.accuracy:.6g} ({agree}/{total}) "
              f"fastest_correct={report.fastest_correct():.6g} mean_cell_error_pct={ev.mean_cell_error:.6g}",
              file=out)
        _plot(args, "predictions", ex.svg_plot(
            {"rows": list(zip(ev.data.times.tolist(), ev.predicted.tolist()))},
            "Predicted against measured time", "measured (s)", "predicted (s)", kind="scatter", logscale=True))
    return EXIT_OK


COMMANDS = {"characterize": cmd_characterize, "train": cmd_train, "tune": cmd_tune,
            "predict": cmd_predict, "rank": cmd_rank, "experiment": cmd_experiment}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, SchemaMismatchError):
        return EXIT_SCHEMA
    if isinstance(exc, (KernelSyntaxError, TraceFormatError, DatasetError, ModelFormatError, UsageError,
                        json.JSONDecodeError)):
        return EXIT_PARSE
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ExecutionError, CharacterizationError, DegenerateResponseError, ObjectiveError,
                        ValueError, ArithmeticError)):
        return EXIT_EXEC
    raise exc


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_PARSE if e.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        seed = root_seed(args.seed)
    except ValueError as exc:
        print(f"aiwc-predict: error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        return COMMANDS[args.command](args, seed, out)
    except Exception as exc:  # mapped to an exit code, re-raised if unexpected
        code = exit_code(exc)
        print(f"aiwc-predict: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
