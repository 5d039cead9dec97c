"""Command-line front end for the distributed DC-OPF experiments.

Commands: inspect, partition, solve, gen-data, train, evaluate.  Each
command writes its artifacts under --out together with a manifest.json
recording the resolved configuration.  Errors exit nonzero with a single
"error: ..." line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .accel import evaluate, la_admm_solve, samples_csv, summary_csv
from .admm import AdmmConfig, AdmmEngine
from .cases import parse_matpower_case, solve_centralized
from .gru import TrainConfig, TrainedModel, history_csv, load_model, \
    save_model, train
from .partition import PartitionMap, build_partition_problems, \
    dump_partition_map, load_partition_map, spectral_partition, \
    validate_partition
from .scenario import generate_dataset, read_dataset, write_dataset, \
    dataset_summary


class CliError(RuntimeError):
    pass


def _load_case(path):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"case file not found: {p}")
    return parse_matpower_case(p.read_text(), p.stem)


def _resolve_partition(net, args):
    if getattr(args, "map", None):
        p = Path(args.map)
        if not p.is_file():
            raise CliError(f"partition map not found: {p}")
        return load_partition_map(p.read_text(), net)
    parts = getattr(args, "parts", None) or 1
    return spectral_partition(net, parts, seed=args.seed)


def _load_vector(net, path):
    if path is None:
        return net.base_load_vector()
    p = Path(path)
    if not p.is_file():
        raise CliError(f"load file not found: {p}")
    values = np.array([float(tok) for tok in p.read_text().split()])
    if values.shape != (net.n_bus,):
        raise CliError(f"load file must contain {net.n_bus} values, "
                       f"found {values.size}")
    return values


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args):
    manifest = {
        "tool": "laopf",
        "version": __version__,
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": {k: v for k, v in sorted(vars(args).items())
                   if k != "func" and v is not None},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def cmd_inspect(args):
    net = _load_case(args.case)
    print(net.summary())
    return 0


def cmd_partition(args):
    net = _load_case(args.case)
    pmap = _resolve_partition(net, args)
    out = _out_dir(args)
    (out / "partition.map").write_text(dump_partition_map(pmap))
    report = validate_partition(net, pmap)
    (out / "partition_report.txt").write_text(report + "\n")
    _write_manifest(out, "partition", args)
    print(report)
    return 0


def _make_engine(net, pmap, rho, iters, tol):
    problems, layout = build_partition_problems(net, pmap)
    config = AdmmConfig(rho=rho, max_iter=iters, primal_tol=tol)
    return AdmmEngine(net, problems, layout, config), layout


def cmd_solve(args):
    net = _load_case(args.case)
    load = _load_vector(net, args.load)
    out = _out_dir(args)
    if args.mode == "centralized":
        sol = solve_centralized(net, load)
        if sol.status != "optimal":
            raise CliError(f"centralized solve failed: {sol.status}")
        result = {"mode": "centralized", "objective": sol.objective,
                  "generation": sol.generation.tolist(),
                  "angles": sol.angles.tolist(),
                  "balance_duals": sol.balance_duals.tolist()}
        (out / "solution.json").write_text(json.dumps(result, indent=2) + "\n")
        _write_manifest(out, "solve", args)
        print(f"objective {sol.objective:.8g}")
        return 0
    pmap = _resolve_partition(net, args)
    engine, layout = _make_engine(net, pmap, args.rho, args.iters, args.tol)
    if args.mode == "admm":
        admm_result, trajectory = engine.run(load)
    else:
        if args.model is None:
            raise CliError("la-admm mode requires --model")
        model = load_model(args.model,
                           expected_fingerprint=layout.fingerprint())
        admm_result, trajectory, injection = la_admm_solve(engine, model, load)
        (out / "injection.json").write_text(json.dumps({
            "iteration": injection.iteration,
            "pre_residual": injection.pre_residual,
            "post_residual": injection.post_residual}, indent=2) + "\n")
    result = {"mode": args.mode, "converged": admm_result.converged,
              "iterations": admm_result.iterations,
              "objective": admm_result.cost,
              "primal_residual": admm_result.primal_residual,
              "generation": engine.assemble_generation(admm_result.state).tolist(),
              "angles": engine.assemble_angles(admm_result.state).tolist()}
    (out / "solution.json").write_text(json.dumps(result, indent=2) + "\n")
    (out / "trajectory.csv").write_text(trajectory.export_csv(layout.width))
    _write_manifest(out, "solve", args)
    print(f"objective {admm_result.cost:.8g} after {admm_result.iterations} "
          f"iterations (residual {admm_result.primal_residual:.3g})")
    return 0


def cmd_gen_data(args):
    net = _load_case(args.case)
    pmap = _resolve_partition(net, args)
    problems, layout = build_partition_problems(net, pmap)
    out = _out_dir(args)

    def progress(done, total):
        if done % max(1, total // 20) == 0 or done == total:
            print(f"  {done}/{total} samples", flush=True)

    ds = generate_dataset(net, problems, layout, count=args.count,
                          window=args.k, seed=args.seed, rho=args.rho,
                          system=Path(args.case).stem, progress=progress)
    if len(ds) < args.count:
        raise CliError(f"only {len(ds)} of {args.count} samples converged")
    write_dataset(out / "train.ds", ds)
    _write_manifest(out, "gen-data", args)
    print(dataset_summary(ds))
    return 0


def cmd_train(args):
    p = Path(args.data)
    if not p.is_file():
        raise CliError(f"dataset not found: {p}")
    ds = read_dataset(p)
    if len(ds) == 0:
        raise CliError("dataset is empty")
    inputs, targets = ds.to_arrays()
    n_lambda = args.n_lambda if args.n_lambda is not None else ds.n_lambda
    config = TrainConfig(learning_rate=args.lr, max_epochs=args.epochs,
                         batch_size=args.batch, seed=args.seed,
                         hidden=args.hidden, dense=args.dense)
    model, in_norm, out_norm, history = train(inputs, targets, n_lambda,
                                              config)
    out = _out_dir(args)
    trained = TrainedModel(model, in_norm, out_norm, ds.window,
                           ds.fingerprint)
    save_model(out / "model.npz", trained)
    (out / "training_history.csv").write_text(history_csv(history))
    _write_manifest(out, "train", args)
    best = min(h[2] for h in history)
    print(f"trained {len(history)} epochs; best validation loss {best:.6g}")
    return 0


def cmd_evaluate(args):
    net = _load_case(args.case)
    pmap = _resolve_partition(net, args)
    problems, layout = build_partition_problems(net, pmap)
    model = load_model(args.model, expected_fingerprint=layout.fingerprint())
    out = _out_dir(args)

    def progress(done, total):
        if done % max(1, total // 20) == 0 or done == total:
            print(f"  {done}/{total} scenarios", flush=True)

    summary = evaluate(net, problems, layout, model, n_tests=args.tests,
                       seed=args.seed, rho=args.rho, iters=args.iters,
                       progress=progress)
    (out / "samples.csv").write_text(samples_csv(summary))
    (out / "summary.csv").write_text(summary_csv(summary))
    _write_manifest(out, "evaluate", args)
    if summary.baseline_log10.size:
        med_b = float(np.median(summary.baseline_log10))
        med_a = float(np.median(summary.accelerated_log10))
        print(f"median final log10 relative error: baseline {med_b:.3f}, "
              f"accelerated {med_a:.3f} ({summary.failures} failures)")
    else:
        print("no evaluation samples completed")
    return 0


def _apply_config_file(parser, argv):
    """A JSON file of {flag-name: value} supplies defaults; command-line
    flags still win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    try:
        path = argv[i + 1]
    except IndexError:
        raise CliError("--config requires a file argument")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        values = json.loads(p.read_text())
    except ValueError as exc:
        raise CliError(f"config file is not valid JSON: {exc}")
    argv = argv[:i] + argv[i + 2:]
    extra = []
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        if flag in argv:
            continue
        extra += [flag, str(value)]
    return argv + extra


def build_parser():
    parser = argparse.ArgumentParser(
        prog="laopf",
        description="Distributed DC optimal power flow with "
                    "learning-accelerated consensus ADMM")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--seed", type=int, default=0)
        if out:
            p.add_argument("--out", default="out")

    p = sub.add_parser("inspect", help="print a case summary")
    p.add_argument("case")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("partition", help="partition a network")
    p.add_argument("case")
    p.add_argument("--parts", type=int)
    p.add_argument("--map", help="existing bus-to-partition map file")
    common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("solve", help="solve one dispatch problem")
    p.add_argument("case")
    p.add_argument("--mode", choices=("centralized", "admm", "la-admm"),
                   default="centralized")
    p.add_argument("--load", help="whitespace-separated per-bus demand file")
    p.add_argument("--parts", type=int)
    p.add_argument("--map")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--model", help="trained model file (la-admm mode)")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gen-data", help="generate a training dataset")
    p.add_argument("case")
    p.add_argument("--parts", type=int)
    p.add_argument("--map")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--k", type=int, default=4,
                   help="input window: recorded iterations per sample")
    p.add_argument("--rho", type=float, default=1.0)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the predictor on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--dense", type=int, default=64)
    p.add_argument("--n-lambda", type=int, dest="n_lambda")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compare plain and accelerated runs")
    p.add_argument("case")
    p.add_argument("--parts", type=int)
    p.add_argument("--map")
    p.add_argument("--model", required=True)
    p.add_argument("--tests", type=int, default=100)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=100)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (CliError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
