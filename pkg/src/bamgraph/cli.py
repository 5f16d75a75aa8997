"""``bam`` command line: simulate, train, infer, eval.

Exit codes: 0 success, 2 usage, 3 training failure, 4 I/O or checkpoint compatibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import graphs
from .errors import BamError, CheckpointError, InvalidParameterError, NonFiniteError
from .seeding import substream

EXIT_TRAIN, EXIT_IO = 3, 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _parser():
    p = argparse.ArgumentParser(prog="bam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a graph, data matrix and labels")
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--q", type=float, required=True)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--dependency", default="chebyshev")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)

    t = sub.add_parser("train", help="train the edge classifier or the v-structure model")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=("bamnet", "cpdag"), default="bamnet")
    t.add_argument("--trace")
    t.add_argument("--resume")
    t.add_argument("--epochs", type=int)
    t.add_argument("--samples-per-epoch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float, dest="initial_lr")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config field")

    i = sub.add_parser("infer", help="predict edge classes (and optionally a CPDAG) for a data CSV")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--cpdag", action="store_true")
    i.add_argument("--model2")
    i.add_argument("--threshold", type=float, default=0.5)

    e = sub.add_parser("eval", help="run the benchmark grid")
    e.add_argument("--model", action="append", default=[])
    e.add_argument("--model2")
    e.add_argument("--grid", required=True)
    e.add_argument("--trials", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    return p


def _usage(parser, msg):
    parser.error(msg)  # exits with status 2


def cmd_simulate(args, parser):
    from .semgen import DEPENDENCIES, TestDependency, generate_test_data, write_data_csv

    if args.d < 2:
        _usage(parser, f"--d must be >= 2, got {args.d}")
    if not 1 <= args.q < args.d:
        _usage(parser, f"--q must satisfy 1 <= q < d (q < d requirement), got q={args.q:g}, d={args.d}")
    if args.m < 2:
        _usage(parser, f"--m must be >= 2, got {args.m}")
    if args.dependency not in DEPENDENCIES:
        _usage(parser, f"--dependency must be one of {', '.join(DEPENDENCIES)}")
    rng = substream(args.seed, "simulate")
    g = graphs.sample_er_dag(args.d, args.q, rng)
    x = generate_test_data(g, TestDependency(args.dependency), args.m, rng)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_data_csv(x, out / "data.csv")
    graphs.save_json(g, out / "graph.json")
    graphs.save_json(graphs.derive_three_class_labels(g), out / "labels.json")
    print(f"wrote {out / 'data.csv'} ({x.shape[0]}x{x.shape[1]}), graph.json, labels.json")


def _overrides(args, parser):
    out = {k: getattr(args, k) for k in ("epochs", "samples_per_epoch", "seed", "initial_lr")}
    for item in args.set:
        if "=" not in item:
            _usage(parser, f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args, parser):
    from .config import build_run_config
    from .cpdagnet import new_vstructure_state, run_vstructure_epochs
    from .trainer import new_state, resume_state, run_epochs, save_training_state, write_trace_csv

    try:
        run = build_run_config(args.config, args.stage, _overrides(args, parser))
    except InvalidParameterError as exc:
        _usage(parser, str(exc))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {args.config}: {exc}", EXIT_IO)
    cfg = run.train
    kind = "vstructure" if run.stage == "cpdag" else "bamnet"
    if args.resume:
        try:
            state = resume_state(args.resume, cfg, kind)
        except CheckpointError as exc:
            raise CliError(str(exc), EXIT_IO)
    else:
        state = new_vstructure_state(cfg) if kind == "vstructure" else new_state(cfg)
    runner = run_vstructure_epochs if kind == "vstructure" else run_epochs
    try:
        while state.epoch < cfg.epochs:
            runner(state, cfg, until=state.epoch + 1)
            row = state.trace[-1]
            print(f"epoch {row['epoch']}: L_b={row['L_b']:.6f} L_c={row['L_c']:.6f} L_p={row['L_p']:.6f} total={row['total']:.6f}")
    except NonFiniteError as exc:
        name = f" (parameter {exc.name})" if exc.name else ""
        raise CliError(f"training failed at epoch {state.epoch}: {exc}{name}", EXIT_TRAIN)
    save_training_state(state, cfg, args.out, kind)
    trace_path = args.trace or str(Path(args.out).with_suffix(".trace.csv"))
    write_trace_csv(state.trace, trace_path)
    print(f"wrote {args.out} and {trace_path}")


def _load(path, kind):
    from .trainer import load_model

    if not Path(path).exists():
        raise CliError(f"model file not found: {path}", EXIT_IO)
    try:
        return load_model(path, kind)[0]
    except (CheckpointError, TypeError, KeyError) as exc:
        raise CliError(f"cannot load {path}: {exc}", EXIT_IO)


def cmd_infer(args, parser):
    from .bamnet import predict
    from .cpdagnet import estimate_cpdag, write_report_csv
    from .semgen import read_data_csv

    if args.cpdag and not args.model2:
        _usage(parser, "--cpdag requires --model2")
    model = _load(args.model, "bamnet")
    if not Path(args.data).exists():
        raise CliError(f"data file not found: {args.data}", EXIT_IO)
    try:
        x = read_data_csv(args.data)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {args.data}: {exc}", EXIT_IO)
    out = Path(args.out)
    if args.cpdag:
        stage2 = _load(args.model2, "vstructure")
        cpdag, report, probs = estimate_cpdag(x, model, stage2, args.threshold)
        graphs.save_json(cpdag, out.with_suffix(".cpdag.json"))
        write_report_csv(report, out.with_suffix(".immoralities.csv"))
    else:
        probs = predict(x, model)
    payload = {"d": int(probs.shape[0]), "probs": probs.tolist(), "class_order": list(graphs.CLASS_ORDER)}
    out.write_text(json.dumps(payload) + "\n")
    print(f"wrote {out}")


def cmd_eval(args, parser):
    from .evaluation import run_benchmark

    if not args.model:
        _usage(parser, "--model is required")
    try:
        grid = json.loads(Path(args.grid).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read grid {args.grid}: {exc}", EXIT_IO)
    if "d" not in grid or "M" not in grid:
        _usage(parser, "--grid must define 'd' and 'M'")
    if args.trials is not None:
        grid["trials"] = args.trials
    models = {Path(p).stem: _load(p, "bamnet") for p in args.model}
    cpdag_models = {}
    if args.model2:
        stage2 = _load(args.model2, "vstructure")
        cpdag_models = {k: (m, stage2) for k, m in models.items()}
    reports = run_benchmark(grid, models, args.out, args.seed, cpdag_models)
    model_rows = [r for r in reports if r.model_id != "zero_graph"]
    if model_rows and all(r.error is not None for r in model_rows):
        print("all trials failed", file=sys.stderr)
        return 1
    print(f"wrote {args.out} ({len(reports)} rows)")
    return 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, parser) or 0
    except CliError as exc:
        print(f"bam {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except CheckpointError as exc:
        print(f"bam {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except BamError as exc:
        print(f"bam {args.command}: {exc}", file=sys.stderr)
        return EXIT_TRAIN if args.command == "train" else 1


if __name__ == "__main__":
    sys.exit(main())
