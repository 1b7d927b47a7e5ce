"""Command-line entry point: ``mtsl gen | train | inspect``.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.
Logging verbosity comes from ``MTSL_LOG`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from mtsl import archgraph as ag
from mtsl.data import SyntheticTaskSpec, generate, load_split, save_split
from mtsl.errors import ConfigError, NumericError, ParseError, ShapeError
from mtsl.experiment import desk_spec
from mtsl.report import format_partition, format_report, load_metrics, metrics_to_json
from mtsl.similarity import best_grouping, load_feature_csv, pairwise_cka
from mtsl.trainer import PhaseSchedule, RunConfig, Trainer, evaluate

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
DEFAULT_SAMPLES = 1600

log = logging.getLogger("mtsl")


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _common() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed (default 0)")
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="JSON config mirroring RunConfig")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="mtsl", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic multi-task dataset")
    gen.add_argument("--tasks", type=int, default=3)
    gen.add_argument("--shared", type=_int_list, default=(1, 2), help="1-based tasks reading the shared block")
    gen.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    gen.add_argument("--kind", choices=("linear", "nonlinear"), default="nonlinear")
    gen.add_argument("--out-dim", type=int, default=4)
    gen.add_argument("--noise", type=float, default=0.1)

    tr = sub.add_parser("train", parents=[common], help="run structural learning end to end")
    tr.add_argument("--data", type=Path, help="directory written by `mtsl gen` (default: synthetic)")
    tr.add_argument("--samples", type=int, help="synthetic sample count when --data is absent")
    tr.add_argument("--lambda", dest="lam", type=float)
    tr.add_argument("--gamma", type=float)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--epochs", type=int, help="total task-training epochs E")
    tr.add_argument("--fine-tune-min", type=int, help="minimum fine-tuning epochs f")
    tr.add_argument("--tl-epochs", type=_int_list, help="task-phase epochs per iteration")
    tr.add_argument("--sl-epochs", type=_int_list, help="amalgamation epochs per iteration")
    tr.add_argument("--structural-phases", type=int, help="truncate the schedule to this many iterations")
    tr.add_argument("--widths", type=_int_list)
    tr.add_argument("--stn-baseline", type=Path, help="run directory or metrics.json of a baseline run")
    tr.add_argument("--no-figures", action="store_true")

    ins = sub.add_parser("inspect", parents=[common], help="print the per-depth grouping of a saved graph")
    ins.add_argument("graph", type=Path, nargs="?")
    ins.add_argument("--dot", action="store_true", help="emit Graphviz DOT instead of the table")
    ins.add_argument("--features", nargs="+", metavar="TASK=CSV", help="feature CSVs to compare with CKA")
    ins.add_argument("--gamma", type=float, default=0.75)
    ins.add_argument("--heatmap", type=Path, help="write the similarity heatmap to this PNG")
    return parser


def _configure_logging() -> None:
    name = os.environ.get("MTSL_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"MTSL_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load_config_file(args) -> dict:
    path = getattr(args, "config", None)
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc.msg}", offset=exc.pos) from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc


# --- gen ----------------------------------------------------------------------------


def cmd_gen(args) -> int:
    doc = _load_config_file(args)
    seed = getattr(args, "seed", doc.get("seed", 0))
    if args.samples < 1:
        raise UsageError(f"--samples must be positive, got {args.samples}")
    if "synthetic" in doc:
        spec = SyntheticTaskSpec.from_json(doc["synthetic"]["spec"])
    else:
        if not 1 <= args.tasks <= 26:
            raise UsageError(f"--tasks must be in 1..26, got {args.tasks}")
        if any(not 1 <= i <= args.tasks for i in args.shared):
            raise UsageError(f"--shared indices must lie in 1..{args.tasks}")
        spec = SyntheticTaskSpec.shared_and_independent(
            args.tasks, args.shared, noise=args.noise, kind=args.kind, out_dim=args.out_dim
        )
    split = generate(spec, args.samples, seed=seed)
    out = getattr(args, "out", Path("data"))
    for p in save_split(split, out):
        print(p)
    return EXIT_OK


# --- train --------------------------------------------------------------------------


def resolve_train_config(args) -> tuple[RunConfig, dict]:
    """Defaults, then the config file, then flags; returns the config and data source."""
    doc = _load_config_file(args)
    source = {k: doc.pop(k) for k in ("data", "synthetic") if k in doc}
    cfg = RunConfig.from_json(doc)
    over = {}
    for flag, key in (("lam", "lam"), ("gamma", "gamma"), ("lr", "lr")):
        if getattr(args, flag) is not None:
            over[key] = getattr(args, flag)
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if args.widths is not None:
        over["widths"] = args.widths
    cfg = replace(cfg, **over)

    s = cfg.schedule
    if args.epochs is not None:
        if args.tl_epochs is None and args.sl_epochs is None and "schedule" not in doc:
            s = PhaseSchedule.scaled(args.epochs, args.fine_tune_min)
        else:
            s = replace(s, E=args.epochs)
    if args.fine_tune_min is not None:
        s = replace(s, f=args.fine_tune_min)
    if args.tl_epochs is not None:
        s = replace(s, task_epochs=args.tl_epochs)
    if args.sl_epochs is not None:
        s = replace(s, structural_epochs=args.sl_epochs)
    if args.structural_phases is not None:
        k = args.structural_phases
        if k < 0:
            raise UsageError(f"--structural-phases must be >= 0, got {k}")
        s = replace(s, task_epochs=s.task_epochs[:k], structural_epochs=s.structural_epochs[:k])
    cfg = replace(cfg, schedule=s)

    if args.data is not None:
        source = {"data": str(args.data)}
    if args.samples is not None:
        source.setdefault("synthetic", {})["n_samples"] = args.samples
    cfg.validate()
    return cfg, source


def _load_data(source: dict, cfg: RunConfig):
    if "data" in source:
        path = Path(source["data"])
        if not (path / "train.csv").exists():
            raise UsageError(f"no train.csv under {path}")
        return load_split(path)
    syn = source.get("synthetic", {})
    spec = SyntheticTaskSpec.from_json(syn["spec"]) if "spec" in syn else desk_spec()
    return generate(spec, syn.get("n_samples", DEFAULT_SAMPLES), seed=cfg.seed, batch_size=cfg.batch_size)


def cmd_train(args) -> int:
    cfg, source = resolve_train_config(args)
    out = getattr(args, "out", Path("run"))
    data = _load_data(source, cfg)
    baseline = load_metrics(args.stn_baseline) if args.stn_baseline is not None else None
    if baseline is not None and set(baseline) != set(data.tasks):
        raise UsageError(f"baseline tasks {sorted(baseline)} do not match data tasks {sorted(data.tasks)}")

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps({**cfg.to_json(), **({"data": source["data"]} if "data" in source else {})}, indent=2, sort_keys=True) + "\n"
    )
    log.info("training %s on %d samples into %s", data.tasks, len(data.train), out)
    graph, runlog = Trainer(cfg, data, snapshot_dir=out).run()

    spec = cfg.loss_spec(data.tasks)
    metrics = evaluate(graph, data.val, spec)
    cost = graph.cost()
    (out / "final_graph.json").write_bytes(ag.serialize(graph))
    runlog.write(out / "runlog.jsonl")
    (out / "arch.dot").write_text(ag.export_dot(graph))
    (out / "metrics.json").write_text(
        json.dumps(metrics_to_json(metrics, cost.parameter_count, cost.flops_per_sample), indent=2, sort_keys=True) + "\n"
    )
    if baseline is not None:
        baseline = {t: baseline[t] for t in metrics}
    report = format_report(metrics, cost.parameter_count, cost.flops_per_sample, graph.depth_partition(), baseline)
    (out / "report.txt").write_text(report)
    if not args.no_figures:
        from mtsl.figures import render_run

        render_run(runlog.records, out / "figures")
    print(report.split("\n", 1)[1].lstrip("\n"), end="")
    return EXIT_OK


# --- inspect ------------------------------------------------------------------------


def _read_graph(path: Path) -> ag.ArchGraph:
    try:
        raw = path.read_bytes()
    except (FileNotFoundError, IsADirectoryError):
        raise UsageError(f"graph file not found: {path}") from None
    return ag.deserialize(raw)


def cmd_inspect(args) -> int:
    if args.graph is None and not args.features:
        raise UsageError("inspect needs a graph file or --features")
    if args.graph is not None:
        g = _read_graph(args.graph)
        print(ag.export_dot(g) if args.dot else format_partition(g.depth_partition()))
    if args.features:
        feats = {}
        for item in args.features:
            name, sep, path = item.partition("=")
            if not sep or not name:
                raise UsageError(f"--features entries look like TASK=path.csv, got {item!r}")
            if not Path(path).exists():
                raise UsageError(f"feature file not found: {path}")
            feats[name] = load_feature_csv(path, source=(name,))
        sim = pairwise_cka(feats)
        grouping = best_grouping(sim, args.gamma)
        width = max(len(t) for t in sim.tasks) + 2
        print("".ljust(width) + "".join(f"{t:>10}" for t in sim.tasks))
        for i, t in enumerate(sim.tasks):
            print(f"{t:<{width}}" + "".join(f"{v:>10.4f}" for v in sim.S[i]))
        print("grouping: " + ", ".join("[" + ", ".join(g) + "]" for g in grouping.groups) + f"  value {grouping.value:.6f}")
        if args.heatmap is not None:
            from mtsl.figures import plot_similarity

            plot_similarity(sim, args.heatmap, title="unbiased CKA")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with status 2 on bad flags
    try:
        _configure_logging()
        return COMMANDS[args.command](args)
    except NumericError as exc:
        snap = getattr(exc, "snapshot", None)
        print(f"mtsl: numeric failure: {exc}; snapshot: {snap}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ParseError, ShapeError) as exc:
        print(f"mtsl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
