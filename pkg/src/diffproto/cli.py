"""Command-line interface.

Subcommands: gen-data, train, eval, baseline, ablate, trace. Exit codes:
0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import (
    DataError,
    FormatError,
    SyntheticConfig,
    generate_synthetic,
    load_embeddings,
    sample_episode,
    save_embeddings,
)
from .denoiser import COND_LEARNED, EpisodeDenoiser
from .diffusion import SamplerConfig, sample_prototypes
from .harness import (
    AblationSpec,
    export_report,
    load_config_file,
    meta_test,
    run_ablation,
    run_baseline,
    train_config_from_mapping,
)
from .numerics import NumericsError, RngStream
from .protonet import Metric, vanilla_prototypes
from .training import TrainingDiverged, load_checkpoint, meta_train, save_checkpoint, write_loss_table

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffproto", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic embedding dataset")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--std", type=float, default=0.25)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="meta-train a denoiser checkpoint")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--data", help="embedding file (overrides the config's data key)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-table", help="write the episode loss history here")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("eval", help="run meta-test with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--queries", type=int, default=15)
    p.add_argument("--tasks", type=int, default=600)
    p.add_argument("--mode", choices=("direct", "ancestral", "ddim"), default="direct")
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--mc", type=int, default=1)
    p.add_argument("--aggregate", choices=("mean_probs", "mean_prototypes"), default="mean_probs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True, help=".csv or .json output path")

    p = sub.add_parser("baseline", help="evaluate the vanilla prototype classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--queries", type=int, default=15)
    p.add_argument("--tasks", type=int, default=600)
    p.add_argument("--metric", choices=("sqeuclidean", "cosine"), default="sqeuclidean")
    p.add_argument("--temperature", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)

    p = sub.add_parser("ablate", help="sweep one configuration axis")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--config", help="base training config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--data", help="meta-train embedding file (overrides config)")
    p.add_argument("--test-data", help="meta-test embedding file (defaults to --data)")
    p.add_argument("--tasks", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-dir", required=True)

    p = sub.add_parser("trace", help="export one sampling trajectory as a table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--queries", type=int, default=15)
    p.add_argument("--mode", choices=("direct", "ancestral", "ddim"), default="direct")
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--out", required=True)
    return parser


def _apply_sets(mapping: dict, pairs) -> dict:
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def _train_setup(args):
    mapping = load_config_file(args.config) if args.config else {}
    _apply_sets(mapping, args.set)
    cfg, extras = train_config_from_mapping(mapping)
    data_path = args.data or extras.get("data")
    if not data_path:
        raise ValueError("no training data: pass --data or put a data key in the config")
    return cfg, load_embeddings(data_path)


def _report_format(path) -> str:
    return "json" if str(path).endswith(".json") else "csv"


def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(
        dim=args.dim, n_classes=args.classes, class_mean_scale=args.scale,
        within_class_std=args.std, per_class=args.per_class, seed=args.seed,
    )
    ds = generate_synthetic(cfg)
    save_embeddings(ds, args.out)
    print(f"wrote {ds.n_records} records ({ds.dim}-dim, {len(ds.classes)} classes) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, dataset = _train_setup(args)
    state = meta_train(dataset, cfg, log_every=args.log_every)
    save_checkpoint(state, args.out)
    if args.loss_table:
        write_loss_table(state, args.loss_table)
    final = float(state.history_total[-1]) if state.history_total else float("nan")
    print(f"trained {state.episodes_done} episodes; final episode loss {final:.4f}; checkpoint at {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_embeddings(args.data)
    sampler = SamplerConfig(mode=args.mode, stride=args.stride, mc_samples=args.mc, aggregate=args.aggregate)
    report = meta_test(
        state, dataset, args.ways, args.shots, args.queries, args.tasks, sampler, args.seed
    )
    export_report(report, args.report, _report_format(args.report))
    print(f"accuracy {report.mean:.4f} ± {report.ci95:.4f} over {report.n_tasks} tasks "
          f"({report.ms_per_task:.2f} ms/task); report at {args.report}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    dataset = load_embeddings(args.data)
    metric = Metric(args.metric, args.temperature)
    report = run_baseline(dataset, args.ways, args.shots, args.queries, args.tasks, metric, args.seed)
    export_report(report, args.report, _report_format(args.report))
    print(f"baseline accuracy {report.mean:.4f} ± {report.ci95:.4f} over {report.n_tasks} tasks; "
          f"report at {args.report}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    mapping = load_config_file(args.config) if args.config else {}
    _apply_sets(mapping, args.set)
    cfg, extras = train_config_from_mapping(mapping)
    train_path = args.data or extras.get("data")
    if not train_path:
        raise ValueError("no training data: pass --data or put a data key in the config")
    train_ds = load_embeddings(train_path)
    test_ds = load_embeddings(args.test_data) if args.test_data else train_ds
    spec = AblationSpec(axis=args.axis, values=args.values.split(","), base=cfg)
    rows = run_ablation(
        spec, train_ds, test_ds, n_tasks=args.tasks, seed=args.seed,
        report_dir=args.report_dir, log=print,
    )
    print(f"{len(rows)} rows written under {args.report_dir}")
    return EXIT_OK


def cmd_trace(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_embeddings(args.data)
    episode = sample_episode(dataset, args.ways, args.shots, args.queries, args.seed)
    vanilla = vanilla_prototypes(episode)
    class_ids = episode.class_ids if state.config.cond_mode == COND_LEARNED else None
    sampler = SamplerConfig(mode=args.mode, stride=args.stride)
    _, trace = sample_prototypes(
        EpisodeDenoiser(state.model, class_ids), vanilla, state.schedule, sampler,
        RngStream(args.seed).child("trace"), residual=state.config.residual, record_trace=True,
    )
    trace.export_text(args.out)
    print(f"trace with {len(trace.entries)} snapshots at {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
    "trace": cmd_trace,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (FormatError, DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericsError, TrainingDiverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
