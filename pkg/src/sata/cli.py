"""Command-line interface: train-source, run, sweep, report."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .adapters import TTAClassifier, build_source_bundle, SourceBundle
from .config import RunConfig, load_config_file, make_config
from .harness import aggregate_csv, emit_report, run_protocol, run_sweep
from .stream import generate_source


def _add_shared_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="declarative key = value config file")
    parser.add_argument("--policy", default=None, help="source | bn_stats | tent | sata")
    parser.add_argument(
        "--protocol", default=None, help="abrupt | gradual | forgetting | generalization"
    )
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument(
        "--disable-ta", dest="disable_ta", action="store_const", const=True, default=None
    )
    parser.add_argument(
        "--disable-prototypes",
        dest="disable_prototypes",
        action="store_const",
        const=True,
        default=None,
    )


_CONFIG_KEYS = (
    "policy",
    "protocol",
    "batch_size",
    "seed",
    "lr",
    "tau",
    "disable_ta",
    "disable_prototypes",
)


def _config_from_args(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else None
    overrides = {key: getattr(args, key, None) for key in _CONFIG_KEYS}
    return make_config(file_values, overrides)


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sata", description="Continual test-time adaptation experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train-source", help="train the source model and prototypes")
    _add_shared_flags(p_train)
    p_train.add_argument("--out", required=True, help="output path for the source bundle (.npz)")

    p_run = sub.add_parser("run", help="run one protocol with one policy")
    _add_shared_flags(p_run)
    p_run.add_argument("--source", default=None, help="pre-trained source bundle (.npz)")
    p_run.add_argument("--out", required=True, help="output report path")
    p_run.add_argument("--format", default="csv", choices=("csv", "json"))

    p_sweep = sub.add_parser("sweep", help="run a batch-size grid")
    _add_shared_flags(p_sweep)
    p_sweep.add_argument("--batch-sizes", default="200,100,50,25,10")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated seeds")
    p_sweep.add_argument("--policies", default=None, help="comma-separated policies")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--format", default="csv", choices=("csv", "json"))

    p_report = sub.add_parser("report", help="aggregate run CSVs into policy means")
    p_report.add_argument("inputs", nargs="+", help="CSV files produced by run/sweep")
    p_report.add_argument("--out", default=None, help="write JSON summary here (default stdout)")

    args = parser.parse_args(argv)

    if args.command == "train-source":
        config = _config_from_args(args)
        data = generate_source(config.task(), config.seed)
        classes, y_idx = np.unique(data.train_y, return_inverse=True)
        bundle = build_source_bundle(
            data.train_x,
            y_idx,
            classes,
            hidden_dim=config.hidden_dim,
            embed_dim=config.embed_dim,
            n_blocks=config.n_blocks,
            train_epochs=config.train_epochs,
            train_batch_size=config.train_batch_size,
            train_lr=config.train_lr,
            seed=config.seed,
        )
        bundle.save(args.out)
        print(f"wrote source bundle to {args.out}")
        return 0

    if args.command == "run":
        config = _config_from_args(args)
        adapter = None
        if args.source:
            adapter = TTAClassifier(**config.classifier_kwargs())
            adapter.attach_source(SourceBundle.load(args.source))
        report = run_protocol(config, adapter=adapter)
        emit_report(report, args.out, fmt=args.format)
        print(
            f"{config.protocol}/{config.policy}: mean error "
            f"{report.mean_error_pct:.2f}% over {len(report.segments)} segments -> {args.out}"
        )
        return 0

    if args.command == "sweep":
        config = _config_from_args(args)
        batch_sizes = _parse_int_list(args.batch_sizes)
        seeds = _parse_int_list(args.seeds) if args.seeds else (config.seed,)
        policies = (
            tuple(p.strip() for p in args.policies.split(",")) if args.policies else None
        )
        reports = run_sweep(config, batch_sizes, seeds, policies)
        emit_report(reports, args.out, fmt=args.format)
        print(f"wrote {len(reports)} runs to {args.out}")
        return 0

    if args.command == "report":
        summary = aggregate_csv(args.inputs)
        payload = json.dumps(summary, indent=2)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(payload + "\n")
        else:
            print(payload)
        return 0

    return 1  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
