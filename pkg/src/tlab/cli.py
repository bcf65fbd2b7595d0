"""Command-line entry point.

Subcommands: ingest, synth, train, run, report, compare. Exit codes:
0 success, 2 usage error, 3 data/format error, 4 contract violation.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import datasets, models
from .attacks import ATTACK_KINDS, AttackConfig
from .boost import BoostConfig
from .errors import (ConfigurationError, ContractError, DataError,
                     FormatError, ParseError, RegistryError)
from .harness import (ModelRegistry, ScenarioSpec, compare_reports,
                      parse_report, render_report, run_scenario)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONTRACT = 4

_SCENARIO_NAMES = {"cross-training": "CROSS_TRAINING",
                   "cross-model": "CROSS_MODEL",
                   "cross-model-training": "CROSS_MODEL_AND_TRAINING"}

# Attack-sweep file keys -> AttackConfig fields.
_SWEEP_KEYS = {"eps": "epsilon", "epsilon": "epsilon", "steps": "steps",
               "theta": "theta", "budget": "jsma_budget",
               "jsma_budget": "jsma_budget", "c": "c", "kappa": "kappa"}
_INT_FIELDS = {"steps"}


def _parse_fractions(text: str):
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise ConfigurationError(f"bad split fractions {text!r}") from None
    if len(parts) != 3 or abs(sum(parts) - 1.0) > 1e-9:
        raise ConfigurationError("split fractions must be three values summing to 1")
    return parts


def _parse_boost(text: str) -> BoostConfig:
    kwargs = {}
    for item in text.split(","):
        key, _, value = item.partition("=")
        key = key.strip()
        if key in ("eps", "epsilon"):
            kwargs["epsilon"] = float(value)
        elif key == "delta":
            kwargs["delta"] = float(value)
        elif key == "step":
            kwargs["step_size"] = float(value)
        else:
            raise ConfigurationError(f"unknown boost parameter {key!r}")
    if "epsilon" not in kwargs or "delta" not in kwargs:
        raise ConfigurationError("boost needs both eps and delta")
    return BoostConfig(**kwargs)


def parse_attack_sweep(text: str) -> tuple:
    """Parse line-oriented `KIND key=value ...` records."""
    configs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        kind = tokens[0].upper()
        if kind not in ATTACK_KINDS:
            raise ParseError(f"line {lineno}: unknown attack {tokens[0]!r}")
        kwargs = {}
        for token in tokens[1:]:
            key, sep, value = token.partition("=")
            if not sep or key not in _SWEEP_KEYS:
                raise ParseError(f"line {lineno}: bad parameter {token!r}")
            caster = int if key in _INT_FIELDS else float
            try:
                kwargs[_SWEEP_KEYS[key]] = caster(value)
            except ValueError:
                raise ParseError(
                    f"line {lineno}: bad value in {token!r}") from None
        configs.append(AttackConfig(kind, **kwargs))
    if not configs:
        raise ParseError("attack sweep file contains no attacks")
    return tuple(configs)


def _cmd_ingest(args) -> int:
    ds = datasets.ingest_flows(args.csv, args.label_col,
                               split_fractions=_parse_fractions(args.split),
                               seed=args.seed)
    datasets.save_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds.labels)} patches, "
          f"side {ds.pixels.shape[-1]}")
    return 0


def _cmd_synth(args) -> int:
    ds = datasets.synth_dataset(seed=args.seed, n_per_class=args.n,
                                separation=args.sep, input_side=args.side)
    datasets.save_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds.labels)} patches, side {args.side}")
    return 0


def _cmd_train(args) -> int:
    ds = datasets.load_dataset(args.data)
    side = int(ds.pixels.shape[-1])
    spec = models.build_spec(args.arch.upper(), side, args.width)
    model = models.train(spec, ds, models.TrainConfig(seed=args.seed))
    models.save_checkpoint(model, args.out)
    xs, ys = ds.split_arrays("test")
    print(f"wrote {args.out}: {spec.name} width {args.width}, "
          f"test accuracy {model.accuracy(xs, ys):.4f}")
    return 0


def _cmd_run(args) -> int:
    sn = models.load_checkpoint(args.sn)
    tn = models.load_checkpoint(args.tn)
    sn_data = datasets.load_dataset(args.sn_data)
    tn_data = sn_data if args.tn_data is None else datasets.load_dataset(args.tn_data)
    registry = ModelRegistry()
    registry.add_model(sn.spec.name, sn_data.dataset_id, sn)
    registry.add_model(tn.spec.name, tn_data.dataset_id, tn)
    registry.add_dataset(sn_data)
    registry.add_dataset(tn_data)
    sweep = parse_attack_sweep(Path(args.attacks).read_text())
    boost = _parse_boost(args.boost) if args.boost else None
    spec = ScenarioSpec(kind=_SCENARIO_NAMES[args.scenario],
                        source=(sn.spec.name, sn_data.dataset_id),
                        target=(tn.spec.name, tn_data.dataset_id),
                        attack_sweep=sweep, boost=boost, n_samples=args.n)
    report = run_scenario(spec, registry, args.seed)
    Path(args.out).write_text(render_report(report, "csv"))
    for note in report.notes:
        print(f"note: {note}", file=sys.stderr)
    print(f"wrote {args.out}: {len(report.rows)} rows")
    return 0


def _cmd_report(args) -> int:
    report = parse_report(Path(args.infile).read_text())
    sys.stdout.write(render_report(report, args.format))
    return 0


def _cmd_compare(args) -> int:
    baseline = parse_report(Path(args.baseline).read_text())
    boosted = parse_report(Path(args.boosted).read_text())
    print("sn,tn,attack,baseline_asr_tn,boosted_asr_tn,delta,transfers,improved")
    for row in compare_reports(baseline, boosted):
        print(",".join([*row.key, f"{row.baseline_asr_tn:.4f}",
                        f"{row.boosted_asr_tn:.4f}", f"{row.delta:+.4f}",
                        "TRANSFERS" if row.transfers else "-",
                        "IMPROVED" if row.improved else "-"]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tlab",
        description="Adversarial-attack transferability toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a dataset from a flow CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--label-col", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="0.6,0.2,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="patches per class")
    p.add_argument("--sep", type=float, required=True)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--arch", choices=("qub1", "qub2"), required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("run", help="run a transfer scenario")
    p.add_argument("--scenario", choices=sorted(_SCENARIO_NAMES), required=True)
    p.add_argument("--sn", required=True, help="source checkpoint")
    p.add_argument("--tn", required=True, help="target checkpoint")
    p.add_argument("--sn-data", required=True, help="source dataset file")
    p.add_argument("--tn-data", help="target dataset file (default: source's)")
    p.add_argument("--attacks", required=True, help="attack sweep file")
    p.add_argument("--boost", help='e.g. "eps=0.1,delta=1.0"')
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="render a report CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("compare", help="diff baseline vs boosted reports")
    p.add_argument("--baseline", required=True)
    p.add_argument("--boosted", required=True)
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, RegistryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
