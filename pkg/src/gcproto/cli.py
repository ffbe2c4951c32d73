"""Command-line interface.

Subcommands: ``gen`` (synthetic data), ``select`` (prototype file),
``train`` (model checkpoint), ``eval`` (report), ``sweep-n``,
``sweep-alpha``, ``group-eval``.  A run is configured either entirely by
flags or by ``--config`` pointing at an experiment JSON; explicit flags
override the config file field-for-field.

On failure the process exits nonzero after printing one line to stderr of
the form ``error:<category>: <message>``, where the category is a stable
machine-parsable token (see gcproto.errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, DataFormatError, GcprotoError
from .harness import (
    ExperimentConfig,
    experiment_config_from_json_dict,
    group_evaluate,
    load_experiment_config,
    run_experiment,
    save_prototypes,
    sweep_alpha,
    sweep_n,
)
from .model import GcpConfig, load_model, save_model, select_gcp, train
from .selectors import SelectorConfig, run_selector
from .store import load_embedding_set, save_embedding_set
from .synthetic import PRESETS, SyntheticSpec, generate_synthetic

METHODS = ("instance", "centroid", "kcentroid", "fps", "alphafps", "gcp")


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise DataFormatError(f"{path}: expected a JSON object")
    return data


def cmd_gen(args) -> int:
    if args.config is not None:
        data = _read_json(args.config)
        if "preset" in data:
            extra = set(data) - {"preset"}
            if extra:
                raise ConfigError(f"preset config takes no other keys, got {sorted(extra)}")
            name = data["preset"]
            if name not in PRESETS:
                raise ConfigError(f"unknown preset {name!r} (available: {sorted(PRESETS)})")
            spec = PRESETS[name]()
        else:
            known = set(SyntheticSpec.__dataclass_fields__)
            extra = set(data) - known
            if extra:
                raise ConfigError(f"unknown synthetic keys {sorted(extra)}")
            if isinstance(data.get("instances_per_class"), list):
                data["instances_per_class"] = tuple(data["instances_per_class"])
            spec = SyntheticSpec(**data)
    else:
        spec = SyntheticSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    gallery, queries = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_embedding_set(gallery, out / "gallery.csv")
    save_embedding_set(queries, out / "queries.csv")
    echo = dict(spec.__dict__)
    if isinstance(echo["instances_per_class"], tuple):
        echo["instances_per_class"] = list(echo["instances_per_class"])
    (out / "synthetic_spec.json").write_text(
        json.dumps(echo, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"wrote {len(gallery)} gallery and {len(queries)} query records to {out}")
    return 0


def cmd_select(args) -> int:
    eset = load_embedding_set(args.data)
    if args.method == "gcp":
        if args.checkpoint is None:
            raise ConfigError("--method gcp needs --checkpoint")
        model = load_model(args.checkpoint)
        pset = select_gcp(eset, model, n=args.n)
    else:
        cfg = SelectorConfig(
            method=args.method,
            n_prototypes=args.n if args.n is not None else 3,
            alpha=args.alpha if args.alpha is not None else 0.5,
            seed=args.seed if args.seed is not None else 0,
        )
        pset = run_selector(eset, cfg)
    save_prototypes(pset, args.out)
    print(
        f"wrote {pset.total_count()} prototypes over {len(pset.class_ids)} classes to {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    eset = load_embedding_set(args.data)
    data = _read_json(args.config) if args.config is not None else {}
    known = set(GcpConfig.__dataclass_fields__)
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown gcp config keys {sorted(extra)}")
    data.setdefault("dim", eset.dim)
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = GcpConfig(**data)
    model, trace = train(eset, cfg)
    save_model(model, args.out)
    print(
        f"trained {cfg.epochs} epochs, final mean loss "
        f"{trace.epoch_mean_loss[-1]!r}, checkpoint at {args.out}"
    )
    return 0


def _experiment_from_args(args) -> ExperimentConfig:
    if args.config is not None:
        base = load_experiment_config(args.config).to_json_dict()
    else:
        if args.data is None or args.queries is None or args.method is None:
            raise ConfigError("without --config, provide --data, --queries and --method")
        base = {
            "version": 1,
            "data": {},
            "selector": {"method": args.method},
        }
    if args.data is not None:
        base["data"] = {"path": args.data}
    if args.queries is not None:
        base["queries"] = {"path": args.queries}
    if args.method is not None:
        base.setdefault("selector", {})["method"] = args.method
    if args.n is not None:
        base["selector"]["n"] = args.n
    if args.alpha is not None:
        base["selector"]["alpha"] = args.alpha
    if args.protocol is not None:
        base["protocol"] = args.protocol
    if args.seed is not None:
        base["seed"] = args.seed
        # flag seed overrides sub-seeds the config file left implicit
        for section in ("selector", "gcp"):
            if isinstance(base.get(section), dict):
                base[section].pop("seed", None)
    if args.checkpoint is not None:
        base["checkpoint"] = args.checkpoint
    return experiment_config_from_json_dict(base)


def cmd_eval(args) -> int:
    cfg = _experiment_from_args(args)
    result = run_experiment(cfg, out_dir=args.out)
    r = result.report
    print(f"queries={r.n_queries} top1={r.top1!r} map={r.map!r}")
    if r.missing_class_query_ids:
        print(f"queries with no own-class prototype: {len(r.missing_class_query_ids)}")
    return 0


def _parse_values(text: str, kind) -> list:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --values list {text!r}") from None


def cmd_sweep_n(args) -> int:
    cfg = _experiment_from_args(args)
    values = _parse_values(args.values, int) if args.values else None
    rows = sweep_n(cfg, values, out_dir=args.out)
    for row in rows:
        print(f"n={row['n']} top1={row['top1']!r} map={row['map']!r}")
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg = _experiment_from_args(args)
    values = _parse_values(args.values, float) if args.values else None
    rows = sweep_alpha(cfg, values, out_dir=args.out)
    for row in rows:
        print(f"alpha={row['alpha']!r} top1={row['top1']!r} map={row['map']!r}")
    return 0


def cmd_group_eval(args) -> int:
    cfg = _experiment_from_args(args)
    buckets = [b.strip() for b in args.buckets.split(",")] if args.buckets else None
    rows = group_evaluate(cfg, buckets, out_dir=args.out)
    for row in rows:
        map_txt = "absent" if row["map"] is None else repr(row["map"])
        print(f"bucket={row['bucket']} count={row['count']} map={map_txt}")
    return 0


def _add_common_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="gallery file (csv or binary)")
    p.add_argument("--queries", help="query file (csv or binary)")
    p.add_argument("--method", choices=METHODS, help="prototype selector")
    p.add_argument("--n", type=int, help="prototypes per class")
    p.add_argument("--alpha", type=float, help="interpolation factor for alphafps")
    p.add_argument(
        "--protocol", choices=("plain", "camera-filter"), help="inference protocol"
    )
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--checkpoint", help="trained model checkpoint for --method gcp")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", help="artifact output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcproto",
        description="Class-prototype selection and prototype-based retrieval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic gallery/query pair")
    p.add_argument("--config", help="synthetic spec JSON, or {\"preset\": name}")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("select", help="build a prototype file from a gallery")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--n", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="model checkpoint (gcp method)")
    p.add_argument("--out", required=True, help="prototype JSON path")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="train the learned generator")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="GcpConfig fields as JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="select, rank and evaluate")
    _add_common_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-n", help="evaluate across prototype counts")
    _add_common_eval_flags(p)
    p.add_argument("--values", help="comma-separated N values, e.g. 1,2,3,6")
    p.set_defaults(func=cmd_sweep_n)

    p = sub.add_parser("sweep-alpha", help="evaluate across alpha values")
    _add_common_eval_flags(p)
    p.add_argument("--values", help="comma-separated alpha values")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("group-eval", help="per-bucket mAP by gallery size")
    _add_common_eval_flags(p)
    p.add_argument("--buckets", help="comma-separated buckets, e.g. 1-15,16-30,31+")
    p.set_defaults(func=cmd_group_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GcprotoError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
