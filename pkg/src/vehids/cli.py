"""Command-line pipeline: synth, transform, tune, train, ensemble, evaluate.

Flags override config-file values, which override preset defaults. All
randomness flows from recorded seeds (``--seed``, else ``VEHIDS_SEED``,
else 0). Exit codes: 0 success, 1 usage/config error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, pso
from .artifacts import (
    content_hash,
    load_artifact,
    load_model,
    load_quantile_map,
    save_ensemble,
    save_model,
    save_quantile_map,
)
from .cnn import CnnModel
from .ensemble import AVERAGING, CONCATENATION, EnsembleModel, select_top_k
from .errors import ConfigError, DataError, NumericError, VehidsError
from .evaluation import (
    SUMMARY_HEADER,
    confusion,
    kfold_split,
    metrics,
    summary_row,
    time_inference,
)
from .ingest import (
    CAN_SCHEMA,
    FLOW_SCHEMA,
    DatasetSchema,
    SynthConfig,
    generate_synthetic_can,
    load_schema,
    load_synth_config,
    parse_can_log,
    parse_flow_csv,
    parse_labeled_can_csv,
    write_labeled_can_csv,
)
from .pipeline import (
    VARIANT_SPECS,
    build_image_set,
    build_strategy_ensemble,
    derive_seed,
    image_set_hash,
    images_to_arrays,
    train_variants,
    tune_hyperparameters,
    variant_name,
)
from .transform import CAN_CHUNK, FLOW_CHUNK, export_images, load_image_set

RUN_CONFIG_VERSION = 1

PRESETS = {
    "can": {"chunk": CAN_CHUNK, "schema": CAN_SCHEMA},
    "flow": {"chunk": FLOW_CHUNK, "schema": FLOW_SCHEMA},
    "synthetic": {"chunk": CAN_CHUNK, "schema": CAN_SCHEMA},
}

DEFAULT_SYNTH_MIX = {
    "Normal": 0.5, "DoS": 0.125, "Fuzzy": 0.125, "Gear": 0.125, "RPM": 0.125,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors must exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _seed_from(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("VEHIDS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"VEHIDS_SEED={env!r} is not an integer")
    return 0


def _load_run_config(path) -> dict:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("version") != RUN_CONFIG_VERSION:
        raise ConfigError(
            f"run config version {raw.get('version')!r} != {RUN_CONFIG_VERSION}"
        )
    return raw


def _merge_config(args, subparser: argparse.ArgumentParser, section: str) -> None:
    """Config-file values fill in flags the user left at their defaults."""
    if not getattr(args, "config", None):
        return
    raw = _load_run_config(args.config)
    values = dict(raw.get(section, {}))
    values.update({k: v for k, v in raw.items() if not isinstance(v, dict) and k != "version"})
    defaults = {a.dest: a.default for a in subparser._actions}
    for key, value in values.items():
        if not hasattr(args, key):
            continue
        if key in defaults and getattr(args, key) == defaults[key]:
            setattr(args, key, value)


def _write_manifest(out_dir: Path, stage: str, config: dict, seeds: dict,
                    outputs: dict, wall: float) -> None:
    doc = {
        "version": 1,
        "tool_version": __version__,
        "stage": stage,
        "config": config,
        "seeds": seeds,
        "outputs": outputs,
        "wall_seconds": {stage: round(wall, 3)},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _mix_from_string(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        if not value:
            raise ConfigError(f"bad mix entry {part!r}; expected Class=proportion")
        out[name.strip()] = float(value)
    return out


def _synth_config(args, seed: int) -> SynthConfig:
    if getattr(args, "synth_config", None):
        return load_synth_config(args.synth_config)
    mix = _mix_from_string(args.mix) if args.mix else dict(DEFAULT_SYNTH_MIX)
    return SynthConfig(n_records=args.n_records, attack_mix=mix, rng_seed=seed)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = _seed_from(args)
    config = _synth_config(args, seed)
    records = generate_synthetic_can(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_labeled_can_csv(records, CAN_SCHEMA, out)
    print(f"wrote {len(records)} records to {out}")
    return 0


def _parse_inputs(args, schema: DatasetSchema) -> list:
    """Each --input is PATH or PATH=ATTACK_CLASS; the class is inferred
    from the filename when omitted (e.g. DoS_dataset.csv -> DoS)."""
    sources = []
    for item in args.input:
        path, _, cls = item.partition("=")
        attack = cls or None
        if attack is None:
            stem = Path(path).name.lower()
            for name in schema.class_names[1:]:
                if name.lower() in stem:
                    attack = name
                    break
        if args.preset == "flow":
            sources.append(parse_flow_csv(path, schema))
        elif args.preset == "synthetic":
            sources.append(parse_labeled_can_csv(path, schema))
        else:
            sources.append(parse_can_log(path, schema, attack_class=attack))
    return sources


def cmd_transform(args) -> int:
    started = time.perf_counter()
    seed = _seed_from(args)
    preset = PRESETS[args.preset]
    schema = load_schema(args.schema) if args.schema else preset["schema"]
    chunk = preset["chunk"]

    if args.preset == "synthetic" and not args.input:
        config = _synth_config(args, seed)
        sources = [generate_synthetic_can(config, schema)]
        source_desc = f"synthetic(seed={config.rng_seed}, n={config.n_records})"
    else:
        if not args.input:
            raise ConfigError("transform needs --input files (or the synthetic preset)")
        for item in args.input:
            path = item.partition("=")[0]
            if not Path(path).exists():
                raise DataError(f"input file not found: {path}")
        sources = _parse_inputs(args, schema)
        source_desc = ",".join(args.input)

    qmap, images = build_image_set(
        sources, chunk,
        n_quantiles=args.n_quantiles, clip_sigma=args.clip_sigma,
        fit_fraction=args.fit_fraction, fit_source=source_desc,
        attack_priority=(args.label_mode == "attack-priority"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_images(images, out, schema.class_names)
    qmap_hash = save_quantile_map(qmap, out / "quantile_map.artifact")
    set_hash = image_set_hash(images)

    _write_manifest(
        out, "transform",
        config={
            "preset": args.preset, "inputs": source_desc,
            "n_quantiles": args.n_quantiles, "clip_sigma": args.clip_sigma,
            "fit_fraction": args.fit_fraction, "label_mode": args.label_mode,
            "chunk": [chunk.height, chunk.width, chunk.channels],
        },
        seeds={"seed": seed},
        outputs={"image_set": set_hash, "quantile_map": qmap_hash,
                 "n_images": len(images)},
        wall=time.perf_counter() - started,
    )
    print(f"transformed {sum(len(s) for s in sources)} records into "
          f"{len(images)} images ({chunk.height}x{chunk.width}x3) at {out}")
    return 0


def cmd_tune(args) -> int:
    started = time.perf_counter()
    seed = _seed_from(args)
    x, y = load_image_set(args.images)
    pretrained = load_model(args.pretrained) if args.pretrained else None
    best, score, trace = tune_hyperparameters(
        x, y, variant=args.variant, swarm_size=args.swarm_size,
        iterations=args.iterations, seed=seed, skip=args.skip_hpo,
        pretrained=pretrained,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {"version": 1, "hyperparameters": best,
           "objective_macro_f1": None if score != score else score,
           "skipped_hpo": bool(args.skip_hpo), "seed": seed}
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if trace is not None:
        trace_path = out.with_suffix(".trace.tsv")
        lines = ["iteration\tbest_score\tbest_assignment"]
        for i, (s, a) in enumerate(zip(trace.best_scores, trace.best_assignments), 1):
            lines.append(f"{i}\t{s:.6f}\t{json.dumps(a, sort_keys=True)}")
        trace_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"tuned over {len(trace.best_scores)} iterations; "
              f"best macro-F1 {score:.4f}; wrote {out}")
    else:
        print(f"using reported optimal hyper-parameters; wrote {out}")
    print(f"({time.perf_counter() - started:.1f}s)")
    return 0


def _load_hyper(path) -> dict:
    if path is None:
        return dict(pso.OPTIMAL_HYPERPARAMS)
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return raw.get("hyperparameters", raw)


def cmd_train(args) -> int:
    started = time.perf_counter()
    seed = _seed_from(args)
    x, y = load_image_set(args.images)
    hyper = _load_hyper(args.hyper)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    report_doc = {
        "version": 1, "seed": seed, "hyper": hyper,
        "n_variants": args.variants, "mode": "cv" if args.folds else "split",
        "folds": [], "models": {},
    }
    if args.folds:
        plan = kfold_split(len(y), args.folds, y, derive_seed(seed, 11))
        fold_sets = [plan.train_test(f) for f in range(args.folds)]
        report_doc["fold_plan"] = [list(map(int, t)) for _, t in fold_sets]
    else:
        holdout = max(1, int(len(y) * (1.0 - args.split)))
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 11)))
        order = rng.permutation(len(y))
        fold_sets = [(np.sort(order[holdout:]), np.sort(order[:holdout]))]
        report_doc["fold_plan"] = [list(map(int, fold_sets[0][1]))]

    for f, (train_idx, _) in enumerate(fold_sets):
        variants, _ = train_variants(
            x[train_idx], y[train_idx], hyper, args.variants, derive_seed(seed, f)
        )
        fold_entry = []
        for tv in variants:
            fname = f"fold{f}_{tv.name}.model"
            model_hash = save_model(tv.model, out / fname)
            fold_entry.append({
                "variant": tv.variant, "name": tv.name, "file": fname,
                "val_macro_f1": tv.val_macro_f1, "hash": model_hash,
                "stopped_epoch": tv.report.stopped_epoch,
                "best_epoch": tv.report.best_epoch,
                "train_seconds": round(tv.report.wall_seconds, 3),
            })
            report_doc["models"][fname] = model_hash
        report_doc["folds"].append(fold_entry)
        diverged = [e["name"] for e in fold_entry if e["val_macro_f1"] != e["val_macro_f1"]]
        if diverged:
            print(f"fold {f}: divergence reported for {diverged}", file=sys.stderr)

    (out / "train_report.json").write_text(
        json.dumps(report_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_manifest(
        out, "train",
        config={"hyper": hyper, "variants": args.variants,
                "folds": args.folds, "split": args.split},
        seeds={"seed": seed},
        outputs=report_doc["models"],
        wall=time.perf_counter() - started,
    )
    n_models = sum(len(fe) for fe in report_doc["folds"])
    print(f"trained {n_models} models into {out}")
    return 0


def _strategies_from(arg: str) -> tuple[str, ...]:
    if arg == "both":
        return (AVERAGING, CONCATENATION)
    if arg == "averaging":
        return (AVERAGING,)
    if arg == "concatenation":
        return (CONCATENATION,)
    raise ConfigError(f"unknown strategy {arg!r}")


def cmd_ensemble(args) -> int:
    started = time.perf_counter()
    seed = _seed_from(args)
    x, y = load_image_set(args.images)
    num_classes = int(y.max()) + 1
    models_dir = Path(args.models)
    report_path = models_dir / "train_report.json"
    if not report_path.exists():
        raise DataError(f"missing base models: no train_report.json in {models_dir}")
    train_doc = json.loads(report_path.read_text(encoding="utf-8"))
    hyper = train_doc["hyper"]
    base_seed = train_doc["seed"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    strategies = _strategies_from(args.strategy)
    pooled_true, pooled_pred = [], {s: [] for s in strategies}
    artifacts = {}
    for f, fold_entry in enumerate(train_doc["folds"]):
        test_idx = np.asarray(train_doc["fold_plan"][f], dtype=np.int64)
        mask = np.ones(len(y), dtype=bool)
        mask[test_idx] = False
        train_idx = np.flatnonzero(mask)

        models, scores, files = [], [], []
        for entry in fold_entry:
            path = models_dir / entry["file"]
            if not path.exists():
                raise DataError(f"missing base model file: {path}")
            models.append(load_model(path))
            scores.append(entry["val_macro_f1"])
            files.append(path)
        if args.k > len(models):
            raise DataError(f"fold {f} has {len(models)} models, need k={args.k}")
        order = list(np.argsort(-np.asarray(scores), kind="stable")[: args.k])
        top_models = [models[i] for i in order]
        top_files = [files[i] for i in order]

        from .evaluation import stratified_holdout
        tr_idx, val_idx = stratified_holdout(
            y[train_idx], 0.2, derive_seed(base_seed, 97)
        )
        tr = (x[train_idx][tr_idx], y[train_idx][tr_idx])
        val = (x[train_idx][val_idx], y[train_idx][val_idx])

        pooled_true.append(y[test_idx])
        for strategy in strategies:
            ens = build_strategy_ensemble(
                strategy, top_models, tr, val, hyper, derive_seed(seed, f, 7)
            )
            from .ensemble import predict_labels
            pooled_pred[strategy].append(predict_labels(ens, x[test_idx]))
            ens_path = out / f"fold{f}_{strategy}.ensemble"
            artifacts[ens_path.name] = save_ensemble(ens, ens_path, base_paths=top_files)

    true_all = np.concatenate(pooled_true)
    rows = [SUMMARY_HEADER]
    for strategy in strategies:
        matrix = confusion(true_all, np.concatenate(pooled_pred[strategy]), num_classes)
        rep = metrics(matrix)
        timing = None
        if len(x) >= 100:
            ens = load_artifact(out / f"fold{len(train_doc['folds']) - 1}_{strategy}.ensemble",
                                model_dir=models_dir)
            timing = time_inference(ens, x[: min(len(x), 1000)], repetitions=1,
                                    training_seconds=time.perf_counter() - started)
        rows.append(summary_row(strategy, rep, timing))
        print(f"{strategy}: macro-F1 {rep.macro_f1:.5f} accuracy {rep.accuracy:.5f}")

    (out / "metrics.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    _write_manifest(
        out, "ensemble",
        config={"strategy": args.strategy, "k": args.k},
        seeds={"seed": seed},
        outputs=artifacts,
        wall=time.perf_counter() - started,
    )
    print(f"wrote ensemble artifacts and metrics.tsv to {out}")
    return 0


def cmd_evaluate(args) -> int:
    x, y = load_image_set(args.images)
    num_classes = int(y.max()) + 1
    obj = load_artifact(args.artifact, model_dir=args.model_dir)
    if isinstance(obj, EnsembleModel):
        from .ensemble import predict_labels
        preds = predict_labels(obj, x)
        name = f"ensemble[{obj.strategy}]"
    elif isinstance(obj, CnnModel):
        from .pipeline import _batched_labels
        preds = _batched_labels(obj, x)
        name = "model"
    else:
        raise ConfigError(f"{args.artifact}: not a model or ensemble artifact")
    rep = metrics(confusion(y, preds, num_classes))
    timing = None
    if len(x) >= 100:
        timing = time_inference(obj, x[: min(len(x), 1000)])
    print(SUMMARY_HEADER)
    print(summary_row(name, rep, timing))
    if args.out:
        Path(args.out).write_text(
            SUMMARY_HEADER + "\n" + summary_row(name, rep, timing) + "\n",
            encoding="utf-8",
        )
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vehids", description=__doc__)
    parser.add_argument("--version", action="version", version=f"vehids {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parser._vehids_subparsers = {}

    def add_common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="global seed (default: $VEHIDS_SEED, else 0)")
        p.add_argument("--config", default=None, help="run-config JSON file")

    p = sub.add_parser("synth", help="generate a labeled synthetic CAN capture")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-records", type=int, default=50_000)
    p.add_argument("--mix", default=None, help="Class=prop,... (sums to 1)")
    p.add_argument("--synth-config", default=None, help="synth config JSON")
    p.set_defaults(fn=cmd_synth, section="synth")

    p = sub.add_parser("transform", help="records -> quantile-normalized images")
    add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), required=True)
    p.add_argument("--input", action="append", default=[],
                   help="input file, optionally PATH=ATTACK_CLASS; repeatable")
    p.add_argument("--out", required=True)
    p.add_argument("--schema", default=None, help="dataset schema JSON")
    p.add_argument("--n-quantiles", type=int, default=1000)
    p.add_argument("--clip-sigma", type=float, default=5.0)
    p.add_argument("--fit-fraction", type=float, default=0.8)
    p.add_argument("--label-mode", choices=["attack-priority", "plurality"],
                   default="attack-priority")
    p.add_argument("--n-records", type=int, default=50_000)
    p.add_argument("--mix", default=None)
    p.add_argument("--synth-config", default=None)
    p.set_defaults(fn=cmd_transform, section="transform")

    p = sub.add_parser("tune", help="PSO hyper-parameter search")
    add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", type=int, default=0,
                   help=f"variant index 0..{len(VARIANT_SPECS) - 1} "
                        f"({', '.join(variant_name(i) for i in range(len(VARIANT_SPECS)))})")
    p.add_argument("--swarm-size", type=int, default=8)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--skip-hpo", action="store_true",
                   help="use the reported optimal values; no search")
    p.add_argument("--pretrained", default=None, help="model artifact to fine-tune")
    p.set_defaults(fn=cmd_tune, section="tune")

    p = sub.add_parser("train", help="train the compact CNN variants")
    add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hyper", default=None, help="tuned hyper-parameter JSON")
    p.add_argument("--variants", type=int, default=5)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--folds", type=int, default=5)
    group.add_argument("--split", type=float, default=None,
                       help="train fraction for a fixed split instead of CV")
    p.set_defaults(fn=cmd_train, section="train")

    p = sub.add_parser("ensemble", help="combine top-k models and evaluate")
    add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--models", required=True, help="output dir of `train`")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=["averaging", "concatenation", "both"],
                   default="both")
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(fn=cmd_ensemble, section="ensemble")

    p = sub.add_parser("evaluate", help="evaluate a persisted model/ensemble")
    add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--model-dir", default=None,
                   help="directory of base models (for ensemble artifacts)")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_evaluate, section="evaluate")

    parser._vehids_subparsers = dict(sub.choices)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "split", None) is not None:
            args.folds = None
        _merge_config(args, parser._vehids_subparsers[args.command],
                      getattr(args, "section", ""))
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except VehidsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
