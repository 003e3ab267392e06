"""Command-line front end for the whole pipeline.

Verbs: phantom generate, dataset split, preprocess run, train, evaluate,
ablate-weights, ablate-ffl, loss-matrix, report, panel.  Exit codes: 0 on
success, 2 when inputs fail validation, 3 on runtime failure.
"""

import argparse
import json
import os
import sys

from kv2mv import dataio, experiments, metrics, pipeline, trainer
from kv2mv.dataio import CorruptionError
from kv2mv.model import ModelConfig
from kv2mv.phantomgen import PhantomSpec
from kv2mv.trainer import TrainConfig

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _configs_from(path, seed=None, epochs=None, patience=None):
    raw = _load_json(path) if path else {}
    model_config = ModelConfig.from_dict(raw.get("model", {}))
    train_config = TrainConfig.from_dict(raw.get("train", {}))
    if seed is not None:
        train_config.seed = seed
    if epochs is not None:
        train_config.max_epochs = epochs
        train_config.patience = min(train_config.patience, epochs)
    if patience is not None:
        train_config.patience = patience
    return model_config, train_config


def cmd_phantom_generate(args):
    spec = PhantomSpec(**(_load_json(args.spec) if args.spec else {}))
    spec.validate()
    path = pipeline.generate_cohort(spec, args.patients, args.seed, args.out)
    print(f"wrote cohort catalog {path}")
    return EXIT_OK


def cmd_dataset_split(args):
    fractions = tuple(float(x) for x in args.fractions.split(","))
    if len(fractions) != 3:
        raise ValueError(f"expected 3 comma-separated fractions, got {args.fractions!r}")
    catalog = dataio.read_catalog(args.catalog)
    split = dataio.split_by_patient(catalog, fractions=fractions, seed=args.seed)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.catalog)), "split.json")
    dataio.write_split(split, out)
    counts = {s: len(split.patients(s)) for s in dataio.SPLITS}
    print(f"wrote {out} ({counts})")
    return EXIT_OK


def cmd_preprocess_run(args):
    path = pipeline.preprocess_run(args.in_dir, args.out, max_shift=args.max_shift)
    print(f"wrote preprocessed pairs manifest {path}")
    return EXIT_OK


def cmd_train(args):
    model_config, train_config = _configs_from(args.config, args.seed, args.epochs, args.patience)
    datasets = pipeline.load_datasets(args.data)
    sets = datasets[train_config.dataset]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(
            {"model": model_config.to_dict(), "train": train_config.to_dict()},
            f,
            indent=1,
            sort_keys=True,
        )
    _, log = trainer.train(
        model_config,
        train_config,
        {"train": sets["train"], "validation": sets["validation"]},
        out_dir=args.out,
        resume_from=args.resume,
    )
    print(f"trained {len(log)} epochs, run dir {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    datasets = pipeline.load_datasets(args.data)
    pairs = datasets[args.dataset][args.split]
    if not pairs:
        raise ValueError(f"no pairs in {args.dataset}/{args.split}")
    split_tag = {"train": "Tr", "validation": "Val", "test": "Ts"}[args.split]
    if args.identity_baseline:
        records = experiments.identity_records(pairs, args.dataset, split=split_tag)
    else:
        if not args.checkpoint:
            raise ValueError("--checkpoint is required unless --identity-baseline is set")
        net = trainer.load_model_from_checkpoint(args.checkpoint)
        loss_id = os.path.basename(os.path.dirname(os.path.dirname(args.checkpoint))) or "model"
        records = experiments.evaluate_model(net, pairs, args.dataset, loss_id, split=split_tag)
    os.makedirs(args.out, exist_ok=True)
    metrics.write_records(records, os.path.join(args.out, "records.json"))
    metrics.write_report_csv(metrics.aggregate(records), os.path.join(args.out, "metrics.csv"))
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def _make_plan(args, name):
    model_config, train_config = _configs_from(args.config, args.seed, args.epochs, args.patience)
    return experiments.ExperimentPlan(
        name=name,
        grid=[(train_config.loss, train_config.dataset)],
        model_config=model_config,
        train_config=train_config,
        output_dir=args.out,
    )


def cmd_ablate_weights(args):
    plan = _make_plan(args, "weight-ablation")
    datasets = pipeline.load_datasets(args.data)
    rows = experiments.run_weight_ablation(plan, datasets)
    print(f"weight ablation complete: {len(rows)} runs in {args.out}")
    return EXIT_OK


def cmd_ablate_ffl(args):
    plan = _make_plan(args, "ffl-grid")
    datasets = pipeline.load_datasets(args.data)
    summary = experiments.run_ffl_grid(plan, datasets)
    print(
        f"ffl grid complete in {args.out} "
        f"(psnr decreases with alpha: {summary['psnr_decreases_with_alpha']})"
    )
    return EXIT_OK


def cmd_loss_matrix(args):
    plan = _make_plan(args, "loss-matrix")
    datasets = pipeline.load_datasets(args.data)
    rows = experiments.run_loss_matrix(plan, datasets)
    print(f"loss matrix complete: {len(rows)} report rows in {args.out}")
    return EXIT_OK


def cmd_report(args):
    rows = experiments.write_report(args.out, footer=args.footer)
    print(f"report.csv regenerated with {len(rows)} rows in {args.out}")
    return EXIT_OK


def cmd_panel(args):
    datasets = pipeline.load_datasets(args.data)
    pairs = datasets["D_All"]["test"] or datasets["D_All"]["train"]
    if args.patient is not None:
        pairs = [p for p in pairs if p.patient_id == args.patient]
    if args.slice is not None:
        pairs = [p for p in pairs if p.slice_index == args.slice]
    pair = next((p for p in pairs if p.is_artifact), pairs[0] if pairs else None)
    if pair is None:
        raise ValueError("no matching slice for the panel")
    stats = experiments.render_reconstruction_panel(args.runs, pair, args.out)
    print(f"panel written to {args.out} ({len(stats)} cells)")
    return EXIT_OK


def _add_train_opts(p):
    p.add_argument("--config", help="JSON file with model/train config overrides")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None, help="override max_epochs (smoke runs)")
    p.add_argument("--patience", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="kv2mv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_phantom = sub.add_parser("phantom", help="synthetic cohort generation")
    phantom_sub = p_phantom.add_subparsers(dest="subcommand", required=True)
    p = phantom_sub.add_parser("generate", help="generate paired kV/MV volumes")
    p.add_argument("--spec", help="JSON file with PhantomSpec fields")
    p.add_argument("--patients", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom_generate)

    p_dataset = sub.add_parser("dataset", help="catalog-level operations")
    dataset_sub = p_dataset.add_subparsers(dest="subcommand", required=True)
    p = dataset_sub.add_parser("split", help="patient-level train/val/test split")
    p.add_argument("--catalog", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="0.7,0.2,0.1")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_split)

    p_pre = sub.add_parser("preprocess", help="alignment and normalization")
    pre_sub = p_pre.add_subparsers(dest="subcommand", required=True)
    p = pre_sub.add_parser("run", help="align, classify, normalize, mask")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-shift", type=int, default=8)
    p.set_defaults(func=cmd_preprocess_run)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True, help="preprocessed directory with split.json")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="resume from a last.ckpt")
    _add_train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="masked metrics for a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", choices=["D_All", "D_Art"], default="D_All")
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--identity-baseline", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    for verb, fn in (
        ("ablate-weights", cmd_ablate_weights),
        ("ablate-ffl", cmd_ablate_ffl),
        ("loss-matrix", cmd_loss_matrix),
    ):
        p = sub.add_parser(verb, help=f"run the {verb.replace('-', ' ')} study")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        _add_train_opts(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("report", help="regenerate report.csv from run directories")
    p.add_argument("--out", required=True, help="experiment directory containing runs/")
    p.add_argument("--footer")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("panel", help="qualitative reconstruction grid")
    p.add_argument("--data", required=True)
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patient")
    p.add_argument("--slice", type=int)
    p.set_defaults(func=cmd_panel)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CorruptionError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
