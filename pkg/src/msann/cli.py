"""Command-line entry point: ``msann <subcommand> ...``.

Exit codes: 0 success, 1 data/file error, 2 configuration or lineage error,
3 numerical failure (non-finite gradients, failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import data as data_mod
from .errors import ConfigError, DataError, LineageError, NumericalError, VocabularyError
from .experiment import ExperimentConfig, evaluate_strategy, fusion_ablation, run_experiment, write_outputs
from .gradcheck import run_suite
from .metrics import Prediction, evaluate_files, format_record, report_render, report_table, write_predictions
from .annotate import annotate
from .model import AnnotationModel
from .train import STAGES, split_validation, train_stage

log = logging.getLogger("msann")

GRAD_TOL = 1e-3


def _config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.with_seed(args.seed)
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    return cfg


def _out(args, default):
    path = args.out or default
    os.makedirs(path, exist_ok=True)
    return path


def cmd_gen_data(args):
    cfg = _config(args)
    out = _out(args, "data")
    ds = data_mod.generate(cfg.synth)
    data_mod.save(ds, out)
    for split, ids in ds.splits.items():
        with open(os.path.join(out, f"truth_{split}.tsv"), "w", encoding="utf-8") as fh:
            for sid in ids:
                fh.write(format_record(sid, ds.samples[sid].labels) + "\n")
    print(f"wrote {len(ds.samples)} samples ({', '.join(f'{k}={len(v)}' for k, v in ds.splits.items())}) to {out}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    out = _out(args, "run")
    ds = data_mod.load(cfg.data_dir) if cfg.data_dir else data_mod.generate(cfg.synth)
    if args.checkpoint:
        model = AnnotationModel.load(args.checkpoint)
        if args.fusion_mode or args.no_tags:
            model = model.variant(fusion_mode=args.fusion_mode, use_tags=False if args.no_tags else None)
    else:
        mcfg = cfg.model_config(ds)
        if args.fusion_mode:
            mcfg.fusion.fusion_mode = args.fusion_mode
        mcfg.use_tags = not args.no_tags
        model = AnnotationModel(mcfg)
    stages = args.stage or ["1", "2", "3", "4", "5"]
    train, val = split_validation(ds.arrays("train"), cfg.train.val_fraction, cfg.seed)
    rows = []
    for stage in stages:
        if stage == "2" and model.fusion_mode == "none":
            continue
        if stage == "3" and not model.config.use_tags:
            continue
        train_stage(model, stage, train, cfg.train, val_arrays=val, log_rows=rows)
    ckpt = os.path.join(out, "model.ckpt")
    model.save(ckpt)
    with open(os.path.join(out, "training_log.csv"), "w", encoding="utf-8") as fh:
        fh.write("stage,step,lr,loss,val_hf1\n")
        for r in rows:
            fh.write(f"{r['stage']},{r['step']},{r['lr']:.6g},{r['loss']:.6g},{r['val_hf1']:.6g}\n")
    print(f"trained stages {','.join(stages)}; lineage {model.lineage}; checkpoint {ckpt}")
    return 0


def _require(args, *names):
    missing = [f"--{n}" for n in names if not getattr(args, n)]
    if missing:
        raise ConfigError(f"{args.command} needs {' '.join(missing)}")


def cmd_eval(args):
    if args.pred:
        _require(args, "truth")
        report = evaluate_files(args.pred, args.truth)
        text = report_render({os.path.basename(args.pred): report}, label="predictions")
    else:
        _require(args, "checkpoint", "data")
        model = AnnotationModel.load(args.checkpoint)
        ds = data_mod.load(args.data)
        arrays = ds.arrays(args.split)
        outputs = model.predict(arrays, with_quantity_cls="5c" in model.lineage)
        report = evaluate_strategy(outputs, arrays, args.strategy, model.config.max_quantity)
        text = report_render({args.strategy: report}, label="strategy")
    print(report_table({"result": report}, label=""), end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def cmd_annotate(args):
    _require(args, "checkpoint", "data")
    model = AnnotationModel.load(args.checkpoint)
    ds = data_mod.load(args.data)
    arrays = ds.arrays(args.split)
    outputs = model.predict(arrays, with_quantity_cls="5c" in model.lineage)
    res = annotate(outputs.probs, args.strategy, m_hat=outputs.m_hat, quantity_cls=outputs.quantity_cls,
                   truth_m=arrays.m, max_quantity=model.config.max_quantity)
    preds = [Prediction(sid, tuple(sorted(labels)), float(mh))
             for sid, labels, mh in zip(arrays.ids, res.labels, outputs.m_hat)]
    out = _out(args, ".")
    path = os.path.join(out, f"predictions_{args.split}.tsv")
    write_predictions(path, preds)
    names = ds.class_names
    for p in preds[: args.show]:
        print(p.id, " ".join(names[j] for j in p.labels), f"(m_hat={p.m_hat:.2f})")
    print(f"wrote {len(preds)} predictions to {path}")
    return 0


def cmd_gradcheck(args):
    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)
    results = run_suite(seeds)
    failed = [n for n, err in results.items() if not err <= GRAD_TOL]
    for name, err in results.items():
        print(f"{name:24s} {err:.3e}  {'ok' if err <= GRAD_TOL else 'FAIL'}")
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    out = _out(args, "ablation")
    if args.fusion:
        results = fusion_ablation(cfg)
        reports = {f"{mode}[{','.join(map(str, layers))}]": rep for (mode, layers), rep in results.items()}
        text = report_render(reports, label="fusion")
        with open(os.path.join(out, "fusion_ablation.csv"), "w", encoding="utf-8") as fh:
            fh.write(text)
        print(report_table(reports, label="fusion"), end="")
        return 0
    result = run_experiment(cfg)
    write_outputs(result, out)
    print(report_table(result.variants), end="")
    print()
    print(report_table(result.strategies, label="strategy"), end="")
    for name, (acc, mse) in result.lqp.items():
        print(f"LQP quality ({name}): accuracy {acc:.2f}%  mse {mse:.4f}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (INI sections fusion/synth/train/experiment)")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="msann", description="Multi-scale image annotation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate and save the synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train one or more stages")
    p.add_argument("--stage", action="append", choices=STAGES, help="repeatable; default 1..5")
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.add_argument("--checkpoint", help="continue from this checkpoint")
    p.add_argument("--fusion-mode", choices=("sum", "concat_avgpool", "maxpool_phi1", "none"))
    p.add_argument("--no-tags", action="store_true")

    for name, text in (("eval", "score a checkpoint or a prediction file"), ("annotate", "write label predictions")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint")
        p.add_argument("--data")
        p.add_argument("--split", default="test")
        p.add_argument("--strategy", default="lqp")
        if name == "eval":
            p.add_argument("--pred", help="prediction file (id<TAB>labels[<TAB>m_hat])")
            p.add_argument("--truth", help="truth file in the same format")
        else:
            p.add_argument("--show", type=int, default=5)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("ablate", parents=[common], help="variant grid and strategy comparison")
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.add_argument("--fusion", action="store_true", help="fusion mode / fused-layer ablation instead")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "annotate": cmd_annotate,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, LineageError, VocabularyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
