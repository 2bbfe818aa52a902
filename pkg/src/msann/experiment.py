"""Component ablation grid, label-quantity strategy comparison, and fusion ablations."""
from __future__ import annotations

import configparser
import csv
import io
import logging
import os
from dataclasses import dataclass, field, fields

from . import data as data_mod
from .annotate import annotate, parse_strategy, selection_matrix
from .errors import ConfigError
from .fusion import FusionNetConfig
from .metrics import compute_metrics, lqp_quality, report_render, tally_matrices
from .model import AnnotationModel, ModelConfig
from .train import TrainConfig, split_validation, train_stage

log = logging.getLogger(__name__)

VARIANTS = ("Upper bound", "MS-CNN+Tags+LQP", "MS-CNN+LQP", "MS-CNN+Tags", "MS-CNN", "CNN")
STRATEGY_GRID = ("lqp", "lqp-cls", "topk:1", "topk:2", "topk:3",
                 "threshold:0.1", "threshold:0.3", "threshold:0.5", "threshold:0.7", "gt")


@dataclass
class ExperimentConfig:
    synth: data_mod.SynthConfig = field(default_factory=data_mod.SynthConfig)
    fusion: FusionNetConfig = field(default_factory=FusionNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tag_hidden: int = 64
    regressor_hidden: tuple = (32, 16)
    dropout: float = 0.5
    topk: int = 3
    seed: int = 0
    data_dir: str | None = None

    def model_config(self, dataset):
        return ModelConfig(
            num_classes=dataset.num_classes,
            vocab_size=len(dataset.vocab),
            fusion=FusionNetConfig(**{f.name: getattr(self.fusion, f.name) for f in fields(FusionNetConfig)}),
            use_tags=True,
            tag_hidden=self.tag_hidden,
            regressor_hidden=tuple(self.regressor_hidden),
            dropout=self.dropout,
            max_quantity=dataset.max_quantity,
            bn_decay=self.train.bn_decay,
            seed=self.seed,
        )

    def with_seed(self, seed):
        self.seed = seed
        self.synth.seed = seed
        self.train.seed = seed
        return self

    # -- config file ---------------------------------------------------
    def to_text(self):
        cp = configparser.ConfigParser()
        cp.read_string(self.fusion.to_text())
        cp["synth"] = self.synth.to_items()
        t = self.train
        cp["train"] = {
            **{f"lr.{k}": repr(v) for k, v in t.lr.items()},
            **{f"steps.{k}": str(v) for k, v in t.stage_steps.items()},
            "lr_decay": repr(t.lr_decay),
            "decay_interval": str(t.decay_interval),
            "max_steps": str(t.max_steps),
            "eval_interval": str(t.eval_interval),
            "patience": str(t.patience),
            "momentum": repr(t.momentum),
            "weight_decay_rate": repr(t.weight_decay_rate),
            "bn_decay": repr(t.bn_decay),
            "batch_size": str(t.batch_size),
            "val_fraction": repr(t.val_fraction),
            "mean_loss": str(t.mean_loss).lower(),
        }
        cp["experiment"] = {
            "seed": str(self.seed),
            "tag_hidden": str(self.tag_hidden),
            "regressor_hidden": ",".join(map(str, self.regressor_hidden)),
            "dropout": repr(self.dropout),
            "topk": str(self.topk),
        }
        if self.data_dir:
            cp["experiment"]["data_dir"] = self.data_dir
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        cfg = cls()
        try:
            if "fusion" in cp:
                cfg.fusion = FusionNetConfig.from_section(cp["fusion"])
            if "synth" in cp:
                cfg.synth = data_mod.SynthConfig.from_items(dict(cp["synth"]))
            if "train" in cp:
                sec = cp["train"]
                t = TrainConfig()
                for key, value in sec.items():
                    if key.startswith("lr."):
                        t.lr[key[3:]] = float(value)
                    elif key.startswith("steps."):
                        t.stage_steps[key[6:]] = int(value)
                    elif key == "mean_loss":
                        t.mean_loss = sec.getboolean(key)
                    elif key in {f.name for f in fields(TrainConfig)}:
                        current = getattr(t, key)
                        setattr(t, key, type(current)(float(value)) if isinstance(current, int) else float(value))
                    else:
                        raise ConfigError(f"unknown [train] key {key!r}")
                cfg.train = t
            if "experiment" in cp:
                sec = cp["experiment"]
                cfg.tag_hidden = sec.getint("tag_hidden", cfg.tag_hidden)
                if "regressor_hidden" in sec:
                    cfg.regressor_hidden = tuple(int(v) for v in sec["regressor_hidden"].split(","))
                cfg.dropout = sec.getfloat("dropout", cfg.dropout)
                cfg.topk = sec.getint("topk", cfg.topk)
                cfg.data_dir = sec.get("data_dir", cfg.data_dir)
                if "seed" in sec:
                    cfg.with_seed(sec.getint("seed"))
        except ValueError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        cfg.fusion.validate()
        cfg.synth.validate()
        cfg.train.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_text(fh.read())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc


@dataclass
class ExperimentResult:
    variants: dict
    strategies: dict
    lqp: dict
    log_rows: list
    models: dict = field(default_factory=dict)

    def metrics_csv(self):
        return report_render(self.variants, label="model")

    def strategies_csv(self):
        return report_render(self.strategies, label="strategy")

    def log_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["variant", "stage", "step", "lr", "loss", "val_hf1"],
                                lineterminator="\n")
        writer.writeheader()
        for row in self.log_rows:
            writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def evaluate_strategy(outputs, arrays, strategy, max_quantity):
    strategy = parse_strategy(strategy)
    res = annotate(outputs.probs, strategy, m_hat=outputs.m_hat, quantity_cls=outputs.quantity_cls,
                   truth_m=arrays.m, max_quantity=max_quantity)
    report = compute_metrics(tally_matrices(selection_matrix(res, arrays.y.shape[1]), arrays.y))
    if strategy.kind == "lqp":
        report.lqp_accuracy, report.lqp_mse = lqp_quality(outputs.m_hat, arrays.m, max_quantity)
    return report


def load_dataset(config):
    if config.data_dir:
        return data_mod.load(config.data_dir)
    return data_mod.generate(config.synth)


def _train(model, stages, train, val, cfg, rows, tag):
    for stage in stages:
        before = len(rows)
        train_stage(model, stage, train, cfg, val_arrays=val, log_rows=rows)
        for row in rows[before:]:
            row["variant"] = tag


def train_feature_branches(model, train, val, cfg, rows):
    _train(model, ("1", "2", "3"), train, val, cfg, rows, "shared")
    return model


def run_experiment(config, dataset=None, out_dir=None):
    """Train the shared branches once, then heads per variant; score on the test split."""
    dataset = load_dataset(config) if dataset is None else dataset
    full_train = dataset.arrays("train")
    test = dataset.arrays("test")
    train, val = split_validation(full_train, config.train.val_fraction, config.seed)
    max_q = dataset.max_quantity
    rows = []

    base = AnnotationModel(config.model_config(dataset))
    train_feature_branches(base, train, val, config.train, rows)

    cnn = base.variant(fusion_mode="none", use_tags=False)
    ms = base.variant(use_tags=False)
    mst = base
    _train(cnn, ("4",), train, val, config.train, rows, "CNN")
    _train(ms, ("4", "5", "5c"), train, val, config.train, rows, "MS-CNN")
    _train(mst, ("4", "5"), train, val, config.train, rows, "MS-CNN+Tags")

    out = {
        "CNN": cnn.predict(test),
        "MS-CNN": ms.predict(test, with_quantity_cls=True),
        "MS-CNN+Tags": mst.predict(test),
    }
    topk = f"topk:{config.topk}"
    variants = {
        "Upper bound": evaluate_strategy(out["MS-CNN+Tags"], test, "gt", max_q),
        "MS-CNN+Tags+LQP": evaluate_strategy(out["MS-CNN+Tags"], test, "lqp", max_q),
        "MS-CNN+LQP": evaluate_strategy(out["MS-CNN"], test, "lqp", max_q),
        "MS-CNN+Tags": evaluate_strategy(out["MS-CNN+Tags"], test, topk, max_q),
        "MS-CNN": evaluate_strategy(out["MS-CNN"], test, topk, max_q),
        "CNN": evaluate_strategy(out["CNN"], test, topk, max_q),
    }
    strategies = {s: evaluate_strategy(out["MS-CNN"], test, s, max_q) for s in STRATEGY_GRID}
    lqp = {
        "MS-CNN": lqp_quality(out["MS-CNN"].m_hat, test.m, max_q),
        "MS-CNN+Tags": lqp_quality(out["MS-CNN+Tags"].m_hat, test.m, max_q),
    }
    result = ExperimentResult(variants, strategies, lqp, rows, {"CNN": cnn, "MS-CNN": ms, "MS-CNN+Tags": mst})
    if out_dir:
        write_outputs(result, out_dir)
    return result


def write_outputs(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.metrics_csv())
    with open(os.path.join(out_dir, "strategies.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.strategies_csv())
    with open(os.path.join(out_dir, "training_log.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.log_csv())
    with open(os.path.join(out_dir, "lqp_quality.csv"), "w", encoding="utf-8") as fh:
        fh.write("features,accuracy,mse\n")
        for name, (acc, mse) in result.lqp.items():
            fh.write(f"{name},{acc:.2f},{mse:.4f}\n")
    for name, model in result.models.items():
        model.save(os.path.join(out_dir, f"{name.lower().replace('+', '_')}.ckpt"))


def fusion_ablation(config, dataset=None, modes=("sum", "concat_avgpool", "maxpool_phi1"), layer_sets=None):
    """H-F1 (top-k) per (fusion mode, fused layer suffix) on a shared main branch."""
    dataset = load_dataset(config) if dataset is None else dataset
    train, val = split_validation(dataset.arrays("train"), config.train.val_fraction, config.seed)
    test = dataset.arrays("test")
    K = config.fusion.K
    layer_sets = layer_sets or [tuple(range(s, K + 1)) for s in range(1, K)]
    rows = []
    mcfg = config.model_config(dataset)
    mcfg.use_tags = False
    mcfg.fusion.fusion_mode = "none"
    trunk = AnnotationModel(mcfg)
    train_stage(trunk, "1", train, config.train, val_arrays=val, log_rows=rows)
    train_stage(trunk, "4", train, config.train, val_arrays=val, log_rows=rows)
    results = {("none", (K,)): evaluate_strategy(trunk.predict(test), test, f"topk:{config.topk}", dataset.max_quantity)}
    for mode in modes:
        for layers in layer_sets:
            cfg = config.model_config(dataset)
            cfg.use_tags = False
            cfg.fusion.fusion_mode = mode
            cfg.fusion.fused_layers = tuple(layers)
            model = AnnotationModel(cfg)
            model.visual.main = trunk.visual.main
            model.lineage = ["1"]
            train_stage(model, "2", train, config.train, val_arrays=val, log_rows=rows)
            train_stage(model, "4", train, config.train, val_arrays=val, log_rows=rows)
            results[(mode, tuple(layers))] = evaluate_strategy(
                model.predict(test), test, f"topk:{config.topk}", dataset.max_quantity
            )
    return results


def describe(result):
    lines = [result.metrics_csv(), result.strategies_csv()]
    for name, (acc, mse) in result.lqp.items():
        lines.append(f"LQP quality ({name}): accuracy {acc:.2f}%  mse {mse:.4f}")
    return "\n".join(lines)
