"""Stage-wise and end-to-end training.

Stages and the parameters they own:

    1    visual.main, aux.cnn          main CNN with its own classifier
    2    visual.fusion, aux.ms         fusion blocks on the frozen main CNN
    3    text, aux.text                tag MLP with its own classifier
    4    classifier                    label head on frozen features
    5    regressor                     quantity regressor on frozen features
    5c   quantity_classifier           classification-style quantity baseline
    e2e  fusion, text, classifier, regressor   summed L_cls + L_reg

Frozen modules run in eval mode, so their batch-norm statistics do not
move either.  Where the trainable part sits on top of frozen modules, the
frozen outputs are computed once and reused across steps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .annotate import annotate, selection_matrix
from .errors import ConfigError, LineageError
from .fusion import fuse_maps
from .heads import classify, cls_loss, quantity_cls_loss, quantity_regress, reg_loss
from .metrics import compute_metrics, tally_matrices
from .optim import SGD, step_lr
from .tags import joint_feature

log = logging.getLogger(__name__)

STAGES = ("1", "2", "3", "4", "5", "5c", "e2e")

OWNERS = {
    "1": ("visual.main.", "aux.cnn."),
    "2": ("visual.fusion.", "aux.ms."),
    "3": ("text.", "aux.text."),
    "4": ("classifier.",),
    "5": ("regressor.",),
    "5c": ("quantity_classifier.",),
    "e2e": ("visual.fusion.", "text.", "classifier.", "regressor."),
}


@dataclass
class TrainConfig:
    lr: dict = field(default_factory=lambda: {
        "1": 0.003, "2": 0.003, "3": 0.003, "4": 3e-4, "5": 1e-5, "5c": 1e-5, "e2e": 1e-5,
    })
    lr_decay: float = 0.1
    decay_interval: int = 2000
    max_steps: int = 6000
    stage_steps: dict = field(default_factory=dict)
    eval_interval: int = 250
    patience: int = 5
    momentum: float = 0.9
    weight_decay_rate: float = 0.9997
    bn_decay: float = 0.99
    batch_size: int = 32
    val_fraction: float = 0.1
    mean_loss: bool = False
    seed: int = 0

    def validate(self):
        if any(v <= 0 for v in self.lr.values()):
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 < self.weight_decay_rate <= 1.0:
            raise ConfigError("weight decay rate must lie in (0, 1]")
        if self.batch_size < 1 or self.eval_interval < 1 or self.patience < 1:
            raise ConfigError("batch size, eval interval and patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        return self

    @classmethod
    def full(cls, **overrides):
        base = dict(decay_interval=80_000, max_steps=160_000, eval_interval=2_000, bn_decay=0.9997)
        base.update(overrides)
        return cls(**base)

    def steps_for(self, stage):
        return int(self.stage_steps.get(stage, self.max_steps))


def prerequisites(model, stage):
    mode = model.fusion_mode
    feature = {"1"}
    if mode in ("sum", "maxpool_phi1", "concat_avgpool"):
        feature.add("2")
    if model.config.use_tags:
        feature.add("3")
    return {
        "1": set(),
        "2": {"1"},
        "3": set(),
        "4": feature,
        "5": feature | {"4"},
        "5c": feature | {"4"},
        "e2e": feature,
    }[stage]


def owned(model, stage):
    prefixes = OWNERS[stage]
    params = [p for n, p in model.named_parameters() if n.startswith(prefixes)]
    buffers = [b for n, b in model.named_buffers() if n.startswith(prefixes)]
    return params, buffers


def split_validation(arrays, fraction, seed):
    order = np.random.default_rng([seed, 99]).permutation(len(arrays))
    n_val = max(1, int(round(fraction * len(arrays))))
    return arrays.subset(np.sort(order[n_val:])), arrays.subset(np.sort(order[:n_val]))


def h_f1(probs, y, strategy, m_hat=None, quantity_cls=None, max_quantity=None):
    res = annotate(probs, strategy, m_hat=m_hat, quantity_cls=quantity_cls, truth_m=y.sum(axis=1),
                   max_quantity=max_quantity)
    return compute_metrics(tally_matrices(selection_matrix(res, y.shape[1]), y)).h_f1


class StageRunner:
    """Forward closures for one stage, with frozen-part caching."""

    def __init__(self, model, stage, train, val, chunk=256):
        self.model, self.stage = model, stage
        self.train, self.val = train, val
        self.chunk = chunk
        self.cache = {}
        if stage in ("2", "e2e"):
            self.cache = {"train": self._main_maps(train), "val": self._main_maps(val)}
        elif stage in ("4", "5", "5c"):
            self.cache = {"train": self._features(train), "val": self._features(val)}

    def _main_maps(self, arrays):
        out = []
        with T.no_grad():
            for s in range(0, len(arrays), self.chunk):
                x = T.Tensor(arrays.images[s : s + self.chunk])
                maps = []
                for stage in self.model.visual.main:
                    x = stage(x)
                    maps.append(x.data)
                out.append(maps)
        return [np.concatenate([c[l] for c in out]) for l in range(len(out[0]))]

    def _features(self, arrays):
        with T.no_grad():
            return np.concatenate([
                self.model.features(arrays.images[s : s + self.chunk], arrays.tags[s : s + self.chunk]).data
                for s in range(0, len(arrays), self.chunk)
            ])

    def _fused(self, which, idx, mode):
        maps = {l + 1: T.Tensor(m[idx]) for l, m in enumerate(self.cache[which])}
        return fuse_maps(maps, self.model.visual.fusion, mode, self.model.visual.config.fused_layers).f_v

    def features(self, which, idx):
        m, arrays = self.model, (self.train if which == "train" else self.val)
        st = self.stage
        if st == "1":
            return m.visual_feature(arrays.images[idx], mode="none")
        if st == "2":
            return self._fused(which, idx, m.fusion_mode)
        if st == "3":
            return m.text_feature(arrays.tags[idx])
        if st == "e2e":
            f = self._fused(which, idx, m.fusion_mode)
            if m.config.use_tags:
                f = joint_feature(f, m.text_feature(arrays.tags[idx]))
            return f
        return T.Tensor(self.cache[which][idx])

    def head(self):
        m = self.model
        return {"1": m.aux["cnn"], "2": m.aux["ms"], "3": m.aux["text"]}.get(self.stage, m.classifier)

    def loss(self, idx, mean):
        arrays, m = self.train, self.model
        f = self.features("train", idx)
        y, q = arrays.y[idx], arrays.m[idx]
        if self.stage == "5":
            return reg_loss(quantity_regress(m.regressor, f), q, mean)
        if self.stage == "5c":
            return quantity_cls_loss(m.quantity_classifier(f), q, m.config.max_quantity, mean)
        z, _ = classify(self.head(), f)
        loss = cls_loss(z, y, mean)
        if self.stage == "e2e":
            loss = loss + reg_loss(quantity_regress(m.regressor, f), q, mean)
        return loss

    def validate(self):
        m, val = self.model, self.val
        idx = np.arange(len(val))
        with T.no_grad():
            f = self.features("val", idx)
            if self.stage in ("1", "2", "3", "4"):
                _, p = classify(self.head(), f)
                return h_f1(p.data, val.y, "gt")
            if self.stage == "e2e":
                _, p = classify(m.classifier, f)
                mh = quantity_regress(m.regressor, f).data
                return h_f1(p.data, val.y, "lqp", m_hat=mh, max_quantity=m.config.max_quantity)
            p = classify(m.classifier, f)[1].data
            if self.stage == "5":
                mh = quantity_regress(m.regressor, f).data
                return h_f1(p, val.y, "lqp", m_hat=mh, max_quantity=m.config.max_quantity)
            qc = np.argmax(m.quantity_classifier(f).data, axis=1) + 1
            return h_f1(p, val.y, "lqp-cls", quantity_cls=qc)


def _set_modes(model, stage):
    model.eval()
    for name, mod in _owned_modules(model, stage):
        mod.train(True)


def _owned_modules(model, stage):
    out = []
    m = model
    for prefix in OWNERS[stage]:
        parts = prefix.rstrip(".").split(".")
        obj = m
        for p in parts:
            obj = obj[p] if isinstance(obj, dict) else getattr(obj, p)
        mods = obj if isinstance(obj, (list, tuple)) else obj.values() if isinstance(obj, dict) else [obj]
        out.extend((prefix, x) for x in mods)
    return out


def train_stage(model, stage, train_arrays, config, val_arrays=None, log_rows=None):
    """Train the parameters owned by ``stage``; return the per-interval log rows.

    Early stopping keeps the parameters with the best validation H-F1.
    """
    stage = str(stage)
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    config.validate()
    missing = prerequisites(model, stage) - set(model.lineage)
    if missing:
        raise LineageError(f"stage {stage} needs stages {sorted(missing)} first (have {model.lineage})")
    if val_arrays is None:
        train_arrays, val_arrays = split_validation(train_arrays, config.val_fraction, config.seed)

    params, buffers = owned(model, stage)
    all_params = model.parameters()
    owned_ids = {id(p) for p in params}
    for p in all_params:
        p.requires_grad = id(p) in owned_ids
    model.eval()
    runner = StageRunner(model, stage, train_arrays, val_arrays)
    _set_modes(model, stage)
    model.regressor.reseed([config.seed, STAGES.index(stage)])
    model.quantity_classifier.reseed([config.seed, STAGES.index(stage), 1])

    opt = SGD(params, config.momentum, config.weight_decay_rate)
    base_lr = config.lr[stage]
    max_steps = config.steps_for(stage)
    rows = [] if log_rows is None else log_rows
    best, best_state, bad, step, epoch = -np.inf, None, 0, 0, 0
    running, count = 0.0, 0

    def snapshot():
        return [p.data.copy() for p in params], [(b.mean, b.var) for b in buffers]

    try:
        done = False
        while not done and max_steps > 0:
            order = np.random.default_rng([config.seed, STAGES.index(stage), epoch]).permutation(len(train_arrays))
            for s in range(0, len(order), config.batch_size):
                idx = order[s : s + config.batch_size]
                if len(idx) < 2 and stage in ("1", "2", "e2e"):
                    continue
                opt.zero_grad()
                loss = runner.loss(idx, config.mean_loss)
                loss.backward()
                lr = step_lr(base_lr, step, config.lr_decay, config.decay_interval)
                opt.step(lr)
                step += 1
                running += loss.item()
                count += 1
                if step % config.eval_interval == 0 or step == max_steps:
                    model.eval()
                    score = runner.validate()
                    _set_modes(model, stage)
                    rows.append({"stage": stage, "step": step, "lr": lr, "loss": running / count, "val_hf1": score})
                    log.info("stage %s step %d loss %.4f val H-F1 %.2f", stage, step, running / count, score)
                    running, count = 0.0, 0
                    if score > best:
                        best, best_state, bad = score, snapshot(), 0
                    else:
                        bad += 1
                        if bad >= config.patience:
                            done = True
                            break
                if step >= max_steps:
                    done = True
                    break
            epoch += 1
        if best_state is not None:
            for p, data in zip(params, best_state[0]):
                p.data = data
            for b, (mean, var) in zip(buffers, best_state[1]):
                b.mean, b.var = mean, var
    finally:
        for p in all_params:
            p.requires_grad = True
            p.grad = None
        model.eval()
    if stage not in model.lineage:
        model.lineage.append(stage)
    return rows
