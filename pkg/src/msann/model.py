"""The full annotation network: visual branch, tag branch, and heads."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .fusion import FusionNetConfig, VisualBranch
from .heads import (
    ClassifierHead,
    QuantityClassifier,
    QuantityRegressor,
    classify,
    quantity_classify_baseline,
    quantity_regress,
)
from .nn import Module
from .tags import TextualMLP, encode_tags, joint_feature


@dataclass
class ModelConfig:
    num_classes: int
    vocab_size: int
    fusion: FusionNetConfig = field(default_factory=FusionNetConfig)
    use_tags: bool = True
    tag_hidden: int = 64
    regressor_hidden: tuple = (32, 16)
    dropout: float = 0.5
    max_quantity: int = 6
    bn_decay: float = 0.9997
    seed: int = 0

    def meta(self):
        return {
            "num_classes": self.num_classes,
            "vocab_size": self.vocab_size,
            "use_tags": int(self.use_tags),
            "tag_hidden": self.tag_hidden,
            "regressor_hidden": ",".join(map(str, self.regressor_hidden)),
            "dropout": repr(self.dropout),
            "max_quantity": self.max_quantity,
            "bn_decay": repr(self.bn_decay),
            "seed": self.seed,
            "fusion": self.fusion.to_text().replace("\n", "|"),
        }

    @classmethod
    def from_meta(cls, meta):
        return cls(
            num_classes=int(meta["num_classes"]),
            vocab_size=int(meta["vocab_size"]),
            fusion=FusionNetConfig.from_text(meta["fusion"].replace("|", "\n")),
            use_tags=bool(int(meta["use_tags"])),
            tag_hidden=int(meta["tag_hidden"]),
            regressor_hidden=tuple(int(v) for v in meta["regressor_hidden"].split(",")),
            dropout=float(meta["dropout"]),
            max_quantity=int(meta["max_quantity"]),
            bn_decay=float(meta["bn_decay"]),
            seed=int(meta["seed"]),
        )


@dataclass
class Outputs:
    probs: np.ndarray
    m_hat: np.ndarray | None = None
    quantity_cls: np.ndarray | None = None


class AnnotationModel(Module):
    """Feature extractor plus classification and quantity heads.

    ``aux`` holds the throw-away classifiers used while the feature branches
    are trained on their own (CNN, fused CNN, tags).
    """

    def __init__(self, config, shared=None):
        self.config = config
        rng = np.random.default_rng([config.seed, 1])
        if shared is None:
            fcfg = config.fusion
            self.visual = VisualBranch(fcfg, rng, config.bn_decay)
            d_v = self.visual.feature_dim()
            self.text = TextualMLP(config.vocab_size, config.tag_hidden, d_v, rng)
            self.aux = {
                "cnn": ClassifierHead(fcfg.channels[-1], config.num_classes, rng),
                "ms": ClassifierHead(d_v, config.num_classes, rng),
                "text": ClassifierHead(d_v, config.num_classes, rng),
            }
            self.lineage = []
        else:
            self.visual, self.text, self.aux = shared.visual, shared.text, shared.aux
            self.lineage = list(shared.lineage)
        head_rng = np.random.default_rng([config.seed, 2])
        d = self.feature_dim
        self.classifier = ClassifierHead(d, config.num_classes, head_rng)
        self.regressor = QuantityRegressor(d, head_rng, config.regressor_hidden, config.dropout, seed=config.seed)
        self.quantity_classifier = QuantityClassifier(
            d, config.max_quantity, head_rng, config.regressor_hidden, config.dropout, seed=config.seed
        )
        self.eval()

    @property
    def fusion_mode(self):
        return self.config.fusion.fusion_mode

    @property
    def feature_dim(self):
        d_v = self.visual.feature_dim(self.fusion_mode)
        return 2 * d_v if self.config.use_tags else d_v

    def variant(self, fusion_mode=None, use_tags=None, seed=None):
        """A model sharing this one's feature branches with fresh heads."""
        cfg = copy.deepcopy(self.config)
        if fusion_mode is not None:
            cfg.fusion.fusion_mode = fusion_mode
        if use_tags is not None:
            cfg.use_tags = use_tags
        if seed is not None:
            cfg.seed = seed
        return AnnotationModel(cfg, shared=self)

    # -- forward pieces ------------------------------------------------
    def visual_feature(self, images, mode=None):
        images = images if isinstance(images, T.Tensor) else T.Tensor(images)
        return self.visual(images, mode=self.fusion_mode if mode is None else mode).f_v

    def text_feature(self, tags):
        return encode_tags(self.text, tags)

    def features(self, images, tags):
        f = self.visual_feature(images)
        if self.config.use_tags:
            f = joint_feature(f, self.text_feature(tags))
        return f

    def forward(self, images, tags):
        f = self.features(images, tags)
        z, p = classify(self.classifier, f)
        return z, p, quantity_regress(self.regressor, f)

    def predict(self, arrays, chunk=256, with_quantity_cls=False):
        """Eval-mode probabilities and quantity predictions for a whole split."""
        was = [(m, m.training) for m in self.modules()]
        self.eval()
        probs, m_hat, q_cls = [], [], []
        try:
            with T.no_grad():
                for s in range(0, len(arrays), chunk):
                    f = self.features(arrays.images[s : s + chunk], arrays.tags[s : s + chunk])
                    probs.append(classify(self.classifier, f)[1].data)
                    m_hat.append(quantity_regress(self.regressor, f).data)
                    if with_quantity_cls:
                        q_cls.append(quantity_classify_baseline(self.quantity_classifier, f)[2])
        finally:
            for m, mode in was:
                m.training = mode
        return Outputs(
            probs=np.concatenate(probs) if probs else np.zeros((0, self.config.num_classes)),
            m_hat=np.concatenate(m_hat) if m_hat else np.zeros(0),
            quantity_cls=np.concatenate(q_cls) if q_cls else None,
        )

    # -- persistence ---------------------------------------------------
    def save(self, path):
        meta = self.config.meta()
        meta["lineage"] = ",".join(map(str, self.lineage))
        checkpoint.save(path, checkpoint.state_dict(self), meta)

    @classmethod
    def load(cls, path):
        state, meta = checkpoint.load(path)
        model = cls(ModelConfig.from_meta(meta))
        checkpoint.load_state_dict(model, state)
        model.lineage = [s for s in meta.get("lineage", "").split(",") if s]
        return model
