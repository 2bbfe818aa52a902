import numpy as np
import pytest

from msann import data
from msann.fusion import FusionNetConfig
from msann.model import AnnotationModel, ModelConfig
from msann.train import TrainConfig


def tiny_synth(**kw):
    base = dict(image_size=8, motif_min=3, motif_max=4, num_train=40, num_test=12, vocab_size=12,
                num_classes=4, quantity_probs=(0.5, 0.3, 0.2))
    base.update(kw)
    return data.SynthConfig(**base)


def tiny_fusion(**kw):
    base = dict(input_size=8, spatial=(4, 2, 1), channels=(4, 6, 8), fused_layers=(1, 2, 3))
    base.update(kw)
    return FusionNetConfig(**base)


def tiny_model(ds, seed=0, **kw):
    cfg = ModelConfig(num_classes=ds.num_classes, vocab_size=len(ds.vocab), fusion=tiny_fusion(),
                      tag_hidden=6, regressor_hidden=(5,), max_quantity=ds.max_quantity, bn_decay=0.9, seed=seed)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return AnnotationModel(cfg)


def tiny_train(**kw):
    base = dict(max_steps=6, eval_interval=3, batch_size=8, patience=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return data.generate(tiny_synth())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    lines = [value for rep in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
             for key, value in getattr(rep, "user_properties", []) if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
