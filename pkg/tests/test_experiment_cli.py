import pytest
from conftest import tiny_fusion, tiny_synth, tiny_train

from msann import data
from msann.cli import main
from msann.errors import ConfigError
from msann.experiment import VARIANTS, ExperimentConfig, fusion_ablation, run_experiment
from msann.metrics import read_predictions

TINY_INI = """
[fusion]
input_size = 8
spatial = 4,2,1
channels = 4,6,8
fused_layers = 1,2,3

[synth]
image_size = 8
motif_min = 3
motif_max = 4
num_train = 40
num_test = 12
vocab_size = 12
num_classes = 4
quantity_probs = 0.5,0.3,0.2

[train]
max_steps = 6
eval_interval = 3
batch_size = 8
patience = 2

[experiment]
tag_hidden = 6
regressor_hidden = 5
topk = 2
"""


def tiny_config():
    cfg = ExperimentConfig(synth=tiny_synth(), fusion=tiny_fusion(), train=tiny_train(),
                           tag_hidden=6, regressor_hidden=(5,), topk=2)
    cfg.train.val_fraction = 0.25
    return cfg


def test_config_text_round_trip():
    cfg = tiny_config().with_seed(7)
    cfg.train.lr["5"] = 2e-5
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_config_file_overrides_defaults():
    cfg = ExperimentConfig.from_text(TINY_INI)
    assert cfg.fusion.channels == (4, 6, 8)
    assert cfg.synth.quantity_probs == (0.5, 0.3, 0.2)
    assert cfg.train.max_steps == 6 and cfg.topk == 2 and cfg.regressor_hidden == (5,)


@pytest.mark.parametrize("text", ["[train]\nwarp = 3\n", "[train]\nmomentum = 1.5\n", "[fusion]\nspatial = 16,8,5\n",
                                  "not an ini"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


def test_experiment_grid_structure(tmp_path):
    result = run_experiment(tiny_config(), out_dir=tmp_path)
    assert tuple(result.variants) == VARIANTS
    ub = result.variants["Upper bound"]
    assert ub.i_p == ub.i_r
    assert result.strategies["gt"].i_p == result.strategies["gt"].i_r
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == list(VARIANTS)
    for name in ("strategies.csv", "training_log.csv", "lqp_quality.csv", "ms-cnn_tags.ckpt", "cnn.ckpt"):
        assert (tmp_path / name).exists()
    log = (tmp_path / "training_log.csv").read_text().splitlines()
    assert log[0] == "variant,stage,step,lr,loss,val_hf1" and len(log) > 5


def test_fusion_ablation_harness_runs():
    cfg = tiny_config()
    results = fusion_ablation(cfg, modes=("sum", "concat_avgpool"), layer_sets=[(2, 3), (1, 2, 3)])
    assert set(results) == {("none", (3,)), ("sum", (2, 3)), ("sum", (1, 2, 3)),
                            ("concat_avgpool", (2, 3)), ("concat_avgpool", (1, 2, 3))}
    assert all(0.0 <= r.h_f1 <= 100.0 for r in results.values())


# -- command line --------------------------------------------------------
@pytest.fixture
def ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return str(path)


def test_cli_end_to_end(tmp_path, ini, capsys):
    d, r = str(tmp_path / "data"), str(tmp_path / "run")
    assert main(["gen-data", "--config", ini, "--out", d]) == 0
    assert data.load(d).num_classes == 4
    assert main(["train", "--config", ini, "--data", d, "--out", r]) == 0
    assert main(["train", "--config", ini, "--data", d, "--checkpoint", f"{r}/model.ckpt",
                 "--stage", "5c", "--out", r]) == 0
    assert main(["annotate", "--checkpoint", f"{r}/model.ckpt", "--data", d, "--strategy", "lqp", "--out", r]) == 0
    preds = read_predictions(f"{r}/predictions_test.tsv")
    assert len(preds) == 12 and all(p.m_hat is not None for p in preds)
    assert main(["eval", "--pred", f"{r}/predictions_test.tsv", "--truth", f"{d}/truth_test.tsv"]) == 0
    for strategy in ("lqp", "gt", "topk:2", "threshold:0.5", "lqp-cls"):
        assert main(["eval", "--checkpoint", f"{r}/model.ckpt", "--data", d, "--strategy", strategy,
                     "--out", r]) == 0
    out = capsys.readouterr().out
    assert "H-F1" in out


def test_cli_ablate(tmp_path, ini):
    assert main(["ablate", "--config", ini, "--seed", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_text().count("\n") == 7


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert "conv2d" in capsys.readouterr().out


def test_cli_config_errors_exit_2(tmp_path, ini):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nmomentum = 3\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "absent.ini")]) == 2
    assert main(["train", "--config", ini, "--stage", "4", "--out", str(tmp_path / "r")]) == 2
    assert main(["eval", "--strategy", "lqp"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_numerical_failure_exit_3(tmp_path):
    path = tmp_path / "boom.ini"
    text = TINY_INI.replace("patience = 2", "patience = 2\nlr.1 = 1e200")
    path.write_text(text)
    assert main(["train", "--config", str(path), "--stage", "1", "--out", str(tmp_path / "r")]) == 3


def test_cli_missing_data_exit_1(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 1
