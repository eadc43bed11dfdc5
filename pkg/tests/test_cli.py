import json

import pytest

from rfnet import checkpoint as ckpt
from rfnet.cli import COMMANDS, build_parser, main
from rfnet.config import DEFAULTS, ConfigError, RunConfig

TINY = """
[data]
n_scenes = 40
min_count = 1
n_frequent = 20
[model]
T1 = 1
T2 = 1
s = 8
[train]
max_epochs = 2
batch_size = 8
rl_max_epochs = 1
[run]
seeds = 0,1
beam = 2
max_len = 8
rl_updates = 2
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    assert main(["gen-data", "--config", str(root / "tiny.ini"), "--out", str(root / "data")]) == 0
    return root


def run(workdir, *args):
    return main([args[0], "--config", str(workdir / "tiny.ini"), "--data", str(workdir / "data"), *args[1:]])


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_lists_every_flag_with_default(command, capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args([command, "--help"])
    text = " ".join(capsys.readouterr().out.split())
    flags = {"--config", "--seed", "--out", "--views", "--beam", "--max-len", "--lambda", "--ablation",
             "--data", "--checkpoint", "--split", "--verbose"}
    for flag in flags:
        assert flag in text
    options = text.split("options:")[-1]
    assert options.count("(default:") == len(flags)


def test_config_round_trip_and_unknown_keys():
    cfg = RunConfig.from_text(TINY)
    assert cfg["model"]["s"] == 8 and cfg["data"]["n_scenes"] == 40
    assert cfg["train"]["lr_xe"] == DEFAULTS["train"]["lr_xe"]
    assert RunConfig.from_text(cfg.to_text()).to_text() == cfg.to_text()
    with pytest.raises(ConfigError):
        RunConfig.from_text("[model]\nwidth = 3\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("[nosuch]\nx = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("[model]\ns = many\n")


def test_unknown_config_key_exits_2(tmp_path):
    (tmp_path / "bad.ini").write_text("[train]\nwarmup = 3\n")
    assert main(["train", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path)]) == 2


def test_missing_inputs_exit_3(workdir, tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 3
    assert run(workdir, "caption", "--checkpoint", str(tmp_path / "none.rfn"), "--out", str(tmp_path)) == 3


def test_non_finite_exits_4(workdir, tmp_path):
    hot = TINY.replace("max_epochs = 2", "max_epochs = 2\nlr_xe = 1e300\nclip_norm = none")
    (tmp_path / "hot.ini").write_text(hot)
    code = main(["train", "--config", str(tmp_path / "hot.ini"), "--data", str(workdir / "data"), "--out", str(tmp_path)])
    assert code == 4


def test_train_is_byte_reproducible_and_copies_config(workdir):
    assert run(workdir, "train", "--out", str(workdir / "a")) == 0
    assert run(workdir, "train", "--out", str(workdir / "b")) == 0
    assert (workdir / "a" / "model.rfn").read_bytes() == (workdir / "b" / "model.rfn").read_bytes()
    saved = RunConfig.load(workdir / "a" / "train.ini")
    assert saved.to_text() == RunConfig.load(workdir / "b" / "train.ini").to_text()
    assert saved["data"]["path"] == str(workdir / "data")
    assert (workdir / "a" / "train_log.tsv").read_text().startswith("epoch\t")


def test_caption_evaluate_finetune(workdir):
    ck = str(workdir / "a" / "model.rfn")
    out = workdir / "c"
    assert run(workdir, "caption", "--checkpoint", ck, "--out", str(out), "--split", "val") == 0
    lines = (out / "captions_val.txt").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("0\t")
    assert run(workdir, "evaluate", "--checkpoint", ck, "--out", str(out)) == 0
    report = json.loads((out / "report_test.json").read_text())
    assert {"bleu", "cider", "n_examples"} <= set(report)
    assert run(workdir, "finetune-rl", "--checkpoint", ck, "--out", str(out)) == 0
    assert (out / "model_rl.rfn").exists() and (out / "rl_log.tsv").exists()
    assert run(workdir, "caption", "--checkpoint", ck, "--out", str(out), "--split", "bogus") == 2


def test_ablate_table_layout(workdir, capsys):
    assert run(workdir, "ablate", "--out", str(workdir / "abl"), "--beam", "1") == 0
    rows = [r.split("\t") for r in (workdir / "abl" / "ablation.tsv").read_text().splitlines()]
    assert rows[0] == ["variant", "seed0", "seed1", "mean"]
    assert [r[0] for r in rows[1:]] == ["RFNet", "RFNet-I", "RFNet-II", "RFNet-inter", "mean"]
    assert all(len(r) == 4 for r in rows)


def test_views_flag_restricts_model(workdir):
    assert run(workdir, "train", "--views", "0,2", "--out", str(workdir / "v")) == 0
    assert ckpt.load(workdir / "v" / "model.rfn").model.cfg.M == 2


@pytest.mark.slow
def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["max_rel_error"] < 1e-5
