import hashlib

import pytest

from motionpose import cli
from motionpose.config import ConfigError, RunConfig, parse_text
from motionpose.corpus import read_pgm


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix != ".config":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def kv(path):
    return dict(parse_text(path.read_text()))


TINY = ["--clips", "6", "--frames", "10"]
FAST_FLOW = ["--set", "flow.iterations=20"]


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "corpus"
    assert cli.run(["corpus-gen", "--out", str(root), "--seed", "3"] + TINY) == 0
    assert cli.run(["flow-precompute", "--corpus", str(root)] + FAST_FLOW) == 0
    return root


# ---------------------------------------------------------------- config


def test_config_roundtrip_through_text():
    cfg = RunConfig()
    cfg.update(parse_text("# comment\nseed=4\ntrain.schedule=0.01:5, 0.001:2\naction.freeze_trunk=yes\n"))
    assert cfg.seed == 4 and cfg.train.seed == 4 and cfg.pose.seed == 4
    assert cfg.train.schedule == ((0.01, 5), (0.001, 2))
    assert cfg.action.freeze_trunk is True
    again = RunConfig().update(parse_text(cfg.dump()))
    assert again.dump() == cfg.dump()


@pytest.mark.parametrize("line", ["nope=1", "train.nope=1", "train.delta=four", "train.seed=3", "pose.arch=vggm-paper",
                                  "bogus.x=1", "action.freeze_trunk=maybe", "pose.train_clip_limit=many"])
def test_bad_config_lines(line):
    with pytest.raises(ConfigError):
        RunConfig().update(parse_text(line))


def test_config_line_without_equals():
    with pytest.raises(ConfigError, match="expected key=value"):
        parse_text("seed 3", "x.cfg")


def test_none_valued_keys_accept_none_or_int():
    cfg = RunConfig().update([("action.train_clip_limit", "50")])
    assert cfg.action.train_clip_limit == 50
    cfg.set("action.train_clip_limit", "none")
    assert cfg.action.train_clip_limit is None


def test_paper_preset_sections():
    cfg = RunConfig("paper")
    assert cfg.arch == "vggm-paper" and cfg.train.positives == 128 and cfg.pose.heatmap_size == 60
    with pytest.raises(ConfigError):
        RunConfig("huge")


# ---------------------------------------------------------------- exit codes


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.run([]) == 1
    assert cli.run(["no-such-command"]) == 1
    assert cli.run(["train-unsup", "--corpus", str(tmp_path)]) == 1  # --out missing
    assert cli.run(["corpus-gen", "--out", str(tmp_path), "--set", "corpus.bogus=1"]) == 1
    assert cli.run(["corpus-gen", "--out", str(tmp_path), "--set", "noequals"]) == 1
    assert cli.run(["corpus-gen", "--out", str(tmp_path), "--workers", "0"]) == 1
    assert "error" in capsys.readouterr().err


def test_help_exits_0(capsys):
    assert cli.run(["--help"]) == 0
    assert "corpus-gen" in capsys.readouterr().out


def test_missing_corpus_exits_1(tmp_path):
    assert cli.run(["train-unsup", "--corpus", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 1


def test_runtime_failure_exits_2(tmp_path, monkeypatch):
    def boom(args, cfg):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli.COMMANDS, "corpus-gen", boom)
    assert cli.run(["corpus-gen", "--out", str(tmp_path)]) == 2


def test_train_without_flows_exits_1(tmp_path):
    root = tmp_path / "c"
    assert cli.run(["corpus-gen", "--out", str(root), "--clips", "2", "--frames", "6"]) == 0
    assert cli.run(["train-unsup", "--corpus", str(root), "--out", str(tmp_path / "r")]) == 1


# ---------------------------------------------------------------- commands


def test_corpus_gen_is_deterministic(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out, seed in ((a, "1"), (b, "1"), (c, "2")):
        assert cli.run(["corpus-gen", "--out", str(out), "--seed", seed, "--clips", "3", "--frames", "5"]) == 0
    assert tree_digest(a) == tree_digest(b)
    assert tree_digest(a) != tree_digest(c)


def test_explicit_flags_override_config_file(tmp_path):
    conf = tmp_path / "run.cfg"
    conf.write_text("seed=9\ncorpus.num_clips=5\ncorpus.frames_per_clip=4\n")
    out = tmp_path / "c"
    assert cli.run(["corpus-gen", "--out", str(out), "--config", str(conf), "--seed", "2", "--clips", "3"]) == 0
    resolved = kv(out / "corpus-gen.config")
    assert resolved["seed"] == "2" and resolved["corpus.num_clips"] == "3"
    assert resolved["corpus.frames_per_clip"] == "4"
    assert len((out / "index.txt").read_text().split()) == 3


def test_training_and_evaluation_pipeline(cli_corpus, tmp_path, capsys):
    out = tmp_path / "run"
    common = ["--corpus", str(cli_corpus), "--out", str(out)]
    assert cli.run(["train-unsup"] + common + ["--set", "train.schedule=0.01:4", "--set", "train.positives=2",
                                               "--set", "train.checkpoint_interval=2",
                                               "--set", "train.val_batches=2"]) == 0
    text = capsys.readouterr().out
    assert "iter=2 loss=" in text and "chance=0.667" in text
    assert (out / "unsup.mpck").exists()
    assert (out / "history.txt").read_text().count("val_acc=") == 2

    init = ["--init", str(out / "unsup.mpck")]
    assert cli.run(["finetune-pose"] + common + init + ["--set", "pose.schedule=0.01:2"]) == 0
    assert cli.run(["eval-pose", "--corpus", str(cli_corpus), "--ckpt", str(out / "pose.mpck")]) == 0
    assert cli.run(["finetune-action"] + common + init + ["--set", "action.schedule=0.01:2",
                                                          "--set", "action.batch_size=4"]) == 0
    assert cli.run(["eval-action", "--corpus", str(cli_corpus), "--ckpt", str(out / "action.mpck")]) == 0
    assert "samples_per_video=250" in capsys.readouterr().out
    assert cli.run(["probe-nn", "--corpus", str(cli_corpus), "--ckpt", str(out / "unsup.mpck"),
                    "--set", "probe.num_queries=10", "--set", "probe.permutations=50"]) == 0

    m = kv(out / "metrics.kv")
    for key in ("binary_acc", "pcp.upper_arms", "pcp.lower_arms", "pdj.l_wrist.0.2", "pdj.nose.0.4",
                "action_acc", "probe.p_less"):
        assert key in m, key
    assert 0.0 <= float(m["binary_acc"]) <= 1.0

    grid = tmp_path / "filters.pgm"
    assert cli.run(["viz-filters", "--ckpt", str(out / "unsup.mpck"), "--out", str(grid)]) == 0
    assert read_pgm(grid).ndim == 2
    assert cli.run(["viz-filters", "--ckpt", str(out / "unsup.mpck"), "--layer", "nope",
                    "--out", str(grid)]) == 1


def test_viz_flow_writes_ppm(cli_corpus, tmp_path):
    out = tmp_path / "flow.ppm"
    assert cli.run(["viz-flow", "--corpus", str(cli_corpus), "--clip", "clip_0000", "--frame", "2",
                    "--out", str(out)]) == 0
    assert out.read_bytes().startswith(b"P6")
    assert cli.run(["viz-flow", "--corpus", str(cli_corpus), "--clip", "clip_0000", "--frame", "9",
                    "--out", str(out)]) == 1
