import csv
import json
from pathlib import Path

import numpy as np
import pytest

from uneq import cli
from uneq import config as cfgmod
from uneq import tensor as T
from uneq.config import ConfigError
from uneq.gradcheck import REGISTRY

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY_CFG = """\
# tiny run for CLI tests
seed = 5
batch_size = 4
steps = 20
max_stage = 1
steps_per_stage = 8
checkpoint_every = 10
diag_window = 5
network.latent_dim = 16
network.embed_dim = 16
network.channels = 8, 8
arrangement.discriminator_mode = diametric
arrangement.generator_objective = embedding_proximity
arrangement.distance_g1 = l2
arrangement.distance_g2 = cosine
render.keyframes = 3
render.frames_per_segment = 4
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


def _train(cfg_file, out, *extra):
    return cli.main(["train", "--config", str(cfg_file), "--out", str(out), *extra])


@pytest.fixture
def run_dir(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert _train(cfg_file, out) == 0
    return out


# -- train --------------------------------------------------------------------

def test_missing_config_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.cfg"
    assert cli.main(["train", "--config", str(missing)]) == cli.EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_unknown_override_is_rejected(cfg_file, tmp_path, capsys):
    code = cli.main(["train", "--config", str(cfg_file), "--set", "learning_rate=1", "--out", str(tmp_path)])
    assert code == cli.EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err


def test_train_writes_metrics_checkpoints_and_previews(run_dir):
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 20
    assert [json.loads(s)["step"] for s in lines] == list(range(20))
    assert sorted(p.name for p in (run_dir / "checkpoints").iterdir()) == ["step_000010.uneq", "step_000020.uneq"]
    assert sorted(p.name for p in (run_dir / "previews").iterdir()) == ["step_000010.ppm", "step_000020.ppm"]
    assert (run_dir / "checkpoint.uneq").read_bytes() == (run_dir / "checkpoints" / "step_000020.uneq").read_bytes()
    assert cfgmod.load(run_dir / "config.cfg").train.steps == 20


def test_train_is_byte_reproducible(cfg_file, run_dir, tmp_path):
    again = tmp_path / "again"
    assert _train(cfg_file, again) == 0
    for name in ("metrics.jsonl", "checkpoint.uneq"):
        assert (run_dir / name).read_bytes() == (again / name).read_bytes(), name


def test_resume_continues_the_metrics_stream(cfg_file, run_dir, tmp_path):
    part = tmp_path / "part"
    assert _train(cfg_file, part, "--steps", "10") == 0
    assert _train(cfg_file, part, "--resume", str(part / "checkpoints" / "step_000010.uneq")) == 0
    assert (part / "metrics.jsonl").read_bytes() == (run_dir / "metrics.jsonl").read_bytes()
    assert (part / "checkpoint.uneq").read_bytes() == (run_dir / "checkpoint.uneq").read_bytes()


def test_resume_under_other_config_fails(cfg_file, run_dir, capsys):
    code = _train(cfg_file, run_dir, "--set", "lr_g=0.5", "--resume", str(run_dir / "checkpoint.uneq"))
    assert code == cli.EXIT_CHECKPOINT
    assert "different config" in capsys.readouterr().err


# -- render -------------------------------------------------------------------

def test_render_from_checkpoint(cfg_file, run_dir, capsys):
    assert cli.main(["render", "--config", str(cfg_file), "--checkpoint", str(run_dir / "checkpoint.uneq")]) == 0
    frames = run_dir / "frames"
    manifest = json.loads((frames / "manifest.json").read_text())
    files = sorted(frames.glob("frame_*.ppm"))
    assert manifest["frames"] == len(files) == 9
    assert (manifest["height"], manifest["width"]) == (8, 16)
    assert "9 frames" in capsys.readouterr().out


def test_render_flags_override_config(run_dir, tmp_path):
    out = tmp_path / "frames"
    code = cli.main(["render", "--checkpoint", str(run_dir / "checkpoint.uneq"), "--out", str(out),
                     "--keyframes", "2", "--frames-per-segment", "3", "--interpolation", "lerp", "--loop"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["frames"] == 7 and manifest["plan"]["interpolation"] == "lerp"


def test_render_truncated_checkpoint_writes_nothing(run_dir, tmp_path, capsys):
    bad = tmp_path / "bad.uneq"
    bad.write_bytes((run_dir / "checkpoint.uneq").read_bytes()[:200])
    out = tmp_path / "frames"
    assert cli.main(["render", "--checkpoint", str(bad), "--out", str(out)]) == cli.EXIT_CHECKPOINT
    assert "truncated" in capsys.readouterr().err
    assert not out.exists()


# -- gradcheck ----------------------------------------------------------------

def test_gradcheck_lists_every_entry(capsys):
    assert cli.main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    for name in REGISTRY:
        assert name in out
    assert "PASS" in out.splitlines()[-1]


def test_gradcheck_fails_on_a_wrong_gradient(capsys):
    def bad_square(x):
        xd = x.data
        return T._emit("bad_square", (x,), xd * xd, lambda g: (g * xd,))

    def build(rng):
        return (lambda x: T.sum(bad_square(x))), rng.uniform(0.5, 1.0, 4), 1e-3, None

    args = cli.build_parser().parse_args(["gradcheck", "--seeds", "2"])
    registry = {"square": REGISTRY["square"], "bad_square": build}
    assert cli.cmd_gradcheck(args, registry=registry) == cli.EXIT_FAILED
    out = capsys.readouterr().out
    assert "bad_square" in out and "FAIL" in out


# -- diagnose -----------------------------------------------------------------

def _diagnose_lines(out):
    return dict(line.split("\t")[:2] for line in out.strip().splitlines())


def test_diagnose_report(cfg_file, run_dir, tmp_path, capsys):
    report_dir = tmp_path / "report"
    code = cli.main(["diagnose", str(run_dir / "metrics.jsonl"), "--config", str(cfg_file), "--out", str(report_dir)])
    assert code == 0
    fields = _diagnose_lines(capsys.readouterr().out)
    assert fields["records"] == "20" and fields["windows"] == "16"
    total = sum(float(fields[s]) for s in ("HEALTHY", "EXPLODING", "STATIC"))
    assert total == pytest.approx(1.0, abs=1e-3)
    with open(report_dir / "windows.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 16 and rows[0]["window_end_step"] == "4"
    report = json.loads((report_dir / "report.json").read_text())
    assert sum(report["fractions"].values()) == pytest.approx(1.0)
    png = (report_dir / "diagnostics.png").read_bytes()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"


def test_zero_lr_run_is_static(cfg_file, tmp_path, capsys):
    out = tmp_path / "frozen"
    assert _train(cfg_file, out, "--set", "lr_g=0", "--set", "lr_d=0") == 0
    capsys.readouterr()
    assert cli.main(["diagnose", str(out / "metrics.jsonl"), "--window", "5"]) == 0
    fields = _diagnose_lines(capsys.readouterr().out)
    assert float(fields["STATIC"]) == 1.0
    assert fields["first_status"] == "STATIC"


def test_diagnose_empty_file(tmp_path, capsys):
    empty = tmp_path / "m.jsonl"
    empty.write_text("")
    assert cli.main(["diagnose", str(empty)]) == cli.EXIT_INPUT
    assert "0 records" in capsys.readouterr().err


def test_diagnose_malformed_line_names_line_number(run_dir, tmp_path, capsys):
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    lines[6] = '{"step": 6, "oops": 1}'
    bad = tmp_path / "m.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    assert cli.main(["diagnose", str(bad)]) == cli.EXIT_INPUT
    assert f"{bad}:7:" in capsys.readouterr().err


def test_diagnose_missing_file(tmp_path, capsys):
    assert cli.main(["diagnose", str(tmp_path / "none.jsonl")]) == cli.EXIT_INPUT
    assert "cannot read" in capsys.readouterr().err


# -- config -------------------------------------------------------------------

def test_config_dump_round_trips(cfg_file):
    run = cfgmod.load(cfg_file, {"render.loop": "true", "lr_d": "2e-5"})
    assert cfgmod.load(None, cfgmod.parse_lines(cfgmod.dump(run).splitlines())) == run
    assert run.train.network.channels == (8, 8)
    assert run.render.loop is True


def test_config_rejects_unknown_key_with_line_number(tmp_path):
    path = tmp_path / "x.cfg"
    path.write_text("seed = 1\nnetwork.depth = 3\n")
    with pytest.raises(ConfigError, match=r"x\.cfg:2: unknown key 'network.depth'"):
        cfgmod.load(path)


@pytest.mark.parametrize("line, match", [
    ("seed = abc", "seed"),
    ("arrangement.distance_g1 = chebyshev", "chebyshev"),
    ("render.interpolation = cubic", "cubic"),
    ("batch_size = 1", "batch_size"),
    ("network.noise = true", "reserved"),
])
def test_config_rejects_bad_values(tmp_path, line, match):
    path = tmp_path / "x.cfg"
    path.write_text(line + "\n")
    with pytest.raises(ConfigError, match=match):
        cfgmod.load(path)


def test_shipped_configs_load():
    paths = sorted(CONFIGS.glob("*.cfg"))
    assert paths
    for path in paths:
        assert cfgmod.load(path).train.steps > 0, path
    assert np.isclose(cfgmod.load(CONFIGS / "smoke.cfg").train.lr_d, 1e-5)
