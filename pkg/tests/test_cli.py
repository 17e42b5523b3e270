import json
import subprocess
import sys

import numpy as np
import pytest

from hgpu import cli, synthdata
from hgpu.config import ConfigError, RunConfig, load_config, parse_config

TINY = """
# tiny run for smoke tests
image_size = 32
n_frames = 3
n_train = 3
n_val = 2
base = 4
epochs = 1
batch_size = 2
dataset_root = {root}/data
output_dir = {root}/run
"""


def read_losses(run_dir):
    lines = (run_dir / "loss_curve.csv").read_text().splitlines()[1:]
    return [line.split(",")[1] for line in lines]


def tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY.format(root=root))
    assert cli.main(["gen-data", "--config", str(cfg)]) == 0
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert cli.main(["infer", "--checkpoint", str(root / "run" / "best.ckpt"),
                     "--sequence", str(root / "data" / "val"), "--out", str(root / "pred")]) == 0
    assert cli.main(["eval", "--pred", str(root / "pred"), "--gt", str(root / "data" / "val")]) == 0
    return root


def test_pipeline_artifacts(pipeline):
    assert (pipeline / "data" / "train" / "manifest.txt").is_file()
    assert (pipeline / "data" / "resolved_config.txt").is_file()
    for name in ("best.ckpt", "last.ckpt", "loss_curve.csv", "resolved_config.txt"):
        assert (pipeline / "run" / name).is_file()
    seq_ids = [s for s, _, _ in synthdata.read_manifest(pipeline / "data" / "val")]
    for s in seq_ids:
        masks = sorted((pipeline / "pred" / s).glob("mask_*.pgm"))
        probs = sorted((pipeline / "pred" / s).glob("prob_*.npy"))
        assert len(masks) == len(probs) == 3
        p = np.load(probs[0])
        assert p.shape == (32, 32) and 0 <= p.min() and p.max() <= 1
    summary = json.loads((pipeline / "pred" / "summary.json").read_text())
    assert 0 <= summary["J"]["mean"] <= 1 and 0 <= summary["F"]["mean"] <= 1
    rows = (pipeline / "pred" / "scores.csv").read_text().splitlines()
    assert rows[0] == "sequence,frame,J,F" and len(rows) == 1 + 3 * len(seq_ids)


def test_train_is_reproducible(pipeline, tmp_path):
    cfg = pipeline / "tiny.cfg"
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert read_losses(tmp_path / "again") == read_losses(pipeline / "run")


def test_infer_and_eval_are_byte_identical(pipeline, tmp_path):
    args = ["infer", "--checkpoint", str(pipeline / "run" / "best.ckpt"), "--sequence", str(pipeline / "data" / "val")]
    assert cli.main(args + ["--out", str(tmp_path / "p2")]) == 0
    first = {k: v for k, v in tree_bytes(pipeline / "pred").items() if not k.endswith((".csv", ".json"))}
    assert tree_bytes(tmp_path / "p2") == first
    assert cli.main(["eval", "--pred", str(tmp_path / "p2"), "--gt", str(pipeline / "data" / "val")]) == 0
    for name in ("scores.csv", "summary.json"):
        assert (tmp_path / "p2" / name).read_bytes() == (pipeline / "pred" / name).read_bytes()


def test_infer_single_sequence(pipeline, tmp_path):
    seq_dir = next(p for p in (pipeline / "data" / "val").iterdir() if p.is_dir())
    assert cli.main(["infer", "--checkpoint", str(pipeline / "run" / "last.ckpt"), "--sequence", str(seq_dir),
                     "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("mask_*.pgm"))) == 3
    assert cli.main(["eval", "--pred", str(tmp_path), "--gt", str(seq_dir)]) == 0


def test_eval_frame_count_mismatch(pipeline, tmp_path):
    seq_dir = next(p for p in (pipeline / "data" / "val").iterdir() if p.is_dir())
    (tmp_path / "mask_0000.pgm").write_bytes(synthdata.write_pgm(np.zeros((32, 32), bool)))
    assert cli.main(["eval", "--pred", str(tmp_path), "--gt", str(seq_dir)]) == 1


@pytest.mark.parametrize("argv", [[], ["bogus"], ["infer", "--checkpoint", "x"], ["train", "--seed", "abc"]])
def test_usage_errors(argv):
    assert cli.main(argv) == 2


def test_missing_checkpoint(tmp_path):
    assert cli.main(["infer", "--checkpoint", str(tmp_path / "nope.ckpt"), "--sequence", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == 2


def test_train_without_dataset(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"dataset_root = {tmp_path}/missing\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_corrupt_netpbm_is_usage_error(pipeline, tmp_path):
    seq_dir = tmp_path / "broken"
    seq_dir.mkdir()
    (seq_dir / "frame_0000.ppm").write_bytes(b"P6\n4 4\n255\n\x00")
    assert cli.main(["infer", "--checkpoint", str(pipeline / "run" / "best.ckpt"), "--sequence", str(seq_dir),
                     "--out", str(tmp_path / "o")]) == 2


def test_gradcheck_passes(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "ALL PASS" in out and "FAIL" not in out.replace("ALL PASS", "")
    assert (tmp_path / "gradcheck.txt").read_text() == out


def test_gradcheck_detects_corrupted_backward(capsys):
    assert cli.main(["gradcheck", "--corrupt-op", "conv2d"]) == 1
    out = capsys.readouterr().out
    assert "FAIL conv2d" in out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hgpu.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "infer", "eval", "gradcheck"):
        assert cmd in proc.stdout


# ---------------------------------------------------------------- config parsing
def test_config_defaults_and_comments():
    cfg = parse_config("epochs = 3  # short\n\n# comment\nzero_flow = true\nlr_decoder = 0.05\n")
    assert cfg.epochs == 3 and cfg.zero_flow is True and cfg.lr_decoder == 0.05
    assert cfg.batch_size == RunConfig().batch_size


def test_config_dump_round_trips():
    cfg = parse_config("epochs = 7\nbackground = static-noise\n")
    assert parse_config(cfg.dump()) == cfg


@pytest.mark.parametrize("text", ["epochs\n", "epochs = many\n", "zero_flow = maybe\n", "image_size = 40\n",
                                  "background = fog\n", "lr_encoder = -1\n"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 3\noutput_dir = a\n")
    cfg = load_config(p, seed=9, output_dir=None)
    assert cfg.seed == 9 and cfg.output_dir == "a"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_gradcheck_report_is_deterministic():
    from hgpu import verify
    reports = [verify.format_report(verify.run_all(seed=3, end_to_end_coords=10, per_param=2)) for _ in range(2)]
    assert reports[0] == reports[1]
