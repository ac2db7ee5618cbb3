import csv
from pathlib import Path

import numpy as np
import pytest

from chunkflow import fileio
from chunkflow.cli import main
from chunkflow.datagen import read_dataset
from chunkflow.flow import save_checkpoint
from chunkflow.numerics import VectorFieldNet

BASE = """
[data]
frames = 16
height = 8
width = 8
chunk_length = 4
train_per_cell = 1
eval_per_cell = 1
[model]
hidden = 12
time_width = 4
[train]
steps = 6
pretrain_steps = 6
batch_size = 4
inversion_steps = 4
checkpoint_every = 3
[eval]
nfe_list = 1,2
rollout_chunks = 2
ot_videos = 3
volumes = 64,128,256
"""


def write_cfg(tmp_path, extra="", name="c.ini"):
    p = tmp_path / name
    p.write_text(BASE + extra)
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, Path(out.out.strip().splitlines()[-1]) if code == 0 else None, out.err


def rows(path):
    with open(path) as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def data_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("data")
    cfg = write_cfg(tmp)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp / "runs"), "--seed", "3"]) == 0
    return next((tmp / "runs").iterdir()), cfg, tmp


def zero_checkpoint(path, d, kind="direct"):
    save_checkpoint(VectorFieldNet.zeros([d + 4, 12, d], 4), path, step=0, recipe_hash="-", kind=kind)
    return str(path) + ".fc2s"


def test_gen_data_single_pair(tmp_path, capsys):
    text = BASE.replace("frames = 16", "frames = 8").replace("eval_per_cell = 1", "eval_per_cell = 0")
    cfg = tmp_path / "one.ini"
    cfg.write_text(text + "[data]\nmotion_classes = slow\ncamera_classes = static\n")
    code, path, _ = run(capsys, "gen-data", "--config", str(cfg), "--out", str(tmp_path / "r"))
    assert code == 0
    assert len(read_dataset(path / "train/manifest.tsv")) == 1
    assert rows(path / "summary.csv")[1:] == [["train", "1", "1"]]


def test_gen_data_reproducible(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    _, a, _ = run(capsys, "gen-data", "--config", cfg, "--out", str(tmp_path / "a"))
    _, b, _ = run(capsys, "gen-data", "--config", cfg, "--out", str(tmp_path / "b"))
    assert (a / "MANIFEST.sha256").read_text() == (b / "MANIFEST.sha256").read_text()
    assert not (a / ".lock").exists()
    assert (a / "config.resolved.ini").read_text().startswith("# fully-resolved")


def test_run_directories_never_reused(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    _, a, _ = run(capsys, "memfit", "--config", cfg, "--out", str(tmp_path))
    _, b, _ = run(capsys, "memfit", "--config", cfg, "--out", str(tmp_path))
    assert a != b and a.name.startswith("memfit-")


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nrhoo = 1\n")
    code, _, err = run(capsys, "memfit", "--config", str(bad), "--out", str(tmp_path))
    assert code == 2 and "bad.ini:2" in err
    code, _, _ = run(capsys, "memfit", "--config", str(tmp_path / "absent.ini"), "--out", str(tmp_path))
    assert code == 2
    code, _, _ = run(capsys, "gen-data", "--config", write_cfg(tmp_path, "[data]\nmotion_classes = warp\n"),
                     "--out", str(tmp_path))
    assert code == 2


def test_finetune_rejects_alg1_independent(tmp_path, capsys, data_run):
    data, _, _ = data_run
    cfg = write_cfg(tmp_path, "[train]\ncoupling = independent\n")
    code, _, err = run(capsys, "finetune", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "r"))
    assert code == 2 and "inherent" in err
    assert not (tmp_path / "r").exists()


def test_finetune_needs_pretrained(tmp_path, capsys, data_run):
    data, _, _ = data_run
    code, _, _ = run(capsys, "finetune", "--config", write_cfg(tmp_path), "--data", str(data),
                     "--out", str(tmp_path / "r"))
    assert code == 2


def test_pretrain_and_finetune(tmp_path, capsys, data_run):
    data, _, _ = data_run
    cfg = write_cfg(tmp_path)
    code, pre, _ = run(capsys, "pretrain", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "p"))
    assert code == 0
    assert sorted(p.name for p in (pre / "checkpoints").glob("*.fc2s")) == \
        ["final.fc2s", "step000000.fc2s", "step000003.fc2s", "step000006.fc2s"]
    ck = str(pre / "checkpoints/final.fc2s")
    outs = []
    for k in range(2):
        code, ft, _ = run(capsys, "finetune", "--config", cfg, "--data", str(data), "--pretrained", ck,
                          "--out", str(tmp_path / f"f{k}"))
        assert code == 0
        outs.append((ft / "loss.csv").read_bytes())
    assert outs[0] == outs[1]
    assert len(rows(ft / "loss.csv")) == 7


def test_finetune_zero_steps_only_initial_checkpoint(tmp_path, capsys, data_run):
    data, _, _ = data_run
    cfg = write_cfg(tmp_path, "[train]\nsteps = 0\nalgorithm = alg3_oc_only\ninit = from_scratch\n")
    code, ft, _ = run(capsys, "finetune", "--config", cfg, "--data", str(data), "--out", str(tmp_path))
    assert code == 0
    assert [p.name for p in (ft / "checkpoints").glob("*.fc2s")] == ["step000000.fc2s"]


def test_finetune_conventional_baseline(tmp_path, capsys, data_run):
    data, _, _ = data_run
    cfg = write_cfg(tmp_path, "[train]\nalgorithm = conventional_baseline\n")
    code, ft, _ = run(capsys, "finetune", "--config", cfg, "--data", str(data), "--out", str(tmp_path))
    assert code == 0
    assert "conventional" in (ft / "checkpoints/final.txt").read_text()


def test_sample_zero_net_returns_input(tmp_path, capsys, data_run):
    data, cfg, _ = data_run
    ev = read_dataset(data / "eval/manifest.tsv")
    ck = zero_checkpoint(tmp_path / "zero", ev.dim)
    code, out, _ = run(capsys, "sample", "--config", cfg, "--data", str(data), "--checkpoint", ck,
                       "--nfe", "1", "--chunk-id", "2", "--out", str(tmp_path))
    assert code == 0
    np.testing.assert_array_equal(fileio.load_tensor(out / "chunks/chunk001.fc2s"), ev.x0[2].reshape(ev.chunk_shape))
    assert len(list((out / "frames").glob("*.pgm"))) == 4
    code, out, _ = run(capsys, "sample", "--config", cfg, "--data", str(data), "--checkpoint", ck,
                       "--n-chunks", "3", "--out", str(tmp_path))
    assert sorted(p.name for p in (out / "chunks").iterdir()) == ["chunk001.fc2s", "chunk002.fc2s", "chunk003.fc2s"]
    assert fileio.load_tensor(out / "trajectory_t.fc2s").shape == (6,)
    code, _, _ = run(capsys, "sample", "--config", cfg, "--data", str(data), "--checkpoint", ck,
                     "--chunk-id", "9999", "--out", str(tmp_path))
    assert code == 2


def test_invert_zero_net(tmp_path, capsys, data_run):
    data, cfg, _ = data_run
    ev = read_dataset(data / "eval/manifest.tsv")
    ck = zero_checkpoint(tmp_path / "zero", ev.dim)
    code, out, _ = run(capsys, "invert", "--config", cfg, "--data", str(data), "--checkpoint", ck, "--out", str(tmp_path))
    assert code == 0
    np.testing.assert_array_equal(fileio.load_tensor(out / "inverted.fc2s"), ev.x1)
    assert all(float(r[2]) == 0.0 for r in rows(out / "roundtrip.csv")[1:])


def test_otplan_outputs(tmp_path, capsys, data_run):
    data, cfg, _ = data_run
    code, out, _ = run(capsys, "otplan", "--config", cfg, "--data", str(data), "--out", str(tmp_path))
    assert code == 0
    for name in ("plan.plan.txt", "plan.plan.pgm", "plan.boundaries.txt", "otplan.csv"):
        assert (out / name).is_file()
    header, row = rows(out / "otplan.csv")
    assert header[:2] == ["n", "mask"] and row[0] == "12" and row[1] == "no_self"


def test_otplan_infeasible_exit_4(tmp_path, capsys, data_run):
    data, _, _ = data_run
    cfg = write_cfg(tmp_path, "[eval]\nmask = next_only\not_fallback = false\n")
    code, _, err = run(capsys, "otplan", "--config", cfg, "--data", str(data), "--out", str(tmp_path))
    assert code == 4 and "no perfect matching" in err
    failed = [p for p in tmp_path.iterdir() if p.name.startswith("otplan-")]
    assert (failed[0] / "FAILED").exists() and not (failed[0] / "MANIFEST.sha256").exists()


def test_evaluate_outputs(tmp_path, capsys, data_run):
    data, cfg, _ = data_run
    ev = read_dataset(data / "eval/manifest.tsv")
    ck = zero_checkpoint(tmp_path / "zero", ev.dim)
    code, out, _ = run(capsys, "evaluate", "--config", cfg, "--data", str(data), "--checkpoint", ck, "--out", str(tmp_path))
    assert code == 0
    assert len(rows(out / "per_category.csv")) == 13
    assert len(rows(out / "nfe_sweep.csv")) == 3
    assert not (out / "scaling.csv").exists()
    conv = tmp_path / "conv"
    save_checkpoint(VectorFieldNet.zeros([2 * ev.dim + 4, 12, 2 * ev.dim], 4), conv, step=0, recipe_hash="-",
                    kind="conventional")
    code, out, _ = run(capsys, "evaluate", "--config", cfg, "--data", str(data), "--checkpoint", ck,
                       "--checkpoint", str(conv) + ".fc2s", "--out", str(tmp_path))
    assert code == 0
    assert float(rows(out / "scaling.csv")[1][2]) == pytest.approx(0.5)


def test_evaluate_empty_split(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[data]\neval_per_cell = 0\n")
    _, data, _ = run(capsys, "gen-data", "--config", cfg, "--out", str(tmp_path / "d"))
    ck = zero_checkpoint(tmp_path / "zero", 4 * 64)
    code, _, _ = run(capsys, "evaluate", "--config", cfg, "--data", str(data), "--checkpoint", ck,
                     "--out", str(tmp_path / "e"))
    assert code == 2


def test_memfit(tmp_path, capsys):
    code, out, _ = run(capsys, "memfit", "--config", write_cfg(tmp_path), "--out", str(tmp_path))
    assert code == 0
    assert float(rows(out / "scaling.csv")[1][4]) == pytest.approx(0.5)
    assert len(rows(out / "scaling_points.csv")) == 4


def test_verify(tmp_path, capsys):
    _, out, _ = run(capsys, "memfit", "--config", write_cfg(tmp_path), "--out", str(tmp_path))
    assert main(["verify", "--run", str(out)]) == 0
    (out / "scaling.csv").write_text("tampered\n")
    assert main(["verify", "--run", str(out)]) == 1
    (out / "scaling.csv").unlink()
    assert main(["verify", "--run", str(out)]) == 1
    assert "missing: scaling.csv" in capsys.readouterr().err
    assert main(["verify", "--run", str(tmp_path)]) == 1
