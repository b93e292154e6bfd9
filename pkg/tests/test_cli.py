import json

import numpy as np
import pytest

from vitae.checkpoint import load_checkpoint
from vitae.cli import main


def write_idx(directory, prefix, n, seed):
    g = np.random.default_rng(seed)
    labels = g.integers(0, 10, n).astype(np.uint8)
    images = g.integers(0, 256, (n, 28, 28)).astype(np.uint8)
    # Give each class a bright stripe so a short run has something to learn.
    for i, lab in enumerate(labels):
        images[i, 2 * lab:2 * lab + 3, :] = 255
    head = (0x803).to_bytes(4, "big") + b"".join(v.to_bytes(4, "big") for v in (n, 28, 28))
    (directory / f"{prefix}-images-idx3-ubyte").write_bytes(head + images.tobytes())
    (directory / f"{prefix}-labels-idx1-ubyte").write_bytes(
        (0x801).to_bytes(4, "big") + n.to_bytes(4, "big") + labels.tobytes())


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist")
    write_idx(d, "train", 64, 0)
    write_idx(d, "t10k", 32, 1)
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_inspect_reports_vitae_t(capsys):
    code, out, _ = run(capsys, "inspect", "--preset", "vitae-t")
    assert code == 0
    assert "vitae-t" in out and "4.8" in out


def test_inspect_jsonl(capsys, tmp_path):
    code, _, _ = run(capsys, "inspect", "--preset", "tiny-desk", "--preset", "vitaev2-s", "--jsonl", tmp_path / "r.jsonl")
    assert code == 0
    rows = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [r["preset"] for r in rows] == ["tiny-desk", "vitaev2-s"]


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train"], ["inspect", "--preset", "nope"],
                                  ["train", "--data", ".", "--epochs", "x"]])
def test_usage_errors_exit_1(capsys, argv):
    assert run(capsys, *argv)[0] == 1


def test_bad_config_exits_1(capsys, data_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"name": "x"}')
    assert run(capsys, "train", "--data", data_dir, "--config", cfg)[0] == 1


def test_data_errors_exit_2(capsys, tmp_path):
    assert run(capsys, "train", "--data", tmp_path / "missing")[0] == 2
    (tmp_path / "train-images-idx3-ubyte").write_bytes(b"\x00\x00\x08\x03\x00")
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(b"")
    assert run(capsys, "train", "--data", tmp_path)[0] == 2
    bad = tmp_path / "bad.vtae"
    bad.write_bytes(b"junk")
    assert run(capsys, "eval", "--ckpt", bad, "--data", tmp_path)[0] == 2


def test_failed_gradient_check_exits_3(capsys):
    code, out, _ = run(capsys, "gradcheck", "--op", "gelu", "--seeds", "1", "--tol", "1e-300")
    assert code == 3 and "FAIL" in out


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--op", "softmax", "--seeds", "2")
    assert code == 0 and out.count("ok") >= 2


def test_train_eval_attn_dist(capsys, data_dir, tmp_path):
    ckpt, log = tmp_path / "m.vtae", tmp_path / "log.jsonl"
    code, out, _ = run(capsys, "train", "--data", data_dir, "--epochs", 2, "--batch-size", 16, "--lr", 1e-3,
                       "--out", ckpt, "--log", log, "--deterministic")
    assert code == 0
    summary = json.loads(out.strip().splitlines()[-1])
    assert 0.0 <= summary["test_accuracy"] <= 1.0
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert sum("loss" in r for r in records) == 8
    assert load_checkpoint(ckpt).metadata["data"]["name"] == "mnist"

    code, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", data_dir)
    assert code == 0 and json.loads(out)["test_accuracy"] == summary["test_accuracy"]

    code, out, _ = run(capsys, "attn-dist", "--ckpt", ckpt, "--data", data_dir, "--limit", 4)
    assert code == 0 and "stage3.nc2" in out
    assert run(capsys, "attn-dist", "--ckpt", ckpt, "--data", data_dir, "--layer", "nope")[0] == 1


def test_same_seed_same_checkpoint(capsys, data_dir, tmp_path):
    paths = [tmp_path / "a.vtae", tmp_path / "b.vtae"]
    for p in paths:
        assert run(capsys, "train", "--data", data_dir, "--epochs", 1, "--batch-size", 32, "--seed", 4,
                   "--out", p, "--deterministic")[0] == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_pretrain_inflate_finetune(capsys, data_dir, tmp_path):
    pre, big, ft = tmp_path / "pre.vtae", tmp_path / "big.vtae", tmp_path / "ft.vtae"
    code, out, _ = run(capsys, "pretrain-mim", "--data", data_dir, "--epochs", 1, "--batch-size", 32, "--out", pre)
    assert code == 0 and json.loads(out.strip().splitlines()[-1])["steps"] == 2
    assert load_checkpoint(pre).pcm_kernel == 1

    code, out, _ = run(capsys, "inflate", "--in", pre, "--out", big)
    assert code == 0 and load_checkpoint(big).pcm_kernel == 3
    assert run(capsys, "inflate", "--in", big, "--out", tmp_path / "again.vtae")[0] == 2

    code, out, _ = run(capsys, "train", "--data", data_dir, "--init", big, "--epochs", 1, "--batch-size", 32,
                       "--layer-decay", 0.75, "--out", ft)
    assert code == 0
    assert load_checkpoint(ft).metadata["arch"] == "patch"
