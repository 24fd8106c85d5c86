import io
import json
import hashlib

import numpy as np
import pytest

from physiolite import cli
from physiolite.signal_io import LabeledDataset, MultiChannelSignal, write_signal
from physiolite.weights_io import load_weights

TINY = ["--stem", "8", "--branch", "8", "--mix", "16", "--embed", "16", "--depth", "1", "--freqs", "4",
        "--kernels", "3,5"]


def run(*argv):
    out = io.StringIO()
    code = cli.main([str(a) for a in argv], out=out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen", "--n-windows", 45, "--window-len", 64, "--seed", 1, "--out", d / "ds.npz")[0] == 0
    assert run("train", "--data", d / "ds.npz", "--out", d / "m.phlw", "--epochs", 2, "--warmup", 1, *TINY)[0] == 0
    assert run("quantize", "--weights", d / "m.phlw", "--data", d / "ds.npz", "--out", d / "q.phlw")[0] == 0
    ds = LabeledDataset.load(d / "ds.npz")
    write_signal(MultiChannelSignal(ds.X[0], 200.0), d / "w.phsg")
    return d


def test_artifacts_and_manifests(workdir):
    for name in ("ds.npz", "m.phlw", "m.phlw.history.txt", "q.phlw"):
        manifest = json.loads((workdir / f"{name}.manifest.json").read_text())
        digest = hashlib.sha256((workdir / name).read_bytes()).hexdigest()
        assert manifest["artifacts"] == {str(workdir / name): digest}
        for key in ("command", "config", "seed", "inputs", "timestamp"):
            assert key in manifest
    m = json.loads((workdir / "m.phlw.manifest.json").read_text())
    assert m["command"] == "train" and m["config"]["train"]["epochs"] == 2
    assert str(workdir / "ds.npz") in m["inputs"]


def test_reproducible(workdir, tmp_path):
    run("gen", "--n-windows", 45, "--window-len", 64, "--seed", 1, "--out", tmp_path / "ds.npz")
    assert (tmp_path / "ds.npz").read_bytes() == (workdir / "ds.npz").read_bytes()
    run("train", "--data", tmp_path / "ds.npz", "--out", tmp_path / "m.phlw", "--epochs", 2, "--warmup", 1, *TINY)
    assert (tmp_path / "m.phlw").read_bytes() == (workdir / "m.phlw").read_bytes()


def test_infer(workdir):
    for weights in ("q.phlw", "m.phlw"):
        code, out = run("infer", "--weights", workdir / weights, "--input", workdir / "w.phsg")
        assert code == 0
        lines = out.splitlines()
        assert lines[0].startswith("logits ") and len(lines[0].split()) == 4
        assert lines[1].startswith("predicted ")
    code, out = run("infer", "--weights", workdir / "q.phlw", "--input", workdir / "w.phsg", "--format", "json-lines")
    rec = json.loads(out)
    assert rec["predicted"] == int(np.argmax(rec["logits"]))


def test_budget(workdir):
    code, out = run("budget", "--weights", workdir / "m.phlw")
    assert code == 0 and "weight SRAM" in out and "PASS" in out
    code, out = run("budget", "--preset", "ecg")
    assert code == 0 and "452608" in out and "2048" in out and "524288" in out


def test_profile(workdir, tmp_path):
    code, out = run("profile", "--weights", workdir / "q.phlw", "--input", workdir / "w.phsg", "--repeats", 10,
                    "--format", "json-lines", "--out", tmp_path / "p.jsonl")
    assert code == 0
    stages = [json.loads(l)["stage"] for l in out.splitlines()[1:]]
    assert stages == ["Resampling", "Z-Norm/Quant", "Pos. Encoding", "Tile/Pack", "Inference", "End-to-End"]
    assert (tmp_path / "p.jsonl.manifest.json").exists()
    code, _ = run("profile", "--weights", workdir / "m.phlw", "--input", workdir / "w.phsg")
    assert code == 2  # float model


def test_preprocess_encode_condition(workdir, tmp_path):
    code, _ = run("preprocess", "--input", workdir / "w.phsg", "--window-len", 32, "--step", 16,
                  "--out", tmp_path / "q.npy")
    assert code == 0
    q = np.load(tmp_path / "q.npy")
    assert q.shape == (3, 4, 32) and q.dtype == np.int8
    assert run("encode", "--input", tmp_path / "q.npy", "--freqs", 3, "--out", tmp_path / "e.npy")[0] == 0
    e = np.load(tmp_path / "e.npy")
    assert e.shape == (3, 10, 32)
    np.testing.assert_array_equal(e[:, :4], q)
    code, out = run("encode", "--dump-table", "--window-len", 16, "--freqs", 2)
    assert code == 0 and out.splitlines()[0] == "0 0 0 13"
    assert run("condition", "--kind", "emg", "--input", workdir / "w.phsg", "--out", tmp_path / "c.phsg")[0] == 0


def test_distill_and_ablate(workdir, tmp_path):
    code, out = run("distill", "--data", workdir / "ds.npz", "--teacher", workdir / "m.phlw", "--out",
                    tmp_path / "s.phlw", "--epochs", 1, "--warmup", 0, "--alpha-kd", 0.5, *TINY)
    assert code == 0 and "val macro-F1" in out
    code, out = run("ablate", "--axis", "pe", "--data", workdir / "ds.npz", "--out-dir", tmp_path / "ab",
                    "--epochs", 1, "--warmup", 0, *TINY)
    assert code == 0
    on, off = load_weights(tmp_path / "ab" / "pe-on.phlw"), load_weights(tmp_path / "ab" / "pe-off.phlw")
    assert on.config.in_channels - off.config.in_channels == 2 * 4
    assert (tmp_path / "ab" / "pe-off.phlw.manifest.json").exists()
    code, out = run("ablate", "--axis", "kernels", "--kernel-sets", "3;5,7", "--data", workdir / "ds.npz",
                    "--out-dir", tmp_path / "k", "--epochs", 1, "--warmup", 0, *TINY)
    assert code == 0 and (tmp_path / "k" / "k5-7.phlw").exists()
    code, out = run("ablate", "--axis", "alpha", "--alphas", "0.3,0.7", "--teacher", workdir / "m.phlw", "--data",
                    workdir / "ds.npz", "--out-dir", tmp_path / "a", "--epochs", 1, "--warmup", 0, *TINY)
    assert code == 0 and "alpha0.7" in out


def test_usage_errors(tmp_path, capsys):
    code, _ = run("train", "--data", tmp_path / "nothing.npz")
    assert code == 1
    assert list(tmp_path.iterdir()) == []
    assert run("frobnicate")[0] == 1
    assert "usage" in capsys.readouterr().err
    assert run()[0] == 1
    assert run("ablate", "--axis", "alpha", "--data", "x", "--out-dir", tmp_path / "o")[0] in (1, 2)


@pytest.mark.parametrize("cmd", ["gen", "condition", "preprocess", "encode", "train", "distill", "quantize", "infer",
                                 "profile", "budget", "ablate"])
def test_help(cmd, capsys):
    assert run(cmd, "--help")[0] == 0
    assert "usage" in capsys.readouterr().out


def test_data_and_internal_errors(workdir, tmp_path, monkeypatch):
    (tmp_path / "bad.phlw").write_bytes(b"garbage" * 4)
    assert run("budget", "--weights", tmp_path / "bad.phlw")[0] == 2
    assert run("infer", "--weights", tmp_path / "missing.phlw", "--input", workdir / "w.phsg")[0] == 2

    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "budget_report", boom)
    assert run("budget")[0] == 3
