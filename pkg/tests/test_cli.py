import json
import subprocess
import sys
from pathlib import Path

import pytest

from graftkit.cli import checkpoint_roundtrip, main
from graftkit.corpus import CorpusSpec, generate_corpus, save_corpus
from graftkit.params import ParamRegistry, save_checkpoint


def run_cli(args, **kw):
    return main(list(args))


def test_unknown_command_exits_2(capsys):
    assert run_cli(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_no_command_exits_2(capsys):
    assert run_cli([]) == 2


def test_unknown_flag_exits_2(capsys):
    assert run_cli(["eval", "--metric", "ndcg", "--rel", "2,2", "--bogus"]) == 2


def test_synth_deterministic_digest(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run_cli(["synth", "--seed", "7", "--n", "6", "--out", str(out1)]) == 0
    assert run_cli(["synth", "--seed", "7", "--n", "6", "--out", str(out2)]) == 0
    d1 = json.loads((out1 / "synth.json").read_text())
    d2 = json.loads((out2 / "synth.json").read_text())
    assert d1["result"]["digest"] == d2["result"]["digest"]
    assert d1["version"].startswith("graftkit-")
    assert d1["config"]["seed"] == 7
    # defaults dumped for discoverability on specless runs
    assert (out1 / "spec.json").exists()


def test_synth_with_spec_file(tmp_path):
    spec_path = tmp_path / "s.json"
    spec_path.write_text(json.dumps(CorpusSpec(n_studies=4).to_json()))
    assert run_cli(["synth", "--seed", "1", "--spec", str(spec_path),
                    "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "synth.json").read_text())
    assert doc["result"]["n_studies"] == 4


def test_synth_rejects_bad_spec(tmp_path, capsys):
    spec_path = tmp_path / "bad.json"
    spec_path.write_text(json.dumps({"prevalence": {"effusion": 2.0}}))
    assert run_cli(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "o")]) == 1
    assert "prevalence" in capsys.readouterr().err


def test_eval_ndcg_value(tmp_path, capsys):
    assert run_cli(["eval", "--metric", "ndcg", "--rel", "2,2,2,1,2",
                    "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "eval.json").read_text())
    assert abs(doc["result"]["value"] - 0.9269) < 1e-4
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert abs(printed["value"] - 0.9269) < 1e-4


def test_eval_precision_and_auc(tmp_path):
    assert run_cli(["eval", "--metric", "precision", "--rel", "2,2,1,0,0",
                    "--out", str(tmp_path / "p")]) == 0
    doc = json.loads((tmp_path / "p" / "eval.json").read_text())
    assert doc["result"]["value"] == {"score=2": 0.4, "score>=1": 0.6}
    assert run_cli(["eval", "--metric", "auc", "--scores", "0.8,0.4,0.6,0.2",
                    "--labels", "1,1,0,0", "--out", str(tmp_path / "a")]) == 0
    doc = json.loads((tmp_path / "a" / "eval.json").read_text())
    assert doc["result"]["value"] == 0.75


def test_eval_bootstrap_deterministic(tmp_path):
    argv = ["eval", "--metric", "bootstrap-mean", "--scores", "1,2,3,4,5",
            "--n", "200", "--seed", "3"]
    assert run_cli(argv + ["--out", str(tmp_path / "x")]) == 0
    assert run_cli(argv + ["--out", str(tmp_path / "y")]) == 0
    dx = json.loads((tmp_path / "x" / "eval.json").read_text())
    dy = json.loads((tmp_path / "y" / "eval.json").read_text())
    assert dx["result"]["value"] == dy["result"]["value"]


def test_checkpoint_roundtrip_and_tamper(tmp_path):
    import numpy as np

    reg = ParamRegistry()
    reg.param("a.w", np.arange(6.0).reshape(2, 3))
    reg.param("b.w", np.ones(4), frozen=True)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(reg, ckpt, meta={"kind": "test"})
    res = checkpoint_roundtrip(ckpt)
    assert res["verified"]

    blob = ckpt.with_suffix(".ckpt.bin")
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="digest mismatch"):
        checkpoint_roundtrip(ckpt)


def test_eval_checkpoint_command(tmp_path):
    import numpy as np

    reg = ParamRegistry()
    reg.param("w", np.ones(3))
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(reg, ckpt)
    assert run_cli(["eval", "--metric", "checkpoint", "--ckpt", str(ckpt),
                    "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "eval.json").read_text())
    assert doc["result"]["value"]["verified"]


def test_eval_checkpoint_requires_ckpt(capsys, tmp_path):
    assert run_cli(["eval", "--metric", "checkpoint", "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_runtime_error_exits_1(tmp_path, capsys):
    assert run_cli(["train-c", "--corpus", str(tmp_path / "missing"),
                    "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err.lower()


def test_env_var_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("GRAFTKIT_OUT", str(tmp_path / "envout"))
    assert run_cli(["eval", "--metric", "ndcg", "--rel", "2,2,2,2,2"]) == 0
    assert (tmp_path / "envout" / "eval.json").exists()


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "graftkit.cli", "frobnicate"],
                          capture_output=True, text=True)
    assert proc.returncode == 2


def test_tiny_train_c_via_cli(tmp_path):
    corpus = generate_corpus(3, CorpusSpec(n_studies=6))
    save_corpus(corpus, tmp_path / "corpus")
    assert run_cli(["train-c", "--corpus", str(tmp_path / "corpus"), "--steps", "2",
                    "--seed", "1", "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "train_c.json").read_text())
    assert Path(doc["result"]["checkpoint"]).exists()
    res = checkpoint_roundtrip(doc["result"]["checkpoint"])
    assert res["verified"]
