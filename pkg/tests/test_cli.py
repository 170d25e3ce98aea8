import csv
import io
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from kstransformer.cli import main
from kstransformer.data import file_sha256, load_dataset
from kstransformer.export import load_schema


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


SYNTH = ["--n-samples", "40", "--audio-dim", "6", "--text-dim", "5"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "d.ksef"
    assert main(["synth", "--out", str(data), *SYNTH, "--seed", "2"]) == 0
    ckpt = root / "ckpt"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--epochs", "2", "--lr", "0.05"]) == 0
    return data, ckpt


def test_synth_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "synth", "--out", str(tmp_path / name), *SYNTH, "--seed", "9")
        assert code == 0 and json.loads(out)["samples"] == 40
    assert file_sha256(tmp_path / "a") == file_sha256(tmp_path / "b")


def test_train_writes_checkpoint_and_manifest(trained):
    data, ckpt = trained
    for name in ("manifest.json", "params.bin", "history.csv", "run_manifest.json"):
        assert (ckpt / name).exists()
    manifest = json.loads((ckpt / "run_manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 0
    assert manifest["inputs"][str(data)] == file_sha256(data)
    assert manifest["config"]["train"]["lr0"] == 0.05


def test_eval_is_bit_reproducible(trained, capsys):
    data, ckpt = trained
    first = run(capsys, "eval", "--ckpt", str(ckpt), "--data", str(data))
    second = run(capsys, "eval", "--ckpt", str(ckpt), "--data", str(data))
    assert first[0] == 0 and first[1] == second[1]
    assert set(json.loads(first[1])) >= {"wa", "ua", "confusion"}


def test_inspect_attn_matches_schema(trained, tmp_path, capsys):
    data, ckpt = trained
    sample = load_dataset(data)[0]
    out = tmp_path / "attn.json"
    code, _, _ = run(capsys, "inspect-attn", "--ckpt", str(ckpt), "--sample", sample.id, "--out", str(out))
    assert code == 0
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, load_schema())
    assert doc["sample_id"] == sample.id
    for entry in doc["entries"]:
        dense = np.array(entry["dense"])
        np.testing.assert_allclose(dense.sum(-1), 1.0, atol=1e-6)
        mask = np.array(entry["mask"], dtype=bool)
        np.testing.assert_allclose(np.array(entry["sparse"]), np.where(mask, dense, 0.0), atol=1e-12)


def test_inspect_attn_unknown_sample(trained, tmp_path, capsys):
    _, ckpt = trained
    code, _, err = run(capsys, "inspect-attn", "--ckpt", str(ckpt), "--sample", "nope", "--out", str(tmp_path / "x"))
    assert code == 1 and err.startswith("error: ")


def test_fmt_dump(trained, capsys):
    data, _ = trained
    code, out, _ = run(capsys, "fmt-dump", "--in", str(data))
    lines = out.splitlines()
    assert code == 0 and json.loads(lines[0])["records"] == 40 and len(lines) == 41


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--preset", "tiny")
    assert code == 0 and "PASS" in out


def test_ccab_sweep_csv(tmp_path, capsys):
    data = tmp_path / "d.ksef"
    main(["synth", "--out", str(data), *SYNTH])
    capsys.readouterr()
    code, out, _ = run(
        capsys, "sweep", "--kind", "ccab", "--values", "0,1,2,3,4", "--data", str(data),
        "--epochs", "1", "--out", str(tmp_path / "sw"),
    )
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0 and rows[0] == ["amount", "WA", "UA"] and len(rows) == 6
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4"]
    assert all(0.0 <= float(r[2]) <= 1.0 for r in rows[1:])
    assert (tmp_path / "sw" / "sweep.csv").read_text() == out


class TestExitCodes:
    def test_unknown_flag_lists_valid_flags(self, capsys):
        code, _, err = run(capsys, "gradcheck", "--bogus")
        assert code == 2 and "--bogus" in err and "--tol" in err

    def test_missing_command(self, capsys):
        assert run(capsys)[0] == 2

    def test_missing_file_is_domain_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "fmt-dump", "--in", str(tmp_path / "missing.ksef"))
        assert code == 1 and err.startswith("error: FileNotFoundError")

    def test_corrupt_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.ksef"
        bad.write_bytes(b"KSEF\x01\x00")
        code, _, err = run(capsys, "fmt-dump", "--in", str(bad))
        assert code == 1 and "CorruptFileError" in err and "offset" in err

    def test_error_recorded_in_manifest(self, tmp_path, capsys):
        m = tmp_path / "m.json"
        run(capsys, "fmt-dump", "--in", str(tmp_path / "nope"), "--manifest", str(m))
        doc = json.loads(m.read_text())
        assert doc["status"] == "error" and "FileNotFoundError" in doc["error"]

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "kstransformer", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.strip() == "0.1.0"


def test_config_file_precedence(tmp_path, capsys):
    data = tmp_path / "d.ksef"
    main(["synth", "--out", str(data), *SYNTH])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "tiny", "model": {"sparse_ratio": 0.3}, "train": {"epochs": 1, "lr0": 0.01}}))
    out = tmp_path / "ck"
    capsys.readouterr()
    assert main(["train", "--data", str(data), "--out", str(out), "--config", str(cfg), "--lr", "0.02"]) == 0
    resolved = json.loads((out / "run_manifest.json").read_text())["config"]
    assert resolved["model"]["sparse_ratio"] == 0.3
    assert resolved["train"]["lr0"] == 0.02 and resolved["train"]["epochs"] == 1
