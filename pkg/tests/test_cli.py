from __future__ import annotations

import json
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from blora.checkpoint import TensorFile, read_file, write_file
from blora.cli import build_parser, run
from blora.tensor import Tensor
from blora.topology import all_keys

from conftest import random_pair


def schema(command: str) -> dict:
    text = resources.files("blora").joinpath(f"schemas/{command}.schema.json").read_text()
    return json.loads(text)


def blora(capsys, *argv) -> tuple[int, str, str]:
    code = run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def blora_json(capsys, *argv) -> dict:
    code, out, err = blora(capsys, *argv, "--json")
    assert code == 0, err
    doc = json.loads(out)
    jsonschema.validate(doc, schema(doc["command"]))
    return doc


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A default train-toy run (1000 steps at 5e-5) plus its base weights."""
    d = tmp_path_factory.mktemp("train")
    code = run(["train-toy", "--out", str(d / "ab.safetensors"), "--save-base", str(d / "base.safetensors")])
    assert code == 0
    return d


def test_train_defaults():
    args = build_parser().parse_args(["train-toy"])
    assert (args.steps, args.lr, args.rank, args.blocks) == (1000, 5e-5, 4, "W4,W5")


def test_manifest_echoes_training_constants(trained):
    meta = read_file(trained / "ab.safetensors").metadata
    manifest = json.loads(meta["blora.manifest"])
    assert manifest["flags"]["steps"] == 1000
    assert manifest["flags"]["lr"] == 5e-5
    assert manifest["flags"]["blocks"] == "W4,W5"
    assert manifest["command"] == "train-toy" and manifest["tool"] == "blora"


def test_keymap(capsys):
    doc = blora_json(capsys, "keymap")
    assert doc["total_layers"] == 70
    code, out, _ = blora(capsys, "keymap")
    assert code == 0 and "total 70 layers" in out


def test_inspect(capsys, trained):
    doc = blora_json(capsys, "inspect", trained / "ab.safetensors")
    assert doc["kind"] == "adapter"
    assert doc["blocks"]["W4"]["tensors"] == 32 and doc["blocks"]["W4"]["ranks"] == [4]
    assert doc["blocks"]["W0"]["tensors"] == 0
    base = blora_json(capsys, "inspect", trained / "base.safetensors")
    assert base["kind"] == "weights" and base["out_of_topology"] == ["toy.start_token"]


def test_pipeline(capsys, trained, tmp_path):
    ab = trained / "ab.safetensors"
    c = blora_json(capsys, "extract", ab, "--block", "W4", "--role", "content", "--out", tmp_path / "c.st")
    s = blora_json(capsys, "extract", ab, "--block", "up_blocks.0.attentions.1", "--role", "style",
                   "--out", tmp_path / "s.st")
    assert c["tensor_count"] == s["tensor_count"] == 32
    comb = blora_json(capsys, "combine", tmp_path / "c.st", tmp_path / "s.st", "--out", tmp_path / "cs.st")
    assert comb["metadata"]["blora.role"] == "combined"
    sc = blora_json(capsys, "scale", tmp_path / "cs.st", "--alpha", 0.45, "--out", tmp_path / "sc.st")
    assert sc["metadata"]["blora.alpha"] == "0.45"
    m = blora_json(capsys, "merge", trained / "base.safetensors", tmp_path / "cs.st", "--alpha", 1.1,
                   "--out", tmp_path / "m.st")
    assert m["merged_count"] == 32
    # merge output is the base file with 32 projections changed
    base, merged = read_file(trained / "base.safetensors"), read_file(tmp_path / "m.st")
    changed = [k for k in base.entries if base.entries[k] != merged.entries[k]]
    assert len(changed) == 32


def test_rerun_is_byte_identical(capsys, trained, tmp_path):
    outs = []
    for i in range(2):
        path = tmp_path / f"c{i}.st"
        assert run(["extract", str(trained / "ab.safetensors"), "--block", "W4", "--role", "content",
                    "--out", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    a, b = tmp_path / "t1.st", tmp_path / "t2.st"
    for p in (a, b):
        assert run(["train-toy", "--steps", "5", "--lr", "1e-3", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def full_file(tmp_path, scheme: str = "diffusers"):
    rng = np.random.default_rng(0)
    tensors = {}
    for k in all_keys(scheme):
        p = random_pair(rng, 2, 2, 1)
        up, down = (".lora_up.weight", ".lora_down.weight") if scheme == "kohya" else (".lora.up.weight", ".lora.down.weight")
        tensors[k + up], tensors[k + down] = p.up, p.down
    path = tmp_path / f"full-{scheme}.st"
    write_file(path, TensorFile.from_tensors(tensors))
    return path


def test_extract_two_blocks_is_two_sevenths(capsys, tmp_path):
    doc = blora_json(capsys, "extract", full_file(tmp_path), "--block", "W4,W5", "--out", tmp_path / "45.st")
    assert doc["tensor_count"] == 320 and doc["source_tensor_count"] == 1120
    assert doc["metadata"]["blora.block"] == "W4,W5"


def test_kohya_twin_combines_identically(capsys, tmp_path):
    results = []
    for scheme in ("diffusers", "kohya"):
        src = full_file(tmp_path, scheme)
        d = tmp_path / scheme
        d.mkdir()
        assert run(["extract", str(src), "--block", "W4", "--role", "content", "--out", str(d / "c.st")]) == 0
        assert run(["extract", str(src), "--block", "W5", "--role", "style", "--out", str(d / "s.st")]) == 0
        assert run(["combine", str(d / "c.st"), str(d / "s.st"), "--out", str(d / "cs.st")]) == 0
        results.append((d / "cs.st").read_bytes())
    assert results[0] == results[1]


def test_combine_overlap_exit_3(capsys, trained, tmp_path):
    ab = trained / "ab.safetensors"
    run(["extract", str(ab), "--block", "W4", "--role", "content", "--out", str(tmp_path / "c.st")])
    run(["extract", str(ab), "--block", "W4", "--role", "style", "--out", str(tmp_path / "s.st")])
    capsys.readouterr()
    code, _, err = blora(capsys, "combine", tmp_path / "c.st", tmp_path / "s.st", "--out", tmp_path / "x.st")
    assert code == 3
    assert err.startswith("error: overlap: ") and err.count("\n") == 1
    assert not (tmp_path / "x.st").exists()


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["extract", "x.st", "--role", "content"],
    ["train-toy", "--steps", "3"],
    ["train-toy", "--blocks", "W9", "--out", "x.st"],
    ["scale", "x.st", "--alpha", "abc", "--out", "y.st"],
])
def test_usage_errors_exit_1(capsys, argv):
    code, _, err = blora(capsys, *argv)
    assert code == 1
    assert err.startswith("error: usage: ")


def test_format_errors_exit_2(capsys, tmp_path):
    junk = tmp_path / "junk.st"
    junk.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{oops")
    code, _, err = blora(capsys, "inspect", junk)
    assert code == 2 and err.startswith("error: malformed-header: ")
    code, _, err = blora(capsys, "inspect", tmp_path / "missing.st")
    assert code == 2 and err.startswith("error: io: ")


def test_extract_missing_block_exit_3(capsys, trained, tmp_path):
    code, _, err = blora(capsys, "extract", trained / "ab.safetensors", "--block", "W0", "--role", "content",
                         "--out", tmp_path / "x.st")
    assert code == 3 and "empty" in err.split(":")[1]


def test_probe(capsys):
    doc = blora_json(capsys, "probe", "--pairs", 5, "--fixture-block", 2)
    assert doc["pair_count"] == 5
    assert doc["families"]["content"]["argmax"] == 2


def test_eval(capsys, tmp_path):
    t = {"0/output": Tensor([1.0, 0.0]), "0/style": Tensor([1.0, 0.0]), "0/content": Tensor([0.0, 1.0]),
         "1/output": Tensor([1.0, 1.0]), "1/style": Tensor([1.0, 0.0]), "1/content": Tensor([0.0, 1.0])}
    write_file(tmp_path / "e.st", TensorFile.from_tensors(t))
    doc = blora_json(capsys, "eval", tmp_path / "e.st")
    assert doc["count"] == 2
    assert doc["style_score"]["mean"] == pytest.approx((1 + 2 ** -0.5) / 2)


def test_pair_grid(capsys, tmp_path):
    assert run(["pair-grid", "--steps", "1", "--out", str(tmp_path / "g.json")]) == 0
    doc = json.loads((tmp_path / "g.json").read_text())
    jsonschema.validate(doc, schema("pair-grid"))
    grid = np.array(doc["final_loss"])
    assert np.array_equal(grid, grid.T)


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "blora", "--json", "keymap"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["total_stems"] == 560
    proc = subprocess.run([sys.executable, "-m", "blora", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1
