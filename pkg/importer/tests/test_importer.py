import json
import os

import numpy as np
import pytest

from ckpt_importer import (LayerSelection, Rule, SelectionError, SourceError,
                           import_checkpoint, load_checkpoint, load_selection,
                           read_archive, read_safetensors, write_safetensors)
from ckpt_importer.cli import main
from ckpt_importer.select import select_tensors


RULES = [
    {"pattern": r"model\.layers\.(\d+)\.self_attn\.q_proj\.weight", "role": "q"},
    {"pattern": r"model\.layers\.(\d+)\.self_attn\.k_proj\.weight", "role": "k"},
    {"pattern": r"model\.layers\.(\d+)\.mlp\.up_proj\.weight", "role": "up"},
    {"pattern": r"model\.layers\.(\d+)\.mlp\.down_proj\.weight", "role": "down"},
]


def toy_checkpoint(rng, dtype=np.float32):
    return {
        "model.layers.0.self_attn.q_proj.weight": rng.normal(size=(8, 8)).astype(dtype),
        "model.layers.0.self_attn.k_proj.weight": rng.normal(size=(8, 8)).astype(dtype),
        "model.layers.0.mlp.up_proj.weight": rng.normal(size=(16, 8)).astype(dtype),
        "model.layers.0.mlp.down_proj.weight": rng.normal(size=(8, 16)).astype(dtype),
        "model.layers.1.self_attn.q_proj.weight": rng.normal(size=(8, 8)).astype(dtype),
        "model.embed_tokens.weight": rng.normal(size=(32, 8)).astype(dtype),
        "model.layers.0.ln.weight": rng.normal(size=(8,)).astype(dtype),
        "model.norm.weight": rng.normal(size=(8,)).astype(dtype),
    }


def write_map(tmp_path, rules=RULES):
    path = tmp_path / "map.json"
    path.write_text(json.dumps(rules))
    return path


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def test_safetensors_round_trip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32),
               "b": rng.normal(size=(2, 2)),
               "h": rng.normal(size=(5,)).astype(np.float16)}
    path = tmp_path / "ck.safetensors"
    write_safetensors(path, tensors)
    got = read_safetensors(path)
    for name, arr in tensors.items():
        assert got[name].dtype == arr.dtype
        assert got[name].tobytes() == arr.tobytes()


def test_safetensors_bad_files(tmp_path):
    short = tmp_path / "short.safetensors"
    short.write_bytes(b"\x01\x02")
    with pytest.raises(SourceError, match="too short"):
        read_safetensors(short)
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"\x04\x00\x00\x00\x00\x00\x00\x00NOPE")
    with pytest.raises(SourceError, match="header"):
        read_safetensors(bad)


def test_npz_loading(tmp_path, rng):
    path = tmp_path / "ck.npz"
    np.savez(path, w=rng.normal(size=(4, 4)))
    got = load_checkpoint(path)
    assert got["w"].shape == (4, 4)
    with pytest.raises(SourceError, match="unknown checkpoint format"):
        load_checkpoint(tmp_path / "ck.bin")


def test_selection_maps_blocks_and_roles(rng):
    sel = LayerSelection([Rule(r["pattern"], r["role"]) for r in RULES])
    tensors = toy_checkpoint(rng)
    out = select_tensors(tensors, sel)
    assert set(out) == {"block0.attn.q", "block0.attn.k", "block0.mlp.up",
                        "block0.mlp.down", "block1.attn.q"}
    assert out["block0.mlp.up"].shape == (16, 8)


def test_unmatched_selection_lists_available_names(rng):
    sel = LayerSelection([Rule(r"decoder\.(\d+)\.weight", "q")])
    with pytest.raises(SelectionError, match="model.embed_tokens.weight"):
        select_tensors(toy_checkpoint(rng), sel)


def test_non_2d_selected_tensor_rejected(rng):
    sel = LayerSelection([Rule(r"model\.layers\.(\d+)\.self_attn\.q_proj\.weight", "q"),
                          Rule(r"model\.layers\.(\d+)\.ln\.weight", "o")])
    with pytest.raises(SelectionError, match="not 2-d"):
        select_tensors(toy_checkpoint(rng), sel)


def test_duplicate_destination_rejected(rng):
    sel = LayerSelection([
        Rule(r"model\.layers\.(\d+)\.self_attn\.q_proj\.weight", "q"),
        Rule(r"model\.layers\.(\d+)\.self_attn\.k_proj\.weight", "q"),
    ])
    with pytest.raises(SelectionError, match="map to 'block0.attn.q'"):
        select_tensors(toy_checkpoint(rng), sel)


def test_map_file_validation(tmp_path):
    with pytest.raises(SelectionError, match="capture group"):
        Rule(r"fixed\.name", "q")
    with pytest.raises(SelectionError, match="unknown role"):
        Rule(r"(\d+)", "bias")
    bad = tmp_path / "map.json"
    bad.write_text(json.dumps([{"pattern": r"(\d+)"}]))
    with pytest.raises(SelectionError, match="expected keys"):
        load_selection(bad)
    bad.write_text("{}")
    with pytest.raises(SelectionError, match="non-empty JSON list"):
        load_selection(bad)


def test_import_converts_to_f64_by_default(tmp_path, rng):
    src = tmp_path / "ck.safetensors"
    write_safetensors(src, toy_checkpoint(rng, dtype=np.float32))
    out = tmp_path / "weights.mdpt"
    meta = import_checkpoint(src, load_selection(write_map(tmp_path)), out)
    tensors, got_meta = read_archive(out)
    assert got_meta["dtype_policy"] == "f64"
    assert got_meta["source_sha256"]
    assert all(a.dtype == np.float64 for a in tensors.values())
    assert set(tensors) == set(meta["tensors"])


def test_preserve_dtype_keeps_f32_bits(tmp_path, rng):
    ck = toy_checkpoint(rng, dtype=np.float32)
    src = tmp_path / "ck.safetensors"
    write_safetensors(src, ck)
    out = tmp_path / "weights.mdpt"
    import_checkpoint(src, load_selection(write_map(tmp_path)), out,
                      preserve_dtype=True)
    tensors, _ = read_archive(out)
    assert tensors["block0.attn.q"].dtype == np.float32
    assert tensors["block0.attn.q"].tobytes() == \
        ck["model.layers.0.self_attn.q_proj.weight"].tobytes()


def test_import_is_read_only_on_source(tmp_path, rng):
    src = tmp_path / "ck.npz"
    np.savez(src, **{"model.layers.0.self_attn.q_proj.weight":
                     rng.normal(size=(4, 4))})
    before = src.read_bytes()
    import_checkpoint(src, load_selection(write_map(tmp_path)),
                      tmp_path / "out.mdpt")
    assert src.read_bytes() == before


def test_cli_end_to_end_and_exit_codes(tmp_path, rng, capsys):
    src = tmp_path / "ck.safetensors"
    write_safetensors(src, toy_checkpoint(rng))
    map_path = write_map(tmp_path)
    out = tmp_path / "weights.mdpt"
    assert main(["import", "--src", str(src), "--map", str(map_path),
                 "--out", str(out)]) == 0
    assert "block0.attn.q" in capsys.readouterr().out
    assert out.exists()

    empty_map = tmp_path / "none.json"
    empty_map.write_text(json.dumps([{"pattern": r"zzz(\d+)", "role": "q"}]))
    assert main(["import", "--src", str(src), "--map", str(empty_map),
                 "--out", str(out)]) == 2
    garbage = tmp_path / "g.safetensors"
    garbage.write_bytes(b"xx")
    assert main(["import", "--src", str(garbage), "--map", str(map_path),
                 "--out", str(out)]) == 3
