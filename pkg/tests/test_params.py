import json

import numpy as np
import pytest

from graftkit.params import ParamRegistry, load_checkpoint, save_checkpoint


def small_registry():
    reg = ParamRegistry()
    rng = np.random.default_rng(0)
    reg.param("enc.w", rng.normal(0, 1, (3, 4)))
    reg.param("enc.b", np.zeros(4))
    reg.param("lm.emb", rng.normal(0, 1, (5, 2)), frozen=True)
    return reg


def test_duplicate_name_rejected():
    reg = small_registry()
    with pytest.raises(ValueError):
        reg.param("enc.w", np.zeros(1))


def test_digest_stable_under_frozen_and_changes_on_write():
    reg = small_registry()
    d0 = reg.digest("lm.emb")
    assert d0 == reg.digest("lm.emb")
    reg["enc.w"].data += 1.0
    assert reg.digest("enc.w") != small_registry().digest("enc.w")
    assert reg.digest("lm.emb") == d0


def test_roundtrip_bytes_identical(tmp_path):
    reg = small_registry()
    p1 = tmp_path / "a.ckpt"
    save_checkpoint(reg, p1, meta={"stage": "t"})
    meta, values, frozen = load_checkpoint(p1)
    assert meta == {"stage": "t"}
    assert frozen == {"enc.w": False, "enc.b": False, "lm.emb": True}

    reg2 = ParamRegistry()
    for name, arr in values.items():
        reg2.param(name, arr, frozen=frozen[name])
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(reg2, p2, meta={"stage": "t"})
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.with_suffix(".ckpt.bin").read_bytes() == p2.with_suffix(".ckpt.bin").read_bytes()


def test_truncated_blob_refused(tmp_path):
    reg = small_registry()
    p = tmp_path / "c.ckpt"
    save_checkpoint(reg, p)
    blob = p.with_suffix(".ckpt.bin")
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError, match="digest mismatch"):
        load_checkpoint(p)


def test_edited_shape_refused_with_field_name(tmp_path):
    reg = small_registry()
    p = tmp_path / "d.ckpt"
    save_checkpoint(reg, p)
    manifest = json.loads(p.read_text())
    manifest["params"][0]["shape"] = [2, 4]
    p.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(p)


def test_load_values_shape_checked():
    reg = small_registry()
    with pytest.raises(ValueError, match="shape mismatch"):
        reg.load_values({"enc.b": np.zeros((2, 2))})
    reg.load_values({"enc.b": np.ones(4)})
    assert np.all(reg["enc.b"].data == 1.0)


def test_combined_digest_covers_prefix():
    reg = small_registry()
    d = reg.combined_digest("enc.")
    reg["lm.emb"].data += 1.0
    assert reg.combined_digest("enc.") == d
    reg["enc.b"].data += 1.0
    assert reg.combined_digest("enc.") != d
