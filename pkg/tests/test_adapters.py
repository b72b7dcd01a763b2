"""Adapter construction, determinism, and the JSON definition format."""

import json

import numpy as np
import pytest

from aloraserve import LoraAdapter, generate_adapter, load_adapter_file
from aloraserve.adapters import MODE_ACTIVATED, MODE_STANDARD, adapter_from_dict


def test_generation_is_deterministic_and_order_free():
    a = generate_adapter("x", d_model=64, rank=4, seed=1, invocation_tokens=(250,))
    generate_adapter("decoy", d_model=64, rank=4, seed=9, invocation_tokens=(251,))
    b = generate_adapter("x", d_model=64, rank=4, seed=1, invocation_tokens=(250,))
    for t in ("q", "k", "v"):
        assert np.array_equal(a.down[t], b.down[t])
        assert np.array_equal(a.up[t], b.up[t])
        assert a.down[t].shape == (64, 4) and a.up[t].shape == (4, 64)
        assert a.down[t].dtype == np.float32


def test_different_ids_and_seeds_differ():
    a = generate_adapter("x", d_model=32, rank=2, seed=0, invocation_tokens=(1,))
    b = generate_adapter("y", d_model=32, rank=2, seed=0, invocation_tokens=(1,))
    c = generate_adapter("x", d_model=32, rank=2, seed=1, invocation_tokens=(1,))
    assert not np.array_equal(a.down["q"], b.down["q"])
    assert not np.array_equal(a.down["q"], c.down["q"])


def test_factors_are_nonzero():
    a = generate_adapter("x", d_model=16, rank=2, seed=0, invocation_tokens=(1,))
    assert np.abs(a.down["q"]).max() > 0
    assert np.abs(a.up["q"]).max() > 0


def test_target_subset():
    a = generate_adapter("x", d_model=16, rank=2, seed=0, targets=("q",), invocation_tokens=(1,))
    assert set(a.down) == {"q"} and set(a.up) == {"q"}


def test_validation():
    with pytest.raises(ValueError):
        generate_adapter("x", d_model=8, rank=16, invocation_tokens=(1,))
    with pytest.raises(ValueError):
        LoraAdapter(adapter_id="x", rank=0, invocation_tokens=(1,))
    with pytest.raises(ValueError):
        LoraAdapter(adapter_id="x", rank=1, mode="other", invocation_tokens=(1,))
    with pytest.raises(ValueError):
        LoraAdapter(adapter_id="x", rank=1, targets=("z",), invocation_tokens=(1,))
    with pytest.raises(ValueError):
        LoraAdapter(adapter_id="x", rank=1, mode=MODE_ACTIVATED, invocation_tokens=None)


def test_standard_mode_needs_no_invocation():
    a = LoraAdapter(adapter_id="x", rank=1, mode=MODE_STANDARD)
    assert a.invocation_tokens is None


def test_from_dict_infers_mode():
    spec = {"adapter_id": "x", "rank": 2, "seed": 0}
    assert adapter_from_dict(spec, 16).mode == MODE_STANDARD
    spec["invocation_tokens"] = [250, 251]
    assert adapter_from_dict(spec, 16).mode == MODE_ACTIVATED


def test_from_dict_mode_override():
    spec = {"adapter_id": "x", "rank": 2, "seed": 0, "invocation_tokens": [250]}
    a = adapter_from_dict(spec, 16, mode=MODE_STANDARD)
    assert a.mode == MODE_STANDARD
    assert a.invocation_tokens == (250,)


def test_file_load_matches_generation(tmp_path):
    p = tmp_path / "ad.json"
    p.write_text(json.dumps({"adapter_id": "f", "rank": 3, "seed": 5, "invocation_tokens": [240]}))
    loaded = load_adapter_file(p, d_model=32)
    direct = generate_adapter("f", d_model=32, rank=3, seed=5, invocation_tokens=(240,))
    assert np.array_equal(loaded.down["q"], direct.down["q"])
    assert loaded.mode == MODE_ACTIVATED


def test_from_dict_missing_key():
    with pytest.raises(ValueError, match="missing"):
        adapter_from_dict({"adapter_id": "x", "rank": 2}, 16)
