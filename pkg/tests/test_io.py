import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedoa import nn
from fedoa.io import adapter_from_json, adapter_to_json, dumps, load_adapter, save_adapter


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_floats_round_trip_exactly(x):
    assert json.loads(dumps({"v": x}))["v"] == x


def test_non_finite_written_as_null():
    assert json.loads(dumps([float("nan"), 1.0, float("inf")])) == [None, 1.0, None]


def test_dumps_keeps_key_order_and_types():
    text = dumps({"b": 1, "a": [1.5, 2], "c": None, "d": True, "e": np.float64(0.1)})
    assert list(json.loads(text)) == ["b", "a", "c", "d", "e"]
    assert '"e": 0.10000000000000001' in text
    with pytest.raises(TypeError):
        dumps({"x": object()})


def test_adapter_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    enc = nn.init_encoder([5, 4, 3], rng)
    ad = nn.init_adapter(enc, 2, rng, scale=0.5)
    ad = nn.LoraAdapter([(A, rng.standard_normal(B.shape)) for A, B in ad.layers], 2, 0.5)
    path = tmp_path / "a.json"
    save_adapter(path, ad, enc.adapted_indices)
    back = load_adapter(path)
    assert back.rank == 2 and back.scale == 0.5
    np.testing.assert_array_equal(back.flat(), ad.flat())
    doc = json.loads(path.read_text())
    assert [e["layer_index"] for e in doc] == [0, 1]
    assert set(doc[0]) == {"layer_index", "rank", "scale", "A", "B"}


def test_checkpoint_layers_are_reordered_by_index():
    ad = nn.LoraAdapter([(np.ones((1, 2)), np.zeros((3, 1))), (2 * np.ones((1, 3)), np.ones((2, 1)))], 1)
    doc = adapter_to_json(ad)[::-1]
    np.testing.assert_array_equal(adapter_from_json(doc).flat(), ad.flat())


def test_bad_checkpoints_rejected():
    with pytest.raises(ValueError):
        adapter_from_json([])
    doc = adapter_to_json(nn.LoraAdapter([(np.ones((1, 2)), np.zeros((2, 1)))] * 2, 1))
    doc[1]["rank"] = 2
    with pytest.raises(ValueError):
        adapter_from_json(doc)
