"""
Tests for the model artifact container.
"""

import json

import numpy as np
import pytest

from aad.errors import CorruptModel, VersionMismatch
from aad.storage import FORMAT_VERSION, decode_array, encode_array, load_artifact, save_artifact


@pytest.fixture
def artifact(tmp_path):
    path = tmp_path / "model.json"
    payload = {"weights": encode_array(np.linspace(-1.0, 1.0, 6).reshape(2, 3)), "name": "tiny"}
    digest = save_artifact(path, "forest", payload)
    return path, payload, digest


def rewrite(path, **changes):
    document = json.loads(path.read_text())
    document.update(changes)
    path.write_text(json.dumps(document))


class TestArtifact:
    """Test save_artifact and load_artifact."""

    def test_round_trip(self, artifact):
        path, payload, digest = artifact
        kind, loaded = load_artifact(path)
        assert kind == "forest"
        assert loaded == payload

        document = json.loads(path.read_text())
        assert document["format"] == "aad"
        assert document["version"] == FORMAT_VERSION
        assert document["digest"] == digest
        assert len(digest) == 64

    def test_digest_ignores_key_order(self, tmp_path):
        a = save_artifact(tmp_path / "a.json", "vae", {"x": 1, "y": [1.5, 2.5]})
        b = save_artifact(tmp_path / "b.json", "vae", {"y": [1.5, 2.5], "x": 1})
        assert a == b

    def test_newer_version(self, artifact):
        path, _, _ = artifact
        rewrite(path, version=FORMAT_VERSION + 1)
        with pytest.raises(VersionMismatch, match="newer"):
            load_artifact(path)

    def test_missing_format_tag(self, artifact):
        path, _, _ = artifact
        rewrite(path, format="other")
        with pytest.raises(CorruptModel, match="format tag"):
            load_artifact(path)

    def test_unknown_kind(self, artifact):
        path, _, _ = artifact
        rewrite(path, model_kind="svm")
        with pytest.raises(CorruptModel):
            load_artifact(path)

    def test_edited_payload(self, artifact):
        path, _, _ = artifact
        document = json.loads(path.read_text())
        document["payload"]["name"] = "other"
        path.write_text(json.dumps(document))
        with pytest.raises(CorruptModel, match="digest"):
            load_artifact(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_bytes(b"\x00\x01binary")
        with pytest.raises(CorruptModel):
            load_artifact(path)

    def test_rejects_unknown_kind_on_save(self, tmp_path):
        with pytest.raises(ValueError):
            save_artifact(tmp_path / "m.json", "svm", {})


class TestArrays:
    """Test array encoding."""

    def test_float_values_exact(self):
        values = np.random.default_rng(0).normal(size=(4, 5)) * 1e-300
        back = decode_array(json.loads(json.dumps(encode_array(values))))
        assert back.dtype == np.float64
        assert np.array_equal(back, values)

    def test_integer_array(self):
        back = decode_array(encode_array(np.array([-1, 0, 7], dtype=np.int8)))
        assert back.dtype == np.int64
        assert back.tolist() == [-1, 0, 7]

    def test_malformed(self):
        with pytest.raises(CorruptModel):
            decode_array({"shape": [3], "dtype": "float64", "data": [1.0, 2.0]})
