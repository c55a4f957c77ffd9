"""
Structured-text artifact container for aad.
Models are stored as JSON documents with a version tag, a kind discriminator
and a BLAKE3 digest of the canonical payload.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
from blake3 import blake3

from aad.errors import CorruptModel, VersionMismatch


logger = logging.getLogger(__name__)

FORMAT_TAG = "aad"
FORMAT_VERSION = 1
MODEL_KINDS = ("vae", "forest", "boosted")


def _canonical(payload: Dict[str, Any]) -> bytes:
    """Canonical JSON bytes the digest is computed over."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def encode_array(array: np.ndarray) -> Dict[str, Any]:
    """Row-major array with its shape; floats keep their shortest round-trip repr."""
    array = np.asarray(array)
    if array.dtype.kind in "iub":
        data = array.astype(np.int64).reshape(-1).tolist()
        dtype = "int64"
    else:
        data = array.astype(np.float64).reshape(-1).tolist()
        dtype = "float64"
    return {"shape": list(array.shape), "dtype": dtype, "data": data}


def decode_array(data: Dict[str, Any]) -> np.ndarray:
    try:
        array = np.array(data["data"], dtype=np.dtype(data["dtype"]))
        return array.reshape(data["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptModel(f"Malformed array entry: {e}") from e


def save_artifact(path: Union[str, Path], model_kind: str, payload: Dict[str, Any]) -> str:
    """Write a versioned, digested document and return its digest."""
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"Unknown model kind: {model_kind}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    digest = blake3(_canonical(payload)).hexdigest()
    document = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "model_kind": model_kind,
        "digest": digest,
        "payload": payload,
    }
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with open(tmp_path, "w") as f:
        json.dump(document, f, sort_keys=True, indent=1)
    os.replace(tmp_path, path)
    logger.debug("Saved %s artifact to %s (digest %s)", model_kind, path, digest[:16])
    return digest


def load_artifact(path: Union[str, Path]) -> Tuple[str, Dict[str, Any]]:
    """Read a document written by save_artifact; returns (model_kind, payload)."""
    path = Path(path)
    try:
        with open(path, "r") as f:
            document = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptModel(f"{path}: not a readable model file ({e})") from e

    if not isinstance(document, dict) or document.get("format") != FORMAT_TAG:
        raise CorruptModel(f"{path}: missing '{FORMAT_TAG}' format tag")

    version = document.get("version")
    if not isinstance(version, int):
        raise CorruptModel(f"{path}: missing version field")
    if version > FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: file version {version} is newer than supported version {FORMAT_VERSION}"
        )

    model_kind = document.get("model_kind")
    payload = document.get("payload")
    if model_kind not in MODEL_KINDS or not isinstance(payload, dict):
        raise CorruptModel(f"{path}: unknown model kind or missing payload")

    if blake3(_canonical(payload)).hexdigest() != document.get("digest"):
        raise CorruptModel(f"{path}: payload digest mismatch")
    return model_kind, payload


def write_json(path: Union[str, Path], data: Dict[str, Any]) -> None:
    """Plain JSON document with stable key order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, sort_keys=True, indent=2)
        f.write("\n")
