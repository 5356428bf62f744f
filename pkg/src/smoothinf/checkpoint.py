"""Model checkpoints: a JSON document with base64-encoded little-endian float64 blobs.

The encoding is canonical (sorted keys, fixed separators, exact float reprs),
so ``dumps(loads(b)) == b`` for every checkpoint ``b`` written here.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile

import numpy as np

from .engine import Model, layer_from_spec
from .errors import ParseError
from .noise import NoiseSpec

FORMAT_VERSION = 1


def _encode(a: np.ndarray) -> dict:
    raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(raw).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(d["shape"])


def dumps(model: Model) -> bytes:
    doc = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "input_domain": [float(v) for v in model.input_domain],
        "layers": [
            {"spec": layer.spec(), "params": [_encode(p) for p in layer.params],
             "noise": None if spec is None else spec.to_dict()}
            for layer, spec in zip(model.layers, model.noise)
        ],
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def loads(data: bytes) -> Model:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"checkpoint is not valid JSON: {exc}") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint format_version {version!r}")
    try:
        layers, noise = [], []
        for entry in doc["layers"]:
            layer = layer_from_spec(entry["spec"])
            params = [_decode(p) for p in entry["params"]]
            if [p.shape for p in params] != [p.shape for p in layer.params]:
                raise ParseError(f"parameter shapes do not match layer {entry['spec']}")
            layer.params = params
            layers.append(layer)
            noise.append(None if entry["noise"] is None else NoiseSpec.from_dict(entry["noise"]))
        return Model(layers, tuple(doc["input_shape"]), noise, tuple(doc["input_domain"]))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"checkpoint missing field: {exc}") from exc


def atomic_write(path, data: bytes | str):
    """Write to a temp file in the destination directory, then rename over ``path``."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(model: Model, path):
    atomic_write(path, dumps(model))


def load(path) -> Model:
    with open(path, "rb") as fh:
        return loads(fh.read())


def content_hash(data: bytes) -> str:
    """git blob hash of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
