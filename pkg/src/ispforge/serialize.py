"""Model files: ``<stem>.ispm`` JSON manifest + ``<stem>.ispw`` weight blob.

The blob holds every weight as little-endian float32, concatenated in
manifest order (sorted by name). Each manifest weight entry records its
byte offset, shape, and a 64-bit BLAKE2b checksum of its bytes. See
docs/model_format.md for the grammar.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, SchemaError
from .graph import FORMAT_VERSION, GraphModel, Node, validate

_LE_F32 = np.dtype("<f4")


def checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def atomic_write(path, data, mode="wb"):
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def weights_path(manifest_path):
    return Path(manifest_path).with_suffix(".ispw")


def _json_attr(value):
    if isinstance(value, tuple):
        return [_json_attr(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def to_manifest(model: GraphModel, blob_name: str):
    validate(model)
    entries, chunks, offset = [], [], 0
    for name in sorted(model.weights):
        raw = np.ascontiguousarray(model.weights[name], dtype=_LE_F32).tobytes()
        entries.append({
            "name": name,
            "shape": list(model.weights[name].shape),
            "offset": offset,
            "nbytes": len(raw),
            "checksum": checksum(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT_VERSION,
        "metadata": {k: str(v) for k, v in sorted(model.metadata.items())},
        "inputs": [{"name": k, "shape": list(v)} for k, v in model.inputs.items()],
        "outputs": [{"name": k, "source": src, "slot": slot} for k, (src, slot) in model.outputs.items()],
        "nodes": [{
            "id": n.id,
            "kind": n.kind,
            "inputs": [[src, slot] for src, slot in n.inputs],
            "attrs": {k: _json_attr(v) for k, v in sorted(n.attrs.items())},
            "weights": dict(sorted(n.weights.items())),
        } for n in model.nodes],
        "weights_file": blob_name,
        "weights": entries,
    }
    return manifest, b"".join(chunks)


def save(model: GraphModel, path):
    """Write ``path`` (manifest) and its sibling ``.ispw`` blob atomically."""
    path = Path(path)
    blob_path = weights_path(path)
    manifest, blob = to_manifest(model, blob_path.name)
    text = json.dumps(manifest, indent=1) + "\n"
    atomic_write(blob_path, blob)
    atomic_write(path, text.encode("utf-8"))
    return path


def _attr_from_json(value):
    if isinstance(value, list):
        return tuple(_attr_from_json(v) for v in value)
    return value


def from_manifest(manifest, blob: bytes):
    fmt = manifest.get("format")
    if fmt != FORMAT_VERSION:
        raise FormatError(f"unsupported model format {fmt!r}; expected {FORMAT_VERSION!r}")
    weights = {}
    for entry in manifest["weights"]:
        lo, n = entry["offset"], entry["nbytes"]
        raw = blob[lo:lo + n]
        if len(raw) != n or checksum(raw) != entry["checksum"]:
            raise ChecksumError(f"weight {entry['name']!r}: checksum mismatch "
                                f"(blob has {len(raw)} of {n} bytes at offset {lo})")
        arr = np.frombuffer(raw, dtype=_LE_F32).astype(np.float32)
        weights[entry["name"]] = arr.reshape(entry["shape"])
    nodes = []
    for nd in manifest["nodes"]:
        nodes.append(Node(
            id=nd["id"],
            kind=nd["kind"],
            inputs=[(src, int(slot)) for src, slot in nd["inputs"]],
            attrs={k: _attr_from_json(v) for k, v in nd.get("attrs", {}).items()},
            weights=dict(nd.get("weights", {})),
        ))
    model = GraphModel(
        nodes=nodes,
        inputs={d["name"]: tuple(d["shape"]) for d in manifest["inputs"]},
        outputs={d["name"]: (d["source"], int(d["slot"])) for d in manifest["outputs"]},
        weights=weights,
        metadata=dict(manifest.get("metadata", {})),
    )
    validate(model)
    return model


def load(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON ({exc})") from None
    if not isinstance(manifest, dict):
        raise FormatError(f"{path}: manifest must be a JSON object")
    blob_path = path.parent / manifest.get("weights_file", weights_path(path).name)
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: weight blob {blob_path} not found") from None
    try:
        return from_manifest(manifest, blob)
    except KeyError as exc:
        raise SchemaError(f"{path}: manifest missing field {exc}") from None


# -- raw tensor blobs -------------------------------------------------------

def save_tensor(path, x):
    """Flat little-endian float32 blob at ``path`` plus a ``path.hdr`` text header."""
    x = np.asarray(x)
    header = f"dims: {' '.join(str(d) for d in x.shape)}\norder: nchw\ndtype: float32le\n"
    atomic_write(path, np.ascontiguousarray(x, dtype=_LE_F32).tobytes())
    atomic_write(f"{path}.hdr", header.encode())


def load_tensor(path):
    fields = {}
    for line in Path(f"{path}.hdr").read_text().splitlines():
        if ":" in line:
            k, v = line.split(":", 1)
            fields[k.strip()] = v.strip()
    if fields.get("order", "nchw") != "nchw" or fields.get("dtype", "float32le") != "float32le":
        raise FormatError(f"{path}.hdr: unsupported order/dtype {fields}")
    dims = tuple(int(d) for d in fields["dims"].split())
    data = np.frombuffer(Path(path).read_bytes(), dtype=_LE_F32)
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{path}: {data.size} values, header dims {dims} need {int(np.prod(dims))}")
    return data.astype(np.float32).reshape(dims)
