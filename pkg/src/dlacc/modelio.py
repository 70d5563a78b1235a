"""Model file I/O: ``model.json`` + ``weights.bin`` in a directory or archive."""

from __future__ import annotations

import io
import json
import os
import tarfile
import zipfile
from pathlib import Path
from typing import Union

from .errors import ModelError
from .graph import NODE_KINDS, DType, Graph, Node, TensorDesc, WeightRef, validate

MODEL_JSON = "model.json"
WEIGHTS_BIN = "weights.bin"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def graph_to_dict(graph: Graph) -> dict:
    return {
        "name": graph.name,
        "tensors": [
            {
                "name": t.name,
                "shape": list(t.shape) if t.shape is not None else None,
                "dtype": t.dtype.value if t.dtype is not None else None,
                "scale": t.scale,
            }
            for t in graph.tensors.values()
        ],
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "attrs": n.op.attrs(),
                "inputs": list(n.inputs),
                "output": n.output,
                "weight": (
                    {"offset": n.weight.offset, "len": n.weight.length} if n.weight else None
                ),
            }
            for n in graph.nodes
        ],
        "inputs": list(graph.inputs),
        "outputs": list(graph.outputs),
    }


def dumps_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def canonical_json(data: Union[bytes, str]) -> bytes:
    """Canonical byte form of any model.json document."""
    return dumps_json(json.loads(data))


def graph_from_dict(doc: dict, weights: bytes) -> Graph:
    """Build and validate a Graph from a parsed model.json document."""
    if not isinstance(doc, dict):
        raise ModelError("model.json must be an object")
    for key in ("tensors", "nodes", "inputs", "outputs"):
        if key not in doc:
            raise ModelError(f"model.json missing key {key!r}")
    tensors = {}
    for i, t in enumerate(doc["tensors"]):
        try:
            name = t["name"]
            shape = tuple(int(e) for e in t["shape"]) if t.get("shape") is not None else None
            dtype = DType(t["dtype"]) if t.get("dtype") is not None else None
            desc = TensorDesc(name, shape, dtype, float(t.get("scale", 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"tensor entry {i}: {exc}") from None
        if name in tensors:
            raise ModelError(f"duplicate tensor {name!r}")
        tensors[name] = desc
    nodes = []
    for i, n in enumerate(doc["nodes"]):
        node_id = n.get("id", f"#{i}") if isinstance(n, dict) else f"#{i}"
        try:
            cls = NODE_KINDS[n["kind"]]
        except KeyError:
            raise ModelError(f"unknown or missing kind {n.get('kind')!r}", node_id) from None
        try:
            op = cls.from_attrs(n.get("attrs") or {})
        except ModelError as exc:
            raise ModelError(str(exc), node_id) from None
        w = n.get("weight")
        ref = WeightRef(int(w["offset"]), int(w["len"])) if w else None
        try:
            nodes.append(Node(str(n["id"]), op, tuple(n["inputs"]), n["output"], ref))
        except KeyError as exc:
            raise ModelError(f"missing field {exc}", node_id) from None
    graph = Graph(
        nodes=tuple(nodes),
        tensors=tensors,
        weights=bytes(weights),
        inputs=tuple(doc["inputs"]),
        outputs=tuple(doc["outputs"]),
        name=doc.get("name", ""),
    )
    return validate(graph)


def _parse(model_json: bytes, weights: bytes) -> Graph:
    try:
        doc = json.loads(model_json)
    except json.JSONDecodeError as exc:
        raise ModelError(f"model.json is not valid JSON: {exc}") from None
    return graph_from_dict(doc, weights)


def _from_zip(zf: zipfile.ZipFile) -> Graph:
    names = {Path(n).name: n for n in zf.namelist()}
    if MODEL_JSON not in names:
        raise ModelError("archive has no model.json")
    weights = zf.read(names[WEIGHTS_BIN]) if WEIGHTS_BIN in names else b""
    return _parse(zf.read(names[MODEL_JSON]), weights)


def load_model(source: Union[bytes, str, os.PathLike]) -> Graph:
    """Load a model from zip bytes, a directory, an archive, or a model.json path."""
    if isinstance(source, (bytes, bytearray)):
        try:
            with zipfile.ZipFile(io.BytesIO(source)) as zf:
                return _from_zip(zf)
        except zipfile.BadZipFile:
            raise ModelError("bytes are not a model archive") from None
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"no such model: {path}")
    if path.is_dir():
        wpath = path / WEIGHTS_BIN
        return _parse((path / MODEL_JSON).read_bytes(), wpath.read_bytes() if wpath.exists() else b"")
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as zf:
            return _from_zip(zf)
    if tarfile.is_tarfile(path):
        with tarfile.open(path) as tf:
            members = {Path(m.name).name: m for m in tf.getmembers() if m.isfile()}
            if MODEL_JSON not in members:
                raise ModelError("archive has no model.json")
            weights = tf.extractfile(members[WEIGHTS_BIN]).read() if WEIGHTS_BIN in members else b""
            return _parse(tf.extractfile(members[MODEL_JSON]).read(), weights)
    wpath = path.with_name(WEIGHTS_BIN)
    return _parse(path.read_bytes(), wpath.read_bytes() if wpath.exists() else b"")


def model_bytes(graph: Graph) -> bytes:
    """Deterministic zip archive of the model (fixed timestamps)."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, data in ((MODEL_JSON, dumps_json(graph_to_dict(graph))), (WEIGHTS_BIN, graph.weights)):
            info = zipfile.ZipInfo(name, _ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
    return buf.getvalue()


def save_model(graph: Graph, path: Union[str, os.PathLike]) -> Path:
    """Write a model directory, or a zip archive when ``path`` ends in ``.zip``."""
    path = Path(path)
    if path.suffix == ".zip":
        path.write_bytes(model_bytes(graph))
        return path
    path.mkdir(parents=True, exist_ok=True)
    (path / MODEL_JSON).write_bytes(dumps_json(graph_to_dict(graph)))
    (path / WEIGHTS_BIN).write_bytes(graph.weights)
    return path
