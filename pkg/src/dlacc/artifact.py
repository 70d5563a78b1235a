"""Portable, variant-independent subgraph artifacts (``subgraph_<id>.json``)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from .errors import ModelError
from .graph import NODE_KINDS, DType, Graph, NodeKind, TensorDesc, WeightRef
from .modelio import dumps_json
from .partition import Subgraph, SubgraphKind


@dataclass(frozen=True)
class OpDesc:
    """One node as the accelerator sees it: kind, attributes, operand descriptors."""

    node: str
    op: NodeKind
    inputs: Tuple[TensorDesc, ...]
    output: TensorDesc
    weight: Optional[WeightRef] = None

    @property
    def kind(self) -> str:
        return self.op.kind

    @property
    def kernel_shape(self):
        return self.op.kernel_shape(self.inputs[0])

    @property
    def kernel_bytes(self) -> int:
        n = 1
        for e in self.kernel_shape:
            n *= e
        return n


@dataclass(frozen=True)
class SubgraphArtifact:
    id: int
    kind: SubgraphKind
    inputs: Tuple[str, ...]
    outputs: Tuple[str, ...]
    tensors: Dict[str, TensorDesc]
    ops: Tuple[OpDesc, ...]
    weights: bytes = b""  # shared blob; not part of the manifest

    def manifest(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "tensors": [
                {"name": t.name, "shape": list(t.shape), "dtype": t.dtype.value, "scale": t.scale}
                for t in self.tensors.values()
            ],
            "ops": [
                {
                    "node": op.node,
                    "kind": op.kind,
                    "attrs": op.op.attrs(),
                    "inputs": [t.name for t in op.inputs],
                    "output": op.output.name,
                    "weight": (
                        {"offset": op.weight.offset, "len": op.weight.length} if op.weight else None
                    ),
                }
                for op in self.ops
            ],
        }

    def manifest_bytes(self) -> bytes:
        return dumps_json(self.manifest())

    @property
    def buffers(self) -> Tuple[str, ...]:
        """System-memory buffer table; DMA buffer id i+1 names ``buffers[i]``."""
        return tuple(self.tensors)


def emit_subgraph_artifact(sg: Subgraph, graph: Graph) -> SubgraphArtifact:
    tensors: Dict[str, TensorDesc] = {}
    for name in sg.inputs:
        tensors[name] = graph.tensors[name]
    ops = []
    for node_id in sg.nodes:
        node = graph.node(node_id)
        ref = node.weight
        if node.op.has_weights:
            if ref is None or ref.offset + ref.length > len(graph.weights):
                raise ModelError("unresolvable weight reference", node_id)
        ins = tuple(graph.tensors[t] for t in node.inputs)
        out = graph.tensors[node.output]
        tensors.setdefault(out.name, out)
        for t in ins:
            tensors.setdefault(t.name, t)
        ops.append(OpDesc(node_id, node.op, ins, out, ref))
    return SubgraphArtifact(sg.id, sg.kind, sg.inputs, sg.outputs, tensors, tuple(ops),
                            graph.weights)


def load_artifact(data, weights: bytes = b"") -> SubgraphArtifact:
    doc = json.loads(data)
    tensors = {
        t["name"]: TensorDesc(t["name"], tuple(t["shape"]), DType(t["dtype"]), float(t["scale"]))
        for t in doc["tensors"]
    }
    ops = []
    for o in doc["ops"]:
        w = o.get("weight")
        ref = WeightRef(int(w["offset"]), int(w["len"])) if w else None
        if ref is not None and weights and ref.offset + ref.length > len(weights):
            raise ModelError("unresolvable weight reference", o["node"])
        op = NODE_KINDS[o["kind"]].from_attrs(o["attrs"])
        ops.append(OpDesc(o["node"], op, tuple(tensors[t] for t in o["inputs"]),
                          tensors[o["output"]], ref))
    return SubgraphArtifact(int(doc["id"]), SubgraphKind(doc["kind"]), tuple(doc["inputs"]),
                            tuple(doc["outputs"]), tensors, tuple(ops), bytes(weights))
