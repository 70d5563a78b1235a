"""Incremental graph construction with a growing weight blob."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from .graph import DType, Graph, Node, NodeKind, TensorDesc, WeightRef, validate


class GraphBuilder:
    def __init__(self, name: str = ""):
        self.name = name
        self.tensors: Dict[str, TensorDesc] = {}
        self.nodes: List[Node] = []
        self.blob = bytearray()
        self.inputs: List[str] = []

    def input(self, name: str, shape: Sequence[int], scale: float = 1.0) -> str:
        self.tensors[name] = TensorDesc(name, tuple(shape), DType.I8, scale)
        self.inputs.append(name)
        return name

    def add(self, node_id: str, op: NodeKind, inputs: Sequence[str], *, kernel=None, bias=None,
            scale: Optional[float] = None, output: Optional[str] = None) -> str:
        ins = [self.tensors[t] for t in inputs]
        shape, dtype = op.infer(ins, node_id)
        ref = None
        if op.has_weights:
            kshape = op.kernel_shape(ins[0])
            kernel = np.asarray(kernel, dtype=np.int8).reshape(kshape)
            bias = np.zeros(kshape[0], np.int32) if bias is None else np.asarray(bias, np.int32)
            ref = WeightRef(len(self.blob), kernel.nbytes + 4 * kshape[0])
            self.blob += kernel.tobytes() + bias.astype("<i4").tobytes()
        out = output or f"{node_id}.out"
        self.tensors[out] = TensorDesc(out, tuple(shape), dtype,
                                       scale if scale is not None else ins[0].scale)
        self.nodes.append(Node(node_id, op, tuple(inputs), out, ref))
        return out

    def build(self, outputs: Sequence[str]) -> Graph:
        return validate(Graph(
            nodes=tuple(self.nodes),
            tensors=dict(self.tensors),
            weights=bytes(self.blob),
            inputs=tuple(self.inputs),
            outputs=tuple(outputs),
            name=self.name,
        ))
