"""Annotation of accelerator-supported nodes and region merging.

Regions are grown greedily in topological order: a supported node joins the
regions of its supported producers unless that would create a cycle in the
region graph. With ``barrier_mode`` on, barrier Requantize nodes are never
merged and become single-node REQUANT subgraphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Set, Tuple

from .errors import PartitionError
from .graph import Conv2D, Dense, DepthwiseConv2D, Graph, Requantize


class DwMode(str, Enum):
    FALLBACK = "fallback"
    EMULATED = "emulated"
    NATIVE = "native"


class SubgraphKind(str, Enum):
    CONV = "CONV"
    DEPTH = "DEPTH"
    REQUANT = "REQUANT"
    OTHER = "OTHER"


KIND_ORDER = (SubgraphKind.CONV, SubgraphKind.DEPTH, SubgraphKind.REQUANT, SubgraphKind.OTHER)

ALWAYS_SUPPORTED = frozenset({
    "Conv2D", "Dense", "Requantize", "Relu", "LeakyRelu", "MaxPool", "AvgPool",
    "EwAdd", "EwAdd32", "EwAbs", "EwMin", "EwMax",
})


@dataclass(frozen=True)
class Subgraph:
    id: int
    kind: SubgraphKind
    nodes: Tuple[str, ...]
    inputs: Tuple[str, ...]
    outputs: Tuple[str, ...]


@dataclass(frozen=True)
class PartitionedGraph:
    subgraphs: Tuple[Subgraph, ...]
    cpu_nodes: frozenset
    # ("subgraph", id) | ("cpu", node id), in execution order
    schedule: Tuple[Tuple[str, object], ...]
    dw_mode: DwMode = DwMode.NATIVE
    barrier_mode: bool = True

    def subgraph(self, sg_id: int) -> Subgraph:
        for sg in self.subgraphs:
            if sg.id == sg_id:
                return sg
        raise KeyError(sg_id)

    def compute_subgraphs(self) -> List[Subgraph]:
        return [sg for sg in self.subgraphs if sg.kind in (SubgraphKind.CONV, SubgraphKind.DEPTH)]


def annotate(graph: Graph, dw_mode: DwMode = DwMode.NATIVE) -> Dict[str, bool]:
    """Per-node support flags for the given depthwise support level."""
    dw_mode = DwMode(dw_mode)
    flags = {}
    for node in graph.nodes:
        if node.kind == "DepthwiseConv2D":
            flags[node.id] = dw_mode is not DwMode.FALLBACK
        else:
            flags[node.id] = node.kind in ALWAYS_SUPPORTED
    return flags


def classify(graph: Graph, node_ids: Sequence[str]) -> SubgraphKind:
    """CONV beats DEPTH in mixed regions; REQUANT only for pure requant regions."""
    ops = [graph.node(n).op for n in node_ids]
    if any(isinstance(op, (Conv2D, Dense)) for op in ops):
        return SubgraphKind.CONV
    if any(isinstance(op, DepthwiseConv2D) for op in ops):
        return SubgraphKind.DEPTH
    if ops and all(isinstance(op, Requantize) for op in ops):
        return SubgraphKind.REQUANT
    return SubgraphKind.OTHER


def _is_barrier(graph: Graph, node_id: str) -> bool:
    op = graph.node(node_id).op
    return isinstance(op, Requantize) and op.barrier


def _node_edges(graph: Graph) -> Dict[str, Set[str]]:
    producer = graph.producers()
    succ: Dict[str, Set[str]] = {n.id: set() for n in graph.nodes}
    for n in graph.nodes:
        for t in n.inputs:
            if t in producer:
                succ[producer[t]].add(n.id)
    return succ


def _creates_cycle(members: Set[str], succ: Dict[str, Set[str]], unit_of: Dict[str, int]) -> bool:
    """True if some path leaves ``members`` and re-enters it.

    ``unit_of`` maps already-grouped nodes to their region, so paths through a
    region count as reaching all of its nodes.
    """
    groups: Dict[int, Set[str]] = {}
    for n, u in unit_of.items():
        groups.setdefault(u, set()).add(n)

    def expand(n):
        u = unit_of.get(n)
        return groups[u] if u is not None and n not in members else {n}

    frontier = [s for m in members for s in succ[m] if s not in members]
    seen: Set[str] = set()
    while frontier:
        n = frontier.pop()
        for m in expand(n):
            if m in seen:
                continue
            seen.add(m)
            for s in succ[m]:
                if s in members:
                    return True
                frontier.append(s)
    return False


def partition(graph: Graph, flags: Dict[str, bool], barrier_mode: bool = True,
              dw_mode: DwMode = DwMode.NATIVE) -> PartitionedGraph:
    """Merge supported nodes into maximal acyclic regions and schedule them."""
    succ = _node_edges(graph)
    producer = graph.producers()
    region_of: Dict[str, int] = {}
    regions: Dict[int, List[str]] = {}
    next_id = 0

    def isolated(nid):
        return barrier_mode and _is_barrier(graph, nid)

    for node in graph.nodes:
        if not flags.get(node.id, False):
            continue
        candidates = []
        if not isolated(node.id):
            for t in node.inputs:
                p = producer.get(t)
                if p is not None and p in region_of and not isolated(p):
                    r = region_of[p]
                    if r not in candidates:
                        candidates.append(r)
        members = {node.id}
        joined = []
        for r in candidates:
            trial = members | set(regions[r])
            if not _creates_cycle(trial, succ, region_of):
                members = trial
                joined.append(r)
        if joined:
            target = joined[0]
            for r in joined[1:]:
                for n in regions.pop(r):
                    region_of[n] = target
                    regions[target].append(n)
        else:
            target = next_id
            next_id += 1
            regions[target] = []
        regions[target].append(node.id)
        region_of[node.id] = target

    cpu_nodes = frozenset(n.id for n in graph.nodes if not flags.get(n.id, False))
    return _finish(graph, regions, region_of, cpu_nodes, dw_mode, barrier_mode)


def _finish(graph, regions, region_of, cpu_nodes, dw_mode, barrier_mode) -> PartitionedGraph:
    position = {n.id: i for i, n in enumerate(graph.nodes)}
    # unit graph: regions and cpu nodes
    unit = {n: ("r", r) for n, r in region_of.items()}
    unit.update({n: ("c", n) for n in cpu_nodes})
    producer = graph.producers()
    deps: Dict[tuple, Set[tuple]] = {u: set() for u in set(unit.values())}
    for n in graph.nodes:
        for t in n.inputs:
            p = producer.get(t)
            if p is not None and unit[p] != unit[n.id]:
                deps[unit[n.id]].add(unit[p])
    first = {}
    for n, u in unit.items():
        first[u] = min(first.get(u, len(position)), position[n])

    order: List[tuple] = []
    done: Set[tuple] = set()
    pending = sorted(deps, key=lambda u: first[u])
    while pending:
        for u in pending:
            if deps[u] <= done:
                order.append(u)
                done.add(u)
                pending.remove(u)
                break
        else:
            raise PartitionError([f"cyclic dependency between units {sorted(map(str, pending))}"])

    consumers = graph.consumers()
    subgraphs, schedule = [], []
    for u in order:
        if u[0] == "c":
            schedule.append(("cpu", u[1]))
            continue
        nodes = tuple(sorted(regions[u[1]], key=position.get))
        node_set = set(nodes)
        produced = {graph.node(n).output for n in nodes}
        ins, outs = [], []
        for n in nodes:
            for t in graph.node(n).inputs:
                if t not in produced and t not in ins:
                    ins.append(t)
        for n in nodes:
            t = graph.node(n).output
            if t in graph.outputs or any(c not in node_set for c in consumers.get(t, [])):
                outs.append(t)
        sg = Subgraph(len(subgraphs), classify(graph, nodes), nodes, tuple(ins), tuple(outs))
        subgraphs.append(sg)
        schedule.append(("subgraph", sg.id))
    return PartitionedGraph(tuple(subgraphs), cpu_nodes, tuple(schedule), DwMode(dw_mode),
                            barrier_mode)


def partition_graph(graph: Graph, dw_mode: DwMode = DwMode.NATIVE,
                    barrier_mode: bool = True) -> PartitionedGraph:
    """annotate + partition + verify."""
    pg = partition(graph, annotate(graph, dw_mode), barrier_mode, dw_mode)
    verify_partition(pg, graph)
    return pg


def verify_partition(pg: PartitionedGraph, graph: Graph) -> bool:
    """Check coverage, disjointness and schedule order; raise PartitionError listing problems."""
    problems = []
    owner: Dict[str, List[str]] = {}
    for sg in pg.subgraphs:
        for n in sg.nodes:
            owner.setdefault(n, []).append(f"subgraph {sg.id}")
    for n in pg.cpu_nodes:
        owner.setdefault(n, []).append("cpu")
    all_ids = [n.id for n in graph.nodes]
    for n in all_ids:
        if n not in owner:
            problems.append(f"coverage: node {n} is not assigned")
    for n, where in owner.items():
        if n not in graph._index:
            problems.append(f"coverage: unknown node {n} in {where[0]}")
        elif len(where) > 1:
            problems.append(f"disjointness: node {n} appears in {', '.join(where)}")

    scheduled_sg = [ref for kind, ref in pg.schedule if kind == "subgraph"]
    scheduled_cpu = [ref for kind, ref in pg.schedule if kind == "cpu"]
    if sorted(scheduled_sg) != sorted(sg.id for sg in pg.subgraphs):
        problems.append("schedule: subgraph list does not match scheduled subgraphs")
    if sorted(scheduled_cpu) != sorted(pg.cpu_nodes):
        problems.append("schedule: cpu node set does not match scheduled cpu nodes")

    if not problems:
        producer = graph.producers()
        available = set(graph.inputs)
        by_id = {sg.id: sg for sg in pg.subgraphs}
        for kind, ref in pg.schedule:
            if kind == "cpu":
                members = [ref]
                label = f"cpu node {ref}"
            else:
                members = list(by_id[ref].nodes)
                label = f"subgraph {ref}"
            produced_here: Set[str] = set()
            for n in sorted(members, key=all_ids.index):
                node = graph.node(n)
                for t in node.inputs:
                    if t not in available and t not in produced_here:
                        problems.append(
                            f"order: {label} reads {t!r} before its producer "
                            f"{producer.get(t)} has run"
                        )
                produced_here.add(node.output)
            available |= produced_here
    if problems:
        raise PartitionError(problems)
    return True


def partition_report(pg: PartitionedGraph) -> dict:
    return {
        "dw_mode": pg.dw_mode.value,
        "barriers": "on" if pg.barrier_mode else "off",
        "subgraphs": [
            {
                "id": sg.id,
                "kind": sg.kind.value,
                "node_count": len(sg.nodes),
                "nodes": list(sg.nodes),
                "inputs": list(sg.inputs),
                "outputs": list(sg.outputs),
            }
            for sg in pg.subgraphs
        ],
        "cpu_nodes": sorted(pg.cpu_nodes),
        "schedule": [[kind, ref] for kind, ref in pg.schedule],
    }


def partition_from_report(report: dict) -> PartitionedGraph:
    subgraphs = tuple(
        Subgraph(s["id"], SubgraphKind(s["kind"]), tuple(s["nodes"]), tuple(s["inputs"]),
                 tuple(s["outputs"]))
        for s in report["subgraphs"]
    )
    schedule = tuple((kind, int(ref) if kind == "subgraph" else ref)
                     for kind, ref in report["schedule"])
    return PartitionedGraph(subgraphs, frozenset(report["cpu_nodes"]), schedule,
                            DwMode(report["dw_mode"]), report["barriers"] == "on")
