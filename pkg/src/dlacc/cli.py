"""Command-line driver: compile, run, sweep, report.

Exit codes: 0 success, 1 verification mismatch, 2 input/validation error,
3 SRAM planning failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .artifact import emit_subgraph_artifact, load_artifact
from .errors import DlaccError, InsufficientSram
from .fixtures import FIXTURES, sample_inputs
from .graph import Graph
from .interp import TensorValue, dump_tensors, interpret, load_tensor_dump
from .isa import IsaVariant, format_size, parse_size
from .modelio import dumps_json, load_model, save_model
from .partition import (
    KIND_ORDER, DwMode, PartitionedGraph, partition_from_report, partition_graph, partition_report,
    verify_partition,
)
from .sim import Metrics, estimate_metrics, generate_streams, run_end_to_end

EXIT_OK, EXIT_MISMATCH, EXIT_INPUT, EXIT_SRAM = 0, 1, 2, 3

DEFAULT_PES = (64, 128)
DEFAULT_SRAMS = ("512KiB", "1MiB", "256MiB")
DEFAULT_MODES = ("output", "input")

CSV_FIELDS = ("pes", "sram_bytes", "mode", "dw_mode", "barriers", "kind", "cycles", "macs",
              "utilization", "dma_bytes", "dma_cycles", "register_writes", "status")


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _size(text: str) -> int:
    try:
        return parse_size(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _csv_list(conv):
    def parse(text):
        try:
            return [conv(x) for x in text.split(",") if x.strip()]
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise argparse.ArgumentTypeError(str(exc))
    return parse


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------


def resolve_model(source: str) -> Graph:
    """A fixture name ("mnist", "mobilenet") or a model file/directory/archive."""
    if source in FIXTURES:
        return FIXTURES[source]()
    path = Path(source)
    if not path.exists():
        raise CliError(f"no such model: {source}")
    try:
        return load_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load model {source}: {exc}")


def _is_artifact_dir(path: Path) -> bool:
    return path.is_dir() and (path / "partition.json").exists()


def load_compiled(path: Path):
    """(graph, partition, artifacts) from a directory written by ``compile``."""
    graph = resolve_model(str(path))
    pg = partition_from_report(json.loads((path / "partition.json").read_text()))
    verify_partition(pg, graph)
    artifacts = {}
    for sg in pg.subgraphs:
        f = path / f"subgraph_{sg.id}.json"
        if not f.exists():
            raise CliError(f"missing artifact {f}")
        artifacts[sg.id] = load_artifact(f.read_bytes(), graph.weights)
    return graph, pg, artifacts


def read_inputs(path: Optional[str], graph: Graph, seed: int) -> List[np.ndarray]:
    if path is None:
        return sample_inputs(graph, seed)
    p = Path(path)
    if not p.exists():
        raise CliError(f"no such input file: {path}")
    if p.suffix == ".npy":
        return [np.load(p)]
    with p.open() as fh:
        values = {v.desc.name: v for v in load_tensor_dump(fh)}
    missing = [n for n in graph.inputs if n not in values]
    if missing:
        raise CliError(f"input dump {path} lacks tensors: {', '.join(missing)}")
    return [values[n].data for n in graph.inputs]


# --------------------------------------------------------------------------
# Formatting
# --------------------------------------------------------------------------


def format_metrics(m: Metrics) -> str:
    head = f"{'kind':<8} {'cycles':>12} {'macs':>14} {'util':>7} {'dma_bytes':>11} " \
           f"{'dma_cycles':>11} {'reg_writes':>10}"
    lines = [head]
    rows = [(k.value, m[k], m.utilization(k)) for k in KIND_ORDER]
    rows.append(("total", m.total, m.utilization()))
    for name, km, util in rows:
        lines.append(f"{name:<8} {km.cycles:>12,} {km.macs:>14,} {util:>7.4f} "
                     f"{km.dma_bytes:>11,} {km.dma_cycles:>11,} {km.register_writes:>10,}")
    lines.append(f"cpu fallback nodes: {m.cpu_fallback_node_count}")
    return "\n".join(lines)


def metric_rows(variant: IsaVariant, barriers: bool, m: Optional[Metrics],
                status: str = "ok") -> List[Dict[str, object]]:
    base = {
        "pes": variant.pe_count, "sram_bytes": variant.sram_bytes,
        "mode": variant.parallel_mode.value, "dw_mode": variant.dw_mode.value,
        "barriers": "on" if barriers else "off",
    }
    rows = []
    for kind in KIND_ORDER:
        row = dict(base, kind=kind.value, status=status)
        if m is None:
            row.update(cycles="", macs="", utilization="", dma_bytes="", dma_cycles="",
                       register_writes="")
        else:
            km = m[kind]
            row.update(cycles=km.cycles, macs=km.macs, utilization=f"{m.utilization(kind):.6f}",
                       dma_bytes=km.dma_bytes, dma_cycles=km.dma_cycles,
                       register_writes=km.register_writes)
        rows.append(row)
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_compile(args) -> int:
    graph = resolve_model(args.model)
    pg = partition_graph(graph, DwMode(args.dw_mode), args.barriers)
    out = Path(args.output or f"{Path(args.model).stem}.compiled")
    save_model(graph, out)
    (out / "partition.json").write_bytes(dumps_json(partition_report(pg)))
    for sg in pg.subgraphs:
        art = emit_subgraph_artifact(sg, graph)
        (out / f"subgraph_{sg.id}.json").write_bytes(art.manifest_bytes())
    kinds = {k.value: sum(1 for s in pg.subgraphs if s.kind is k) for k in KIND_ORDER}
    print(f"wrote {out}: {len(pg.subgraphs)} subgraphs "
          + " ".join(f"{k}={n}" for k, n in kinds.items() if n)
          + f", {len(pg.cpu_nodes)} cpu nodes")
    return EXIT_OK


def _prepare(args):
    target = Path(args.target)
    if _is_artifact_dir(target):
        graph, pg, artifacts = load_compiled(target)
        if args.barriers is not None and args.barriers != pg.barrier_mode:
            raise CliError(f"{target} was compiled with barriers "
                           f"{'on' if pg.barrier_mode else 'off'}; recompile to change it")
        dw = DwMode(args.dw_mode) if args.dw_mode else pg.dw_mode
        if (dw is DwMode.FALLBACK) != (pg.dw_mode is DwMode.FALLBACK):
            raise CliError(f"{target} was compiled with dw-mode {pg.dw_mode.value}; "
                           f"recompile for {dw.value}")
        return graph, pg, artifacts, dw
    graph = resolve_model(args.target)
    dw = DwMode(args.dw_mode or "native")
    barriers = True if args.barriers is None else args.barriers
    pg = partition_graph(graph, dw, barriers)
    return graph, pg, None, dw


def cmd_run(args) -> int:
    graph, pg, artifacts, dw = _prepare(args)
    variant = IsaVariant(args.pes, args.sram, args.mode, dw)
    inputs = read_inputs(args.input, graph, args.seed)
    if artifacts is None:
        artifacts = {sg.id: emit_subgraph_artifact(sg, graph) for sg in pg.subgraphs}
    streams = generate_streams(artifacts, variant, dedup=not args.no_dedup)
    if args.streams_dir:
        d = Path(args.streams_dir)
        d.mkdir(parents=True, exist_ok=True)
        for sid, stream in streams.items():
            (d / f"stream_{sid}.json").write_bytes(stream.to_json())
    outputs, metrics, _ = run_end_to_end(graph, pg, variant, inputs, artifacts, streams)
    print(f"variant {variant.label} barriers {'on' if pg.barrier_mode else 'off'}")
    print(format_metrics(metrics))
    if args.dump_metrics:
        doc = {"variant": variant.to_dict(), "barriers": pg.barrier_mode, **metrics.to_dict()}
        Path(args.dump_metrics).write_bytes(dumps_json(doc))
    if args.dump_tensors:
        with open(args.dump_tensors, "w") as fh:
            dump_tensors(outputs, fh)
    if args.verify:
        expected = interpret(graph, inputs)
        bad = [e.desc.name for e, o in zip(expected, outputs) if not np.array_equal(e.data, o.data)]
        if bad:
            print(f"verify: MISMATCH in {', '.join(bad)}")
            return EXIT_MISMATCH
        print("verified: bit-exact")
    return EXIT_OK


def _sweep_cell(cell) -> List[Dict[str, object]]:
    graph, pg, artifacts, variant = cell
    try:
        m = estimate_metrics(graph, pg, variant, artifacts)
    except InsufficientSram as exc:
        return metric_rows(variant, pg.barrier_mode, None, f"insufficient_sram:{exc.node}")
    return metric_rows(variant, pg.barrier_mode, m)


def sweep(graph: Graph, pes: Sequence[int], srams: Sequence[int], modes: Sequence[str],
          dw_modes: Sequence[str], barriers: Sequence[bool], jobs: int = 1):
    """Rows for every grid cell, ordered by (dw_mode, barriers, pes, sram, mode, kind)."""
    cells = []
    for dw, bar in itertools.product(dw_modes, barriers):
        pg = partition_graph(graph, DwMode(dw), bar)
        artifacts = {sg.id: emit_subgraph_artifact(sg, graph) for sg in pg.subgraphs}
        for p, m, mode in itertools.product(pes, srams, modes):
            cells.append((graph, pg, artifacts, IsaVariant(p, m, mode, dw)))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    return [row for rows in results for row in rows]


def cmd_sweep(args) -> int:
    graph = resolve_model(args.model)
    rows = sweep(graph, args.pes, args.sram, args.modes, args.dw_modes, args.barriers, args.jobs)
    text = rows_to_csv(rows)
    if args.output:
        Path(args.output).write_text(text)
        failed = len({(r["pes"], r["sram_bytes"], r["mode"], r["dw_mode"], r["barriers"])
                      for r in rows if r["status"] != "ok"})
        print(f"wrote {len(rows)} rows to {args.output} ({failed} infeasible variants)")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def render_report(rows: Sequence[Dict[str, str]], markdown: bool = False) -> str:
    """One line per variant: cycles per kind, total, overall utilization."""
    variants: Dict[Tuple, Dict[str, Dict[str, str]]] = {}
    for r in rows:
        key = (r["dw_mode"], r["barriers"], int(r["pes"]), int(r["sram_bytes"]), r["mode"])
        variants.setdefault(key, {})[r["kind"]] = r
    kinds = [k.value for k in KIND_ORDER]
    header = ["dw_mode", "barriers", "pes", "sram", "mode"] + kinds + ["total", "util", "status"]
    table = []
    for (dw, bar, p, m, mode), by_kind in variants.items():
        status = next(iter(by_kind.values()))["status"]
        if status != "ok":
            cells = ["-"] * (len(kinds) + 2)
        else:
            cyc = [int(by_kind[k]["cycles"]) if k in by_kind else 0 for k in kinds]
            macs = sum(int(by_kind[k]["macs"]) for k in kinds if k in by_kind)
            total = sum(cyc)
            util = macs / (p * total) if total else 0.0
            cells = [f"{c:,}" for c in cyc] + [f"{total:,}", f"{util:.3f}"]
        table.append([dw, bar, str(p), format_size(m), mode] + cells + [status])
    if markdown:
        out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        out += ["| " + " | ".join(row) + " |" for row in table]
        return "\n".join(out) + "\n"
    widths = [max(len(h), *(len(r[i]) for r in table)) if table else len(h)
              for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    return "\n".join(fmt.format(*r) for r in [header] + table) + "\n"


def cmd_report(args) -> int:
    path = Path(args.csv)
    if not path.exists():
        raise CliError(f"no such report: {args.csv}")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(CSV_FIELDS) - set(rows[0] if rows else CSV_FIELDS)
    if missing:
        raise CliError(f"{args.csv} lacks columns: {', '.join(sorted(missing))}")
    sys.stdout.write(render_report(rows, args.markdown))
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dlacc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    dw_choices = [m.value for m in DwMode]

    c = sub.add_parser("compile", help="partition a model and write portable artifacts")
    c.add_argument("model", help="model file/directory, or fixture name (mnist, mobilenet)")
    c.add_argument("-o", "--output", help="artifact directory (default: <model>.compiled)")
    c.add_argument("--dw-mode", choices=dw_choices, default="native")
    c.add_argument("--barriers", type=_on_off, default=True, metavar="on|off")
    c.set_defaults(func=cmd_compile)

    r = sub.add_parser("run", help="simulate one hardware variant")
    r.add_argument("target", help="artifact directory, model path or fixture name")
    r.add_argument("--pes", type=int, default=128)
    r.add_argument("--sram", type=_size, default=parse_size("256MiB"))
    r.add_argument("--mode", choices=["input", "output"], default="output")
    r.add_argument("--dw-mode", choices=dw_choices, default=None,
                   help="default: the artifact's mode, or native")
    r.add_argument("--barriers", type=_on_off, default=None, metavar="on|off")
    r.add_argument("--input", help=".npy array or tensor dump (default: random, see --seed)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--verify", action="store_true", help="compare against the interpreter")
    r.add_argument("--dump-metrics", metavar="PATH")
    r.add_argument("--dump-tensors", metavar="PATH")
    r.add_argument("--streams-dir", metavar="DIR", help="write stream_<id>.json files here")
    r.add_argument("--no-dedup", action="store_true", help="disable register-write dedup")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="cost-model sweep over a hardware grid, CSV output")
    s.add_argument("model")
    s.add_argument("--pes", type=_csv_list(int), default=list(DEFAULT_PES))
    s.add_argument("--sram", type=_csv_list(_size), default=[parse_size(x) for x in DEFAULT_SRAMS])
    s.add_argument("--modes", type=_csv_list(str), default=list(DEFAULT_MODES))
    s.add_argument("--dw-modes", type=_csv_list(DwMode), default=[DwMode.NATIVE])
    s.add_argument("--barriers", type=_csv_list(_on_off), default=[True], metavar="on|off[,..]")
    s.add_argument("-o", "--output")
    s.add_argument("-j", "--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render a sweep CSV as a table")
    p.add_argument("csv")
    p.add_argument("--markdown", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "modes", None):
        bad = [m for m in args.modes if m not in DEFAULT_MODES]
        if bad:
            print(f"dlacc: error: unknown mode {bad[0]!r}", file=sys.stderr)
            return EXIT_INPUT
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dlacc: error: {exc}", file=sys.stderr)
        return exc.code
    except InsufficientSram as exc:
        print(f"dlacc: error: {exc}", file=sys.stderr)
        return EXIT_SRAM
    except (DlaccError, ValueError) as exc:
        print(f"dlacc: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
