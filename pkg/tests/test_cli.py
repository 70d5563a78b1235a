import csv
import io
import json

import numpy as np
import pytest

from dlacc.cli import CSV_FIELDS, main, render_report
from dlacc.fixtures import sample_inputs
from dlacc.interp import TensorValue, dump_tensors
from dlacc.modelio import save_model


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_compile_mnist(tmp_path, capsys):
    out = tmp_path / "mn"
    assert main(["compile", "mnist", "-o", str(out), "--barriers", "on"]) == 0
    kinds = [json.loads(p.read_text())["kind"] for p in sorted(out.glob("subgraph_*.json"))]
    assert kinds.count("CONV") == 3 and kinds.count("REQUANT") == 3
    assert (out / "weights.bin").exists() and (out / "model.json").exists()
    assert "6 subgraphs" in capsys.readouterr().out


def test_compile_model_file(tmp_path, mnist):
    save_model(mnist, tmp_path / "mnist.zip")
    assert main(["compile", str(tmp_path / "mnist.zip"), "-o", str(tmp_path / "o"),
                 "--barriers", "off"]) == 0
    assert len(list((tmp_path / "o").glob("subgraph_*.json"))) == 1


def test_compile_mobilenet_fallback(tmp_path):
    out = tmp_path / "mb"
    assert main(["compile", "mobilenet", "--dw-mode", "fallback", "-o", str(out)]) == 0
    report = json.loads((out / "partition.json").read_text())
    assert len(report["cpu_nodes"]) == 13


def test_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope" / "mnist.json"
    assert main(["compile", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_flag_value():
    with pytest.raises(SystemExit) as info:
        main(["run", "mnist", "--sram", "huge"])
    assert info.value.code == 2


def test_run_verify_from_artifacts(tmp_path, capsys):
    art = tmp_path / "mn"
    main(["compile", "mnist", "-o", str(art)])
    capsys.readouterr()
    code = main(["run", str(art), "--pes", "128", "--sram", "256MiB", "--mode", "output",
                 "--verify", "--dump-metrics", str(tmp_path / "m.json"),
                 "--dump-tensors", str(tmp_path / "t.txt"), "--streams-dir", str(tmp_path / "s")])
    assert code == 0
    assert "verified: bit-exact" in capsys.readouterr().out
    doc = json.loads((tmp_path / "m.json").read_text())
    assert set(doc) == {"variant", "barriers", "pe_count", "kinds", "totals",
                        "cpu_fallback_node_count"}
    assert set(doc["kinds"]) == {"CONV", "DEPTH", "REQUANT", "OTHER"}
    for row in list(doc["kinds"].values()) + [doc["totals"]]:
        assert {"cycles", "macs", "utilization", "dma_bytes_read", "dma_bytes_written",
                "dma_cycles", "register_writes"} <= set(row)
        assert 0 <= row["utilization"] <= 1
    assert doc["totals"]["cycles"] == sum(k["cycles"] for k in doc["kinds"].values())
    assert (tmp_path / "t.txt").read_text().startswith("logits 1x1x1x10 i8\n")
    streams = sorted((tmp_path / "s").glob("stream_*.json"))
    assert len(streams) == 6
    s0 = json.loads(streams[0].read_text())
    assert s0["variant"]["pe_count"] == 128 and s0["units"][0]["op"].startswith("OP_")


def test_run_with_input_dump(tmp_path, capsys, mnist):
    x = sample_inputs(mnist, 9)[0]
    with open(tmp_path / "in.txt", "w") as fh:
        dump_tensors([TensorValue(mnist.tensors["image"], x)], fh)
    np.save(tmp_path / "in.npy", x)
    assert main(["run", "mnist", "--input", str(tmp_path / "in.txt"), "--verify"]) == 0
    assert main(["run", "mnist", "--input", str(tmp_path / "in.npy"), "--verify",
                 "--dump-tensors", str(tmp_path / "a.txt")]) == 0
    assert main(["run", "mnist", "--seed", "4", "--dump-tensors", str(tmp_path / "b.txt")]) == 0
    assert (tmp_path / "a.txt").read_text() != (tmp_path / "b.txt").read_text()


def test_run_mobilenet_too_small(capsys):
    assert main(["run", "mobilenet", "--sram", "256KiB"]) == 3
    assert "op pw1" in capsys.readouterr().err


def test_run_rejects_conflicting_dw_mode(tmp_path, capsys):
    art = tmp_path / "mb"
    main(["compile", "mnist", "-o", str(art), "--dw-mode", "fallback"])
    assert main(["run", str(art), "--dw-mode", "native"]) == 2


@pytest.fixture(scope="module")
def mobilenet_sweep(tmp_path_factory):
    path = tmp_path_factory.mktemp("sweep") / "s.csv"
    assert main(["sweep", "mobilenet", "-o", str(path)]) == 0
    return path.read_text()


def test_sweep_grid(mobilenet_sweep):
    rows = _rows(mobilenet_sweep)
    assert list(rows[0]) == list(CSV_FIELDS)
    variants = {(r["pes"], r["sram_bytes"], r["mode"]) for r in rows}
    assert len(variants) == 12 and len(rows) == 48
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_matches_run(mobilenet_sweep, tmp_path):
    rows = _rows(mobilenet_sweep)
    row = next(r for r in rows if (r["pes"], r["sram_bytes"], r["mode"], r["kind"])
               == ("128", str(256 * 1024**2), "output", "CONV"))
    main(["run", "mobilenet", "--pes", "128", "--sram", "256MiB", "--mode", "output",
          "--dump-metrics", str(tmp_path / "m.json")])
    doc = json.loads((tmp_path / "m.json").read_text())
    assert int(row["cycles"]) == doc["kinds"]["CONV"]["cycles"]
    assert int(row["register_writes"]) == doc["kinds"]["CONV"]["register_writes"]


def test_sweep_ordering_claim(mobilenet_sweep):
    totals = {}
    for r in _rows(mobilenet_sweep):
        key = (int(r["pes"]), int(r["sram_bytes"]), r["mode"])
        totals[key] = totals.get(key, 0) + int(r["cycles"])
    assert totals[(128, 1024**2, "output")] < totals[(64, 256 * 1024**2, "output")]


def test_sweep_deterministic(mobilenet_sweep, tmp_path):
    main(["sweep", "mobilenet", "-o", str(tmp_path / "a.csv"), "--jobs", "2"])
    assert (tmp_path / "a.csv").read_text() == mobilenet_sweep


def test_sweep_partial_failure(capsys):
    code = main(["sweep", "mobilenet", "--pes", "128", "--sram", "256KiB,512KiB",
                 "--modes", "output"])
    assert code == 0
    rows = _rows(capsys.readouterr().out)
    assert [r["status"] for r in rows[:4]] == ["insufficient_sram:pw1"] * 4
    assert all(r["status"] == "ok" for r in rows[4:])
    assert rows[0]["cycles"] == ""


def test_sweep_dw_modes_and_barriers(capsys):
    assert main(["sweep", "mnist", "--pes", "64", "--sram", "1MiB", "--modes", "input",
                 "--dw-modes", "fallback,native", "--barriers", "on,off"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert len(rows) == 16
    assert {(r["dw_mode"], r["barriers"]) for r in rows} == {
        ("fallback", "on"), ("fallback", "off"), ("native", "on"), ("native", "off")}


def test_report(mobilenet_sweep, tmp_path, capsys):
    path = tmp_path / "s.csv"
    path.write_text(mobilenet_sweep)
    assert main(["report", str(path)]) == 0
    text = capsys.readouterr().out
    assert len(text.strip().splitlines()) == 13
    assert "4,762,760" in text
    assert main(["report", str(path), "--markdown"]) == 0
    assert capsys.readouterr().out.startswith("| dw_mode")
    assert render_report(_rows(mobilenet_sweep)) == text


def test_report_missing(tmp_path):
    assert main(["report", str(tmp_path / "none.csv")]) == 2
