import csv
import json
import math

import numpy as np
import pytest
import yaml

from normscale.harness.cli import OUTPUT_ROOT_ENV, main
from normscale.harness.config import ConfigError, config_from_dict, load_config, with_run
from normscale.harness.data import EOS, CorpusExhausted, TokenWindows, encode_bytes, ingest_corpus
from normscale.harness.logs import LogLine, LogSchemaError, parse_line, read_log, read_runs, serialize_line, write_meta
from normscale.harness.report import emit_report
from normscale.harness.sweep import SUMMARY_FIXED, run_sweep, sweep_points
from normscale.harness.train import run_training
from normscale.model import load_checkpoint
from normscale.scion import lr_at

TINY = {
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "n_kv_heads": 2, "d_head": 8},
    "data": {"context": 16},
    "train": {"batch_size": 2, "seed": 3, "max_tokens": 200 * 32},
    "logging": {"eval_every": 1024},
}


def tiny_cfg(corpus, **sections):
    tree = json.loads(json.dumps(TINY))
    tree["data"]["corpus"] = str(corpus)
    for name, extra in sections.items():
        tree.setdefault(name, {}).update(extra)
    return config_from_dict(tree)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"model": {"d_modle": 32}})
    with pytest.raises(ConfigError, match="unknown sections"):
        config_from_dict({"optimiser": {}})


def test_config_eta_grid_and_layouts():
    config_from_dict({"sweep": {"etas": [0.125, 0.25, 0.5]}})
    config_from_dict({"sweep": {"etas": [2**-3, 2**-2.5, 2**-2]}})
    with pytest.raises(ConfigError, match="geometric"):
        config_from_dict({"sweep": {"etas": [0.1, 0.2, 0.3]}})
    with pytest.raises(ConfigError, match="equal"):
        config_from_dict({"sweep": {"layouts": [{"input": 1.0, "hidden": 1.0, "output": 0.5}]}})
    config_from_dict({"sweep": {"layouts": [{"input": 1.0, "hidden": 1.0, "output": 0.5}],
                                "tie_input_output": False}})


def test_config_context_must_agree():
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"context_len": 32}, "data": {"context": 16}})
    assert config_from_dict({"data": {"context": 16}}).model.context_len == 16


def test_load_config_resolves_corpus_next_to_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"data": {"corpus": "text.txt"}}))
    assert load_config(path).data.corpus == str(tmp_path / "text.txt")


def test_corpus_windows(tmp_path):
    tokens = encode_bytes(b"ab")
    assert tokens.tolist() == [97, 98, EOS]
    path = tmp_path / "c.txt"
    path.write_bytes(bytes(range(256)) * 4)
    w = ingest_corpus(path, 128)
    assert len(w) == 8 and w.n_tokens == 1024
    b1, b2 = w.batch(0, 4), ingest_corpus(path, 128).batch(0, 4)
    assert np.array_equal(b1, b2) and b1.shape == (4, 128)
    assert not np.array_equal(b1, ingest_corpus(path, 128, seed=1).batch(0, 4))
    with pytest.raises(CorpusExhausted, match="more bytes"):
        w.batch(2, 4)
    with pytest.raises(CorpusExhausted):
        w.require(2048)
    with pytest.raises(ValueError):
        TokenWindows(tokens, 1)


def test_log_line_round_trip(tmp_path):
    line = LogLine("r", 3, 96, 5.123456789012345, {"unembed": {"rms_to_inf": 0.1 + 0.2}},
                   {"hidden": 2.0**-3}, 1.5)
    assert parse_line(serialize_line(line)) == line
    path = tmp_path / "r.jsonl"
    path.write_text(serialize_line(line) + "\n" + '{"run_id": "r"}\n')
    with pytest.raises(LogSchemaError, match="r.jsonl:2"):
        read_log(path)
    with pytest.raises(LogSchemaError, match="unknown"):
        parse_line(json.dumps(dict(json.loads(serialize_line(line)), extra=1)))


def test_read_runs_errors(tmp_path):
    with pytest.raises(LogSchemaError, match="no run logs"):
        read_runs(tmp_path)
    with pytest.raises(FileNotFoundError):
        read_runs(tmp_path / "missing")


def test_training_logs_and_checkpoint(corpus, tmp_path):
    cfg = tiny_cfg(corpus)
    res = run_training(cfg, "r", tmp_path)
    assert res.lines[0].tokens == 0
    assert [ln.tokens for ln in res.lines[1:]] == list(range(1024, 6400, 1024)) + [6400]
    assert res.lines[-1].step == 200
    assert res.lines[-1].raw_loss < res.lines[0].raw_loss
    assert read_log(tmp_path / "r.jsonl") == res.lines
    meta = json.loads((tmp_path / "r.json").read_text())
    assert meta["status"] == "done" and meta["eta"] == 0.125
    tensors, ck = load_checkpoint(res.checkpoint)
    assert ck == {"run_id": "r", "step": 200, "tokens": 6400}
    assert np.array_equal(tensors["param/unembed"], res.params["unembed"])


def test_training_differs_across_seeds(corpus):
    a = run_training(with_run(tiny_cfg(corpus), seed=1, max_tokens=320), "a")
    b = run_training(with_run(tiny_cfg(corpus), seed=2, max_tokens=320), "b")
    assert a.lines[-1].raw_loss != b.lines[-1].raw_loss


def test_resume_with_decay_leg(corpus, tmp_path):
    T = 128 * 32
    sched = {"schedule": "linear-decay-tail", "total_horizon": T, "decay_fraction": 0.25, "momentum": 0.5}
    cfg = tiny_cfg(corpus, optimizer=sched, train={"max_tokens": T}, logging={"eval_every": 256})
    full = run_training(cfg, "full", tmp_path / "full")
    first = run_training(with_run(cfg, max_tokens=3 * T // 4), "leg", tmp_path / "leg")
    rest = run_training(cfg, "decay", tmp_path / "decay", resume=first.checkpoint)
    for k in full.params:
        assert np.array_equal(rest.params[k], full.params[k])
    spec = cfg.optimizer.schedule_spec()
    for ln in rest.lines:
        expected = lr_at(spec, ln.tokens - 32, cfg.optimizer.base_lr)
        assert abs(ln.lr_effective["hidden"] - expected) <= 1e-12
    assert rest.lines[0].tokens > 3 * T // 4
    assert rest.lines[-1].lr_effective["output"] == pytest.approx(cfg.optimizer.base_lr / 32)


def sweep_cfg(corpus, **extra):
    sweep = {"etas": [0.0625, 0.125, 0.25], "batch_sizes": [2, 4], "horizons": [512, 1024], "seeds": [5]}
    sweep.update(extra)
    return tiny_cfg(corpus, sweep=sweep, logging={"eval_every": 256})


def test_sweep_summary_and_determinism(corpus, tmp_path):
    cfg = sweep_cfg(corpus)
    res = run_sweep(cfg, tmp_path / "a")
    assert not res.failures and len(res.run_ids) == 6
    with open(res.summary) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 6 * 2
    assert tuple(rows[0])[: len(SUMMARY_FIXED)] == SUMMARY_FIXED
    assert {r["horizon"] for r in rows} == {"512", "1024"}
    assert all(int(r["tokens"]) >= int(r["horizon"]) for r in rows)
    again = run_sweep(cfg, tmp_path / "b")
    assert again.summary.read_bytes() == res.summary.read_bytes()
    manifest = json.loads((tmp_path / "a" / "sweep.json").read_text())
    assert manifest["horizons"] == [512, 1024] and manifest["failures"] == {}


def test_sweep_layout_scales_hidden_lr(corpus, tmp_path):
    layouts = [{"input": 1.0, "hidden": 1.0, "output": 1.0}, {"input": 1.0, "hidden": 0.125, "output": 1.0}]
    cfg = sweep_cfg(corpus, etas=[0.25], batch_sizes=[2], horizons=[256], layouts=layouts)
    res = run_sweep(cfg, tmp_path)
    assert res.run_ids == ["L0_B2_eta-2.00_s5", "L1_B2_eta-2.00_s5"]
    lines = read_log(res.runs_dir / "L1_B2_eta-2.00_s5.jsonl")
    assert lines[-1].lr_effective == {"input": 0.25, "hidden": 0.25 / 8, "output": 0.25}


def test_sweep_seed_policy_and_failures(corpus, tmp_path):
    cfg = sweep_cfg(corpus, etas=[0.125], batch_sizes=[2], horizons=[256])
    points = sweep_points(cfg, seed_policy=lambda c, eta, B, i: (1, 2))
    assert [p.seed for p in points] == [1, 2]
    with pytest.raises(ValueError, match="duplicate"):
        sweep_points(cfg, seed_policy=lambda c, eta, B, i: (1, 1))
    big = sweep_cfg(corpus, etas=[0.125], batch_sizes=[2], horizons=[10**9])
    res = run_sweep(big, tmp_path)
    assert list(res.failures) == res.run_ids
    assert "CorpusExhausted" in next(iter(res.failures.values()))


def write_run(logs, run_id, eta, B, points, scales=(1.0, 1.0, 1.0), init_loss=5.0):
    write_meta(logs / f"{run_id}.json", {
        "run_id": run_id, "eta": eta, "batch_size": B, "seed": 0, "context": 16, "vocab_size": 257,
        "status": "done", "lr_scales": dict(zip(("input", "hidden", "output"), scales))})
    lines = [LogLine(run_id, 0, 0, init_loss, {"unembed": {"rms_to_inf": 1.0}}, {})]
    for i, (tokens, norm, loss) in enumerate(points, start=1):
        lines.append(LogLine(run_id, i, tokens, loss, {"unembed": {"rms_to_inf": norm}}, {}))
    (logs / f"{run_id}.jsonl").write_text("".join(serialize_line(ln) + "\n" for ln in lines))


def planted_logs(logs, a=0.05, vertex=3.0, init_loss=5.0):
    # ln L = a x^2 + b x + ln(init) with the vertex at x = ln(norm) = vertex
    b = -2 * a * vertex
    logs.mkdir(parents=True, exist_ok=True)
    for k in range(9):
        x = vertex + 0.25 * (k - 4)
        loss = math.exp(a * x * x + b * x + math.log(init_loss))
        write_run(logs, f"B8_k{k}", 2.0 ** (k - 8), 8, [(t, math.exp(x), loss) for t in (256, 512, 1024)],
                  init_loss=init_loss)


def test_report_recovers_planted_vertex(tmp_path):
    planted_logs(tmp_path / "logs")
    paths = emit_report(tmp_path / "logs", "norm-scan", tmp_path / "out", plots=True, horizons=[512])
    assert [p.name for p in paths] == ["norm_scan.csv", "norm_scan.svg"]
    with open(paths[0]) as f:
        rows = list(csv.DictReader(f))
    nominal = next(r for r in rows if r["variant"].startswith("nominal:"))
    assert nominal["variant"] == "nominal:fit+smooth+constrained"
    assert float(nominal["log2_norm"]) == pytest.approx(3.0 / math.log(2), abs=1e-9)
    spread = next(r for r in rows if r["variant"] == "spread")
    assert float(spread["log2_norm"]) <= 1e-9
    svg = paths[1].read_bytes()
    emit_report(tmp_path / "logs", "norm-scan", tmp_path / "again", horizons=[512])
    assert (tmp_path / "again" / "norm_scan.svg").read_bytes() == svg


def test_report_other_modes(tmp_path):
    planted_logs(tmp_path / "logs")
    for mode, names in (("lr-bs", ["lr_bs.csv", "reach_set.csv"]), ("power-law", ["power_law.csv"])):
        paths = emit_report(tmp_path / "logs", mode, tmp_path / "out", plots=False, horizons=[256, 512, 1024])
        assert [p.name for p in paths] == names
    with open(tmp_path / "out" / "reach_set.csv") as f:
        reach = list(csv.DictReader(f))
    assert len(reach) == 9 and all(r["excluded_reason"] == "never reached band" for r in reach)


def test_report_layout_flags_top_decile(tmp_path):
    logs = tmp_path / "logs"
    logs.mkdir()
    for i in range(27):
        write_run(logs, f"r{i:02d}", 0.125, 8, [(1024, 1.0, 3.0 + 0.01 * ((i * 7) % 27))],
                  scales=(1.0, 2.0 ** -(i % 3), 1.0))
    paths = emit_report(logs, "layout", tmp_path / "out", plots=False, horizons=[1024])
    with open(paths[0]) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 27
    assert [r["top_decile"] for r in rows].count("true") == 3
    assert [r["run_id"] for r in rows[:3]] == ["r00", "r04", "r08"]


def test_report_errors(tmp_path):
    with pytest.raises(LogSchemaError):
        emit_report(tmp_path, "norm-scan", tmp_path / "out")
    with pytest.raises(ValueError, match="unknown report mode"):
        emit_report(tmp_path, "bogus", tmp_path / "out")


def test_cli_disco_check(capsys):
    assert main(["disco-check", "--world-size", "3", "--params", "5"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "record,key,value,expected,pass"
    assert out[-1].startswith("summary")


def test_cli_train_fit_plot(corpus, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    cfg_path = tmp_path / "c.yaml"
    tree = json.loads(json.dumps(TINY))
    tree["data"]["corpus"] = str(corpus)
    cfg_path.write_text(yaml.safe_dump(tree))
    assert main(["train", str(cfg_path), "--run-id", "x", "--out", "runs", "--max-tokens", "512"]) == 0
    assert (tmp_path / "runs" / "x.jsonl").exists()
    planted_logs(tmp_path / "logs")
    assert main(["fit", str(tmp_path / "logs"), "--out", "rep", "--horizons", "512"]) == 0
    assert (tmp_path / "rep" / "norm_scan.csv").exists() and not (tmp_path / "rep" / "norm_scan.svg").exists()
    assert main(["plot", str(tmp_path / "logs"), "--mode", "power-law", "--out", "rep"]) == 0
    assert (tmp_path / "rep" / "power_law.svg").exists()
    assert main(["scaling", str(tmp_path / "empty"), "--out", "rep"]) == 2
    assert "error" in capsys.readouterr().err
