import csv
import json
import subprocess
import sys
import time

import pytest

from kdnas.cli import EXIT_MISSING, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from kdnas.config import RunConfig, apply_overrides, load_config
from kdnas.exceptions import ConfigurationError
from kdnas.latency import CSV_HEADER


def write_cfg(tmp_path, **sections):
    cfg = {
        "output_dir": str(tmp_path / "out"),
        "space": {"layers": [1, 2], "heads": [2], "hidden": [8], "intermediate": [16],
                  "activations": ["gelu", "relu"]},
        "model": {"vocab_size": 32, "max_seq": 8, "teacher": "4,2,8,16,gelu"},
        "corpus": {"n_sequences": 64, "seq_len": 8},
        "kd": {"batch_size": 16, "steps": 4},
        "latency": {"source": "analytic", "seq_len": 8},
        "search": {"episodes": 2, "candidates": 2, "mode": "real_kd", "proxy_epochs": 1},
        "compare": {"seeds": [0, 1]},
    }
    for k, v in sections.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def surrogate_cfg(tmp_path, **search):
    return write_cfg(tmp_path, space={"preset": "full", "layers": None, "heads": None, "hidden": None,
                                      "intermediate": None, "activations": None},
                     latency={"seq_len": 128, "teacher_latency_ms": 64.98},
                     model={"teacher": "12,12,768,3072,gelu"},
                     search={"mode": "surrogate", "episodes": 5, "candidates": 8,
                             "controller_lr": 1e-2, "controller_batch_size": 4, **search})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# configuration

def test_defaults_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()
    assert cfg.kd.pair_reduction == "mean"


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"serch": {}})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"search": {"episodez": 3}})


def test_overrides_parse_json_values():
    d = apply_overrides({"search": {"episodes": 15}}, ["search.episodes=3", "kd.mapping=last", "a.b=[1,2]"])
    assert d == {"search": {"episodes": 3}, "kd": {"mapping": "last"}, "a": {"b": [1, 2]}}
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["novalue"])


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("KDNAS_OUTPUT_ROOT", str(tmp_path))
    assert RunConfig(output_dir="runs/x").output_path() == tmp_path / "runs/x"
    assert RunConfig(output_dir="/abs").output_path().as_posix() == "/abs"


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "bad.json")


# exit codes

def test_missing_config_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["search"])
    assert exc.value.code == EXIT_USAGE


def test_missing_config_file_exit_2(tmp_path):
    assert main(["latency-table", "--config", str(tmp_path / "nope.json")]) == EXIT_USAGE


def test_search_without_table_exit_3(tmp_path, capsys):
    assert main(["search", "--config", write_cfg(tmp_path)]) == EXIT_MISSING
    assert "latency-table" in capsys.readouterr().err


def test_invalid_state_exit_2(tmp_path):
    assert main(["distill", "--config", write_cfg(tmp_path), "4,4,288,gelu"]) == EXIT_USAGE
    assert main(["distill", "--config", write_cfg(tmp_path), "4,4,288,768,tanh"]) == EXIT_USAGE


def test_runtime_failure_exit_4(tmp_path):
    # corpus file that is a directory: an OS-level failure during the run
    cfg = write_cfg(tmp_path, corpus={"source": str(tmp_path)})
    assert main(["distill", "--config", cfg, "1,2,8,16,gelu"]) == EXIT_RUNTIME


def test_console_script_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "kdnas.cli", "latency-table", "--config",
                          str(tmp_path / "nope.json")], capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE and "not found" in res.stderr


# latency-table

def test_latency_table_header_and_idempotent(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["latency-table", "--config", cfg]) == EXIT_OK
    path = tmp_path / "out/latency.csv"
    with open(path) as fh:
        assert next(csv.reader(fh)) == CSV_HEADER
    first = path.read_bytes()
    assert len(read_csv(path)) == 5  # 4 states plus the teacher
    assert main(["latency-table", "--config", cfg]) == EXIT_OK
    assert path.read_bytes() == first


def test_measured_latency_table_small(tmp_path):
    cfg = write_cfg(tmp_path, latency={"source": "measured", "n_samples": 5, "n_runs": 2})
    assert main(["latency-table", "--config", cfg]) == EXIT_OK
    rows = read_csv(tmp_path / "out/latency.csv")
    assert len(rows) == 5 and all(float(r["mean_ms"]) > 0 and r["n_runs"] == "2" for r in rows)
    before = (tmp_path / "out/latency.csv").read_bytes()
    assert main(["latency-table", "--config", cfg]) == EXIT_OK
    assert (tmp_path / "out/latency.csv").read_bytes() == before


# search

def test_surrogate_smoke_search(tmp_path, capsys):
    cfg = surrogate_cfg(tmp_path)
    assert main(["latency-table", "--config", cfg]) == EXIT_OK
    start = time.perf_counter()
    assert main(["search", "--config", cfg]) == EXIT_OK
    assert time.perf_counter() - start < 60
    out = tmp_path / "out"
    for name in ("episodes.jsonl", "topk.csv", "curve.csv", "effective_config.search.json"):
        assert (out / name).exists()
    assert len((out / "episodes.jsonl").read_text().splitlines()) == 5
    assert len(read_csv(out / "curve.csv")) == 5
    assert "top1:" in capsys.readouterr().out
    echoed = json.loads((out / "effective_config.search.json").read_text())
    assert echoed["search"]["episodes"] == 5


def test_search_resume_via_cli(tmp_path):
    cfg = surrogate_cfg(tmp_path)
    main(["latency-table", "--config", cfg])
    table = ["--set", "latency.path=" + json.dumps(str(tmp_path / "out/latency.csv"))]

    def run(out, *extra):
        return main(["search", "--config", cfg, *table, "--set", "output_dir=" + json.dumps(str(tmp_path / out)),
                     *extra])

    assert run("full") == EXIT_OK
    assert run("cut", "--stop-after", "2") == EXIT_OK
    assert len((tmp_path / "cut/episodes.jsonl").read_text().splitlines()) == 2
    assert run("cut", "--jobs", "2") == EXIT_OK
    assert (tmp_path / "cut/episodes.jsonl").read_bytes() == (tmp_path / "full/episodes.jsonl").read_bytes()
    # a changed setting on an existing log directory is refused
    assert run("cut", "--set", "search.candidates=9") == EXIT_USAGE


def test_real_kd_search_cli(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["latency-table", "--config", cfg]) == 0
    assert main(["search", "--config", cfg]) == 0
    top = read_csv(tmp_path / "out/topk.csv")
    assert len(top) == 3 and all(0 <= float(r["loss"]) for r in top)


# distillation commands

def test_distill_deterministic(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["distill", "--config", cfg, "2,2,8,16,relu"]) == EXIT_OK
    out = tmp_path / "out/distill/2_2_8_16_relu"
    first = (out / "losses.csv").read_bytes()
    assert (out / "student.bin").exists() and len(read_csv(out / "losses.csv")) == 4
    assert main(["distill", "--config", cfg, "2,2,8,16,relu"]) == EXIT_OK
    assert (out / "losses.csv").read_bytes() == first


def test_distill_accepts_table_notation(tmp_path):
    cfg = write_cfg(tmp_path, model={"vocab_size": 16, "max_seq": 4, "teacher": "4,2,8,16,gelu"},
                    corpus={"n_sequences": 4, "seq_len": 4}, kd={"batch_size": 4, "steps": 1})
    assert main(["distill", "--config", cfg, "4,4,288,768,gelu"]) == EXIT_OK


def test_mini_kd_report(tmp_path, capsys):
    assert main(["mini-kd", "--config", write_cfg(tmp_path), "1,2,8,16,gelu"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["state"] == "1,2,8,16,gelu" and report["n_heldout"] > 0


def test_compare_mappings_rows(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["compare-mappings", "--config", cfg, "1,2,8,16,gelu"]) == EXIT_OK
    rows = read_csv(tmp_path / "out/compare_mappings.csv")
    assert len(rows) == 4 * 2
    assert {r["strategy"] for r in rows} == {"last1", "last", "uniform", "uniform_last"}
    first = (tmp_path / "out/compare_mappings.csv").read_bytes()
    main(["compare-mappings", "--config", cfg, "1,2,8,16,gelu"])
    assert (tmp_path / "out/compare_mappings.csv").read_bytes() == first


# random baseline

def test_random_baseline_shares_search_hash(tmp_path):
    cfg = surrogate_cfg(tmp_path)
    main(["latency-table", "--config", cfg])
    assert main(["random-baseline", "--config", cfg]) == EXIT_OK
    rows = read_csv(tmp_path / "out/random_baseline.csv")
    assert [r["seed"] for r in rows] == ["0", "1", "2"]
    assert all(len(r["states"].split(" ")) == 3 for r in rows)
    main(["search", "--config", cfg, "--stop-after", "1"])
    search_hash = json.loads((tmp_path / "out/search_config.json").read_text())["hash"]
    assert {r["config_hash"] for r in rows} == {search_hash}
    first = (tmp_path / "out/random_baseline.csv").read_bytes()
    main(["random-baseline", "--config", cfg])
    assert (tmp_path / "out/random_baseline.csv").read_bytes() == first


@pytest.mark.parametrize("name", ["full_space_surrogate.json", "desk_real_kd.json"])
def test_shipped_configs_load(name):
    from pathlib import Path
    cfg = load_config(Path(__file__).parent.parent / "configs" / name)
    assert cfg.search.controller_lr == 1e-2 and cfg.build_space()
