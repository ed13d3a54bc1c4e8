import json

import numpy as np
import pytest

from gator import container
from gator.builtin import builtin_graph
from gator.cli import main
from gator.gating import init_gates
from gator.hypergraph import build_hypergraph
from gator.ir import load_network
from gator.training import initial_weights

TINY = "synthetic:classes=10,n=64,hw=16,seed=3,eval=16"
TINY_CONFIG = {"gamma": 30.0, "pretrain_lr": [[1, 0.05]], "gating_lr": [[1, 0.01]], "finetune_lr": [[1, 0.001]],
               "batch_size": 32}


@pytest.fixture
def toy_files(tmp_path):
    g = builtin_graph("toy-resnet")
    h = build_hypergraph(g)
    container.save(tmp_path / "w.weights", initial_weights(g, 0))
    gates = init_gates(h)
    container.save_gates(tmp_path / "full.gates", gates)
    gates.theta[2][:] = -1.0  # inner edge of the first residual block
    gates.pruned[2][:] = True
    container.save_gates(tmp_path / "empty.gates", gates)
    return tmp_path


class TestExitCodes:
    def test_no_command(self):
        assert main([]) == 2

    def test_unknown_objective(self):
        assert main(["analyze", "--ir", "builtin:toy-resnet", "--objective", "speed"]) == 2

    def test_missing_argument(self, capsys):
        assert main(["prune", "--ir", "builtin:toy-resnet"]) == 2
        assert "--weights" in capsys.readouterr().err

    def test_malformed_ir(self, tmp_path, capsys):
        doc = {"name": "bad", "input": [3, 8, 8], "layers": [{"id": "a", "op": "conv", "inputs": ["nowhere"]}]}
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        assert main(["analyze", "--ir", str(tmp_path / "bad.json")]) == 2
        assert "invalid input" in capsys.readouterr().err

    def test_unknown_builtin(self):
        assert main(["analyze", "--ir", "builtin:vgg"]) == 2

    def test_bad_data(self, tmp_path):
        assert main(["train", "--ir", "builtin:toy-resnet", "--data", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_wrong_weights(self, toy_files):
        assert main(["prune", "--ir", "builtin:resnet50", "--weights", str(toy_files / "w.weights"),
                     "--gates", str(toy_files / "full.gates"), "--out", str(toy_files / "o")]) == 2


class TestAnalyze:
    def test_resnet50_summary(self, capsys, tmp_path):
        assert main(["analyze", "--ir", "builtin:resnet50", "--out", str(tmp_path / "a.json")]) == 0
        out = capsys.readouterr().out
        assert "37 prunable, 32 trivial" in out
        doc = json.loads((tmp_path / "a.json").read_text())
        assert set(doc["factors"]) == {"memory", "flops"}

    def test_single_objective(self, capsys):
        assert main(["analyze", "--ir", "builtin:toy-resnet", "--objective", "flops"]) == 0
        out = capsys.readouterr().out
        assert "flops cost" in out and "memory cost" not in out

    def test_latency_needs_table(self):
        assert main(["analyze", "--ir", "builtin:toy-resnet", "--objective", "latency"]) == 2


class TestProfile:
    def test_writes_table(self, tmp_path):
        out = tmp_path / "lat.tsv"
        assert main(["profile-latency", "--ir", "builtin:toy-resnet", "--out", str(out), "--batch-size", "2"]) == 0
        assert main(["analyze", "--ir", "builtin:toy-resnet", "--objective", "latency",
                     "--latency-table", str(out)]) == 0

    def test_too_few_repeats(self, tmp_path):
        assert main(["profile-latency", "--ir", "builtin:toy-resnet", "--out", str(tmp_path / "t"),
                     "--repeats", "3"]) == 2


class TestPrune:
    def test_identity(self, toy_files):
        out = toy_files / "id"
        assert main(["prune", "--ir", "builtin:toy-resnet", "--weights", str(toy_files / "w.weights"),
                     "--gates", str(toy_files / "full.gates"), "--out", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["flops_reduction_pct"] == 0 and rep["equivalence_gap"] == 0
        assert load_network(out / "pruned.json").layers

    def test_empty_block_collapses(self, toy_files):
        out = toy_files / "e"
        assert main(["prune", "--ir", "builtin:toy-resnet", "--weights", str(toy_files / "w.weights"),
                     "--gates", str(toy_files / "empty.gates"), "--out", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["layer_count_delta"] < 0 and rep["collapsed_layers"]
        assert rep["equivalence_gap"] <= 1e-5

    def test_mismatched_gates(self, toy_files, tmp_path):
        r50 = build_hypergraph(builtin_graph("resnet50"))
        container.save_gates(tmp_path / "r.gates", init_gates(r50))
        assert main(["prune", "--ir", "builtin:toy-resnet", "--weights", str(toy_files / "w.weights"),
                     "--gates", str(tmp_path / "r.gates"), "--out", str(tmp_path / "o")]) == 2

    def test_report_round_trip(self, toy_files, capsys):
        out = toy_files / "e"
        main(["prune", "--ir", "builtin:toy-resnet", "--weights", str(toy_files / "w.weights"),
              "--gates", str(toy_files / "empty.gates"), "--out", str(out)])
        capsys.readouterr()
        assert main(["report", "--ir", "builtin:toy-resnet", "--pruned", str(out / "pruned.json"),
                     "--out", str(out / "r2.json")]) == 0
        assert "FLOPs" in capsys.readouterr().out
        a = json.loads((out / "report.json").read_text())
        b = json.loads((out / "r2.json").read_text())
        assert a["flops_pruned"] == b["flops_pruned"] and a["params_pruned"] == b["params_pruned"]


class TestTrain:
    def test_tiny_run(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(TINY_CONFIG))
        out = tmp_path / "run"
        args = ["train", "--ir", "builtin:toy-resnet", "--data", TINY, "--config", str(cfg), "--out", str(out)]
        assert main(args) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["gamma"] == 30.0
        for name in ("plan.json", "final.weights", "final.gates", "log.jsonl", "pretrain.weights"):
            assert (out / name).exists()
        # resuming a finished run redoes nothing and reproduces the files
        before = (out / "final.weights").read_bytes()
        assert main(args + ["--resume"]) == 0
        assert (out / "final.weights").read_bytes() == before
        # a different config cannot resume this directory
        assert main(args + ["--resume", "--seed", "5"]) == 2

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"alpha_schedule": [1.0, 0.5]}))
        assert main(["train", "--ir", "builtin:toy-resnet", "--data", TINY, "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
