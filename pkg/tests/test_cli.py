import json

import pytest

from hyma import cli
from hyma.search import StrategyOutcome


def _config(tmp_path, qa=(1.0, 0.6, 0.2), qb=(0.8,), **extra):
    doc = {"schema_version": 1, "seed": 0, "output_dir": "out",
           "zoo": {"synthetic": {"qualities_a": list(qa), "qualities_b": list(qb), "sample_count": 256,
                                 "dims_a": [8 + i for i in range(len(qa))], "dims_b": [8] * len(qb),
                                 "latent_dim": 6}},
           "connector": {"kind": "mlp1", "hidden": 8},
           "train": {"batch_size": 32, "epochs": 2},
           "hyma": {"train": {"model_batch": 1}, "cond_dim": 4, "generator_hidden": [8]},
           "eval": {"kind": "retrieval", "k": 3}}
    doc.update(extra)
    p = tmp_path / "run.json"
    p.write_text(json.dumps(doc))
    return p


class TestGenSynthetic:
    def test_manifest_deterministic_and_ordered(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        assert cli.main(["gen-synthetic", str(cfg), "--out", str(tmp_path / "z1")]) == 0
        out = capsys.readouterr().out
        assert "img0+txt0 > img1+txt0 > img2+txt0" in out
        assert cli.main(["gen-synthetic", str(cfg), "--out", str(tmp_path / "z2")]) == 0
        m1 = (tmp_path / "z1" / "manifest.json").read_text()
        assert m1.replace("z1", "") == (tmp_path / "z2" / "manifest.json").read_text().replace("z2", "")
        doc = json.loads(m1)
        assert [e["dim"] for e in doc["encoders"]] == [8, 9, 10, 8]
        assert doc["planted_order"] == ["img0+txt0", "img1+txt0", "img2+txt0"]
        assert (tmp_path / "z1" / "img0.emb").read_bytes() == (tmp_path / "z2" / "img0.emb").read_bytes()

    def test_search_from_manifest(self, tmp_path):
        cfg = _config(tmp_path)
        cli.main(["gen-synthetic", str(cfg), "--out", str(tmp_path / "zoo")])
        cfg2 = _config(tmp_path, zoo={"manifest": "zoo/manifest.json"})
        assert cli.main(["search", str(cfg2), "--strategy", "unit1"]) == 0


class TestSearch:
    def test_grid_single_pair(self, tmp_path):
        cfg = _config(tmp_path, qa=(0.9,), qb=(0.9,))
        assert cli.main(["search", str(cfg), "--strategy", "grid"]) == 0
        oc = StrategyOutcome.load(tmp_path / "out" / "grid" / "outcome.json")
        assert len(oc.ranked) == 1
        status = json.loads((tmp_path / "out" / "grid" / "status.json").read_text())
        assert status["status"] == "complete"

    def test_unknown_strategy_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            cli.main(["search", str(_config(tmp_path)), "--strategy", "bogus"])
        assert info.value.code == 2

    def test_runtime_failure_exit_one_and_aborted(self, tmp_path, capsys):
        cfg = _config(tmp_path, train={"batch_size": 10_000, "epochs": 1})
        assert cli.main(["search", str(cfg), "--strategy", "grid"]) == 1
        assert "search --strategy grid" in capsys.readouterr().err
        status = json.loads((tmp_path / "out" / "grid" / "status.json").read_text())
        assert status["status"] == "aborted"

    def test_bad_config_exit_one(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"schema_version": 99, "zoo": {}}))
        assert cli.main(["flops", str(p)]) == 1

    def test_reruns_are_byte_identical(self, tmp_path):
        cfg = _config(tmp_path)
        files = {}
        for strategy in ("grid", "hyma", "random"):
            cli.main(["search", str(cfg), "--strategy", strategy])
            files[strategy] = [(tmp_path / "out" / strategy / n).read_bytes()
                               for n in ("outcome.json", "records.jsonl", "winner_theta.npy")]
        for strategy in files:
            cli.main(["search", str(cfg), "--strategy", strategy])
            again = [(tmp_path / "out" / strategy / n).read_bytes()
                     for n in ("outcome.json", "records.jsonl", "winner_theta.npy")]
            assert again == files[strategy]

    def test_hyma_then_report(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        cli.main(["search", str(cfg), "--strategy", "grid"])
        cli.main(["search", str(cfg), "--strategy", "hyma"])
        capsys.readouterr()
        assert cli.main(["report", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "grid/hyma" in out and "bestguess/hyma" in out
        assert (tmp_path / "out" / "delta.csv").exists()

    def test_ask_with_scripted_replies(self, tmp_path):
        cfg = _config(tmp_path, strategies={"ask": {"replies": ["go with (img1, txt0)"]}})
        assert cli.main(["search", str(cfg), "--strategy", "ask"]) == 0
        assert StrategyOutcome.load(tmp_path / "out" / "ask" / "outcome.json").winner == 1


class TestCompareAndFlops:
    def test_rank_compare_self_and_reversed(self, tmp_path, capsys):
        a = StrategyOutcome("grid", [(0, 0.9), (1, 0.5), (2, 0.1)], 0, 0.9, 1)
        b = StrategyOutcome("hyma", [(2, 0.8), (1, 0.4), (0, 0.2)], 2, 0.8, 1)
        (tmp_path / "a.json").write_text(a.to_json())
        (tmp_path / "b.json").write_text(b.to_json())
        assert cli.main(["rank-compare", str(tmp_path / "a.json"), str(tmp_path / "a.json"),
                         "--k", "1", "2", "3", "--csv", str(tmp_path / "r.csv")]) == 0
        rows = (tmp_path / "r.csv").read_text().strip().split("\n")[1:]
        assert all(float(r.split(",")[1]) == 1.0 for r in rows)
        capsys.readouterr()
        cli.main(["rank-compare", str(tmp_path / "a.json"), str(tmp_path / "b.json"), "--k", "3"])
        assert "spearman_rho  -1.0000" in capsys.readouterr().out

    def test_flops_matches_measured(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        cli.main(["flops", str(cfg)])
        bills = json.loads(capsys.readouterr().out)
        assert bills["grid"] == sum(bills["per_pair"].values())
        cli.main(["search", str(cfg), "--strategy", "grid"])
        cli.main(["search", str(cfg), "--strategy", "hyma"])
        assert StrategyOutcome.load(tmp_path / "out" / "grid" / "outcome.json").flops_total == bills["grid"]
        assert StrategyOutcome.load(tmp_path / "out" / "hyma" / "outcome.json").flops_total == bills["hyma"]
        assert bills["hyma_exposure"]["reduction"] == 3

    def test_eval_winner(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        cli.main(["search", str(cfg), "--strategy", "grid"])
        oc = StrategyOutcome.load(tmp_path / "out" / "grid" / "outcome.json")
        capsys.readouterr()
        assert cli.main(["eval", str(cfg), "--outcome", str(tmp_path / "out" / "grid" / "outcome.json")]) == 0
        assert f"{oc.winner_metric:.6f}" in capsys.readouterr().out
