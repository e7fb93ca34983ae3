import json

import pytest

from avogcl.cli import main
from avogcl.synthetic import SyntheticConfig, generate_interactions, write_interactions


@pytest.fixture(scope="module")
def raw_tsv(tmp_path_factory):
    path = tmp_path_factory.mktemp("raw") / "raw.tsv"
    records = generate_interactions(
        SyntheticConfig(num_users=50, num_items=70, target_interactions=1200,
                        num_clusters=5), seed=91)
    write_interactions(path, records)
    return path


@pytest.fixture()
def workspace(raw_tsv, tmp_path):
    ws = tmp_path / "ws"
    code = main(["prepare", "--input", str(raw_tsv), "--out", str(ws),
                 "--min-interactions", "3"])
    assert code == 0
    return ws


def _write_config(path, **overrides):
    values = dict(mode="lightgcn", d=8, L=2, lr=0.01, batch_size=128,
                  max_epochs=2, eval_every=1, patience=3, seed=4,
                  topk_list="5,10")
    values.update(overrides)
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()),
                    encoding="utf-8")
    return path


class TestPrepare:
    def test_writes_manifest(self, workspace, capsys):
        manifest = workspace / "manifest"
        for name in ("stats.json", "train.tsv", "val.tsv", "test.tsv"):
            assert (manifest / name).exists()
        stats = json.loads((manifest / "stats.json").read_text())
        assert stats["num_users"] > 0 and stats["num_train"] > 0

    def test_rerun_requires_force(self, raw_tsv, workspace, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["prepare", "--input", str(raw_tsv), "--out", str(workspace),
                  "--min-interactions", "3"])
        assert exc.value.code == 2
        assert "--force" in capsys.readouterr().err
        code = main(["prepare", "--input", str(raw_tsv), "--out", str(workspace),
                     "--min-interactions", "3", "--force"])
        assert code == 0

    def test_missing_input_fails(self, tmp_path, capsys):
        with pytest.raises(SystemExit):
            main(["prepare", "--input", str(tmp_path / "nope.tsv"),
                  "--out", str(tmp_path / "ws")])


class TestTrain:
    def test_writes_logs_and_checkpoints(self, workspace, tmp_path, capsys):
        cfg = _write_config(tmp_path / "run.cfg")
        code = main(["train", "--config", str(cfg), "--out", str(workspace)])
        assert code == 0
        assert (workspace / "logs" / "metrics.jsonl").exists()
        assert (workspace / "checkpoints" / "last.ckpt").exists()
        lines = (workspace / "logs" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        out = capsys.readouterr().out
        assert "trained mode=lightgcn" in out
        # a rerun must refuse to clobber the existing log
        with pytest.raises(SystemExit) as exc:
            main(["train", "--config", str(cfg), "--out", str(workspace)])
        assert exc.value.code == 2

    def test_bad_config_key_named(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("mode = lightgcn\nmomentum = 0.9\n", encoding="utf-8")
        with pytest.raises(SystemExit) as exc:
            main(["train", "--config", str(cfg), "--out", str(workspace)])
        assert exc.value.code == 2
        assert "momentum" in capsys.readouterr().err

    def test_missing_manifest_fails(self, tmp_path, capsys):
        cfg = _write_config(tmp_path / "run.cfg")
        with pytest.raises(SystemExit) as exc:
            main(["train", "--config", str(cfg), "--out", str(tmp_path / "empty")])
        assert exc.value.code == 2
        assert "prepare" in capsys.readouterr().err


class TestEvaluate:
    def test_reports_written(self, workspace, tmp_path, capsys):
        cfg = _write_config(tmp_path / "run.cfg")
        assert main(["train", "--config", str(cfg), "--out", str(workspace)]) == 0
        code = main(["evaluate",
                     "--checkpoint", str(workspace / "checkpoints" / "last.ckpt"),
                     "--split", str(workspace / "manifest"),
                     "--out", str(workspace), "--topk", "5,10",
                     "--buckets", "user"])
        assert code == 0
        report = json.loads(
            (workspace / "reports" / "eval_lightgcn_test.json").read_text())
        assert "recall@5" in report and "ndcg@10" in report
        assert set(report["buckets"]) == {f"test{k}" for k in range(1, 6)}
        csv_text = (workspace / "reports" / "eval_lightgcn_test.csv").read_text()
        assert csv_text.splitlines()[0] == "mode,dataset,seed,N,recall,ndcg"
        assert "recall@5" in capsys.readouterr().out

    def test_checkpoint_split_mismatch(self, workspace, tmp_path, capsys):
        cfg = _write_config(tmp_path / "run.cfg")
        assert main(["train", "--config", str(cfg), "--out", str(workspace)]) == 0
        other = generate_interactions(
            SyntheticConfig(num_users=20, num_items=30, target_interactions=300,
                            num_clusters=3), seed=92)
        raw2 = tmp_path / "raw2.tsv"
        write_interactions(raw2, other)
        ws2 = tmp_path / "ws2"
        assert main(["prepare", "--input", str(raw2), "--out", str(ws2),
                     "--min-interactions", "1"]) == 0
        with pytest.raises(SystemExit) as exc:
            main(["evaluate",
                  "--checkpoint", str(workspace / "checkpoints" / "last.ckpt"),
                  "--split", str(ws2 / "manifest"), "--out", str(ws2)])
        assert exc.value.code == 2
        assert "does not match" in capsys.readouterr().err


class TestAblate:
    def test_matrix_rows(self, workspace, tmp_path, capsys):
        cfg = _write_config(tmp_path / "base.cfg", mode="avogcl", max_epochs=1,
                            eval_every=5, alpha=0.05, omega=0.01)
        code = main(["ablate", "--config", str(cfg),
                     "--modes", "lightgcn,wo_both",
                     "--grid", "d=8", "--grid", "seed=1,2",
                     "--out", str(workspace)])
        assert code == 0
        lines = (workspace / "reports" / "ablation.csv").read_text().splitlines()
        # 2 tokens x 2 grid combos x 2 cutoffs + header
        assert len(lines) == 1 + 2 * 2 * 2
        assert any("wo_both[d=8,seed=2]" in line for line in lines)

    def test_unknown_token_rejected(self, workspace, tmp_path, capsys):
        cfg = _write_config(tmp_path / "base.cfg")
        with pytest.raises(SystemExit) as exc:
            main(["ablate", "--config", str(cfg), "--modes", "wo_everything",
                  "--out", str(workspace)])
        assert exc.value.code == 2
        assert "wo_everything" in capsys.readouterr().err


class TestGradCheck:
    def test_small_budget_passes(self, capsys):
        code = main(["grad-check", "--size", "8", "--seed", "1"])
        out = capsys.readouterr().out
        assert code == 0
        assert "PASS d_user_emb" in out
        assert "FAIL" not in out
        assert "checked" in out
