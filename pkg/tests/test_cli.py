import hashlib
import json
from pathlib import Path

import yaml
from click.testing import CliRunner

from newsfuse import cli

from conftest import write_eb_fixture


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tiny_synthetic_config(out_dir: Path, bases=("sknn",), seed=5) -> dict:
    cells = {}
    for cat, frac in (("News", 0.55), ("Sports", 0.25), ("Life and Culture", 0.20)):
        cells[f"{cat}|local"] = 14
        cells[f"{cat}|nonlocal"] = 14
    return {
        "seed": seed,
        "out_dir": str(out_dir),
        "dataset": {
            "kind": "synthetic",
            "generator": {
                "n_users": 60,
                "n_items_per_cell": cells,
                "session_length_distribution": [5.0, 4.0],
                "sessions_per_user": [3.0, 4.0],
            },
        },
        "split": {"ratios": [0.8, 0.1, 0.1]},
        "segmentation": {"style": "per_category_plus_pooled", "sparse_floor": 2},
        "bases": list(bases),
        "sasrec": {"max_seq_len": 8, "embed_dim": 8, "n_blocks": 1, "n_heads": 1,
                   "dropout_rate": 0.0, "n_epochs": 2, "batch_size": 32,
                   "learning_rate": 0.01},
        "sknn": {"k": 10, "sample_size": 50},
        "fusion": {"hidden": 8, "n_neg": 5, "epochs": 3, "positions": "last"},
        "evaluation": {"ks": [5, 10], "positions": "all"},
    }


def write_config(tmp_path: Path, cfg: dict, name: str = "exp.yaml") -> Path:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path


def run(args) -> "Result":
    return CliRunner().invoke(cli.main, args, catch_exceptions=False)


class TestGenerate:
    def test_valid_config_writes_files(self, tmp_path):
        cfg = write_config(tmp_path, tiny_synthetic_config(tmp_path / "run"))
        result = run(["generate", "--config", str(cfg)])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "run/data/articles.csv").exists()
        assert (tmp_path / "run/data/interactions.csv").exists()
        manifest = json.loads((tmp_path / "run/manifest.json").read_text())
        assert "generate" in manifest["stages"]

    def test_missing_config_exits_nonzero(self, tmp_path):
        result = run(["generate", "--config", str(tmp_path / "nope.yaml")])
        assert result.exit_code == cli.EXIT_CONFIG

    def test_same_seed_identical_hashes(self, tmp_path):
        cfg = write_config(tmp_path, tiny_synthetic_config(tmp_path / "run"))
        run(["generate", "--config", str(cfg)])
        h1 = {p.name: file_hash(p) for p in (tmp_path / "run/data").iterdir()}
        run(["generate", "--config", str(cfg)])
        h2 = {p.name: file_hash(p) for p in (tmp_path / "run/data").iterdir()}
        assert h1 == h2

    def test_seed_override_changes_data(self, tmp_path):
        cfg = write_config(tmp_path, tiny_synthetic_config(tmp_path / "run"))
        run(["generate", "--config", str(cfg)])
        h1 = file_hash(tmp_path / "run/data/interactions.csv")
        run(["generate", "--config", str(cfg), "--seed", "99"])
        h2 = file_hash(tmp_path / "run/data/interactions.csv")
        assert h1 != h2


class TestTrainFuseEvaluate:
    def test_sknn_pipeline_end_to_end(self, tmp_path):
        out = tmp_path / "run"
        cfg = write_config(tmp_path, tiny_synthetic_config(out, bases=("sknn",)))
        assert run(["generate", "--config", str(cfg)]).exit_code == 0
        assert run(["train", "--config", str(cfg)]).exit_code == 0
        assert (out / "models/registry_sknn/registry.json").exists()
        assert (out / "models/sknn_global.sknn/params.json").exists()
        assert run(["fuse", "--config", str(cfg)]).exit_code == 0
        assert (out / "fusion/sknn.fusion").exists()
        assert run(["evaluate", "--config", str(cfg)]).exit_code == 0
        report = (out / "reports/report.csv").read_text(encoding="utf-8")
        for name in ("SKNN (Global)", "SKNN + Ensemble Fusion", "SKNN + NN Fusion"):
            assert name in report
        assert (out / "reports/comparison.txt").exists()
        assert (out / "reports/metrics_hit_rate.png").exists()
        assert (out / "reports/metrics_coverage.png").exists()

    def test_evaluate_before_train_names_stage(self, tmp_path):
        out = tmp_path / "run"
        cfg = write_config(tmp_path, tiny_synthetic_config(out))
        run(["generate", "--config", str(cfg)])
        result = CliRunner().invoke(cli.main, ["evaluate", "--config", str(cfg)])
        assert result.exit_code == cli.EXIT_DATA
        combined = result.output + (result.stderr or "")
        assert "train" in combined

    def test_train_before_generate_names_stage(self, tmp_path):
        out = tmp_path / "run"
        cfg = write_config(tmp_path, tiny_synthetic_config(out))
        result = CliRunner().invoke(cli.main, ["train", "--config", str(cfg)])
        assert result.exit_code == cli.EXIT_DATA
        combined = result.output + (result.stderr or "")
        assert "generate" in combined

    def test_resume_reuses_checkpoints(self, tmp_path):
        out = tmp_path / "run"
        cfg = write_config(tmp_path, tiny_synthetic_config(out, bases=("sknn",)))
        run(["generate", "--config", str(cfg)])
        run(["train", "--config", str(cfg)])
        ckpt = out / "models/sknn_global.sknn/sessions.csv"
        mtime = ckpt.stat().st_mtime_ns
        assert run(["train", "--config", str(cfg), "--resume"]).exit_code == 0
        assert ckpt.stat().st_mtime_ns == mtime  # untouched on resume

    def test_report_regenerates_from_csv(self, tmp_path):
        out = tmp_path / "run"
        cfg = write_config(tmp_path, tiny_synthetic_config(out, bases=("sknn",)))
        for stage in ("generate", "train", "fuse", "evaluate"):
            assert run([stage, "--config", str(cfg)]).exit_code == 0
        comparison = out / "reports/comparison.txt"
        before = comparison.read_bytes()
        comparison.unlink()
        assert run(["report", "--config", str(cfg)]).exit_code == 0
        assert comparison.read_bytes() == before


class TestDeterminism:
    def test_two_runs_identical_reports_and_checkpoints(self, tmp_path):
        digests = []
        for run_dir in ("one", "two"):
            out = tmp_path / run_dir
            cfg = write_config(tmp_path, tiny_synthetic_config(out, bases=("sknn",)),
                               name=f"{run_dir}.yaml")
            for stage in ("generate", "train", "fuse", "evaluate"):
                assert run([stage, "--config", str(cfg)]).exit_code == 0
            digest = {
                "report": file_hash(out / "reports/report.csv"),
                "comparison": file_hash(out / "reports/comparison.txt"),
                "fusion": file_hash(out / "fusion/sknn.fusion"),
                "registry": file_hash(out / "models/registry_sknn/registry.json"),
            }
            digests.append(digest)
        assert digests[0] == digests[1]


class TestEbShapedPipeline:
    def test_label_then_full_pipeline_two_row_table(self, tmp_path):
        paths = write_eb_fixture(tmp_path / "ebdata", n_per_category=4, n_users=50)
        out = tmp_path / "run"
        cfg = {
            "seed": 13,
            "out_dir": str(out),
            "dataset": {
                "kind": "ingest",
                "articles": str(paths["articles"]),
                "articles_format": "ebnerd_csv",
                "interactions": str(paths["interactions"]),
                "texts": str(paths["texts"]),
            },
            "split": {"ratios": [0.8, 0.1, 0.1]},
            "segmentation": {"style": "per_category_plus_pooled", "sparse_floor": 2},
            "bases": ["sasrec"],
            "sasrec": {"max_seq_len": 6, "embed_dim": 8, "n_blocks": 1, "n_heads": 1,
                       "dropout_rate": 0.0, "n_epochs": 1, "batch_size": 32},
            "fusion": {"hidden": 8, "n_neg": 5, "epochs": 2, "positions": "last"},
            "evaluation": {"ks": [5, 10],
                           "variants": ["SASRec (Global)", "SASRec + NN Fusion"]},
            "labeler": {"mock_mode": True, "mock_fixture": str(paths["mock"])},
        }
        cfg_path = write_config(tmp_path, cfg)
        for stage in (["label"], ["train"], ["fuse"], ["evaluate"]):
            result = run(stage + ["--config", str(cfg_path)])
            assert result.exit_code == 0, (stage, result.output)

        labeled = (out / "data/articles_labeled.csv").read_text(encoding="utf-8")
        assert ",local" in labeled and ",nonlocal" in labeled

        table = (out / "reports/comparison.txt").read_text(encoding="utf-8")
        lines = [l for l in table.splitlines() if l and not l.startswith("-")]
        assert len(lines) == 3  # header + global row + fusion row
        assert any(l.startswith("SASRec (Global)") for l in lines)
        assert any(l.startswith("SASRec + NN Fusion") for l in lines)
