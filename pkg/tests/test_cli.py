"""CLI pipeline: exit codes, resumability, hash discipline, artifacts."""

import json

import numpy as np
import pytest

from latentprobe.cli import main
from latentprobe.records import read_stream


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """demo -> calibrate -> attack over a small campaign, shared by tests."""
    root = tmp_path_factory.mktemp("pipeline")
    assert main(["demo", "--out", str(root)]) == 0
    cfg_path = root / "config.json"
    cfg = json.loads(cfg_path.read_text())
    cfg["tuple_count"] = 6
    cfg["group_size"] = 3
    cfg["out_dir"] = str(root / "out")
    cfg_path.write_text(json.dumps(cfg))
    assert main(["calibrate", "--config", str(cfg_path)]) == 0
    assert main(["attack", "--config", str(cfg_path)]) == 0
    return root, cfg_path


class TestDemo:
    def test_writes_archives_and_config(self, tmp_path):
        assert main(["demo", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "generator.lprobe").exists()
        assert (tmp_path / "classifier.lprobe").exists()
        assert (tmp_path / "config.json").exists()


class TestExitCodes:
    def test_missing_config_is_usage_error(self):
        assert main(["attack", "--config", "/nonexistent/config.json"]) == 1

    def test_zero_tuples_is_usage_error(self, tmp_path):
        assert main(["demo", "--out", str(tmp_path)]) == 0
        cfg_path = tmp_path / "config.json"
        cfg = json.loads(cfg_path.read_text())
        cfg["tuple_count"] = 0
        cfg_path.write_text(json.dumps(cfg))
        assert main(["calibrate", "--config", str(cfg_path)]) == 0
        assert main(["attack", "--config", str(cfg_path)]) == 1

    def test_attack_without_calibration_is_usage_error(self, tmp_path):
        assert main(["demo", "--out", str(tmp_path)]) == 0
        assert main(["attack", "--config", str(tmp_path / "config.json")]) == 1

    def test_unknown_flag_is_usage_error(self):
        assert main(["attack", "--bogus"]) == 1

    def test_bad_json_config(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{nope")
        assert main(["calibrate", "--config", str(p)]) == 1


class TestAttackArtifacts:
    def test_streams_per_subset_with_meta(self, pipeline):
        root, _ = pipeline
        out = root / "out"
        for subset in ("all", "first-half", "last-half"):
            meta, records = read_stream(out / f"records_{subset}.jsonl")
            assert meta["kind"] == "meta"
            assert meta["config_hash"]
            assert meta["toolkit_version"]
            assert len(records) == 6
            assert len({r.tuple_id for r in records}) == 6
            assert all(r.layer_subset == subset for r in records)
            assert all(r.classifier == "demo-classifier" for r in records)

    def test_restart_never_reattacks(self, pipeline):
        root, cfg_path = pipeline
        stream = root / "out" / "records_all.jsonl"
        original = stream.read_text().splitlines()
        # simulate a crash that lost the last three records
        stream.write_text("\n".join(original[:4]) + "\n")
        assert main(["attack", "--config", str(cfg_path)]) == 0
        _, records = read_stream(stream)
        ids = [r.tuple_id for r in records]
        assert sorted(ids) == list(range(6))
        assert len(ids) == len(set(ids))
        # the regenerated records match the lost ones exactly
        resumed = {json.loads(l)["tuple_id"]: json.loads(l) for l in stream.read_text().splitlines()[1:]}
        before = {json.loads(l)["tuple_id"]: json.loads(l) for l in original[1:]}
        assert resumed == before

    def test_workers_flag_matches_serial(self, pipeline, tmp_path):
        root, cfg_path = pipeline
        cfg = json.loads(cfg_path.read_text())
        cfg["out_dir"] = str(tmp_path / "par")
        cfg["layer_subsets"] = {"all": None}
        par_cfg = tmp_path / "config_par.json"
        cfg["generator"] = str(root / "generator.lprobe")
        cfg["classifier"] = str(root / "classifier.lprobe")
        par_cfg.write_text(json.dumps(cfg))
        assert main(["attack", "--config", str(par_cfg), "--workers", "2"]) == 0
        _, parallel = read_stream(tmp_path / "par" / "records_all.jsonl")
        _, serial = read_stream(root / "out" / "records_all.jsonl")
        key = lambda rs: sorted((r.tuple_id, r.status, r.success_magnitude) for r in rs)
        assert key(parallel) == key(serial)


class TestAnalyze:
    def test_human_free_outputs(self, pipeline):
        root, cfg_path = pipeline
        assert main(["analyze", "--config", str(cfg_path)]) == 0
        out = root / "out"
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["curves"]) == {"all", "first-half", "last-half"}
        assert summary["meta"]["config_hash"]
        for subset in summary["curves"]:
            csv_text = (out / f"curve_{subset}.csv").read_text()
            assert csv_text.startswith("# config_hash=")
        cells = {(m["classifier"], m["layer_subset"]) for m in summary["mean_magnitudes"]}
        assert ("demo-classifier", "all") in cells

    def test_dispositions_flow_through(self, pipeline, tmp_path):
        root, cfg_path = pipeline
        _, records = read_stream(root / "out" / "records_all.jsonl")
        success_ids = [r.tuple_id for r in records if r.status == "success"]
        entries = [
            {"image_id": i, "outcome": "class_changed" if k == 0 else "success"}
            for k, i in enumerate(success_ids)
        ]
        dpath = tmp_path / "disp_all.json"
        dpath.write_text(json.dumps(entries))
        cfg = json.loads(cfg_path.read_text())
        cfg["dispositions"] = {"all": str(dpath)}
        cfg["layer_subsets"] = {"all": None}
        judged_cfg = tmp_path / "judged.json"
        cfg["generator"] = str(root / "generator.lprobe")
        cfg["classifier"] = str(root / "classifier.lprobe")
        cfg["out_dir"] = str(root / "out")
        judged_cfg.write_text(json.dumps(cfg))
        code = main(
            ["analyze", "--config", str(judged_cfg), "--records",
             str(root / "out" / "records_all.jsonl")]
        )
        assert code == 0
        summary = json.loads((root / "out" / "summary.json").read_text())
        assert summary["status_breakdown"]["class_changed"] == 1
        assert summary["curves"]["all"]["proportion"][-1] < 1.0
        assert "threshold_tradeoff" in summary

    def test_mixed_hashes_refused_without_force(self, pipeline, tmp_path):
        root, cfg_path = pipeline
        out = root / "out"
        foreign = tmp_path / "records_foreign.jsonl"
        lines = (out / "records_all.jsonl").read_text().splitlines()
        meta = json.loads(lines[0])
        meta["config_hash"] = "deadbeef00000000"
        foreign.write_text("\n".join([json.dumps(meta)] + lines[1:]) + "\n")
        code = main(
            ["analyze", "--config", str(cfg_path), "--records",
             str(out / "records_all.jsonl"), str(foreign)]
        )
        assert code == 1
        code = main(
            ["analyze", "--config", str(cfg_path), "--records",
             str(out / "records_all.jsonl"), str(foreign), "--force"]
        )
        assert code == 0


class TestRender:
    def test_triples_written(self, pipeline):
        root, cfg_path = pipeline
        code = main(
            ["render", "--config", str(cfg_path), "--records",
             str(root / "out" / "records_all.jsonl"), "--count", "2"]
        )
        assert code == 0
        grids = sorted((root / "out" / "grids").glob("*.png"))
        assert len(grids) == 2
        assert grids[0].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        from PIL import Image

        with Image.open(grids[0]) as img:
            assert img.text["config_hash"]
            assert img.text["toolkit_version"]

    def test_wrong_config_hash_rejected(self, pipeline, tmp_path):
        root, cfg_path = pipeline
        cfg = json.loads(cfg_path.read_text())
        cfg["seed"] = 999  # changes the campaign hash
        cfg["generator"] = str(root / "generator.lprobe")
        cfg["classifier"] = str(root / "classifier.lprobe")
        other = tmp_path / "other.json"
        other.write_text(json.dumps(cfg))
        code = main(
            ["render", "--config", str(other), "--records",
             str(root / "out" / "records_all.jsonl")]
        )
        assert code == 1


class TestServeMaterialization:
    def test_replayed_pairs_and_session(self, pipeline):
        from latentprobe.cli import _load_config, _materialize

        root, cfg_path = pipeline
        cfg = _load_config(str(cfg_path))
        pairs = _materialize(
            cfg, root / "out" / "records_all.jsonl", root / "out" / "imgs", limit=2
        )
        assert len(pairs) == 2
        for record, capture in pairs:
            assert capture["perturbed_image"].shape == (1, 1, 28, 28)
            assert capture["unperturbed_image"].shape == (1, 1, 28, 28)
            assert not np.array_equal(
                capture["perturbed_image"], capture["unperturbed_image"]
            )
