import json

import pytest

from causalgcl.errors import ConfigError, StageError
from causalgcl.pipeline import (STAGES, file_hash, is_fresh, map_test_pairs, read_manifest, read_metrics,
                                run_pipeline, run_stage)
from causalgcl.graph import Interaction, build_graph

EXPECTED = {
    "split": {"train.tsv", "test.tsv", "held_out.tsv", "split_report.txt"},
    "scores": {"scores.tsv", "environments.tsv", "stage1_log.csv", "stage1.ckpt"},
    "adjudicate": {"decisions.tsv", "causal_view.tsv", "spurious_view.tsv", "additions.tsv", "summary.txt"},
    "train": {"model.ckpt", "train_log.csv", "backbone.ckpt", "backbone_log.csv"},
    "evaluate": {"metrics.csv", "per_user.csv", "metrics.txt", "projection.csv", "backbone_metrics.csv",
                 "backbone_per_user.csv", "backbone_metrics.txt"},
}


def outputs(cfg):
    return {p.relative_to(cfg.output).as_posix(): file_hash(p)
            for p in sorted(cfg.output.rglob("*")) if p.is_file() and p.name != "decision_cache.jsonl"}


def test_full_run_writes_every_artifact(tiny_config):
    done = run_pipeline(tiny_config)
    assert list(done) == list(STAGES)
    for stage, names in EXPECTED.items():
        assert set(read_manifest(tiny_config, stage)["outputs"]) == names
    m = read_metrics(tiny_config.output / "evaluate" / "metrics.csv")
    assert m["k"] == 10 and 0 <= m["ndcg"] <= 1 and m["users"] > 0
    header = (tiny_config.output / "train" / "train_log.csv").read_text().splitlines()[0]
    assert header == "epoch,cicl,bpr,total"


def test_rerun_is_skipped_and_identical(tiny_config, caplog):
    run_pipeline(tiny_config)
    first = outputs(tiny_config)
    caplog.set_level("INFO")
    run_pipeline(tiny_config)
    assert all(f"stage {s} up to date" in caplog.text for s in STAGES)
    run_pipeline(tiny_config, force=True)
    assert outputs(tiny_config) == first


def test_fresh_directory_is_identical(tiny_config, tmp_path):
    run_pipeline(tiny_config)
    other = tiny_config.override("run", output=tmp_path / "elsewhere")
    run_pipeline(other)
    a, b = outputs(tiny_config), outputs(other)
    assert a == b


def test_config_change_invalidates_downstream(tiny_config):
    run_pipeline(tiny_config)
    old_key = read_manifest(tiny_config, "train")["key"]
    changed = tiny_config.override("train", lam=1.0)
    assert is_fresh(changed, "adjudicate")
    assert not is_fresh(changed, "train")
    run_pipeline(changed)
    assert read_manifest(changed, "train")["key"] != old_key
    assert is_fresh(changed, "evaluate")


def test_tampered_output_is_rerun(tiny_config):
    run_pipeline(tiny_config)
    (tiny_config.output / "scores" / "scores.tsv").write_text("tampered\n")
    assert not is_fresh(tiny_config, "scores")


def test_missing_inputs_name_the_stage(tiny_config):
    with pytest.raises(StageError) as info:
        run_stage(tiny_config, "train")
    assert info.value.stage == "train"
    with pytest.raises(ConfigError):
        run_stage(tiny_config, "bogus")


def test_wall_time_only_when_not_deterministic(tiny_config):
    cfg = tiny_config.override("run", deterministic=False)
    run_pipeline(cfg)
    header = (cfg.output / "train" / "train_log.csv").read_text().splitlines()[0]
    assert header.endswith("wall_time")


def test_mock_backend_needs_labels(tiny_config):
    cfg = tiny_config.override("data", labels=None)
    run_pipeline(cfg, stages=("split", "scores"))
    with pytest.raises(StageError, match="labels"):
        run_stage(cfg, "adjudicate")


def test_additions_stage(tiny_config):
    cfg = tiny_config.override("edit", propose_additions=True, per_user_limit=2)
    run_pipeline(cfg)
    summary = (cfg.output / "adjudicate" / "summary.txt").read_text()
    added = (cfg.output / "adjudicate" / "additions.tsv").read_text().splitlines()
    assert f"added edges: {len(added)}" in summary


def test_map_test_pairs():
    g = build_graph([Interaction("a", "x", 1, 0), Interaction("b", "y", 1, 0)])
    rows = [Interaction("a", "y", 1, 1), Interaction("a", "x", 1, 1), Interaction("c", "x", 1, 1),
            Interaction("a", "y", 1, 2)]
    assert map_test_pairs(g, rows) == [(0, 1)]


def test_manifest_contents(tiny_config):
    run_pipeline(tiny_config, stages=("split",))
    m = json.loads((tiny_config.output / "split" / "manifest.json").read_text())
    assert m["seed"] == tiny_config.seed and set(m["inputs"]) == {"train", "test"}
