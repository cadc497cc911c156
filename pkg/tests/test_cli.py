import csv
import json
import shutil

import pytest

from ecgprofile.cli import EXIT_OK, EXIT_USER, main

SMALL = {
    "synth": {"n": 200, "duration_s": 4.0},
    "preprocess": {"segment_s": 2.0},
    "train": {"epochs": 2, "patience": 2, "batch_size": 32},
    "cohort": {"min_count": 15},
    "evaluate": {"n_resamples": 100},
    "comorbidity": {"pairs": [["E11", "I48"]]},
}
STAGES = ["synth", "preprocess", "build-cohort", "train", "evaluate", "survival", "comorbidity"]


def _run(*argv):
    return main([str(a) for a in argv])


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    run = root / "run"
    codes = {stage: _run(stage, "--config", cfg, "--run-dir", run, "--deterministic") for stage in STAGES}
    return cfg, run, codes


def test_all_stages_succeed(pipeline):
    _, run, codes = pipeline
    assert codes == dict.fromkeys(STAGES, EXIT_OK)
    for stage in ("synth", "preprocess", "cohort", "train", "evaluate", "survival", "comorbidity"):
        meta = json.loads((run / stage / "run_metadata.json").read_text())
        assert {"config", "seed", "versions", "wall_time_s"} <= set(meta)


def test_stage_outputs(pipeline):
    _, run, _ = pipeline
    assert len(_rows(run / "preprocess" / "manifest.csv")) == 200
    assert _rows(run / "preprocess" / "rejects.csv") == []
    space = (run / "cohort" / "label_space.tsv").read_text().splitlines()
    assert space[0].startswith("index\tcode")
    report = _rows(run / "evaluate" / "label_report.csv")
    assert [r["code"] for r in report] == [line.split("\t")[1] for line in space[1:]]
    risk = _rows(run / "evaluate" / "risk_scores.csv")
    assert risk and set(risk[0]) >= {"subject_id"}
    assert (run / "train" / "history.png").stat().st_size > 0
    assert (run / "survival" / "survival_report.csv").exists()
    assert list((run / "survival").glob("km_*.png"))
    assert (run / "comorbidity" / "spearman_heatmap.png").exists()


def test_splits_are_patient_disjoint(pipeline):
    _, run, _ = pipeline
    rows = _rows(run / "train" / "splits.csv")
    by_split = {}
    for r in rows:
        by_split.setdefault(r["split"], set()).add(r["patient_id"])
    assert set(by_split) == {"train", "val", "test"}
    assert not (by_split["train"] & by_split["test"]) and not (by_split["train"] & by_split["val"])


def test_preprocess_rerun_is_idempotent(pipeline):
    cfg, run, _ = pipeline
    before = (run / "preprocess" / "manifest.csv").read_bytes()
    assert _run("preprocess", "--config", cfg, "--run-dir", run) == EXIT_OK
    meta = json.loads((run / "preprocess" / "run_metadata.json").read_text())
    assert meta["segments_written"] == 0
    assert (run / "preprocess" / "manifest.csv").read_bytes() == before


def test_corrupt_record_is_rejected(pipeline, tmp_path):
    cfg, run, _ = pipeline
    recs = tmp_path / "records"
    shutil.copytree(run / "synth" / "records", recs)
    victim = sorted(recs.glob("*.dat"))[0]
    victim.write_bytes(victim.read_bytes()[:10])
    out = tmp_path / "run"
    assert _run("preprocess", "--config", cfg, "--run-dir", out, "--records", recs) == EXIT_OK
    rejects = _rows(out / "preprocess" / "rejects.csv")
    assert len(rejects) == 1 and victim.stem in rejects[0]["source"]
    assert len(_rows(out / "preprocess" / "manifest.csv")) == 199


def test_finetune_from_checkpoint(pipeline, tmp_path):
    cfg, run, _ = pipeline
    out = tmp_path / "ft"
    shutil.copytree(run, out, ignore=shutil.ignore_patterns("train", "evaluate"))
    code = _run("finetune", "--config", cfg, "--run-dir", out, "--epochs", 2,
                "--pretrained", run / "train" / "checkpoint.ckpt")
    assert code == EXIT_OK
    assert (out / "finetune" / "checkpoint.ckpt").exists()
    assert _run("evaluate", "--config", cfg, "--run-dir", out) == EXIT_OK


def test_evaluate_without_checkpoint_exits_2(tmp_path, capsys):
    assert _run("evaluate", "--run-dir", tmp_path / "empty") == EXIT_USER
    assert "checkpoint" in capsys.readouterr().err
    assert not (tmp_path / "empty").exists()


def test_missing_upstream_names_the_file(tmp_path, capsys):
    assert _run("train", "--run-dir", tmp_path / "r") == EXIT_USER
    assert "manifest.csv" in capsys.readouterr().err


@pytest.mark.parametrize("doc", [
    {"train": {"epochs": 0}},
    {"cohort": {"policy": "nearest"}},
    {"no_such_section": 1},
    {"split": {"val": 0.6, "test": 0.5}},
])
def test_invalid_config_writes_nothing(tmp_path, doc):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    out = tmp_path / "runs"
    assert _run("synth", "--config", cfg, "--out", out) == EXIT_USER
    assert not out.exists()


def test_malformed_json_is_user_error(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json")
    assert _run("synth", "--config", cfg, "--out", tmp_path / "runs") == EXIT_USER


def test_timestamped_run_dir(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"n": 3, "duration_s": 1.0}}))
    assert _run("synth", "--config", cfg, "--out", tmp_path / "runs") == EXIT_OK
    (run,) = (tmp_path / "runs").iterdir()
    assert run.name.startswith("run-") and (run / "synth" / "ecg_index.csv").exists()


def test_flags_override_config(pipeline, tmp_path):
    cfg, _, _ = pipeline
    assert _run("synth", "--config", cfg, "--run-dir", tmp_path, "--n", 5, "--seed", 9) == EXIT_OK
    meta = json.loads((tmp_path / "synth" / "run_metadata.json").read_text())
    assert meta["config"]["synth"]["n"] == 5 and meta["seed"] == 9
    assert len(_rows(tmp_path / "synth" / "ecg_index.csv")) == 5


def test_metadata_reexecutes_run(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"n": 4, "duration_s": 1.0}, "seed": 3}))
    assert _run("synth", "--config", cfg, "--run-dir", tmp_path / "a") == EXIT_OK
    meta = tmp_path / "a" / "synth" / "run_metadata.json"
    assert _run("synth", "--config", meta, "--run-dir", tmp_path / "b") == EXIT_OK
    for name in ("ecg_index.csv", "discharges.csv", "outcomes.csv"):
        assert (tmp_path / "a" / "synth" / name).read_bytes() == (tmp_path / "b" / "synth" / name).read_bytes()
