import json

import pytest

from mergeprobe.cli import main, sha256_file


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["synth", "--out", str(out), "--tasks", "6", "--rank", "4"]) == 0
    assert main(["metrics", "--config", str(out / "config.json"), "--workers", "3"]) == 0
    return out


def test_metrics_rows_and_idempotence(synth_run):
    csv_path = synth_run / "metrics.csv"
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 1 + 15
    before = csv_path.read_bytes()
    assert main(["metrics", "--config", str(synth_run / "config.json")]) == 0
    assert csv_path.read_bytes() == before


def test_metrics_resume(synth_run, tmp_path):
    lines = (synth_run / "metrics.csv").read_text().splitlines(keepends=True)
    partial = tmp_path / "m.csv"
    partial.write_text("".join(lines[:5]))
    assert main(["metrics", "--config", str(synth_run / "config.json"), "--metrics", str(partial),
                 "--out", str(tmp_path)]) == 0
    assert partial.read_bytes() == (synth_run / "metrics.csv").read_bytes()


def test_three_task_metrics(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--tasks", "3", "--rank", "2"]) == 0
    assert main(["metrics", "--config", str(tmp_path / "config.json")]) == 0
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 4


def test_loto_variants_and_manifest(synth_run):
    cfg = str(synth_run / "config.json")
    assert main(["loto", "--config", cfg]) == 0
    agg = (synth_run / "aggregate.csv").read_text().splitlines()
    assert len(agg) == 5
    assert main(["loto", "--config", cfg, "--l1", "--lam", "0.01"]) == 0
    freq = (synth_run / "nonzero_frequency.csv").read_text().splitlines()
    assert len(freq) == 29
    values = [float(x) for line in freq[1:] for x in line.split(",")[1:]]
    assert all(0 <= v <= 1 for v in values)
    assert main(["loto", "--config", cfg, "--mlp", "--methods", "TA"]) == 0
    manifest = json.loads((synth_run / "manifest.json").read_text())["artifacts"]
    for rel, digest in manifest.items():
        assert sha256_file(synth_run / rel) == digest
    assert "loto_mlp_results.json" in manifest


def test_analyze_after_loto(synth_run):
    cfg = str(synth_run / "config.json")
    assert main(["loto", "--config", cfg]) == 0
    assert main(["analyze", "--config", cfg]) == 0
    assert (synth_run / "individual_correlations.csv").exists()


def test_merge_and_alpha(synth_run):
    cfg = str(synth_run / "config.json")
    assert main(["merge", "--config", cfg, "--method", "TA", "--tasks", "T1", "T2"]) == 0
    first = (synth_run / "merged_TA_T1_T2.mpk").read_bytes()
    assert main(["merge", "--config", cfg, "--method", "TA", "--tasks", "T1", "T2", "--alpha", "0.9"]) == 0
    assert (synth_run / "merged_TA_T1_T2.mpk").read_bytes() != first
    assert main(["merge", "--config", cfg, "--method", "TSV", "--tasks", "T1", "T2"]) == 0
    diag = json.loads((synth_run / "merged_TSV_T1_T2_diagnostics.json").read_text())
    assert "layer0.weight" in diag["layers"]


def test_usage_errors(synth_run, tmp_path):
    cfg = str(synth_run / "config.json")
    assert main(["merge", "--config", cfg, "--method", "XYZ"]) == 2
    assert main(["loto", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert main(["bogus"]) == 2


def test_missing_accuracy_pair(synth_run, tmp_path):
    acc = (synth_run / "accuracy.csv").read_text().splitlines()
    broken = [line for line in acc if not line.startswith("T1,T2,")]
    (tmp_path / "acc.csv").write_text("\n".join(broken) + "\n")
    code = main(["loto", "--config", str(synth_run / "config.json"), "--accuracy", str(tmp_path / "acc.csv"),
                 "--out", str(tmp_path)])
    assert code == 1


def test_analyze_fixture(tmp_path):
    assert main(["analyze", "--fixture", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "top5_overlap.csv").read_text().splitlines()
    assert lines[1] == "TA,1.0,0.4,0.6,0.6"
    assert main(["analyze", "--fixture", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 1
