import os

import pytest

from slamc.checkpoint import load_model
from slamc.cli import main

WORLD_CFG = """
synth.n_terms = 600
synth.dim = 12
synth.n_regions = 3
synth.train_days = 70
synth.test_days = 15
synth.terms_per_cell = 50
synth.base_volume = 2500
"""

RUN_CFG = """
model.layers = 1
model.hidden = 16
model.region_multipliers = true
optimizer.max_steps = 400
optimizer.decay_steps = 20000
split.test_start = 2023-03-12
split.val_fraction = 0.1
split.seed = 0
seeds = 0
"""

GRID_CFG = "l1_lambda = 0, 1\n"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the synth -> compress -> train chain once for the module."""
    root = tmp_path_factory.mktemp("pipeline")
    (root / "world.cfg").write_text(WORLD_CFG, encoding="utf-8")
    (root / "run.cfg").write_text(RUN_CFG, encoding="utf-8")
    assert main(["synth", "--out", str(root / "world"), "--seed", "5",
                 "--spec", str(root / "world.cfg"), "--no-figures"]) == 0
    assert main(["compress", "--logs", str(root / "world" / "logs.tsv"),
                 "--embedder", "hash:12:7", "--agg", "sum",
                 "--out", str(root / "emb.tsv")]) == 0
    assert main(["train", "--embeddings", str(root / "emb.tsv"),
                 "--targets", str(root / "world" / "targets.tsv"),
                 "--config", str(root / "run.cfg"), "--seed", "0",
                 "--out", str(root / "run")]) == 0
    return root


def test_pipeline_writes_expected_files(pipeline):
    assert (pipeline / "world" / "logs.tsv").exists()
    assert (pipeline / "world" / "targets.tsv").exists()
    assert (pipeline / "world" / "truth.json").exists()
    assert (pipeline / "emb.tsv").exists()
    assert (pipeline / "run" / "checkpoint.bin").exists()
    assert (pipeline / "run" / "history.tsv").exists()
    assert (pipeline / "run" / "metrics.tsv").exists()
    assert (pipeline / "run" / "history.png").exists()
    model = load_model(str(pipeline / "run" / "checkpoint.bin"))
    assert model.provider_fingerprint == "hash:12:7"


def test_eval_rollup_with_figure(pipeline, tmp_path):
    out = tmp_path / "eval"
    assert main(["eval", "--model", str(pipeline / "run" / "checkpoint.bin"),
                 "--embeddings", str(pipeline / "emb.tsv"),
                 "--targets", str(pipeline / "world" / "targets.tsv"),
                 "--level", "rollup", "--out", str(out)]) == 0
    assert (out / "predictions.tsv").exists()
    assert (out / "metrics.tsv").exists()
    assert (out / "predictions.png").exists()


def test_eval_zero_shot_to_parent(pipeline, tmp_path):
    from slamc.training import read_targets, write_targets
    child = read_targets(str(pipeline / "world" / "targets.tsv"))
    national: dict = {}
    for (day, _region), value in child.items():
        key = (day, "TOTAL")
        national[key] = national.get(key, 0.0) + value
    parent_path = tmp_path / "national.tsv"
    write_targets(str(parent_path), national)
    out = tmp_path / "zs"
    assert main(["eval", "--model", str(pipeline / "run" / "checkpoint.bin"),
                 "--embeddings", str(pipeline / "emb.tsv"),
                 "--targets", str(parent_path),
                 "--zero-shot", "to_parent", "--out", str(out),
                 "--no-figures"]) == 0
    header = (out / "predictions.tsv").read_text().splitlines()[0]
    assert header == "period\tactual\tpredicted"


def test_eval_zero_shot_to_parent_rejects_child_targets(pipeline, tmp_path,
                                                        capsys):
    code = main(["eval", "--model", str(pipeline / "run" / "checkpoint.bin"),
                 "--embeddings", str(pipeline / "emb.tsv"),
                 "--targets", str(pipeline / "world" / "targets.tsv"),
                 "--zero-shot", "to_parent", "--out", str(tmp_path / "zs2"),
                 "--no-figures"])
    assert code == 1
    assert "parent-level targets" in capsys.readouterr().err


def test_eval_fingerprint_mismatch(pipeline, tmp_path, capsys):
    assert main(["compress", "--logs", str(pipeline / "world" / "logs.tsv"),
                 "--embedder", "hash:12:8", "--agg", "sum",
                 "--out", str(tmp_path / "other.tsv")]) == 0
    code = main(["eval", "--model", str(pipeline / "run" / "checkpoint.bin"),
                 "--embeddings", str(tmp_path / "other.tsv"),
                 "--targets", str(pipeline / "world" / "targets.tsv"),
                 "--level", "rollup", "--out", str(tmp_path / "e")])
    assert code == 1
    assert "ConfigError" in capsys.readouterr().err


def test_score_terms_command(pipeline, tmp_path):
    terms = tmp_path / "terms.txt"
    terms.write_text("q000001\nq000002\nq000003\n", encoding="utf-8")
    out = tmp_path / "scores.tsv"
    assert main(["score-terms", "--model",
                 str(pipeline / "run" / "checkpoint.bin"),
                 "--terms", str(terms), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "term\tscore\tpercentile"
    assert len(lines) == 4


def test_grid_command(pipeline, tmp_path):
    grid_file = tmp_path / "grid.cfg"
    grid_file.write_text(GRID_CFG, encoding="utf-8")
    out = tmp_path / "grid"
    assert main(["grid", "--embeddings", str(pipeline / "emb.tsv"),
                 "--targets", str(pipeline / "world" / "targets.tsv"),
                 "--config", str(pipeline / "run.cfg"),
                 "--grid", str(grid_file), "--trials", "2",
                 "--out", str(out), "--no-figures"]) == 0
    lines = (out / "grid.tsv").read_text().splitlines()
    assert len(lines) == 3   # header + 2 points
    assert lines[0].startswith("rank\tl1_lambda")


def test_report_footprint_command(tmp_path, capsys):
    out = tmp_path / "fp"
    assert main(["report-footprint", "--terms", "10000000", "--periods",
                 "1000", "--dim", "512", "--out", str(out)]) == 0
    assert (out / "footprint.tsv").exists()
    assert (out / "footprint.png").exists()
    printed = capsys.readouterr().out
    assert "2.05 MB" in printed


def test_marginal_compress_trains(pipeline, tmp_path):
    # the histogram form plugs into the same training path, wider inputs
    emb = tmp_path / "marginal.tsv"
    assert main(["compress", "--logs", str(pipeline / "world" / "logs.tsv"),
                 "--embedder", "hash:12:7", "--agg", "marginal:5",
                 "--out", str(emb)]) == 0
    run_cfg = tmp_path / "run.cfg"
    run_cfg.write_text(RUN_CFG.replace("max_steps = 400", "max_steps = 30"),
                       encoding="utf-8")
    assert main(["train", "--embeddings", str(emb),
                 "--targets", str(pipeline / "world" / "targets.tsv"),
                 "--config", str(run_cfg), "--seed", "0",
                 "--out", str(tmp_path / "mrun"), "--no-figures"]) == 0
    model = load_model(str(tmp_path / "mrun" / "checkpoint.bin"))
    assert model.config.dim == 60


def test_unknown_flag_exits_2():
    assert main(["compress", "--bogus"]) == 2


def test_unknown_command_exits_2():
    assert main(["frobnicate"]) == 2


def test_missing_input_file_exits_1(tmp_path, capsys):
    code = main(["compress", "--logs", str(tmp_path / "nope.tsv"),
                 "--embedder", "hash:4:1", "--out", str(tmp_path / "o.tsv")])
    assert code == 1
    assert "IOError" in capsys.readouterr().err


def test_bad_embedder_flag_exits_1(pipeline, tmp_path, capsys):
    code = main(["compress", "--logs", str(pipeline / "world" / "logs.tsv"),
                 "--embedder", "hash:banana", "--out",
                 str(tmp_path / "o.tsv")])
    assert code == 1
    assert "ConfigError" in capsys.readouterr().err


def test_compress_deterministic_across_runs(pipeline, tmp_path):
    paths = [tmp_path / f"emb{i}.tsv" for i in range(3)]
    for path in paths:
        assert main(["compress", "--logs",
                     str(pipeline / "world" / "logs.tsv"),
                     "--embedder", "hash:12:7", "--agg", "sum",
                     "--out", str(path)]) == 0
    blobs = [p.read_bytes() for p in paths]
    assert blobs[0] == blobs[1] == blobs[2]
