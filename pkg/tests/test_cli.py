import csv
import json

import numpy as np
import pytest

from fastmetro import mesh as M
from fastmetro.cli import build_id, load_run_config, main
from fastmetro.data import load_dataset

SMALL_MODEL = {"variant": "S", "stage_dims": [32, 16], "num_heads": 4, "feature_grid": [2, 2],
               "backbone_channels": 32, "backbone_hidden": 32}


@pytest.fixture(autouse=True)
def fixed_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def write_config(path, train=None, model=None):
    path.write_text(json.dumps({"model": model or SMALL_MODEL, "train": train or {}}))
    return str(path)


def gen(tmp_path, name, count=8, mesh="tetra", *extra):
    out = tmp_path / name
    rc = main(["gen-data", "--mesh", mesh, "--out", str(out), "--count", str(count), "--seed", "0",
               "--image-size", "16", "16", *extra])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    """8 samples, trained until the model memorises them."""
    tmp = tmp_path_factory.mktemp("overfit")
    mp = pytest.MonkeyPatch()
    mp.setenv("SOURCE_DATE_EPOCH", "1700000000")
    data = gen(tmp, "data")
    cfg = write_config(tmp / "c.json", {"epochs": 300, "batch_size": 8, "learning_rate": 1e-3})
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(tmp / "run")]) == 0
    mp.undo()
    return tmp


# -- gen-data ------------------------------------------------------------------------

def test_gen_data_writes_blobs_and_manifest(tmp_path, capsys):
    out = gen(tmp_path, "d", 64)
    assert len(list((out / "samples").glob("*.bin"))) == 64
    assert json.loads((out / "manifest.json").read_text())["count"] == 64
    assert "64 samples" in capsys.readouterr().out
    run = json.loads((out / "run.json").read_text())
    assert run["status"] == "ok" and run["command"] == "gen-data" and run["build"] == build_id()


def test_gen_data_same_seed_is_byte_identical(tmp_path):
    a, b = gen(tmp_path, "a"), gen(tmp_path, "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


@pytest.mark.parametrize("args", [["--count", "0"], ["--count", "4", "--joints", "0"]])
def test_gen_data_rejects_bad_input_before_writing(tmp_path, args):
    out = tmp_path / "d"
    assert main(["gen-data", "--mesh", "tetra", "--out", str(out), *args]) == 2
    assert not out.exists()


def test_gen_data_missing_mesh_is_usage_error(tmp_path):
    assert main(["gen-data", "--mesh", str(tmp_path / "none.obj"), "--out", str(tmp_path / "d"),
                 "--count", "2"]) == 2


def test_gen_data_from_obj(tmp_path):
    M.write_obj(tmp_path / "m.obj", M.two_triangles())
    out = gen(tmp_path, "d", 3, str(tmp_path / "m.obj"))
    ds = load_dataset(out)
    assert (ds.topology.num_vertices, ds.topology.num_fine_vertices, ds.topology.num_joints) == (4, 9, 4)


# -- train / eval -------------------------------------------------------------------------

def test_train_writes_log_checkpoint_and_manifest(overfit):
    run = overfit / "run"
    rows = list(csv.DictReader((run / "log.csv").open()))
    assert len(rows) == 300
    assert (run / "best.ckpt").exists()
    manifest = json.loads((run / "run.json").read_text())
    assert manifest["status"] == "ok" and manifest["config"] == "../c.json" and manifest["seed"] == 0


def test_eval_on_overfit_checkpoint_is_below_threshold(overfit, capsys):
    report = overfit / "eval.csv"
    assert main(["eval", "--checkpoint", str(overfit / "run" / "best.ckpt"), "--data", str(overfit / "data"),
                 "--report", str(report)]) == 0
    rows = list(csv.DictReader(report.open()))
    assert [r["sample_id"] for r in rows] == [*map(str, range(8)), "mean"]
    assert float(rows[-1]["pa_mpjpe"]) < 0.05 * 20.0
    assert "PA-MPJPE" in capsys.readouterr().out
    assert json.loads((overfit / "eval.csv.run.json").read_text())["status"] == "ok"


def test_eval_joint_count_mismatch_rejected(overfit, tmp_path, capsys):
    other = gen(tmp_path, "k3", 2, "tetra", "--joints", "3")
    rc = main(["eval", "--checkpoint", str(overfit / "run" / "best.ckpt"), "--data", str(other),
               "--report", str(tmp_path / "r.csv")])
    assert rc == 2 and "K, N, M" in capsys.readouterr().err
    assert not (tmp_path / "r.csv").exists()


def test_train_config_data_mismatch_rejected(tmp_path, capsys):
    data = gen(tmp_path, "d", 2)
    cfg = write_config(tmp_path / "c.json", model={**SMALL_MODEL, "num_joints": 14})
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "r")]) == 2
    assert "num_joints" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


@pytest.mark.parametrize("body", [{"model": {"variant": "S", "heads": 4}}, {"train": {"epochz": 1}},
                                  {"modle": {}}, {"model": {"variant": "XL"}}])
def test_unknown_or_invalid_config_keys_rejected(tmp_path, body):
    data = gen(tmp_path, "d", 2)
    (tmp_path / "c.json").write_text(json.dumps(body))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--data", str(data),
                 "--out", str(tmp_path / "r")]) == 2


def test_variant_s_expands_to_published_layout():
    cfg = load_run_config("S").model_config()
    assert cfg.stage_dims == (512, 128) and cfg.enc_layers == (1, 1) and cfg.dec_layers == (1, 1)
    assert load_run_config("L").model_config().enc_layers == (3, 3)


def test_training_failure_marks_manifest(tmp_path, capsys):
    data = gen(tmp_path, "d", 2)
    cfg = write_config(tmp_path / "c.json", {"epochs": 1, "learning_rate": 1e300})
    with np.errstate(all="ignore"):
        rc = main(["train", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "r")])
    assert rc == 3
    manifest = json.loads((tmp_path / "r" / "run.json").read_text())
    assert manifest["status"] == "failed" and manifest["error"]


# -- audit / bench ------------------------------------------------------------------------------

@pytest.mark.parametrize("variant,budget", [("S", 9.2e6), ("L", 24.9e6)])
def test_audit_total_within_five_percent(variant, budget, capsys):
    assert main(["audit", "--config", variant]) == 0
    out = capsys.readouterr()
    total = next(line for line in out.out.splitlines() if line.startswith("transformer total"))
    count = int(total.split()[2].replace(",", ""))
    assert abs(count - budget) / budget < 0.05
    assert '"status": "ok"' in out.err  # manifest goes to stderr without --out


def test_audit_with_out_writes_json(tmp_path):
    assert main(["audit", "--config", "M", "--out", str(tmp_path)]) == 0
    counts = json.loads((tmp_path / "audit.json").read_text())
    assert counts["total"] == sum(v for k, v in counts.items() if k not in ("total", "backbone"))
    assert json.loads((tmp_path / "run.json").read_text())["status"] == "ok"


def test_bench_reports_latency_and_throughput(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", model={**SMALL_MODEL, "image_size": [16, 16]})
    assert main(["bench", "--config", cfg, "--batch", "2", "--iters", "2", "--out", str(tmp_path)]) == 0
    result = json.loads((tmp_path / "bench.json").read_text())["forward"]
    assert result["mean_ms"] > 0 and result["samples_per_s"] == pytest.approx(2e3 / result["mean_ms"])
    assert "samples/s" in capsys.readouterr().out


def test_bench_sweep_mode(tmp_path):
    cfg = write_config(tmp_path / "c.json", model={**SMALL_MODEL})
    assert main(["bench", "--config", cfg, "--sweep", "--iters", "1", "--out", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "bench.json").read_text())["sweep"]
    assert [r["tokens"] for r in rows] == [64, 128, 256, 512]


def test_bench_rejects_zero_iterations():
    assert main(["bench", "--config", "S", "--iters", "0"]) == 2


# -- export-attention ----------------------------------------------------------------------------

def test_export_attention_files(overfit):
    out = overfit / "att"
    assert main(["export-attention", "--checkpoint", str(overfit / "run" / "best.ckpt"),
                 "--data", str(overfit / "data"), "--sample", "3", "--out", str(out)]) == 0
    with (out / "self_attention.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0][1:] == [f"joint_{i}" for i in range(4)] + [f"vertex_{i}" for i in range(10)]
    scores = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert scores.shape == (14, 14)
    np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-5)
    with (out / "cross_attention.csv").open() as fh:
        cross = list(csv.DictReader(fh))
    assert len(cross) == 4 * 2 * 2
    per_joint = np.zeros(4)
    for r in cross:
        per_joint[int(r["joint"])] += float(r["score"])
    np.testing.assert_allclose(per_joint, 1.0, atol=1e-12)
    ply = (out / "mesh.ply").read_text().splitlines()
    assert ply[:2] == ["ply", "format ascii 1.0"] and "element vertex 34" in ply


def test_export_attention_masked_pairs_are_exact_zeros(tmp_path):
    M.write_obj(tmp_path / "m.obj", M.two_triangles())
    data = gen(tmp_path, "d", 2, str(tmp_path / "m.obj"))
    model = {**SMALL_MODEL, "mask_mode": "half_heads"}
    cfg = write_config(tmp_path / "c.json", {"epochs": 1, "batch_size": 2}, model)
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "r")]) == 0
    ckpt = str(tmp_path / "r" / "best.ckpt")
    exports = {}
    for head_set in ("masked", "all"):
        out = tmp_path / head_set
        assert main(["export-attention", "--checkpoint", ckpt, "--data", str(data), "--sample", "1",
                     "--out", str(out), "--head-set", head_set]) == 0
        with (out / "self_attention.csv").open() as fh:
            exports[head_set] = np.array([[float(v) for v in r[1:]] for r in list(csv.reader(fh))[1:]])
    k = 4
    # the triangles share edge (0, 1); vertices 2 and 3 are not adjacent
    assert exports["masked"][k + 2, k + 3] == 0.0 and exports["masked"][k + 3, k + 2] == 0.0
    assert exports["all"][k + 2, k + 3] > 0.0
    ply = (tmp_path / "masked" / "mesh.ply").read_text()
    assert "element vertex 9" in ply and "element face 8" in ply


def test_export_attention_sample_out_of_range(overfit, tmp_path):
    rc = main(["export-attention", "--checkpoint", str(overfit / "run" / "best.ckpt"),
               "--data", str(overfit / "data"), "--sample", "8", "--out", str(tmp_path / "x")])
    assert rc == 2 and not (tmp_path / "x").exists()


# -- compare-masking --------------------------------------------------------------------------------

def test_compare_masking_writes_paired_curves(tmp_path):
    M.write_obj(tmp_path / "m.obj", M.two_triangles())
    data = gen(tmp_path, "d", 4, str(tmp_path / "m.obj"))
    cfg = write_config(tmp_path / "c.json", {"epochs": 2, "batch_size": 2})
    assert main(["compare-masking", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "r")]) == 0
    rows = list(csv.DictReader((tmp_path / "r" / "masking.csv").open()))
    assert len(rows) == 2 and set(rows[0]) == {"epoch", "loss_full", "loss_off", "pa_mpjpe_full", "pa_mpjpe_off"}
