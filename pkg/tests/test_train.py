import csv

import numpy as np
import pytest

from fastmetro import mesh as M
from fastmetro.data import generate_dataset
from fastmetro.errors import ConfigError, DataError, TrainingError
from fastmetro.model import FastMETRO, ModelConfig
from fastmetro.numeric import Tensor
from fastmetro.train import (
    LOG_COLUMNS,
    AdamState,
    TrainConfig,
    Trainer,
    adamw_step,
    clip_gradients,
    global_norm,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    train,
)

TETRA = M.tetra_topology()


def tiny_config(**kw):
    base = dict(stage_dims=(16, 8), num_heads=4, image_size=(16, 16), feature_grid=(2, 2),
                backbone_channels=16, backbone_hidden=16)
    base.update(kw)
    return ModelConfig(**base).with_topology(TETRA)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(8, TETRA, seed=1, image_size=(16, 16))


# -- optimiser ------------------------------------------------------------------

def test_adamw_zero_gradient_no_decay_is_identity():
    cfg = TrainConfig(weight_decay=0.0)
    p = {"w": np.array([1.0, -2.0])}
    new, state = adamw_step(p, {"w": np.zeros(2)}, AdamState(), cfg)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adamw_first_step_moves_by_learning_rate():
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
    new, _ = adamw_step({"p": np.array(1.0)}, {"p": np.array(1.0)}, AdamState(), cfg)
    # bias-corrected moments are exactly g and g^2 on the first step
    assert new["p"] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert new["p"] == pytest.approx(0.9, abs=1e-8)


def test_adamw_decay_is_decoupled():
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.1)
    new, state = adamw_step({"p": np.array(1.0)}, {"p": np.array(0.0)}, AdamState(), cfg)
    assert new["p"] == pytest.approx(0.99, abs=1e-15)
    assert state.m["p"] == 0.0 and state.v["p"] == 0.0  # decay never enters the moments


def test_adamw_matches_hand_evaluated_second_step():
    cfg = TrainConfig(learning_rate=0.01, weight_decay=0.0)
    p, s = {"p": np.array(0.5)}, AdamState()
    p, s = adamw_step(p, {"p": np.array(2.0)}, s, cfg)
    p, s = adamw_step(p, {"p": np.array(-1.0)}, s, cfg)
    m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0
    v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
    expected = 0.5 - 0.01 * 2.0 / (2.0 + 1e-8) - 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p["p"] == pytest.approx(expected, abs=1e-15)


def test_adamw_nan_gradient_aborts_without_changes():
    p = {"a": np.ones(2), "b": np.ones(3)}
    state = AdamState()
    with pytest.raises(TrainingError, match="b"):
        adamw_step(p, {"a": np.ones(2), "b": np.array([0.0, np.nan, 0.0])}, state, TrainConfig())
    assert state.step == 0 and not state.m
    np.testing.assert_array_equal(p["a"], np.ones(2))


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(beta1=1.0), dict(beta2=0.0),
                                dict(grad_clip_norm=-1), dict(batch_size=0), dict(alpha=2)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_train_config_rejects_unknown_keys():
    assert TrainConfig.from_dict({"epochs": 3}).epochs == 3
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})


# -- clipping ---------------------------------------------------------------------

def test_clip_small_norm_unchanged():
    g = {"a": np.array([0.06, 0.08])}
    out, norm = clip_gradients(g)
    assert out is g and norm == pytest.approx(0.1)


def test_clip_three_four_vector():
    out, norm = clip_gradients({"a": np.array([3.0, 4.0])}, 0.3)
    assert norm == 5.0
    np.testing.assert_allclose(out["a"], [0.18, 0.24], atol=1e-15)


def test_clip_bound_holds_for_random_groups():
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = {str(i): rng.normal(size=rng.integers(1, 5)) * rng.uniform(0, 10) for i in range(4)}
        out, _ = clip_gradients(g, 0.3)
        assert global_norm(out) <= 0.3 + 1e-9
    with pytest.raises(ConfigError):
        clip_gradients(g, 0.0)


# -- training loop --------------------------------------------------------------------

def test_short_run_reduces_loss(data):
    model = FastMETRO(tiny_config(), TETRA, seed=0)
    res = train(model, data, TrainConfig(learning_rate=1e-3, epochs=5, batch_size=4))
    assert res.log[-1]["loss_total"] < res.log[0]["loss_total"]
    assert [r["epoch"] for r in res.log] == [1, 2, 3, 4, 5]


def test_identical_seeds_give_identical_logs_and_weights(tmp_path, data):
    runs = []
    for name in ("a", "b"):
        model = FastMETRO(tiny_config(), TETRA, seed=2)
        train(model, data, TrainConfig(learning_rate=1e-3, epochs=2, batch_size=3, seed=9),
              log_path=tmp_path / f"{name}.csv")
        runs.append(model.state_dict())
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])


def test_log_csv_columns(tmp_path, data):
    model = FastMETRO(tiny_config(), TETRA)
    train(model, data, TrainConfig(epochs=2, batch_size=8), log_path=tmp_path / "log.csv")
    rows = list(csv.DictReader((tmp_path / "log.csv").open()))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 2


def test_best_checkpoint_written(tmp_path, data):
    model = FastMETRO(tiny_config(), TETRA)
    res = train(model, data, TrainConfig(learning_rate=1e-3, epochs=3, batch_size=4, holdout=0),
                checkpoint_path=tmp_path / "best.ckpt")
    ckpt = read_checkpoint(tmp_path / "best.ckpt")
    assert ckpt.extra["epoch"] == res.best_epoch
    assert ckpt.extra["pa_mpjpe"] == res.best_pa_mpjpe == min(r["pa_mpjpe"] for r in res.log)


def test_train_rejects_mismatched_dataset(data):
    model = FastMETRO(tiny_config(image_size=(8, 8)), TETRA)
    with pytest.raises(ConfigError):
        train(model, data, TrainConfig(epochs=1))


def test_non_finite_loss_aborts_with_dump(tmp_path, data):
    model = FastMETRO(tiny_config(), TETRA)
    model.xyz_head.weight.data[:] = 1e306  # loss weights push this past float range
    with pytest.raises(TrainingError, match="offending batch"), np.errstate(over="ignore", invalid="ignore"):
        train(model, data, TrainConfig(epochs=1, batch_size=4), dump_dir=tmp_path)
    assert (tmp_path / "failed_batch.bin").exists()


# -- checkpoints ------------------------------------------------------------------------

def _stepped_trainer(data, steps=2):
    model = FastMETRO(tiny_config(), TETRA, seed=4)
    trainer = Trainer(model, TrainConfig(learning_rate=1e-3))
    for i in range(steps):
        trainer.step(data.arrays([i, i + 1]))
    return trainer


def test_checkpoint_round_trip_preserves_forward_bitwise(tmp_path, data):
    trainer = _stepped_trainer(data)
    x = Tensor(data.arrays([0, 1, 2])["images"])
    before = trainer.model(x)
    save_checkpoint(tmp_path / "c.ckpt", trainer.model, trainer.state, trainer.config)
    fresh = FastMETRO(tiny_config(), TETRA, seed=99)
    load_checkpoint(tmp_path / "c.ckpt", fresh)
    after = fresh(x)
    np.testing.assert_array_equal(after.fine_vertices3d.data, before.fine_vertices3d.data)
    np.testing.assert_array_equal(after.camera_translation.data, before.camera_translation.data)


def test_optimizer_state_round_trip_next_step_bitwise(tmp_path, data):
    trainer = _stepped_trainer(data)
    save_checkpoint(tmp_path / "c.ckpt", trainer.model, trainer.state, trainer.config)
    batch = data.arrays([3, 4, 5])
    trainer.step(batch)

    fresh = FastMETRO(tiny_config(), TETRA, seed=99)
    ckpt = load_checkpoint(tmp_path / "c.ckpt", fresh)
    resumed = Trainer(fresh, ckpt.train_config, ckpt.state)
    resumed.step(batch)
    assert resumed.state.step == trainer.state.step == 3
    for (name, a), (_, b) in zip(trainer.model.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_checkpoint_config_mismatch_rejected(tmp_path):
    model = FastMETRO(tiny_config(), TETRA)
    save_checkpoint(tmp_path / "c.ckpt", model)
    other = FastMETRO(tiny_config(num_heads=2), TETRA)
    with pytest.raises(DataError, match="num_heads"):
        load_checkpoint(tmp_path / "c.ckpt", other)


def test_truncated_checkpoint_reports_position(tmp_path):
    model = FastMETRO(tiny_config(), TETRA)
    save_checkpoint(tmp_path / "c.ckpt", model)
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) * 2 // 3])
    with pytest.raises(DataError, match=r"truncated at byte \d+"):
        load_checkpoint(tmp_path / "t.ckpt", model)


def test_checkpoint_version_mismatch_rejected(tmp_path):
    model = FastMETRO(tiny_config(), TETRA)
    save_checkpoint(tmp_path / "c.ckpt", model)
    raw = bytearray((tmp_path / "c.ckpt").read_bytes())
    raw[8] = 7
    (tmp_path / "c.ckpt").write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version"):
        load_checkpoint(tmp_path / "c.ckpt", model)
