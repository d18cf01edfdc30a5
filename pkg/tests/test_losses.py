import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fastmetro import losses as L
from fastmetro.errors import ConfigError, DimensionError, NumericError
from fastmetro.numeric import Tensor, finite_difference_check


def rot_z(deg):
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1]])


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_loss_vertex_examples():
    gt = Tensor(np.arange(6.0).reshape(1, 2, 3))
    assert L.loss_vertex(gt, gt).item() == 0.0
    assert L.loss_vertex(Tensor(np.zeros((1, 1, 3))), Tensor([[[1.0, 2.0, 3.0]]])).item() == 6.0
    pred = Tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    assert L.loss_vertex(pred, Tensor(np.zeros((1, 2, 3)))).item() == 1.0


def test_loss_joint_examples():
    gt = Tensor(np.zeros((1, 1, 3)))
    assert L.loss_joint(gt, gt, gt).item() == 0.0
    a, b = Tensor([[[1.0, 0.0, 0.0]]]), Tensor([[[0.0, 2.0, 0.0]]])
    assert L.loss_joint(a, b, gt).item() == 3.0
    assert L.loss_joint(b, a, gt).item() == L.loss_joint(a, b, gt).item()


def test_loss_joint2d_examples():
    gt = Tensor(np.zeros((1, 2, 2)))
    assert L.loss_joint2d(gt, gt, gt).item() == 0.0
    off = Tensor(np.ones((1, 2, 2)))
    assert L.loss_joint2d(gt, off, gt).item() == 2.0


def test_loss_joint2d_permutation_invariant():
    rng = np.random.default_rng(0)
    a, b, g = (rng.normal(size=(1, 5, 2)) for _ in range(3))
    perm = rng.permutation(5)
    base = L.loss_joint2d(Tensor(a), Tensor(b), Tensor(g)).item()
    permuted = L.loss_joint2d(Tensor(a[:, perm]), Tensor(b[:, perm]), Tensor(g[:, perm])).item()
    assert permuted == pytest.approx(base, abs=1e-14)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        L.loss_vertex(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 3, 3))))


def test_total_loss_examples():
    parts = L.LossParts(Tensor(0.01), Tensor(0.002), Tensor(0.03))
    assert abs(L.total_loss(parts).item() - 6.0) < 1e-12
    assert L.total_loss(parts, alpha=0, beta=0).item() == 0.0
    assert L.total_loss(parts, alpha=1, beta=0).item() == pytest.approx(3.0, abs=1e-12)
    assert L.total_loss(parts, alpha=0, beta=1).item() == pytest.approx(3.0, abs=1e-12)


def test_total_loss_per_sample_flags_and_batch_mean():
    parts = L.LossParts(Tensor([0.01, 0.02]), Tensor([0.002, 0.0]), Tensor([0.03, 0.05]))
    # sample 0 all terms = 6; sample 1 only 2D = 5 -> mean 5.5
    got = L.total_loss(parts, alpha=np.array([1, 0]), beta=np.array([1, 1])).item()
    assert got == pytest.approx(5.5, abs=1e-12)


def test_total_loss_rejects_bad_config():
    with pytest.raises(ConfigError):
        L.LossWeights(vertex3d=-1)
    with pytest.raises(ConfigError):
        L.total_loss(L.LossParts(Tensor(1.0), Tensor(1.0), Tensor(1.0)), alpha=0.5)


def test_total_loss_gradient_wrt_predictions():
    rng = np.random.default_rng(3)
    gt_v, gt_j, gt_2d = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 2))
    jr = Tensor(rng.normal(size=(2, 3, 3)))
    j2r = Tensor(rng.normal(size=(2, 3, 2)))

    def f(pred_v):
        parts = L.LossParts(L.loss_vertex(pred_v, Tensor(gt_v)),
                            L.loss_joint(pred_v[:, :3], jr, Tensor(gt_j)),
                            L.loss_joint2d(pred_v[:, 3:, :2], j2r, Tensor(gt_2d)))
        return L.total_loss(parts)

    for _ in range(10):
        assert finite_difference_check(f, Tensor(rng.normal(size=(2, 6, 3)))) < 1e-4


def test_procrustes_identity():
    gt = np.random.default_rng(0).normal(size=(6, 3))
    assert np.abs(L.procrustes_align(gt, gt) - gt).max() < 1e-10


def test_procrustes_inverts_similarity():
    gt = np.random.default_rng(1).normal(size=(8, 3))
    pred = 2.0 * gt @ rot_z(30).T + np.array([5.0, 5.0, 5.0])
    assert np.abs(L.procrustes_align(pred, gt) - gt).max() < 1e-8


def test_procrustes_reflection_uses_proper_rotation():
    gt = np.random.default_rng(2).normal(size=(7, 3))
    mirrored = gt * np.array([1.0, 1.0, -1.0])
    aligned = L.procrustes_align(mirrored, gt)
    assert L.mpjpe(aligned, gt) > 1e-3
    # the implied linear map is a positive-determinant similarity
    x = mirrored - mirrored.mean(0)
    a = np.linalg.lstsq(x, aligned - aligned.mean(0), rcond=None)[0]
    assert np.linalg.det(a) > 0


def test_procrustes_degenerate():
    with pytest.raises(NumericError):
        L.procrustes_align(np.random.default_rng(0).normal(size=(4, 3)), np.ones((4, 3)))


def test_metric_examples():
    gt = np.zeros((1, 3))
    assert L.mpjpe(gt, gt) == L.mpvpe(gt, gt) == 0.0
    assert L.mpjpe(np.array([[3.0, 4.0, 0.0]]), gt) == 5.0
    pts = np.random.default_rng(4).normal(size=(5, 3))
    assert L.pa_mpjpe(pts, pts) < 1e-10


finite = st.floats(-100, 100, allow_nan=False)


def _rms(a, b):
    return float(np.sqrt(((a - b) ** 2).sum(axis=1).mean()))


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, (6, 3), elements=finite), hnp.arrays(np.float64, (6, 3), elements=finite))
def test_alignment_never_increases_squared_error(pred, gt):
    if np.ptp(gt, axis=0).max() < 1e-3 or np.ptp(pred, axis=0).max() < 1e-3:
        return
    aligned = L.procrustes_align(pred, gt)
    assert _rms(aligned, gt) <= _rms(pred, gt) * (1 + 1e-12) + 1e-9


def test_pa_mpjpe_can_exceed_mpjpe_for_a_single_outlier():
    # Alignment minimises squared error; a lone outlier gets spread over all points,
    # which raises the mean Euclidean error.
    gt = np.array([[0, 1, 1], [0, 1, 1], [1, 1, 1], [1, 1, 1], [1, 1, 1], [1, 1, 1]], dtype=float)
    pred = gt.copy()
    pred[1] = [1, 1, 1]
    assert L.mpjpe(pred, gt) == pytest.approx(1 / 6)
    assert L.pa_mpjpe(pred, gt) > L.mpjpe(pred, gt)
    assert _rms(L.procrustes_align(pred, gt), gt) <= _rms(pred, gt)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pa_below_mpjpe_for_generic_noisy_predictions(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(14, 3)) * 100
    pred = rng.uniform(0.5, 2) * gt @ random_rotation(rng).T + rng.normal(size=(14, 3)) * 20
    assert L.pa_mpjpe(pred, gt) <= L.mpjpe(pred, gt) + 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pa_invariant_under_similarity(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(14, 3)) * 100
    pred = gt + rng.normal(size=(14, 3)) * 10
    base = L.pa_mpjpe(pred, gt)
    moved = rng.uniform(0.2, 5.0) * pred @ random_rotation(rng).T + rng.normal(size=3) * 100
    assert abs(L.pa_mpjpe(moved, gt) - base) < 1e-8
    assert L.pa_mpjpe(rng.uniform(0.2, 5.0) * gt @ random_rotation(rng).T + 7.0, gt) < 1e-8


def test_report_csv(tmp_path):
    L.write_report(tmp_path / "r.csv", [{"sample_id": 0, "mpjpe": 1.5, "pa_mpjpe": 1.0, "mpvpe": 2.0}])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines == ["sample_id,mpjpe,pa_mpjpe,mpvpe", "0,1.5,1.0,2.0"]
