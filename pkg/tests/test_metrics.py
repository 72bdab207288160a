import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epochpose.data import SyntheticConfig, generate
from epochpose.metrics import (AUC_THRESHOLDS, EvalReport, auc, mpjpe, n_mpjpe, n_pck,
                               optimal_scale, pa_mpjpe, pck_curve, procrustes_align)

from oracles import kabsch_pa, loop_mpjpe, random_rotation


@pytest.fixture(scope="module")
def gt():
    return generate(SyntheticConfig(count=8, seed=5)).y_gt


def test_mpjpe_examples(gt):
    g = gt[0]
    assert mpjpe(g, g) == 0.0
    # a common offset is removed by root-centring; offset all but the root
    p = g.copy()
    p[1:] += (3.0, 4.0, 0.0)
    assert mpjpe(p, g) == pytest.approx(5.0 * 16 / 17, abs=1e-12)


def test_mpjpe_matches_loop(gt):
    rng = np.random.default_rng(0)
    p = gt[1] + rng.normal(size=(17, 3)) * 40
    assert mpjpe(p, gt[1]) == pytest.approx(loop_mpjpe(p.tolist(), gt[1].tolist()), abs=1e-12)


def test_similarity_copy_aligns_exactly(gt):
    rng = np.random.default_rng(1)
    for g in gt:
        p = 1.7 * g @ random_rotation(rng).T + rng.normal(size=3) * 100
        assert pa_mpjpe(p, g) < 1e-9


def test_reflection_not_absorbed(gt):
    p = gt[0] * np.array([-1.0, 1.0, 1.0])
    assert pa_mpjpe(p, gt[0]) > 1.0


def test_single_joint_offset_matches_kabsch(gt):
    p = gt[2].copy()
    p[5, 0] += 17.0
    got = pa_mpjpe(p, gt[2])
    want, rot, s = kabsch_pa(p, gt[2])
    assert got == pytest.approx(want, abs=1e-9)
    # the alignment stays near identity
    assert rot.magnitude() < 0.02 and abs(s - 1.0) < 0.01
    assert 1.0 < got < 17.0 * 2 / 17 + 1e-9


def test_pa_matches_kabsch_on_random_pairs(gt):
    rng = np.random.default_rng(2)
    for g in gt:
        p = g + rng.normal(size=(17, 3)) * 60
        assert pa_mpjpe(p, g) == pytest.approx(kabsch_pa(p, g)[0], abs=1e-9)


def test_collinear_gt_rejected():
    g = np.zeros((17, 3))
    g[:, 0] = np.arange(17)
    with pytest.raises(ValueError, match="collinear"):
        pa_mpjpe(g + 1e-3, g)


def test_pure_scale(gt):
    assert n_mpjpe(0.5 * gt[0], gt[0]) < 1e-12
    assert n_mpjpe(gt[0], gt[0]) == 0.0
    assert optimal_scale(gt[0], gt[0]) == pytest.approx(1.0, abs=1e-15)


def test_pck_examples(gt):
    g = gt[0]
    assert n_pck(g, g, 0.0) == 1.0 and auc(g, g) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        n_pck(g, g, -1.0)


def test_pck_boundary_is_inclusive():
    # prediction in the z = 0 plane, truth lifted 150 mm off it: the offset is
    # orthogonal to the prediction so the optimal scale is exactly 1
    p = np.zeros((17, 3))
    p[1:, 0] = np.arange(1, 17) * 100.0
    p[1:, 1] = np.where(np.arange(16) % 2, 50.0, -50.0)
    g = p.copy()
    g[1:, 2] = 150.0
    assert optimal_scale(p, g) == 1.0
    assert n_pck(p, g, 150.0) == 1.0
    assert n_pck(p, g, 149.999) == pytest.approx(1 / 17)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_pck_monotone_and_auc_bounded(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(4, 17, 3)) * 300
    p = g + rng.normal(size=g.shape) * rng.uniform(1, 200)
    curve = pck_curve(p, g)
    assert np.all(np.diff(curve, axis=-1) >= 0)
    a = auc(p, g)
    assert np.all((a >= 0) & (a <= 1))


def test_batched_and_flat_inputs(gt):
    p = gt + 1.0
    np.testing.assert_allclose(mpjpe(p.reshape(8, 51), gt.reshape(8, 51)), mpjpe(p, gt))
    assert mpjpe(p, gt).shape == (8,)
    with pytest.raises(ValueError):
        mpjpe(p[:2], gt)


def test_identical_poses_align_bit_exactly(gt):
    np.testing.assert_array_equal(procrustes_align(gt, gt), gt)


def test_report_tables(gt):
    rng = np.random.default_rng(3)
    p = gt + rng.normal(size=gt.shape) * 20
    r = EvalReport.compute(p, gt, ids=range(10, 18))
    d = json.loads(r.to_json())
    assert d["count"] == 8 and d["per_sample"][0]["id"] == 10
    assert d["aggregate"]["pa_mpjpe"] == pytest.approx(float(np.mean(pa_mpjpe(p, gt))))
    lines = r.to_csv().strip().split("\n")
    assert lines[0].startswith("id,mpjpe") and lines[-1].startswith("mean,")
    assert len(lines) == 10
    empty = EvalReport.compute(np.zeros((0, 17, 3)), np.zeros((0, 17, 3)))
    assert empty.count == 0
