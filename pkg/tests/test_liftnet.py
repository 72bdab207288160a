import numpy as np
import pytest

from epochpose import checkpoint
from epochpose.camera import project
from epochpose.constraints import BoneRatioStats
from epochpose.flow import FlowModel
from epochpose.liftnet import (ConstantDepth, DepthOracle, LiftConfig, Lifter, cycle, lift,
                               lift_loss, lift_terms, lifter_input, load_lifter, predict,
                               save_lifter, train_liftnet, LiftResult)
from epochpose.optim import LossBalancer
from epochpose.skeleton import DEFAULT_TOPOLOGY, Limb, Topology

from conftest import depth_oracle


def test_defaults():
    c = LiftConfig()
    assert (c.epochs, c.lr, c.weight_decay, c.batch_size) == (100, 2e-4, 1e-5, 256)
    assert LiftConfig.from_dict(c.to_dict()) == c


def test_input_width(small_ds):
    K, E = small_ds.cameras()
    assert lifter_input(small_ds.x_gt, K, E).shape == (64, 52)
    assert Lifter(dim=8).n_in == 52


def test_zero_head_lifts_at_camera_distance(small_ds):
    K, E = small_ds.cameras()
    m = Lifter(dim=16)
    w = m.depths(small_ds.x_gt, K, E).data
    np.testing.assert_array_equal(w, np.repeat(small_ds.t[:, 2:3], 17, axis=1))
    y = lift(small_ds.x_gt, K, E, m).data
    assert np.abs(project(y, K, E) - small_ds.x_gt).max() < 1e-9
    np.testing.assert_array_equal(w, ConstantDepth().depths(small_ds.x_gt, K, E).data)


def test_depth_floor_clamps_and_counts(small_ds):
    K, E = small_ds.cameras([0])
    m = Lifter(dim=4, depth_unit=1.0)
    m.params["out.b"].data[:] = -1e6
    w = m.depths(small_ds.x_gt[:1], K, E).data
    np.testing.assert_array_equal(w, 1e-3)
    assert m.clamp_count == 17


def test_oracle_cycle_closes(small_ds):
    theta = np.linspace(0.3, 5.9, len(small_ds))
    K, E = small_ds.cameras()
    rec = cycle(small_ds.x_gt, K, E, depth_oracle(small_ds, theta), theta=theta)
    assert np.abs(rec.x_til.data - rec.x_hat.data).max() < 1e-9
    assert np.abs(rec.y_til.data - rec.y_hat.data).max() < 1e-9
    assert np.abs(rec.y_hat.data - small_ds.y_gt).max() < 1e-9


def test_oracle_rejects_unknown_pose(small_ds):
    o = DepthOracle()
    o.register(small_ds.x_gt[:2], small_ds.depths([0, 1]))
    K, E = small_ds.cameras([5])
    with pytest.raises(KeyError):
        o.depths(small_ds.x_gt[5:6], K, E)


def test_zero_rotation_cycle(small_ds):
    K, E = small_ds.cameras()
    m = Lifter(dim=16, seed=1, depth_unit=30.0)
    m.fit_normalization(small_ds.x_gt, K, E)
    m.params["out.W"].data = np.random.default_rng(0).normal(size=(16, 17)) * 0.01
    rec = cycle(small_ds.x_gt, K, E, m, theta=0.0)
    assert m.clamp_count == 0
    np.testing.assert_allclose(rec.x_hat_r.data, rec.x_hat.data, atol=1e-9)
    for name in ("x_hat", "x_hat_r", "x_til"):
        assert getattr(rec, name).shape == (64, 17, 2)
    for name in ("y_hat", "y_hat_r", "y_til_r", "y_til"):
        assert getattr(rec, name).shape == (64, 17, 3)
    assert rec.theta.shape == (64,)


def test_cycle_needs_angle_source(small_ds):
    K, E = small_ds.cameras()
    with pytest.raises(ValueError):
        cycle(small_ds.x_gt, K, E, Lifter(dim=4))


def test_single_pose_has_no_deformation_term(small_ds):
    K, E = small_ds.cameras([0])
    rec = cycle(small_ds.x_gt[:1], K, E, Lifter(dim=8), theta=1.0)
    terms = lift_terms(rec, None, BoneRatioStats(), LiftConfig())
    assert float(terms["def"].data) == 0.0


def test_lift_loss_is_weighted_sum(small_ds):
    K, E = small_ds.cameras(slice(0, 8))
    m = Lifter(dim=8, depth_unit=30.0)
    m.fit_normalization(small_ds.x_gt[:8], K, E)
    m.params["out.W"].data = np.random.default_rng(1).normal(size=(8, 17)) * 0.02
    rec = cycle(small_ds.x_gt[:8], K, E, m, theta=np.full(8, 1.2))
    flow = FlowModel(34, n_blocks=1)
    stats = BoneRatioStats()
    stats.update(np.ones((1, 16)))
    bal = LossBalancer.for_lift(warmup=0)
    bal.lo["nf"], bal.hi["nf"], bal.seen = 0.0, 1000.0, 5
    total, terms = lift_loss(rec, flow, stats, bal, update=False)
    raw = {k: float(v.data) for k, v in terms.items()}
    want = sum(bal.weights[k] * v for k, v in raw.items() if k != "nf")
    want += bal.weights["nf"] * raw["nf"] / (1000.0 + bal.eps)
    assert float(total.data) == pytest.approx(want, rel=1e-12)
    assert set(raw) == {"l2d", "l3d", "nf", "bone", "limbs", "def"}


def test_training_is_deterministic(small_ds, tmp_path):
    K, E = small_ds.cameras()
    cfg = LiftConfig(dim=16, epochs=2, batch_size=16, warmup=2)
    flow = FlowModel(34, n_blocks=1)
    a = train_liftnet(small_ds.x_gt, K, E, flow, cfg)
    b = train_liftnet(small_ds.x_gt, K, E, flow, cfg)
    assert a.trace == b.trace and len(a.trace) == 2
    for k in a.lifter.params:
        np.testing.assert_array_equal(a.lifter.params[k].data, b.lifter.params[k].data)
    save_lifter(tmp_path / "a.ckpt", a, cfg)
    save_lifter(tmp_path / "b.ckpt", b, cfg)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    m, meta = load_lifter(tmp_path / "a.ckpt")
    np.testing.assert_array_equal(predict(m, small_ds.x_gt, K, E),
                                  predict(a.lifter, small_ds.x_gt, K, E))
    assert meta["config"] == cfg.to_dict()
    other = Topology(DEFAULT_TOPOLOGY.joint_names, DEFAULT_TOPOLOGY.bones,
                     DEFAULT_TOPOLOGY.limbs[:2], 7, 4, 1, reference_bone=6)
    with pytest.raises(checkpoint.CheckpointError, match="skeleton"):
        load_lifter(tmp_path / "a.ckpt", other)


def test_empty_training_set_rejected(small_ds):
    K, E = small_ds.cameras(slice(0, 0))
    with pytest.raises(ValueError):
        train_liftnet(np.zeros((0, 17, 2)), K, E, None, LiftConfig(dim=4))
