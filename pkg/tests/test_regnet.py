import math

import numpy as np
import pytest

from epochpose.camera import CropGeometry, intrinsics_from_crop
from epochpose.constraints import BoneRatioStats
from epochpose.data import SyntheticFeatureProvider, rest_pose
from epochpose.flow import FlowModel
from epochpose.optim import LossBalancer
from epochpose.regnet import (Decoder, RegConfig, capsule_widths, decode, decoder_input,
                              intrinsics_from_crops, load_decoder, predict, reg_loss, reg_terms,
                              regnet_forward, save_decoder, train_regnet)


@pytest.fixture(scope="module")
def feats(small_ds):
    return SyntheticFeatureProvider(width=32, noise=0.01, seed=0)(small_ds)


def test_defaults():
    c = RegConfig()
    assert (c.epochs, c.lr, c.weight_decay, c.batch_size) == (45, 1e-3, 1e-4, 256)
    assert RegConfig.from_dict(c.to_dict()) == c


def test_reference_widths():
    assert capsule_widths(17) == (17, 51, 51, 34)
    dec = Decoder(2048 + 6)
    caps = decode(np.zeros((2, 2054)), dec)
    assert caps.attention.shape == (2, 17)
    assert caps.pose.shape == (2, 17, 3) and caps.camera.shape == (2, 17, 3)
    assert caps.presence.shape == (2, 17, 2)


def test_uniform_attention_is_noop():
    dec = Decoder(10)
    dec.params["W"].data[:] = 0.0
    b = np.random.default_rng(0).normal(size=9 * 17)
    b[:17] = 0.3
    dec.params["b"].data = b
    caps = decode(np.ones((1, 10)), dec)
    np.testing.assert_allclose(caps.attention.data, 1 / 17)
    np.testing.assert_allclose(caps.pose.data.reshape(-1), b[17:68], rtol=1e-14)
    np.testing.assert_allclose(caps.presence.data.reshape(-1), b[119:], rtol=1e-14)


def test_zero_parameters_give_zero_capsules():
    dec = Decoder(10)
    for p in dec.params.values():
        p.data[:] = 0.0
    caps = decode(np.random.default_rng(1).normal(size=(3, 10)), dec)
    np.testing.assert_allclose(caps.attention.data, 1 / 17)
    for c in (caps.pose, caps.camera, caps.presence):
        np.testing.assert_array_equal(c.data, 0.0)


def test_width_mismatch():
    with pytest.raises(ValueError):
        decode(np.zeros((1, 9)), Decoder(10))


def test_forward_sigma_closure_and_angles(small_ds, feats):
    K, _ = small_ds.cameras()
    dec = Decoder(feats.shape[1] + 6, rest=rest_pose(), init_scale=0.5)
    dec.fit_normalization(decoder_input(feats, K))
    out = regnet_forward(feats, K, dec, rng=np.random.default_rng(0))
    s = out.sigma.data
    assert np.all(s > 0) and np.all(s < 1)
    assert np.abs(out.x_hat.data[:, 0]).max() < 1e-9
    assert np.all((out.theta >= math.radians(10)) & (out.theta <= math.radians(350)))
    assert np.all(out.E.t.data[:, 2] > 0)
    np.testing.assert_array_equal(out.y_hat.data[:, 0], 0.0)


def test_capsule_closure_oracle(small_ds):
    # camera capsule chosen so its joint mean is (0, 0, w_p)
    K = intrinsics_from_crop(CropGeometry(800, 600, 100, 50, 400, 400))
    dec = Decoder(8, init_scale=0.0, rest=rest_pose())
    w_p = 9000.0
    dec.params["b"].data[4 * 17:7 * 17] = np.tile([0.0, 0.0, math.log(w_p / dec.prior_distance)], 17)
    out = regnet_forward(np.zeros((1, 2)), K, dec, theta=1.0)
    np.testing.assert_allclose(out.E.t.data[0, 2], w_p)
    np.testing.assert_allclose(out.E.R.data[0], np.eye(3), atol=1e-15)
    assert np.abs(out.x_hat.data[0, 0]).max() < 1e-9


def test_forward_needs_angle_source(feats, small_ds):
    K, _ = small_ds.cameras()
    with pytest.raises(ValueError):
        regnet_forward(feats, K, Decoder(feats.shape[1] + 6))


def test_rle_term_zero_at_half_sigma(small_ds, feats):
    K, _ = small_ds.cameras()
    dec = Decoder(feats.shape[1] + 6, rest=rest_pose(), sigma_init=0.5, init_scale=0.0)
    out = regnet_forward(feats, K, dec, theta=0.5)
    np.testing.assert_allclose(out.sigma.data, 0.5, rtol=1e-12)
    terms = reg_terms(out, out.x_hat.data, None, BoneRatioStats(), RegConfig())
    assert float(terms["rle"].data) == pytest.approx(0.0, abs=1e-12)
    assert float(terms["limbs"].data) == 0.0


def test_reg_loss_is_weighted_sum(small_ds, feats):
    K, _ = small_ds.cameras()
    dec = Decoder(feats.shape[1] + 6, rest=rest_pose(), init_scale=0.1)
    dec.fit_normalization(decoder_input(feats, K))
    out = regnet_forward(feats, K, dec, theta=2.0)
    stats = BoneRatioStats()
    stats.update(np.ones((1, 16)))
    bal = LossBalancer.for_reg(warmup=0)
    bal.lo.update(nf=-10.0, rle=-5.0)
    bal.hi.update(nf=90.0, rle=15.0)
    bal.seen = 3
    total, terms = reg_loss(out, small_ds.x_gt, FlowModel(34, 1), stats, bal, update=False)
    raw = {k: float(v.data) for k, v in terms.items()}
    want = (bal.weights["bone"] * raw["bone"] + bal.weights["limbs"] * raw["limbs"]
            + bal.weights["nf"] * (raw["nf"] + 10.0) / (100.0 + bal.eps)
            + bal.weights["rle"] * (raw["rle"] + 5.0) / (20.0 + bal.eps))
    assert float(total.data) == pytest.approx(want, rel=1e-12)


def test_batched_crop_intrinsics(small_ds):
    K = intrinsics_from_crops(small_ds.crops)
    np.testing.assert_allclose(K.vector(), small_ds.K, rtol=1e-15)


def test_training_deterministic_and_checkpoint(small_ds, feats, tmp_path):
    K, _ = small_ds.cameras()
    cfg = RegConfig(epochs=2, batch_size=16, lr=3e-4, warmup=2)
    flow = FlowModel(34, n_blocks=1)
    a = train_regnet(feats, K, small_ds.x_gt, flow, cfg)
    b = train_regnet(feats, K, small_ds.x_gt, flow, cfg)
    assert a.trace == b.trace
    np.testing.assert_array_equal(a.decoder.params["W"].data, b.decoder.params["W"].data)
    assert a.closure_max < 1e-9
    save_decoder(tmp_path / "a.ckpt", a, cfg)
    save_decoder(tmp_path / "b.ckpt", b, cfg)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    dec, meta = load_decoder(tmp_path / "a.ckpt")
    assert meta["closure_max"] == a.closure_max
    x1, s1, y1 = predict(dec, feats, K)
    x2, s2, y2 = predict(a.decoder, feats, K)
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(s1, s2)


def test_sigma_init_validated():
    with pytest.raises(ValueError):
        Decoder(10, sigma_init=1.0)
