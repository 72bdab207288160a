import json

import numpy as np
import pytest

from epochpose import data as D
from epochpose.camera import project
from epochpose.data import (Dataset, FormatError, SyntheticConfig, audit, generate,
                            generate_record, load, observation_noise, save)


@pytest.fixture(scope="module")
def ds100():
    return generate(SyntheticConfig(count=100, seed=3))


def test_empty_generation():
    ds = generate(SyntheticConfig(count=0))
    assert len(ds) == 0 and ds.y_gt.shape == (0, 17, 3)


def test_audit_thousand_records():
    assert audit(generate(SyntheticConfig(count=1000, seed=1))) == []


def test_records_are_order_independent(ds100):
    r = generate_record(42, SyntheticConfig(seed=3))
    np.testing.assert_array_equal(r.y_gt, ds100.y_gt[42])
    np.testing.assert_array_equal(np.asarray(r.E.t), ds100.t[42])


def test_cameras_and_crops_consistent(ds100):
    K, E = ds100.cameras()
    np.testing.assert_allclose(project(ds100.y_gt, K, E), ds100.x_gt, atol=1e-12)
    # pelvis at the model-image origin, subject in front of the camera
    assert np.abs(ds100.x_gt[:, 0]).max() < 1e-12
    assert np.all(ds100.depths() > 0)


def test_same_seed_byte_identical(tmp_path):
    for name in ("a", "b"):
        save(generate(SyntheticConfig(count=20, seed=9)), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    save(generate(SyntheticConfig(count=20, seed=10)), tmp_path / "c")
    assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()


def test_roundtrip_bit_exact(ds100, tmp_path):
    save(ds100, tmp_path / "d.jsonl")
    back = load(tmp_path / "d.jsonl")
    for f in ("ids", "y_gt", "x_gt", "crops", "K", "R", "t"):
        np.testing.assert_array_equal(getattr(back, f), getattr(ds100, f))
    assert back.meta == json.loads(json.dumps(ds100.meta))


def test_truncated_file_names_line(ds100, tmp_path):
    p = tmp_path / "d.jsonl"
    save(ds100.subset(np.arange(5)), p)
    text = p.read_text()
    lines = text.split("\n")
    # cut record 3 (file line 4) in half
    p.write_text("\n".join(lines[:3] + [lines[3][: len(lines[3]) // 2]]) + "\n")
    with pytest.raises(FormatError, match="line 4"):
        load(p)
    # drop whole trailing records: the count in the header catches it
    p.write_text("\n".join(lines[:4]) + "\n")
    with pytest.raises(FormatError, match="line 5"):
        load(p)


def test_empty_file_with_header(tmp_path):
    p = tmp_path / "e.jsonl"
    save(Dataset.empty(), p)
    assert len(load(p)) == 0


def test_header_errors(tmp_path):
    p = tmp_path / "h.jsonl"
    p.write_text("")
    with pytest.raises(FormatError, match="line 1"):
        load(p)
    p.write_text('{"format": "epoch-dataset", "version": 99, "J": 17}\n')
    with pytest.raises(FormatError, match="version"):
        load(p)
    p.write_text("not json\n")
    with pytest.raises(FormatError, match="line 1"):
        load(p)


def test_non_finite_rejected_on_save(ds100, tmp_path):
    bad = ds100.subset(np.arange(2))
    bad.y_gt = bad.y_gt.copy()
    bad.y_gt[1, 3, 0] = np.nan
    with pytest.raises(FormatError):
        save(bad, tmp_path / "x")


def test_observation_noise(ds100):
    a = observation_noise(ds100, 2.0, seed=1)
    b = observation_noise(ds100, 2.0, seed=1)
    np.testing.assert_array_equal(a, b)
    sig = np.zeros(17)
    sig[3] = 5.0
    c = observation_noise(ds100, sig, seed=1)
    np.testing.assert_array_equal(np.delete(c - ds100.x_gt, 3, axis=1), 0.0)
    # pixel noise is converted with the per-record scaling factor
    px = (c - ds100.x_gt)[:, 3] / ds100.K[:, None, 4:6]
    assert 3.5 < px.std() < 6.5


def test_feature_files(ds100, tmp_path):
    prov = D.SyntheticFeatureProvider(width=16, noise=0.01, seed=0)
    f = prov(ds100)
    assert f.shape == (100, 16)
    np.testing.assert_allclose(prov(ds100.subset(np.arange(10, 20))), f[10:20], rtol=1e-12)
    D.save_features(tmp_path / "f.bin", ds100.ids, f)
    np.testing.assert_array_equal(D.FileFeatureProvider(tmp_path / "f.bin")(ds100), f)
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "g.bin").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        D.load_features(tmp_path / "g.bin")
    small = D.FileFeatureProvider(tmp_path / "f.bin")
    extra = ds100.subset(np.arange(2))
    extra.ids = np.array([0, 999])
    with pytest.raises(KeyError, match="999"):
        small(extra)


def test_from_external(ds100):
    K, E = ds100.cameras(np.arange(4))
    crops = [ds100.record(i).crop for i in range(4)]
    ext = D.from_external(ds100.y_gt[:4] + 10.0, K, E, crops)
    np.testing.assert_allclose(ext.y_gt, ds100.y_gt[:4], atol=1e-12)
    np.testing.assert_allclose(ext.x_gt, ds100.x_gt[:4], atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(knee_flexion=(-10.0, 90.0)).validate()
    with pytest.raises(ValueError):
        SyntheticConfig(count=-1).validate()
    c = SyntheticConfig(count=3)
    assert SyntheticConfig.from_dict(c.to_dict()) == c
