import logging

import numpy as np
import pytest
from PIL import Image

from attnvo import dataset as ds
from attnvo import se3
from attnvo.errors import InvalidArgumentError, ParseError

from conftest import random_twist


def test_parse_identity_line(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    (T,) = ds.parse_pose_file(p)
    assert np.array_equal(T, np.eye(4))


def test_parse_wrong_token_count(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(ParseError) as err:
        ds.parse_pose_file(p)
    assert err.value.line == 2


def test_pose_file_roundtrip(tmp_path, rng):
    poses = [se3.exp_map(random_twist(rng, 3.0, 100.0)) for _ in range(20)]
    p = tmp_path / "p.txt"
    ds.write_pose_file(p, poses)
    back = ds.parse_pose_file(p)
    assert len(back) == 20
    for a, b in zip(poses, back):
        assert np.abs(a - b).max() < 1e-12


def test_parse_reorthonormalizes(tmp_path, caplog):
    T = np.eye(4)
    T[0, 0] = 1.01
    p = tmp_path / "p.txt"
    ds.write_pose_file(p, [T])
    with caplog.at_level(logging.WARNING):
        (back,) = ds.parse_pose_file(p)
    assert "re-orthonormalizing" in caplog.text
    se3.check_pose(back)


def test_preprocess_gray():
    img = np.full((370, 1226, 3), 128, dtype=np.uint8)
    x = ds.preprocess(img)
    assert x.shape == (3, 218, 720)
    assert np.allclose(x.numpy(), 128 / 255 - 0.5, atol=1e-6)


@pytest.mark.parametrize("shape", [(370, 1226), (376, 1241)])
def test_preprocess_shape(shape, rng):
    img = rng.integers(0, 256, size=shape + (3,), dtype=np.uint8)
    x = ds.preprocess(img)
    assert x.shape == (3, 218, 720)
    assert x.min() >= -0.5 and x.max() <= 0.5


def test_preprocess_checkerboard_mean():
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[0, 0] = img[1, 1] = 255
    x = ds.preprocess(img, size=(1, 1))
    assert np.allclose(x.numpy(), 127.5 / 255 - 0.5, atol=1e-6)


def test_preprocess_bad_file(tmp_path):
    p = tmp_path / "broken.png"
    p.write_bytes(b"not a png")
    with pytest.raises(OSError, match="broken.png"):
        ds.preprocess(str(p))


def test_preprocess_from_file(tmp_path):
    p = tmp_path / "im.png"
    Image.fromarray(np.full((80, 100, 3), 255, dtype=np.uint8)).save(p)
    x = ds.preprocess(str(p), size=(64, 64))
    assert np.allclose(x.numpy(), 0.5)


def test_uint8_roundtrip(rng):
    img = rng.integers(0, 256, size=(64, 96, 3), dtype=np.uint8)
    assert np.array_equal(ds.to_uint8_image(ds.preprocess(img, (64, 96))), img)


def _identity_record(n):
    return ds.SequenceRecord("x", [f"{i}.png" for i in range(n)], [np.eye(4)] * n)


def test_sample_windows_deterministic(records):
    cfg = ds.SplitConfig(window_length_range=(3, 6), seed=7)
    a = ds.sample_windows(records[0], cfg, 15)
    b = ds.sample_windows(records[0], cfg, 15)
    assert [(w.start_index, len(w.image_paths)) for w in a] == \
        [(w.start_index, len(w.image_paths)) for w in b]
    for w in a:
        assert 3 <= len(w.image_paths) <= 6
        assert w.n_pairs == len(w.image_paths) - 1
        assert w.start_index + len(w.image_paths) <= records[0].length


def test_window_identity_poses():
    rec = _identity_record(12)
    w = ds.make_window(rec, 4, 2)
    assert np.array_equal(w.relative_twists, np.zeros((1, 6)))


def test_window_twists_oracle(records):
    cfg = ds.SplitConfig(window_length_range=(5, 10), seed=1)
    rec = records[1]
    for w in ds.sample_windows(rec, cfg, 10):
        for i, xi in enumerate(w.relative_twists):
            Ti = rec.global_poses[w.start_index + i]
            Tj = rec.global_poses[w.start_index + i + 1]
            assert np.abs(xi - se3.log_map(np.linalg.inv(Ti) @ Tj)).max() < 1e-12
        # chaining the twists reproduces the end-to-end relative pose
        T = np.eye(4)
        for xi in w.relative_twists:
            T = T @ se3.exp_map(xi)
        ref = se3.relative(rec.global_poses[w.start_index],
                           rec.global_poses[w.start_index + w.n_pairs])
        assert np.abs(T - ref).max() < 1e-8


def test_sample_windows_too_short():
    with pytest.raises(InvalidArgumentError):
        ds.sample_windows(_identity_record(10), ds.SplitConfig(window_length_range=(5, 10)), 1)


@pytest.mark.parametrize("n,val", [(100, 5), (10, 1), (20, 1), (30, 2), (1, 0)])
def test_split_sizes(n, val):
    train, v = ds.split_validation(list(range(n)), ds.SplitConfig())
    assert len(v) == val and len(train) == n - val


def test_split_disjoint_exhaustive(rng):
    for seed in range(5):
        items = list(rng.permutation(200)[: rng.integers(1, 200)])
        train, val = ds.split_validation(items, ds.SplitConfig(seed=seed))
        assert set(train).isdisjoint(val)
        assert sorted(train + val) == sorted(items)
        assert ds.split_validation(items, ds.SplitConfig(seed=seed)) == (train, val)


def test_split_empty():
    with pytest.raises(InvalidArgumentError):
        ds.split_validation([], ds.SplitConfig())


def test_epoch_order_shuffles():
    a1 = ds.epoch_order(50, seed=3, epoch=1)
    a2 = ds.epoch_order(50, seed=3, epoch=2)
    assert not np.array_equal(a1, a2)
    assert np.array_equal(a1, ds.epoch_order(50, seed=3, epoch=1))
    assert sorted(a1) == list(range(50))


def test_split_config_defaults():
    cfg = ds.SplitConfig()
    cfg.validate()
    assert cfg.train_ids == ("00", "01", "02", "08", "09")
    assert cfg.test_ids == ("03", "04", "05", "06", "07", "10")
    assert cfg.validation_fraction == 0.05
    with pytest.raises(InvalidArgumentError):
        ds.SplitConfig(train_ids=("00",), test_ids=("00",)).validate()


def test_load_fixture(records):
    assert [r.length for r in records] == [20, 20, 20]
    w = ds.make_window(records[0], 0, 3)
    frames = w.load((64, 192))
    assert frames.shape == (3, 3, 64, 192)


def test_load_sequence_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        ds.load_sequence(tmp_path, "05")
