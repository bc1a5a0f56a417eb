import numpy as np
import pytest

from data.augmentation import augment_sample, crop_sample, hflip_sample, rotate_sample
from data.codecs import (
    decode_pfm,
    decode_pnm_raw,
    encode_pfm,
    encode_pnm_raw,
    quantize,
    read_depth_pgm,
    read_pfm,
    read_pnm,
    write_depth_pgm,
    write_pfm,
    write_pnm,
)
from data.connectors.directory import DirectoryConnector
from data.exports import depth_to_pointcloud, depth_to_points, export_heatmap, pca_principal_channel
from data.samples import DepthSample
from data.splits import DatasetSplit, split_dataset
from data.synthetic import generate_splits, generate_synthetic_dataset, render_scene
from data.validation.data_quality import DepthSampleValidator
from ml.config import AugmentationPolicy, CameraIntrinsics, SceneConfig, ShiftConfig
from ml.errors import CodecError, ShapeError


def _sample(seed: int = 0, size: int = 8) -> DepthSample:
    rng = np.random.default_rng(seed)
    rgb = rng.uniform(size=(3, size, size))
    depth = rng.uniform(1.0, 9.0, size=(1, size, size))
    return DepthSample.from_arrays(f"s{seed}", rgb, depth)


# --- codecs -------------------------------------------------------------------------------


def test_pfm_round_trip(tmp_path):
    depth = np.random.default_rng(0).uniform(0, 10, size=(1, 3, 4)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", depth)
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), depth)
    color = np.random.default_rng(1).uniform(size=(3, 2, 5)).astype(np.float32)
    np.testing.assert_array_equal(decode_pfm(encode_pfm(color)), color)


def test_single_pixel_pfm_bytes():
    assert encode_pfm(np.array([[2.5]])) == b"Pf\n1 1\n-1.0\n\x00\x00\x20\x40"
    assert decode_pfm(b"Pf\n1 1\n-1.0\n\x00\x00\x20\x40").tolist() == [[[2.5]]]


def test_pfm_bytes_survive_decode_and_encode():
    rng = np.random.default_rng(3)
    for _ in range(100):
        channels = int(rng.choice([1, 3]))
        height, width = (int(v) for v in rng.integers(1, 9, size=2))
        image = rng.normal(scale=100.0, size=(channels, height, width))
        buf = encode_pfm(image)
        assert encode_pfm(decode_pfm(buf)) == buf


def test_pnm_bytes_survive_decode_and_encode():
    rng = np.random.default_rng(4)
    for _ in range(100):
        channels = int(rng.choice([1, 3]))
        bitdepth = int(rng.choice([8, 16]))
        height, width = (int(v) for v in rng.integers(1, 9, size=2))
        levels = rng.integers(0, 2**bitdepth, size=(channels, height, width))
        buf = encode_pnm_raw(levels, bitdepth)
        decoded, maxval = decode_pnm_raw(buf)
        assert maxval == 2**bitdepth - 1
        np.testing.assert_array_equal(decoded, levels)
        assert encode_pnm_raw(decoded, bitdepth) == buf


def test_pfm_stores_rows_bottom_to_top():
    buf = encode_pfm(np.array([[1.0], [2.0]]))
    assert buf.startswith(b"Pf\n1 2\n-1.0\n")
    raster = np.frombuffer(buf[len(b"Pf\n1 2\n-1.0\n") :], dtype="<f4")
    assert raster.tolist() == [2.0, 1.0]


def test_pfm_positive_scale_means_big_endian():
    buf = b"Pf\n2 1\n1.0\n" + np.array([1.5, 2.5], dtype=">f4").tobytes()
    assert decode_pfm(buf).tolist() == [[[1.5, 2.5]]]


def test_pfm_errors_carry_offsets():
    with pytest.raises(CodecError) as exc:
        decode_pfm(b"P6\n1 1\n-1.0\n\x00\x00\x00\x00")
    assert exc.value.offset == 0
    with pytest.raises(CodecError):
        decode_pfm(b"Pf\n2 2\n-1.0\n\x00\x00\x00\x00")
    with pytest.raises(CodecError):
        encode_pfm(np.array([[np.nan]]))


def test_pnm_quantization_and_16_bit_round_trip(tmp_path):
    assert quantize(np.array([0.0, 1.0]), 8).tolist() == [0, 255]
    with pytest.raises(CodecError):
        quantize(np.array([1.5]), 8)
    rgb = np.random.default_rng(2).uniform(size=(3, 4, 6))
    write_pnm(tmp_path / "x.ppm", rgb, bitdepth=16)
    back = read_pnm(tmp_path / "x.ppm")
    assert back.shape == (3, 4, 6)
    assert np.abs(back - rgb).max() <= 0.5 / 65535 + 1e-7


def test_pnm_header_comments_are_skipped():
    buf = b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255])
    levels, maxval = decode_pnm_raw(buf)
    assert maxval == 255
    assert levels.tolist() == [[[0, 255]]]
    with pytest.raises(CodecError):
        decode_pnm_raw(buf, bitdepth=16)


def test_depth_pgm_keeps_millimetres(tmp_path):
    depth = np.array([[[0.0, 1.2344, 9.9996]]])
    path = tmp_path / "depth.pgm"
    write_depth_pgm(path, depth, scale=1000.0)
    assert (tmp_path / "depth.pgm.meta").read_text().strip() == "depth_scale = 1000.0"
    np.testing.assert_allclose(read_depth_pgm(path), [[[0.0, 1.234, 10.0]]], atol=1e-6)
    with pytest.raises(CodecError):
        write_depth_pgm(path, np.array([[70.0]]), scale=1000.0)


# --- synthetic data and splits ------------------------------------------------------------


def test_synthetic_scenes_are_deterministic_and_bounded():
    cfg = SceneConfig(count=5, test_count=2, height=8, width=10, seed=3)
    a = generate_synthetic_dataset(cfg)
    b = generate_synthetic_dataset(cfg)
    assert [s.id for s in a] == [f"train_{i:05d}" for i in range(5)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.rgb, y.rgb)
        np.testing.assert_array_equal(x.depth, y.depth)
    for s in a:
        assert s.rgb.shape == (3, 8, 10) and s.depth.shape == (1, 8, 10)
        assert s.rgb.min() >= 0 and s.rgb.max() <= 1
        assert s.depth.min() >= 0.15 * cfg.max_depth - 1e-5
        assert s.depth.max() <= cfg.max_depth
        assert s.mask.all()


def test_splits_use_separate_streams():
    cfg = SceneConfig(count=3, test_count=3, height=6, width=6)
    train, test, shifted = generate_splits(cfg, ShiftConfig(enabled=True, count=2))
    assert not np.array_equal(train[0].depth, test[0].depth)
    assert [s.id for s in shifted] == ["shifted_00000", "shifted_00001"]
    _, _, none = generate_splits(cfg)
    assert none == []


def test_scene_without_primitives_is_a_flat_background():
    cfg = SceneConfig(height=6, width=6, primitives=[])
    _, depth = render_scene(cfg, np.random.default_rng(0))
    assert np.ptp(depth) == 0


def test_split_dataset_holds_out_an_eighth():
    samples = [_sample(i, size=2) for i in range(17)]
    split = split_dataset(samples, seed=1)
    assert len(split.train_mixer) == 2 and len(split.train_base) == 15
    assert not set(split.train_mixer) & set(split.train_base)
    assert split_dataset(samples, seed=1) == split
    with pytest.raises(ValueError):
        split_dataset(samples[:7], seed=1)
    with pytest.raises(ValueError):
        DatasetSplit(train_base=["a"], train_mixer=["a"])


# --- augmentation -------------------------------------------------------------------------


def test_flip_twice_is_identity_and_moves_depth_with_rgb():
    s = _sample()
    flipped = hflip_sample(s)
    np.testing.assert_array_equal(flipped.depth[0, :, 0], s.depth[0, :, -1])
    np.testing.assert_array_equal(flipped.rgb[:, :, 0], s.rgb[:, :, -1])
    np.testing.assert_array_equal(hflip_sample(flipped).depth, s.depth)


def test_rotation_invalidates_pixels_rotated_in_from_outside():
    s = _sample(size=9)
    assert rotate_sample(s, 0.0) is s
    rotated = rotate_sample(s, 45.0)
    assert not rotated.mask[0, 0, 0]
    assert rotated.depth[0, 0, 0] == 0
    np.testing.assert_array_equal(rotated.mask, rotated.depth > 0)
    assert rotated.mask[0, 4, 4]


def test_crop_and_disabled_policy():
    s = _sample()
    crop = crop_sample(s, 1, 2, 4, 5)
    assert crop.rgb.shape == (3, 4, 5)
    np.testing.assert_array_equal(crop.depth, s.depth[:, 1:5, 2:7])
    with pytest.raises(ShapeError):
        crop_sample(s, 0, 0, 9, 4)
    policy = AugmentationPolicy(enabled=False)
    assert augment_sample(s, policy, np.random.default_rng(0)) is s


def test_augmentation_keeps_geometry_in_sync():
    s = _sample(size=9)
    policy = AugmentationPolicy(flip_prob=1.0, rotation_degrees=10.0, crop_height=6, crop_width=7)
    out = augment_sample(s, policy, np.random.default_rng(4))
    assert out.rgb.shape == (3, 6, 7) and out.depth.shape == (1, 6, 7)
    np.testing.assert_array_equal(out.mask, out.depth > 0)
    assert out.rgb.min() >= 0 and out.rgb.max() <= 1


# --- dataset directory and validation -----------------------------------------------------


def test_directory_connector_round_trip(tmp_path):
    samples = [_sample(i) for i in range(3)]
    connector = DirectoryConnector(tmp_path / "train")
    connector.save_all(samples)
    assert connector.list_ids() == ["s0", "s1", "s2"]
    loaded = connector.load_all()
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.depth, b.depth)
        assert np.abs(a.rgb - b.rgb).max() <= 0.5 / 65535 + 1e-6


def test_directory_connector_rejects_invalid_samples(tmp_path):
    bad = _sample()
    depth = bad.depth.copy()
    depth[0, 0, 0] = -1.0
    connector = DirectoryConnector(tmp_path)
    connector.save_all([DepthSample.from_arrays("bad", bad.rgb, depth)])
    with pytest.raises(ValueError):
        connector.load_sample("bad")
    with pytest.raises(FileNotFoundError):
        DirectoryConnector(tmp_path / "missing").list_ids()


def test_validator_reports_issues_and_warnings():
    validator = DepthSampleValidator()
    good = _sample()
    assert validator.validate(good)["passed"]

    sparse_depth = np.zeros((1, 8, 8))
    sparse_depth[0, 0, :3] = 2.0
    sparse = DepthSample.from_arrays("sparse", good.rgb, sparse_depth)
    result = validator.validate(sparse)
    assert result["passed"] and result["warnings"]

    broken = good.replace(mask=np.zeros_like(good.mask))
    results = validator.validate_all([good, broken])
    assert [r["passed"] for r in results] == [True, False]
    assert "1 failed" in validator.generate_quality_report(results)


# --- exports ------------------------------------------------------------------------------


def test_pca_of_constant_features_is_zero():
    assert not pca_principal_channel(np.ones((3, 4, 4))).any()


def test_pca_recovers_a_shared_ramp():
    ramp = np.linspace(0.0, 1.0, 16).reshape(4, 4)
    features = np.stack([2.0 * ramp, 0.5 * ramp, np.zeros((4, 4))])
    heat = pca_principal_channel(features)
    assert heat.shape == (1, 4, 4)
    np.testing.assert_allclose(heat[0], ramp, atol=1e-9)


def test_pca_of_rank_one_features_matches_a_dense_eigendecomposition():
    rng = np.random.default_rng(5)
    loadings = rng.normal(size=4)
    pattern = rng.normal(size=(8, 8))
    features = loadings[:, None, None] * pattern[None]

    observations = features.reshape(4, -1).T
    centered = observations - observations.mean(axis=0)
    values, vectors = np.linalg.eig(np.cov(centered, rowvar=False, bias=True))
    direction = np.real(vectors[:, np.argmax(np.real(values))])
    lead = int(np.argmax(centered.var(axis=0)))
    if direction[lead] < 0:
        direction = -direction
    projection = (centered @ direction).reshape(8, 8)
    expected = (projection - projection.min()) / (projection.max() - projection.min())

    np.testing.assert_allclose(pca_principal_channel(features)[0], expected, atol=1e-6)


def test_heatmap_is_an_8_bit_pgm(tmp_path):
    features = np.random.default_rng(0).normal(size=(4, 5, 6))
    export_heatmap(tmp_path / "h.pgm", features)
    levels, maxval = decode_pnm_raw((tmp_path / "h.pgm").read_bytes())
    assert maxval == 255 and levels.shape == (1, 5, 6)
    assert levels.min() == 0 and levels.max() == 255


def test_point_cloud_unprojects_valid_pixels(tmp_path):
    depth = np.full((1, 2, 2), 2.0)
    depth[0, 1, 1] = 0.0
    rgb = np.ones((3, 2, 2))
    camera = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.5, cy=0.5)
    points = depth_to_points(depth, rgb, camera)
    assert points.shape == (3, 6)
    np.testing.assert_allclose(points[0], [-1.0, -1.0, 2.0, 255, 255, 255])
    count = depth_to_pointcloud(depth, rgb, camera, tmp_path / "c.ply")
    text = (tmp_path / "c.ply").read_text()
    assert count == 3
    assert "element vertex 3" in text
    assert len(text.strip().splitlines()) == 10 + 3
