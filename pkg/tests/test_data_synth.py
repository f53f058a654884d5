import numpy as np
import pytest
from PIL import Image

from segadapt.data_synth import (
    IGNORE,
    SHIFT_PRESETS,
    DomainShiftSpec,
    generate_scene_dataset,
    load_dataset,
    photometric_augment,
    save_dataset,
)
from segadapt.errors import DatasetError, ParameterError, ValidationError


def _meta(samples, num_classes, seed, shift):
    return {
        "num_classes": num_classes,
        "height": samples[0].image.shape[0],
        "width": samples[0].image.shape[1],
        "n": len(samples),
        "seed": seed,
        "shift": shift.to_dict(),
    }


def test_every_class_present_in_every_sample():
    for seed in range(5):
        samples = generate_scene_dataset(1, num_classes=2, height=16, width=16, seed=seed)
        assert set(np.unique(samples[0].label)) == {0, 1}
    samples = generate_scene_dataset(3, num_classes=7, height=48, width=48, seed=11)
    for s in samples:
        assert set(range(7)) <= set(np.unique(s.label))


def test_labels_shared_across_shifts_images_differ():
    a = generate_scene_dataset(4, 5, 64, 64, shift=SHIFT_PRESETS["identity"], seed=3)
    b = generate_scene_dataset(4, 5, 64, 64, shift=SHIFT_PRESETS["sim2real"], seed=3)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.label, sb.label)
        assert not np.array_equal(sa.image, sb.image)


def test_generation_is_bit_reproducible():
    shift = DomainShiftSpec(hue_shift=20.0, noise_std=0.03, seed=9)
    a = generate_scene_dataset(3, 4, 32, 48, shift=shift, seed=5)
    b = generate_scene_dataset(3, 4, 32, 48, shift=shift, seed=5)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.label, sb.label)
        assert sa.id == sb.id


def test_image_range_and_dtypes():
    samples = generate_scene_dataset(2, 3, 32, 32, shift=SHIFT_PRESETS["sim2real"], seed=0)
    for s in samples:
        assert s.image.dtype == np.float32
        assert s.image.shape == (32, 32, 3)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.label.dtype == np.uint8


def test_start_index_extends_the_stream():
    train = generate_scene_dataset(3, 4, 32, 32, seed=2)
    val = generate_scene_dataset(2, 4, 32, 32, seed=2, start_index=3)
    assert [s.id for s in train] == ["scene_0000", "scene_0001", "scene_0002"]
    assert [s.id for s in val] == ["scene_0003", "scene_0004"]
    # val geometry differs from train geometry
    assert not np.array_equal(train[0].label, val[0].label)


def test_parameter_validation():
    with pytest.raises(ParameterError):
        generate_scene_dataset(0, 3, 32, 32)
    with pytest.raises(ParameterError):
        generate_scene_dataset(1, 1, 32, 32)
    with pytest.raises(ParameterError):
        generate_scene_dataset(1, 300, 32, 32)
    with pytest.raises(ParameterError):
        generate_scene_dataset(1, 3, 8, 32)


def test_save_load_round_trip(tmp_path):
    shift = DomainShiftSpec()
    samples = generate_scene_dataset(3, 4, 24, 24, shift=shift, seed=1)
    root = str(tmp_path / "ds")
    save_dataset(samples, root, _meta(samples, 4, 1, shift))
    ds = load_dataset(root)
    assert ds.num_classes == 4
    assert [s.id for s in ds] == [s.id for s in samples]
    for loaded, orig in zip(ds, samples):
        assert np.array_equal(loaded.label, orig.label)
        # images survive 8-bit quantisation within half a step
        assert np.abs(loaded.image - orig.image).max() <= (0.5 / 255.0) + 1e-6


def test_images_only_view_has_no_labels(tmp_path):
    shift = DomainShiftSpec()
    samples = generate_scene_dataset(2, 3, 24, 24, shift=shift, seed=0)
    root = str(tmp_path / "ds")
    save_dataset(samples, root, _meta(samples, 3, 0, shift))
    ds = load_dataset(root, images_only=True)
    assert all(s.label is None for s in ds)


def test_missing_label_is_reported_by_basename(tmp_path):
    shift = DomainShiftSpec()
    samples = generate_scene_dataset(2, 3, 24, 24, shift=shift, seed=0)
    root = str(tmp_path / "ds")
    save_dataset(samples, root, _meta(samples, 3, 0, shift))
    (tmp_path / "ds" / "labels" / "scene_0001.png").unlink()
    with pytest.raises(DatasetError, match="scene_0001"):
        load_dataset(root)
    # but the images-only view does not care
    load_dataset(root, images_only=True)


def test_out_of_range_label_value_rejected(tmp_path):
    shift = DomainShiftSpec()
    samples = generate_scene_dataset(1, 3, 24, 24, shift=shift, seed=0)
    root = str(tmp_path / "ds")
    save_dataset(samples, root, _meta(samples, 3, 0, shift))
    bad = np.full((24, 24), 250, dtype=np.uint8)
    Image.fromarray(bad, mode="L").save(tmp_path / "ds" / "labels" / "scene_0000.png")
    with pytest.raises(ValidationError, match="250"):
        load_dataset(root)


def test_ignore_sentinel_allowed_in_labels(tmp_path):
    shift = DomainShiftSpec()
    samples = generate_scene_dataset(1, 3, 24, 24, shift=shift, seed=0)
    lab = samples[0].label.copy()
    lab[0, :] = IGNORE
    samples[0].label = lab
    root = str(tmp_path / "ds")
    save_dataset(samples, root, _meta(samples, 3, 0, shift))
    ds = load_dataset(root)
    assert (ds[0].label[0, :] == IGNORE).all()


def test_augment_strength_zero_is_identity():
    img = generate_scene_dataset(1, 3, 32, 32, seed=4)[0].image
    out = photometric_augment(img, 0.0, seed=7)
    assert np.array_equal(out, img)
    assert out is not img


def test_augment_is_deterministic_and_bounded():
    img = generate_scene_dataset(1, 3, 32, 32, seed=4)[0].image
    a = photometric_augment(img, 0.8, seed=7)
    b = photometric_augment(img, 0.8, seed=7)
    c = photometric_augment(img, 0.8, seed=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == img.shape and a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_augment_mid_gray_mean_stays_moderate():
    gray = np.full((32, 32, 3), 0.5, dtype=np.float32)
    for seed in range(20):
        out = photometric_augment(gray, 1.0, seed=seed)
        assert 0.2 <= float(out.mean()) <= 0.8


def test_augment_strength_validation():
    img = np.zeros((16, 16, 3), dtype=np.float32)
    with pytest.raises(ParameterError):
        photometric_augment(img, -0.1, seed=0)
    with pytest.raises(ParameterError):
        photometric_augment(img, 1.5, seed=0)
