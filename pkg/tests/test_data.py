import logging

import numpy as np
import pytest
import torch
from PIL import Image

from rawseg.data import (CLASS_NAMES, CorruptionSpec, SceneSpec, corrupt, generate_scene, load_dataset,
                         save_dataset, synthetic_dataset)
from rawseg.losses import IGNORE


def test_scene_shapes_and_classes():
    img, lab = generate_scene(SceneSpec(seed=3))
    assert img.shape == (3, 64, 64) and img.dtype == torch.float32
    assert lab.shape == (64, 64) and lab.dtype == torch.int64
    assert 0 <= img.min() and img.max() <= 1
    assert set(lab.unique().tolist()) <= set(range(len(CLASS_NAMES)))


def test_all_classes_appear_across_scenes():
    seen = set()
    for _, lab in synthetic_dataset(10, seed=0):
        seen |= set(lab.unique().tolist())
    assert seen == set(range(5))


def test_scene_determinism():
    a, b = generate_scene(SceneSpec(seed=11)), generate_scene(SceneSpec(seed=11))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert not torch.equal(a[0], generate_scene(SceneSpec(seed=12))[0])


def test_illumination_scales_radiance():
    dim, _ = generate_scene(SceneSpec(seed=5, illumination=0.2))
    bright, _ = generate_scene(SceneSpec(seed=5, illumination=1.0))
    assert torch.allclose(dim, 0.2 * bright, atol=1e-6)


@pytest.mark.parametrize("kw", [dict(H=16), dict(W=31), dict(poles=(3, 1)), dict(illumination=1.5)])
def test_scene_spec_validation(kw):
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(**kw))


def test_png_round_trip(tmp_path):
    pairs = synthetic_dataset(3, seed=1)
    pairs[0][1][0, :4] = IGNORE
    save_dataset(pairs, tmp_path)
    loaded = load_dataset(tmp_path, num_classes=5)
    assert len(loaded) == 3
    for (img, lab), (img2, lab2) in zip(pairs, loaded):
        assert torch.equal(lab, lab2)
        assert (img - img2).abs().max() <= 1 / 255


def test_loader_errors(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert load_dataset(tmp_path) == []
    assert "no image/label pairs" in caplog.text
    save_dataset(synthetic_dataset(2, seed=1), tmp_path)
    (tmp_path / "labels" / "00001.png").unlink()
    with pytest.raises(ValueError, match="00001"):
        load_dataset(tmp_path)


def test_loader_rejects_out_of_range_labels(tmp_path):
    save_dataset(synthetic_dataset(1, seed=1), tmp_path)
    with pytest.raises(ValueError, match="outside"):
        load_dataset(tmp_path, num_classes=2)


def test_loader_rejects_size_mismatch(tmp_path):
    save_dataset(synthetic_dataset(1, seed=1), tmp_path)
    Image.fromarray(np.zeros((10, 10), np.uint8), "L").save(tmp_path / "labels" / "00000.png")
    with pytest.raises(ValueError, match="size mismatch"):
        load_dataset(tmp_path, num_classes=5)


# --------------------------------------------------------------------------- corruptions

@pytest.mark.parametrize("kind, zero", [("blur", 0.0), ("noise", (0.0, 0.0)), ("bitdepth", 0),
                                        ("exposure_shift", 0.0)])
def test_zero_severity_is_identity(kind, zero):
    img, _ = generate_scene(SceneSpec(seed=2))
    assert torch.equal(corrupt(img, CorruptionSpec(kind, zero)), img)


def test_bitdepth_16_on_8bit_grid():
    img = torch.from_numpy(np.random.default_rng(0).integers(0, 256, (3, 32, 32)) / 255.0)
    out = corrupt(img, CorruptionSpec("bitdepth", 16))
    assert (out - img).abs().max() <= 2.0 ** -16


def test_bitdepth_levels():
    img, _ = generate_scene(SceneSpec(seed=2))
    out = corrupt(img, CorruptionSpec("bitdepth", 2))
    for c in range(3):
        assert len(out[c].unique()) <= 5


def test_noise_corruption_variance():
    img = torch.full((3, 200, 200), 0.5, dtype=torch.float64)
    out = corrupt(img, CorruptionSpec("noise", (0.05, 0.01)), rng_key=(4, 0))
    expected = 0.05 ** 2 * 0.5 + 0.01 ** 2
    assert abs(out.var().item() / expected - 1) < 0.05


def test_blur_preserves_mean_and_smooths():
    img, _ = generate_scene(SceneSpec(seed=2, illumination=0.5))
    out = corrupt(img, CorruptionSpec("blur", 1.0))
    assert abs(out.mean().item() - img.mean().item()) < 0.02
    grad = lambda t: (t[..., 1:] - t[..., :-1]).abs().mean().item()
    assert grad(out) < grad(img)


def test_exposure_shift_doubles():
    img = torch.full((3, 4, 4), 0.2)
    assert torch.allclose(corrupt(img, CorruptionSpec("exposure_shift", 1.0)), torch.full((3, 4, 4), 0.4))


@pytest.mark.parametrize("kind, sev", [("fog", 1), ("blur", 5.0), ("noise", 0.1), ("bitdepth", 17),
                                       ("bitdepth", 2.5), ("exposure_shift", 9)])
def test_invalid_corruptions(kind, sev):
    with pytest.raises(ValueError):
        CorruptionSpec(kind, sev)
