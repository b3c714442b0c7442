import numpy as np
import pytest
import torch
import torchvision.transforms.functional as TF
from hypothesis import given, settings, strategies as st
from torchvision.transforms import InterpolationMode

from geofake.transforms import (
    IMAGENET_MEAN, IMAGENET_STD, ChannelError, TransformConfig, augment, denormalize, eval_preprocess,
    normalize, rotate_reflect, to_display,
)


def test_normalize_known_values():
    x = np.zeros((3, 2, 2))
    x[0], x[2] = 0.485, 1.0
    out = normalize(x)
    assert np.all(out[0] == 0.0)
    assert out[2, 0, 0] == pytest.approx((1 - 0.406) / 0.225)
    assert out[2, 0, 0] == pytest.approx(2.64, abs=1e-4)


def test_normalize_mean_is_exactly_zero():
    mu = torch.tensor(IMAGENET_MEAN, dtype=torch.float64).view(3, 1, 1).expand(3, 4, 4)
    assert torch.equal(normalize(mu), torch.zeros(3, 4, 4, dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip(seed):
    x = np.random.default_rng(seed).random((3, 16, 16))
    assert np.abs(denormalize(normalize(x)) - x).max() < 1e-6
    t = torch.as_tensor(x, dtype=torch.float32)
    assert (denormalize(normalize(t)) - t).abs().max() < 1e-6


def test_eval_preprocess_constant_images():
    zeros = eval_preprocess(np.zeros((224, 224, 3), np.uint8))
    expected = [-m / s for m, s in zip(IMAGENET_MEAN, IMAGENET_STD)]
    for c in range(3):
        assert torch.allclose(zeros[c], torch.full((224, 224), expected[c]), atol=1e-6)
    assert expected[0] == pytest.approx(-2.1179, abs=1e-4)


def test_eval_preprocess_resizes_and_is_deterministic(rng):
    img = rng.integers(0, 256, (448, 448, 3), dtype=np.uint8)
    a, b = eval_preprocess(img), eval_preprocess(img)
    assert a.shape == (3, 224, 224)
    assert torch.equal(a, b)


def test_eval_preprocess_matches_torchvision_resize(rng):
    img = rng.integers(0, 256, (300, 260, 3), dtype=np.uint8)
    ref = TF.resize(torch.as_tensor(img).permute(2, 0, 1).float() / 255, [224, 224],
                    interpolation=InterpolationMode.BILINEAR, antialias=True)
    ref = TF.normalize(ref, IMAGENET_MEAN, IMAGENET_STD)
    assert torch.allclose(eval_preprocess(img), ref, atol=1e-5)


def test_augment_constant_half_with_randomness_disabled():
    cfg = TransformConfig(max_rotation=0, brightness=0, contrast=0, saturation=0, hue=0)
    out = augment(np.full((256, 256, 3), 0.5, np.float32), cfg, np.random.default_rng(0))
    assert out.shape == (3, 224, 224)
    assert torch.allclose(out[0], torch.full((224, 224), 0.0655), atol=1e-4)
    for c in range(3):
        assert torch.allclose(out[c], torch.full((224, 224), (0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]), atol=1e-6)


@pytest.mark.parametrize("shape", [(224, 224), (300, 200), (100, 180)])
def test_augment_shape_and_determinism(rng, shape):
    img = rng.integers(0, 256, shape + (3,), dtype=np.uint8)
    a = augment(img, TransformConfig(), np.random.default_rng(7))
    b = augment(img, TransformConfig(), np.random.default_rng(7))
    c = augment(img, TransformConfig(), np.random.default_rng(8))
    assert a.shape == (3, 224, 224)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_augment_without_randomness_equals_eval(rng):
    img = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    out = augment(img, TransformConfig.deterministic(), np.random.default_rng(0))
    assert torch.equal(out, eval_preprocess(img))


def test_flip_probability_one_mirrors(rng):
    img = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    out = augment(img, TransformConfig.deterministic(flip_prob=1.0), np.random.default_rng(0))
    assert torch.equal(out, eval_preprocess(img).flip(-1))


def test_rotation_matches_torchvision_in_the_interior(rng):
    x = torch.as_tensor(rng.random((3, 64, 64)), dtype=torch.float32)
    ours = rotate_reflect(x, 7.5)
    ref = TF.rotate(x, 7.5, interpolation=InterpolationMode.BILINEAR)
    assert torch.allclose(ours[:, 16:48, 16:48], ref[:, 16:48, 16:48], atol=1e-5)
    # reflection padding leaves no empty corners
    assert ours[:, :2, :2].abs().sum() > 0


def test_rotation_by_right_angle_is_exact(rng):
    x = torch.as_tensor(rng.random((3, 32, 32)), dtype=torch.float64)
    assert torch.allclose(rotate_reflect(x, 90.0), torch.rot90(x, 1, dims=(1, 2)), atol=1e-9)


def test_channel_errors():
    with pytest.raises(ChannelError):
        eval_preprocess(np.zeros((32, 32), np.uint8))
    with pytest.raises(ChannelError):
        eval_preprocess(np.zeros((32, 32, 4), np.uint8))


def test_config_validation():
    with pytest.raises(ValueError):
        TransformConfig(sigma=(0.2, 0.0, 0.2))
    with pytest.raises(ValueError):
        TransformConfig(crop_scale=(0.0, 1.0))


def test_to_display_inverts_preprocessing(rng):
    img = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    back = to_display(eval_preprocess(img))
    assert np.abs(back - img / 255.0).max() < 1e-5
