import colorsys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bilinear_crop_reference, jitter_reference
from rocl import augment as aug


def _spec(rect=None, flip=False, jitter=None, gray=False, H=6, W=6):
    return aug.TransformSpec(crop_rect=rect or (0.0, 0.0, float(W), float(H)), flip=flip, jitter=jitter, gray=gray,
                             image_dims=(H, W))


@pytest.fixture
def image(rng):
    return rng.uniform(0.05, 0.95, (3, 6, 6))


# frozen values: SeedSequence-derived, pinned so that seeds stay stable across releases
def test_derive_seed_frozen():
    assert aug.derive_seed(0, 0, 0, 0) == 15793235383387715774
    assert aug.derive_seed(1, 2, 3, 4) == 15323499849503866763
    assert aug.derive_seed(1, 2, 3, 4) != aug.derive_seed(1, 2, 4, 3)


def test_sample_transform_frozen():
    s = aug.sample_transform(aug.simclr_policy(), 42, (3, 32, 32))
    np.testing.assert_allclose(s.crop_rect, (3.4493920511631897, 2.1031900226102636, 27.982529224483553,
                                             28.98410317799179), rtol=1e-12)
    assert (s.flip, s.jitter, s.gray) == (True, None, False)


def test_identity_spec_is_identity(image):
    spec = aug.sample_transform(aug.identity_policy(), 5, image.shape)
    assert spec.is_identity()
    np.testing.assert_array_equal(aug.apply_transform(spec, image), image)


def test_crop_matches_bilinear_oracle(image):
    rect = (1.25, 0.5, 3.5, 4.75)
    got = aug.apply_transform(_spec(rect), image)
    np.testing.assert_allclose(got, bilinear_crop_reference(image, rect, 6, 6), atol=1e-12)


def test_flip_mirrors_width(image):
    np.testing.assert_array_equal(aug.apply_transform(_spec(flip=True), image), image[..., ::-1])


def test_jitter_matches_colorsys_oracle(image):
    deltas = (0.07, -0.2, 0.15)
    got = aug.apply_transform(_spec(jitter=deltas), image)
    np.testing.assert_allclose(got, jitter_reference(image, deltas), atol=1e-12)


def test_grayscale_uses_luma(image):
    got = aug.apply_transform(_spec(gray=True), image)
    lum = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    for c in range(3):
        np.testing.assert_allclose(got[c], lum, atol=1e-12)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_hsv_matches_colorsys(r, g, b):
    rgb = np.array([r, g, b]).reshape(3, 1, 1)
    hsv = aug.rgb_to_hsv(rgb).ravel()
    ref = colorsys.rgb_to_hsv(r, g, b)
    np.testing.assert_allclose(hsv[1:], ref[1:], atol=1e-12)
    assert min(abs(hsv[0] - ref[0]), 1 - abs(hsv[0] - ref[0])) < 1e-12
    np.testing.assert_allclose(aug.hsv_to_rgb(aug.rgb_to_hsv(rgb)).ravel(), [r, g, b], atol=1e-12)


@given(st.integers(0, 2 ** 32), st.sampled_from([(3, 8, 8), (3, 16, 12), (1, 5, 9)]))
def test_sampled_transforms_stay_valid(seed, dims):
    colour = dims[0] == 3
    policy = aug.AugmentPolicy(gray_prob=0.5 if colour else 0.0, jitter_prob=0.5 if colour else 0.0)
    spec = aug.sample_transform(policy, seed, dims)
    x0, y0, w, h = spec.crop_rect
    H, W = dims[1:]
    assert 0 <= x0 and 0 <= y0 and x0 + w <= W + 1e-9 and y0 + h <= H + 1e-9
    assert 0.08 - 1e-9 <= w * h / (H * W) <= 1 + 1e-9
    img = np.random.default_rng(seed % 1000).random(dims)
    out = aug.apply_transform(spec, img)
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1


def test_sampling_is_deterministic():
    p = aug.simclr_policy()
    assert aug.sample_transform(p, 9, (3, 8, 8)) == aug.sample_transform(p, 9, (3, 8, 8))


def test_fixed_scale_policy():
    p = aug.smoothing_policy(0.54, aug.AugmentPolicy(jitter_strengths=(0.05, 0.2, 0.2)))
    assert p.crop_scale_range == (0.54, 0.54) and p.jitter_strengths == (0.05, 0.2, 0.2)
    for seed in range(20):
        _, _, w, h = aug.sample_transform(p, seed, (3, 16, 16)).crop_rect
        assert w * h / 256 == pytest.approx(0.54)


def test_transform_vjp_is_the_adjoint(rng):
    """<vjp(g), dx> equals the directional derivative of the transform along dx."""
    n = 6
    x = rng.uniform(0.1, 0.9, (n, 3, 6, 6))
    specs = [_spec((0.5, 0.75, 4.5, 4.0), flip=k % 2 == 1, jitter=(0.05, 0.1, -0.1) if k % 3 else None,
                   gray=k == 4) for k in range(n)]
    g = rng.standard_normal(x.shape)
    dx = rng.standard_normal(x.shape)
    h = 1e-6
    fd = ((aug.apply_batch(specs, x + h * dx) - aug.apply_batch(specs, x - h * dx)) / (2 * h) * g).sum()
    assert (aug.transform_vjp(specs, x, g) * dx).sum() == pytest.approx(fd, rel=1e-4)


@pytest.mark.parametrize("kwargs", [{"crop_scale_range": (0.0, 1.0)}, {"crop_scale_range": (0.8, 0.5)},
                                    {"flip_prob": 1.5}, {"jitter_strengths": (-0.1, 0, 0)}])
def test_policy_validation(kwargs):
    with pytest.raises(ValueError):
        aug.AugmentPolicy(**kwargs)


def test_input_validation(image):
    with pytest.raises(ValueError):
        aug.apply_batch([_spec()], image[None] * 2)
    with pytest.raises(ValueError):
        aug.apply_batch([_spec(), _spec()], image[None])
    with pytest.raises(ValueError):
        aug.apply_batch([_spec(gray=True)], image[None, :1])
    with pytest.raises(ValueError):
        aug.apply_transform(_spec((3.0, 0.0, 4.0, 6.0)), image)
    with pytest.raises(ValueError):
        aug.sample_transform(aug.simclr_policy(), 0, (3, 0, 4))
