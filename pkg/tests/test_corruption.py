import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import flood_fill_components
from sscxr.corruption import MODES, CorruptionSpec, corrupt_images, sample_group_mask


def test_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec(noise_fraction=1.5)
    with pytest.raises(ValueError):
        CorruptionSpec(mode="zebra")


@given(seed=st.integers(0, 2**32 - 1), target=st.floats(0.0, 1.0), g=st.integers(2, 20))
@settings(max_examples=150, deadline=None)
def test_group_mask_coverage_and_blocks(seed, target, g):
    spec = CorruptionSpec()
    pm = sample_group_mask(g, g, target, spec, np.random.default_rng(seed))
    assert pm.coverage >= target - 1e-12
    if target > 0:
        assert pm.coverage <= target + spec.max_group_area / (g * g) + 1e-12
    union = np.zeros_like(pm.grid)
    for r, c, h, w in pm.blocks:
        assert h * w <= spec.max_group_area
        block = np.zeros_like(pm.grid)
        block[r : r + h, c : c + w] = 1
        assert flood_fill_components(block) == 1
        union |= block
    np.testing.assert_array_equal(union, pm.grid)


def test_zero_target_gives_empty_mask():
    assert sample_group_mask(8, 8, 0.0, CorruptionSpec(), np.random.default_rng(0)).grid.sum() == 0


def test_mean_coverage_near_target():
    spec = CorruptionSpec()
    cov = [sample_group_mask(16, 16, 0.5, spec, np.random.default_rng(s)).coverage for s in range(1000)]
    assert abs(np.mean(cov) - 0.5) <= 0.03


@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(2, 5),
    mode=st.sampled_from(MODES),
    noise=st.floats(0, 1),
    alien=st.floats(0, 1),
)
@settings(max_examples=100, deadline=None)
def test_corruption_is_local_to_mask(seed, n, mode, noise, alien):
    rng = np.random.default_rng(seed)
    images = rng.random((n, 16, 16))
    spec = CorruptionSpec(noise_fraction=noise, alien_fraction=alien, mode=mode)
    out, mask = corrupt_images(images, spec, 4, np.random.default_rng(seed + 1))
    assert mask.dtype == np.uint8 and set(np.unique(mask)) <= {0, 1}
    np.testing.assert_array_equal(out[mask == 0], images[mask == 0])


def test_deterministic_for_seed():
    images = np.random.default_rng(0).random((4, 32, 32))
    a = corrupt_images(images, CorruptionSpec(), 8, np.random.default_rng(7))
    b = corrupt_images(images, CorruptionSpec(), 8, np.random.default_rng(7))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_noise_only_full_coverage_replaces_everything():
    images = np.full((1, 8, 8), 2.0)  # outside [0,1] so any surviving pixel shows
    out, mask = corrupt_images(images, CorruptionSpec(noise_fraction=1.0, mode="noise-only"), 4,
                               np.random.default_rng(0))
    assert mask.all()
    assert out.max() <= 1.0 and out.min() >= 0.0


def test_alien_patches_come_from_a_different_image():
    # each image is a distinct constant, so the donor is identifiable from pixel values
    n = 6
    images = np.stack([np.full((16, 16), float(k)) for k in range(n)])
    spec = CorruptionSpec(alien_fraction=0.5, mode="alien-only")
    for seed in range(30):
        out, mask, info = corrupt_images(images, spec, 4, np.random.default_rng(seed), return_info=True)
        for k in range(n):
            donor = info[k]["donor"]
            assert donor != k
            vals = np.unique(out[k][mask[k] == 1])
            assert vals.tolist() == [float(donor)]


def test_alien_needs_two_images():
    with pytest.raises(ValueError, match="at least 2"):
        corrupt_images(np.zeros((1, 8, 8)), CorruptionSpec(mode="alien-only"), 4, np.random.default_rng(0))


def test_per_sample_choice_single_image_uses_noise():
    out, mask, info = corrupt_images(np.zeros((1, 8, 8)), CorruptionSpec(), 4, np.random.default_rng(0),
                                     return_info=True)
    assert info[0]["kinds"] == ("noise",)


def test_both_mode_regions_are_disjoint():
    images = np.random.default_rng(0).random((3, 32, 32))
    _, mask, info = corrupt_images(images, CorruptionSpec(mode="both"), 4, np.random.default_rng(1),
                                   return_info=True)
    for rec in info:
        assert not (rec["noise_grid"] & rec["alien_grid"]).any()


def test_rejects_indivisible_images():
    with pytest.raises(ValueError):
        corrupt_images(np.zeros((2, 10, 10)), CorruptionSpec(), 4, np.random.default_rng(0))
