import numpy as np
import pytest
from scipy import ndimage

from noisy_lf_saliency.evalkit import f_measure
from noisy_lf_saliency.exceptions import ConfigError, DimensionError
from noisy_lf_saliency.synthdata import (GenConfig, NoiseSpec, SceneSpec, corrupt_label, focal_planes,
                                         generate_corpus, generate_sample, heuristic_label, quantize,
                                         render_focal_stack, render_scene)


def test_render_scene_is_deterministic():
    spec = SceneSpec(height=32, width=32)
    first = render_scene(spec, seed=5)
    second = render_scene(spec, seed=5)
    for a, b in zip(first, second):
        assert np.array_equal(a, b)
    other = render_scene(spec, seed=6)
    assert not np.array_equal(first[0], other[0])


def test_render_scene_outputs():
    image, depth, mask = render_scene(SceneSpec(height=32, width=48, channels=3), seed=0)
    assert image.shape == (3, 32, 48)
    assert depth.shape == mask.shape == (32, 48)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert image.min() >= 0.0 and image.max() <= 1.0
    assert np.array_equal(quantize(image), image)


def test_clutter_free_background_is_smooth():
    """Without clutter or distractors the background is a gentle ramp"""
    image, _, mask = render_scene(SceneSpec(height=32, width=32, num_objects=1, clutter=0.0), seed=3)
    background = mask < 0.5
    for axis in (0, 1):
        step = np.abs(np.diff(image[0], axis=axis))
        both = background[1:, :] & background[:-1, :] if axis == 0 else \
            background[:, 1:] & background[:, :-1]
        assert step[both].max() < 0.02


def test_mask_area_fraction_bounds():
    spec = SceneSpec(height=32, width=32)
    fractions = [render_scene(spec, seed)[2].mean() for seed in range(100)]
    assert min(fractions) >= 0.03
    assert max(fractions) <= 0.45


@pytest.mark.parametrize("placement", ["center", "border"])
def test_placement_variants(placement):
    _, _, mask = render_scene(SceneSpec(height=32, width=32, placement=placement), seed=2)
    rows, cols = np.nonzero(mask)
    centre = np.array([rows.mean(), cols.mean()])
    distance = np.abs(centre - 15.5).max()
    if placement == "center":
        assert distance < 6
    else:
        assert distance > 6


def test_scene_validation():
    with pytest.raises(DimensionError):
        SceneSpec(height=30, width=32).validate()
    with pytest.raises(ConfigError):
        SceneSpec(depth_range=(0.8, 0.2)).validate()
    with pytest.raises(ConfigError):
        SceneSpec(channels=2).validate()
    with pytest.raises(ValueError):
        SceneSpec(placement="corner").validate()


def test_focal_planes():
    assert focal_planes(4).tolist() == [0.125, 0.375, 0.625, 0.875]


def test_zero_blur_keeps_every_slice_sharp():
    image, depth, _ = render_scene(SceneSpec(height=32, width=32), seed=1)
    stack = render_focal_stack(image, depth, k=4, blur_scale=0.0)
    assert stack.shape == (4, 1, 32, 32)
    for slice_ in stack:
        assert np.array_equal(slice_, image)


def test_constant_depth_at_first_plane():
    image, _, _ = render_scene(SceneSpec(height=32, width=32), seed=1)
    depth = np.full((32, 32), focal_planes(3)[0])
    stack = render_focal_stack(image, depth, k=3, blur_scale=6.0)
    assert np.array_equal(stack[0], image)
    assert not np.array_equal(stack[2], image)


def test_sigma_below_half_a_step_stays_sharp():
    image = np.random.default_rng(2).random((1, 16, 16))
    depth = np.full((16, 16), 0.5 + 0.004)
    stack = render_focal_stack(image, depth, k=3, blur_scale=6.0)
    assert np.array_equal(stack[1], image)


def test_rounded_sigma_matches_direct_filter():
    image = np.random.default_rng(3).random((1, 16, 16))
    depth = np.full((16, 16), 0.6)
    stack = render_focal_stack(image, depth, k=3, blur_scale=6.0)
    expected = ndimage.gaussian_filter(image, sigma=(0.0, 0.6, 0.6), mode="nearest")
    np.testing.assert_allclose(stack[1], expected, rtol=0, atol=1e-12)


def test_focal_stack_rejects_bad_input():
    image = np.zeros((1, 16, 16))
    with pytest.raises(ConfigError):
        render_focal_stack(image, np.zeros((16, 16)), k=1, blur_scale=1.0)
    with pytest.raises(DimensionError):
        render_focal_stack(image, np.zeros((8, 16)), k=2, blur_scale=1.0)


def test_object_is_sharpest_in_nearest_slice():
    image = np.clip(0.5 + 0.2 * np.random.default_rng(4).standard_normal((1, 32, 32)), 0.0, 1.0)
    depth = np.full((32, 32), 0.1)
    depth[8:24, 8:24] = 0.6
    stack = render_focal_stack(image, depth, k=4, blur_scale=6.0)
    interior = (slice(11, 21), slice(11, 21))
    sharpness = [ndimage.laplace(s[0])[interior].var() for s in stack]
    nearest = int(np.argmin(np.abs(focal_planes(4) - 0.6)))
    assert int(np.argmax(sharpness)) == nearest == 2


@pytest.fixture
def clean_mask():
    mask = np.zeros((32, 32))
    mask[8:20, 10:24] = 1.0
    return mask


def test_corruption_without_noise_is_identity(clean_mask):
    label = corrupt_label(clean_mask, NoiseSpec(rate=0.0, radius=0, holes=0, blobs=0))
    assert np.array_equal(label, clean_mask)


def test_full_flip_rate_inverts(clean_mask):
    label = corrupt_label(clean_mask, NoiseSpec(rate=1.0, radius=0))
    assert np.array_equal(label, 1.0 - clean_mask)


def test_flip_rate_statistics(clean_mask):
    disagreement = [np.mean(corrupt_label(clean_mask, NoiseSpec(rate=0.2, radius=0, seed=s)) != clean_mask)
                    for s in range(50)]
    assert 0.18 <= np.mean(disagreement) <= 0.22


def test_disagreement_grows_with_flip_rate(clean_mask):
    rates = [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0]
    disagreement = [np.mean(corrupt_label(clean_mask, NoiseSpec(rate=r, radius=0, seed=8)) != clean_mask)
                    for r in rates]
    assert disagreement[0] == 0.0 and disagreement[-1] == 1.0
    assert all(b >= a for a, b in zip(disagreement, disagreement[1:]))


def test_morphology_grows_or_shrinks(clean_mask):
    dilated = corrupt_label(clean_mask, NoiseSpec(rate=0.0, radius=2, morphology="dilate"))
    eroded = corrupt_label(clean_mask, NoiseSpec(rate=0.0, radius=2, morphology="erode"))
    assert dilated.sum() > clean_mask.sum() > eroded.sum()
    assert np.all(dilated >= clean_mask)
    assert np.all(eroded <= clean_mask)


def test_holes_and_blobs_change_label(clean_mask):
    label = corrupt_label(clean_mask, NoiseSpec(rate=0.0, radius=0, holes=2, blobs=2, seed=4))
    assert np.any((clean_mask == 1) & (label == 0))
    assert np.any((clean_mask == 0) & (label == 1))


def test_corrupt_label_requires_corruption_mode(clean_mask):
    with pytest.raises(ConfigError):
        corrupt_label(clean_mask, NoiseSpec(mode="heuristic"))


def test_heuristic_label_finds_centred_object():
    image = np.zeros((1, 32, 32))
    yy, xx = np.mgrid[0:32, 0:32]
    disk = (yy - 15.5) ** 2 + (xx - 15.5) ** 2 <= 36
    image[0][disk] = 1.0
    result = heuristic_label(image, np.repeat(image[None], 3, axis=0))
    assert not result.degenerate
    assert f_measure(result.label, disk.astype(float)) >= 0.6


def test_heuristic_label_on_flat_image():
    image = np.full((1, 16, 16), 0.4)
    result = heuristic_label(image, np.repeat(image[None], 2, axis=0))
    assert result.degenerate
    assert not result.label.any()


def _plain_scenes(placement, count):
    spec = SceneSpec(height=32, width=32, num_objects=1, clutter=0.0, placement=placement)
    return [render_scene(spec, seed) for seed in range(count)]


def test_heuristic_label_quality_on_centred_scenes():
    scores = [f_measure(heuristic_label(image, np.repeat(image[None], 2, axis=0)).label, mask)
              for image, _, mask in _plain_scenes("center", 50)]
    assert np.mean(scores) >= 0.6


def test_heuristic_recall_drops_at_the_border():
    def recall(scenes):
        values = []
        for image, _, mask in scenes:
            label = heuristic_label(image, np.repeat(image[None], 2, axis=0)).label
            values.append((label * mask).sum() / mask.sum())
        return np.mean(values)

    assert recall(_plain_scenes("border", 20)) < recall(_plain_scenes("center", 20))


def test_generate_sample_is_pure(gen_config_factory):
    config = gen_config_factory()
    first = generate_sample(config, "train", 3, seed=1)
    second = generate_sample(config, "train", 3, seed=1)
    assert first.sample_id == "train_0003"
    assert first.metadata == second.metadata
    for name in ("all_focus", "focal_stack", "noisy_label", "clean_mask"):
        assert np.array_equal(getattr(first, name), getattr(second, name))
    assert np.array_equal(quantize(first.focal_stack), first.focal_stack)
    assert first.k == 3 and first.split == "train"


def test_generate_corpus_modes(gen_config_factory):
    clean = generate_corpus(gen_config_factory("clean", n_train=2, n_eval=1), seed=0)
    assert [s.sample_id for s in clean] == ["train_0000", "train_0001", "eval_0000"]
    assert all(np.array_equal(s.noisy_label, s.clean_mask) for s in clean)

    heuristic = generate_corpus(gen_config_factory("heuristic", n_train=2, n_eval=0), seed=0)
    assert all("heuristic_degenerate" in s.metadata for s in heuristic)
    assert all(s.metadata["noise"]["mode"] == "heuristic" for s in heuristic)


def test_training_view_hides_clean_mask(corpus):
    view = corpus[0].training_view()
    assert not hasattr(view, "clean_mask")
    assert view.sample_id == corpus[0].sample_id


def test_gen_config_from_dict():
    config = GenConfig.from_dict({"n_train": 4, "k": 3, "scene": {"height": 16, "width": 16}})
    assert config.scene.height == 16 and config.noise.mode == "corruption"
    assert GenConfig.from_dict(config.to_dict()).to_dict() == config.to_dict()
    with pytest.raises(ConfigError):
        GenConfig.from_dict({"n_train": 4, "colour": "red"})
    with pytest.raises(ConfigError):
        GenConfig.from_dict({"k": 1})
