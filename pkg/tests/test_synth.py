import numpy as np
import pytest

from breaknet.metrics import dice, label_to_boundaries
from breaknet.synth import (AUGMENTATIONS, NUM_CLASSES, REGIMES, SpecError, SynthSpec, apply_shadows, augment,
                            degrade_ground_truth, gen_boundaries, gen_volume, generate_dataset, generate_sample,
                            rasterize_labels, regime_spec, render_bscan, shadow_intervals)


def random_valid_spec(rng) -> SynthSpec:
    thick = rng.uniform(5, 14, 7)
    amp = rng.uniform(0, thick.min() - 2)
    shape = rng.uniform(0, 8)
    top = shape + rng.uniform(2, 10)
    height = int(np.ceil(top + thick.sum() + shape + 7 * amp + 4))
    return SynthSpec(height=height, width=int(rng.integers(16, 96)), top=top, layer_thickness=tuple(thick),
                     harmonics=int(rng.integers(0, 5)), shape_amplitude=shape, thickness_amplitude=amp,
                     seed=int(rng.integers(1 << 30)))


def seed_where_first_draw_below_half(want: bool) -> int:
    return next(s for s in range(100) if (np.random.default_rng(s).random() < 0.5) == want)


# -- spec -----------------------------------------------------------------------

@pytest.mark.parametrize("kw,field_name", [
    (dict(alpha=0.0), "alpha"),
    (dict(alpha=1.5), "alpha"),
    (dict(shadow_width=(0, 3)), "shadow_width"),
    (dict(layer_means=(0.1,) * 9), "layer_means"),
    (dict(thickness_amplitude=9.0), "thickness_amplitude"),
    (dict(top=2.0, shape_amplitude=6.0), "top"),
    (dict(regime="foggy"), "regime"),
    (dict(regime="multiple_close", shadow_count=1), "shadow_count"),
    (dict(drift=3.0, drift_cap=2.0), "drift"),
    (dict(num_layers=5), "num_layers"),
])
def test_invalid_spec_names_field(kw, field_name):
    with pytest.raises(SpecError) as exc:
        SynthSpec(**kw)
    assert exc.value.field == field_name


def test_spec_round_trip():
    s = SynthSpec(alpha=0.4, shadow_width=(3, 7), regime="normal")
    assert SynthSpec.from_dict(s.to_dict()) == s


def test_spec_unknown_field():
    with pytest.raises(SpecError):
        SynthSpec.from_dict({"colour": 1})


# -- boundaries and labels ------------------------------------------------------

def test_zero_harmonics_flat_boundaries():
    spec = SynthSpec(harmonics=0)
    b = gen_boundaries(spec, np.random.default_rng(0))
    want = spec.top + np.concatenate(([0.0], np.cumsum(spec.layer_thickness)))
    np.testing.assert_allclose(b, np.repeat(want[:, None], spec.width, axis=1))


def test_boundaries_deterministic():
    spec = SynthSpec()
    a = gen_boundaries(spec, np.random.default_rng(5))
    b = gen_boundaries(spec, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_thousand_random_specs_never_cross():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        spec = random_valid_spec(rng)
        b = gen_boundaries(spec, np.random.default_rng(spec.seed))
        assert np.all(np.diff(b, axis=0) >= 2.0 - 1e-9)
        assert b.min() >= 0 and b.max() <= spec.height - 1


def test_flat_rasterization_run_lengths():
    b = np.repeat(np.arange(10.0, 90.0, 10.0)[:, None], 6, axis=1)
    lab = rasterize_labels(b, 100, 6)
    for col in lab.T:
        _, counts = np.unique(col, return_counts=True)
        assert counts.tolist() == [10] * 8 + [20]


def test_rasterization_round_half_up():
    b = np.array([[2.5, 2.49, 2.51]] + [[4.0 + 2 * j] * 3 for j in range(7)])
    lab = rasterize_labels(b, 24)
    assert lab[2].tolist() == [0, 1, 0]   # 2.5 and 2.51 round to row 3, 2.49 to row 2
    assert lab[3].tolist() == [1, 1, 1]


def test_interior_boundaries_give_all_classes():
    s = generate_sample(SynthSpec(seed=3))
    for col in s.labels.T:
        assert set(col.tolist()) == set(range(NUM_CLASSES))


def test_label_boundary_round_trip_many_specs():
    rng = np.random.default_rng(7)
    for _ in range(200):
        spec = random_valid_spec(rng)
        b = gen_boundaries(spec, np.random.default_rng(spec.seed))
        prof = label_to_boundaries(rasterize_labels(b, spec.height))
        assert not prof.defective.any()
        assert np.abs(prof.rows - b).max() <= 0.5


# -- rendering and shadows ------------------------------------------------------

def test_noiseless_render_is_piecewise_constant():
    spec = SynthSpec(noise_std=0.0)
    s = generate_sample(spec)
    np.testing.assert_allclose(s.image, np.asarray(spec.layer_means, np.float32)[s.labels])


def test_render_layer_statistics():
    spec = SynthSpec(noise_std=0.05)
    rng = np.random.default_rng(0)
    labels = rasterize_labels(gen_boundaries(spec, rng), spec.height)
    img = render_bscan(labels, spec, rng)
    assert img.min() >= 0 and img.max() <= 1
    for c in (2, 4, 5, 7):   # means well inside (0, 1), clamping negligible
        v = img[labels == c]
        assert abs(v.mean() - spec.layer_means[c]) < 4 * spec.noise_std / np.sqrt(v.size)
        assert abs(v.std() - spec.noise_std) < 0.1 * spec.noise_std


def test_alpha_one_leaves_image_unchanged():
    spec = SynthSpec(regime="normal", alpha=1.0)
    rng = np.random.default_rng(1)
    b = gen_boundaries(spec, rng)
    img = render_bscan(rasterize_labels(b, spec.height), spec, rng)
    out, mask, _ = apply_shadows(img, b, spec, rng)
    assert mask.any()
    np.testing.assert_array_equal(out, img)


@pytest.mark.parametrize("regime", ["normal", "multiple_close", "ultrawide"])
def test_shadow_leaves_clear_columns_and_labels(regime):
    spec = regime_spec(SynthSpec(alpha=0.3, noise_std=0.05), regime, 11)
    clean = generate_sample(SynthSpec(**{**spec.to_dict(), "regime": "none"}))
    s = generate_sample(spec)
    np.testing.assert_array_equal(s.labels, clean.labels)
    np.testing.assert_array_equal(s.image[:, ~s.shadow_columns], clean.image[:, ~s.shadow_columns])
    assert s.shadow_columns.any()


def test_shadowed_mean_is_alpha_times_clear_mean():
    spec = SynthSpec(regime="ultrawide", alpha=0.3, noise_std=0.05, seed=4)
    s = generate_sample(spec)
    c = 7
    cols = s.shadow_columns
    shadowed = s.image[:, cols][s.labels[:, cols] == c]
    clear = s.image[:, ~cols][s.labels[:, ~cols] == c]
    assert shadowed.mean() == pytest.approx(0.3 * clear.mean(), rel=0.03)


def test_shadow_starts_at_the_start_boundary():
    spec = SynthSpec(regime="normal", alpha=0.5, noise_std=0.0, shadow_start_boundary=3, seed=2)
    s = generate_sample(spec)
    rows = np.floor(s.boundaries[3] + 0.5).astype(int)
    means = np.asarray(spec.layer_means, np.float32)[s.labels]
    for col in np.flatnonzero(s.shadow_columns):
        r = rows[col]
        assert s.shadow_start[col] == r
        np.testing.assert_array_equal(s.image[:r, col], means[:r, col])
        np.testing.assert_allclose(s.image[r:, col], 0.5 * means[r:, col], rtol=1e-6)
    assert np.all(s.shadow_start[~s.shadow_columns] == -1)


def test_regime_interval_rules():
    rng = np.random.default_rng(0)
    for _ in range(300):
        uw = shadow_intervals(SynthSpec(regime="ultrawide"), rng)
        assert len(uw) == 1 and uw[0][1] - uw[0][0] >= 0.25 * 128
        mc = shadow_intervals(SynthSpec(regime="multiple_close", shadow_count=3), rng)
        assert len(mc) == 3
        for (a0, a1), (b0, b1) in zip(mc, mc[1:]):
            gap = b0 - a1
            assert 1 <= gap < 2 * (a1 - a0) and gap < 2 * (b1 - b0)
        nm = shadow_intervals(SynthSpec(regime="normal", shadow_count=2), rng)
        assert all(4 <= b - a <= 10 for a, b in nm)
        for (a0, a1), (b0, b1) in zip(nm, nm[1:]):
            assert b0 >= a1 + 1
        assert all(0 <= a < b <= 128 for a, b in uw + mc + nm)


def test_sample_deterministic():
    spec = SynthSpec(regime="multiple_close", shadow_count=2, seed=9)
    a, b = generate_sample(spec), generate_sample(spec)
    for f in ("image", "labels", "boundaries", "shadow_columns", "shadow_start"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_dataset_cycles_regimes():
    ds = generate_dataset(SynthSpec(), 8, REGIMES, seed=1)
    assert len(ds) == 8
    assert not ds[0].shadow_columns.any() and ds[1].shadow_columns.any()
    assert ds[3].shadow_columns.sum() >= 32


# -- volumes and degraded truth -------------------------------------------------

def test_zero_drift_volume_shares_boundaries():
    vol = gen_volume(SynthSpec(drift=0.0), 4)
    for fr in vol.frames[1:]:
        np.testing.assert_array_equal(fr.boundaries, vol.frames[0].boundaries)


@pytest.mark.parametrize("drift", [0.3, 0.8, 1.5])
def test_phase_drift_matches_requested_mean_step(drift):
    vol = gen_volume(SynthSpec(drift=drift, seed=3), 10)
    b = np.stack([f.boundaries for f in vol.frames])
    assert np.abs(np.diff(b, axis=0)).mean() == pytest.approx(drift, rel=0.1)


def test_single_frame_volume_is_a_sample():
    spec = SynthSpec(regime="normal", seed=21)
    fr = gen_volume(spec, 1).frames[0]
    s = generate_sample(spec)
    np.testing.assert_array_equal(fr.image, s.image)
    np.testing.assert_array_equal(fr.labels, s.labels)


def test_drift_cap_enforced():
    with pytest.raises(SpecError):
        SynthSpec(drift=2.5)


def test_keyframes_keep_exact_labels():
    vol = gen_volume(SynthSpec(drift=1.0, seed=1), 12)
    deg = degrade_ground_truth(vol, 5)
    assert deg.keyframes == [0, 5, 10]
    for k in deg.keyframes:
        np.testing.assert_array_equal(deg.labels[k], vol.frames[k].labels)
        assert np.all(deg.displacement[k] == 0)


def test_linear_drift_interpolates_exactly():
    vol = gen_volume(SynthSpec(drift=1.0, drift_mode="linear", top=30.0, seed=1), 11)
    deg = degrade_ground_truth(vol, 5)
    assert np.abs(deg.displacement).max() < 1e-9
    for f in range(11):
        np.testing.assert_array_equal(deg.labels[f], vol.frames[f].labels)


def test_sinusoidal_drift_matches_chord_error():
    vol = gen_volume(SynthSpec(drift=1.0, seed=6), 11)
    deg = degrade_ground_truth(vol, 5)
    width = vol.spec.width
    worst = 0.0
    for f in range(11):
        k0 = (f // 5) * 5
        if f == k0 or k0 + 5 >= 11:
            continue
        t = (f - k0) / 5
        chord = (1 - t) * vol.curves.evaluate(width, k0) + t * vol.curves.evaluate(width, k0 + 5)
        worst = max(worst, np.abs(chord - vol.curves.evaluate(width, f)).max())
    assert worst > 0.1
    assert np.abs(deg.displacement).max() == pytest.approx(worst, rel=1e-9)


def test_degrade_rejects_stride_one():
    with pytest.raises(ValueError):
        degrade_ground_truth(gen_volume(SynthSpec(), 3), 1)


# -- augmentation ---------------------------------------------------------------

def test_no_toggles_is_identity():
    s = generate_sample(SynthSpec(regime="normal"))
    a = augment(s, np.random.default_rng(0), ())
    np.testing.assert_array_equal(a.image, s.image)
    np.testing.assert_array_equal(a.labels, s.labels)
    np.testing.assert_array_equal(a.boundaries, s.boundaries)


def test_hflip_twice_is_identity():
    s = generate_sample(SynthSpec(regime="normal", seed=2))
    seed = seed_where_first_draw_below_half(True)
    once = augment(s, np.random.default_rng(seed), ("hflip",))
    np.testing.assert_array_equal(once.labels, s.labels[:, ::-1])
    twice = augment(once, np.random.default_rng(seed), ("hflip",))
    for f in ("image", "labels", "boundaries", "shadow_columns", "shadow_start"):
        np.testing.assert_array_equal(getattr(twice, f), getattr(s, f))


def test_vflip_keeps_labels_and_boundaries_consistent():
    s = generate_sample(SynthSpec(seed=2))
    f = augment(s, np.random.default_rng(seed_where_first_draw_below_half(True)), ("vflip",))
    np.testing.assert_array_equal(f.labels, s.labels[::-1])
    np.testing.assert_allclose(f.boundaries, s.image.shape[0] - 1 - s.boundaries)


def test_contrast_keeps_labels():
    s = generate_sample(SynthSpec(seed=2))
    seen_change = False
    for seed in range(10):
        a = augment(s, np.random.default_rng(seed), ("contrast",))
        np.testing.assert_array_equal(a.labels, s.labels)
        assert a.image.min() >= 0 and a.image.max() <= 1
        seen_change |= not np.array_equal(a.image, s.image)
        ratio = a.image[s.image > 0.2] / s.image[s.image > 0.2]
        unclipped = a.image[s.image > 0.2] < 1.0
        assert np.ptp(ratio[unclipped]) < 1e-5
        assert 0.7 - 1e-6 <= ratio[unclipped][0] <= 1.3 + 1e-6
    assert seen_change


def test_transpose_only_square():
    s = generate_sample(SynthSpec(height=128, width=64))
    for seed in range(10):
        a = augment(s, np.random.default_rng(seed), ("transpose",))
        assert a.labels.shape == (128, 64)


def test_unknown_augmentation():
    with pytest.raises(ValueError):
        augment(generate_sample(SynthSpec()), np.random.default_rng(0), ("rotate",))


def test_flip_dice_equivariance():
    rng = np.random.default_rng(3)
    for _ in range(100):
        p, g = rng.random((2, 12, 9)) < rng.random()
        assert dice(p[:, ::-1], g[:, ::-1]) == dice(p, g)


def test_all_augmentations_listed():
    assert set(AUGMENTATIONS) == {"hflip", "vflip", "transpose", "contrast"}
