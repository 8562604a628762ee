import csv
import json

import numpy as np
import pytest

from breaknet.metrics import (BOUNDARY_NAMES, LAYER_NAMES, REFERENCE_BREAKNET_RAT, TABLE1_COLUMNS, BoundaryProfile,
                              NotComputableError, contour_error, defective_fraction, detect_failure, dice,
                              evaluate, failure_rate, intersect_labels, iou, label_to_boundaries, score_scan,
                              thickness_error, write_report)
from breaknet.synth import SynthSpec, generate_dataset, generate_sample


def count_dice(p, g):
    inter = sum(1 for a, b in zip(p.ravel(), g.ravel()) if a and b)
    tot = int(p.sum()) + int(g.sum())
    return 1.0 if tot == 0 else 2 * inter / tot


def count_iou(p, g):
    inter = sum(1 for a, b in zip(p.ravel(), g.ravel()) if a and b)
    union = sum(1 for a, b in zip(p.ravel(), g.ravel()) if a or b)
    return 1.0 if union == 0 else inter / union


def column_boundaries(col, nb=8):
    """Direct per-row scan for the first class-(b-1) -> class-b step."""
    rows = [np.nan] * nb
    for r in range(1, len(col)):
        a, b = col[r - 1], col[r]
        if b == a + 1 and np.isnan(rows[b - 1]):
            rows[b - 1] = r
    return rows


def flat_profile(rows_per_boundary, width=5, pitch=1.0):
    rows = np.repeat(np.asarray(rows_per_boundary, float)[:, None], width, axis=1)
    return BoundaryProfile(rows, np.zeros(width, bool), pitch)


# -- dice / iou -----------------------------------------------------------------

def test_dice_iou_examples():
    m = np.zeros((4, 4), bool)
    m[:2, :2] = True
    assert dice(m, m) == 1.0 and iou(m, m) == 1.0
    other = np.zeros((4, 4), bool)
    other[2:, 2:] = True
    assert dice(m, other) == 0.0 and iou(m, other) == 0.0
    shifted = np.zeros((4, 4), bool)
    shifted[:2, 1:3] = True
    assert dice(m, shifted) == 0.5
    assert iou(m, shifted) == pytest.approx(1 / 3)
    assert iou(m, shifted) == pytest.approx(0.5 / (2 - 0.5))


def test_empty_masks_convention():
    z = np.zeros((3, 3), bool)
    assert dice(z, z) == 1.0 and iou(z, z) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2)), np.zeros((3, 2)))


def test_dice_iou_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 7, 2))
        p, g = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        d, j = dice(p, g), iou(p, g)
        assert d == pytest.approx(count_dice(p, g), abs=1e-12)
        assert j == pytest.approx(count_iou(p, g), abs=1e-12)
        assert j == pytest.approx(d / (2 - d), abs=1e-12)
        assert d == dice(g, p) and j == iou(g, p)


# -- boundary extraction --------------------------------------------------------

def test_uniform_map_all_defective():
    prof = label_to_boundaries(np.full((20, 6), 4))
    assert prof.defective.all()
    assert np.isnan(prof.rows).all()


def test_skipped_class_column_defective():
    col = np.array([0, 0, 1, 1, 2, 2, 4, 4, 5, 6, 7, 8, 8])
    lab = np.stack([col, np.arange(13) * 0 + np.r_[0, 0, 1, 1, 2, 3, 4, 4, 5, 6, 7, 8, 8]], axis=1)
    prof = label_to_boundaries(lab)
    assert prof.defective.tolist() == [True, False]
    assert np.isnan(prof.rows[3, 0]) and np.isnan(prof.rows[2, 0])
    assert prof.rows[:, 1].tolist() == [2, 4, 5, 6, 8, 9, 10, 11]


def test_non_monotone_column_defective():
    col = np.r_[0, 1, 2, 3, 4, 5, 6, 7, 8, 7, 8]
    assert label_to_boundaries(col[:, None]).defective[0]


def test_boundaries_match_per_column_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        h, w = int(rng.integers(9, 20)), int(rng.integers(1, 5))
        if rng.random() < 0.5:
            lab = np.sort(rng.integers(0, 9, (h, w)), axis=0)
        else:
            lab = rng.integers(0, 9, (h, w))
        prof = label_to_boundaries(lab)
        for c in range(w):
            np.testing.assert_array_equal(prof.rows[:, c], column_boundaries(lab[:, c]))
            runs = [lab[0, c]] + [lab[r, c] for r in range(1, h) if lab[r, c] != lab[r - 1, c]]
            assert prof.defective[c] == (runs != list(range(9)))


def test_generator_truth_round_trip():
    for s in generate_dataset(SynthSpec(), 40, seed=5):
        prof = label_to_boundaries(s.labels, axial_pitch=s.axial_pitch)
        assert not prof.defective.any()
        assert np.abs(prof.rows - s.boundaries).max() <= 0.5


# -- contour / thickness error --------------------------------------------------

def test_contour_error_examples():
    base = 10.0 + 5 * np.arange(8)
    a = flat_profile(base, pitch=1.5)
    assert contour_error(a, a) == 0.0
    assert contour_error(flat_profile(base + 3, pitch=1.5), a) == pytest.approx(4.5)


def test_thickness_error_example():
    gt = 10.0 + 12 * np.arange(8)
    pred = gt.copy()
    pred[4:] -= 2             # layer 4 is 10 px instead of 12 px
    g, p = flat_profile(gt, pitch=2.0), flat_profile(pred, pitch=2.0)
    assert thickness_error(g, g) == 0.0
    # one of seven layers off by 2 px * 2 um/px
    assert thickness_error(p, g) == pytest.approx(4.0 / 7)
    all_thin = flat_profile(10.0 + 10 * np.arange(8), pitch=2.0)
    assert thickness_error(all_thin, g) == pytest.approx(4.0)


def test_ce_te_random_profile_oracle():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        w = int(rng.integers(1, 8))
        pitch = float(rng.uniform(0.5, 3))
        gp = np.sort(rng.uniform(0, 50, (8, w)), axis=0)
        pp = np.sort(rng.uniform(0, 50, (8, w)), axis=0)
        pp[rng.random((8, w)) < 0.1] = np.nan
        dg, dp = rng.random(w) < 0.2, rng.random(w) < 0.2
        P, G = BoundaryProfile(pp, dp, pitch), BoundaryProfile(gp, dg, pitch)
        ce_terms, te_terms = [], []
        for c in range(w):
            if dp[c] or dg[c]:
                continue
            for b in range(8):
                if np.isfinite(pp[b, c]):
                    ce_terms.append(abs(pp[b, c] - gp[b, c]) * pitch)
            for j in range(7):
                tp, tg = pp[j + 1, c] - pp[j, c], gp[j + 1, c] - gp[j, c]
                if np.isfinite(tp):
                    te_terms.append(abs(tp - tg) * pitch)
        if ce_terms:
            assert contour_error(P, G) == pytest.approx(np.mean(ce_terms), rel=1e-12)
        else:
            with pytest.raises(NotComputableError):
                contour_error(P, G)
        if te_terms:
            assert thickness_error(P, G) == pytest.approx(np.mean(te_terms), rel=1e-12)


def test_ce_zero_iff_identical_on_comparable_columns():
    rng = np.random.default_rng(3)
    gp = np.sort(rng.uniform(0, 50, (8, 6)), axis=0)
    pp = gp.copy()
    dp = np.zeros(6, bool)
    dp[2] = True
    pp[:, 2] += 7           # differs only on a defective column
    P, G = BoundaryProfile(pp, dp, 2.0), BoundaryProfile(gp, np.zeros(6, bool), 2.0)
    assert contour_error(P, G) == 0.0 and thickness_error(P, G) == 0.0
    pp[0, 0] += 0.5
    assert contour_error(P, G) > 0


def test_pitch_mismatch():
    a, b = flat_profile(np.arange(8.0), pitch=1.0), flat_profile(np.arange(8.0), pitch=2.0)
    with pytest.raises(ValueError):
        contour_error(a, b)


def test_no_comparable_columns():
    a = flat_profile(np.arange(8.0))
    bad = BoundaryProfile(a.rows, np.ones(5, bool), 1.0)
    with pytest.raises(NotComputableError):
        contour_error(bad, a)
    with pytest.raises(NotComputableError):
        thickness_error(bad, a)


# -- failure detection ----------------------------------------------------------

def test_ground_truth_never_fails():
    for s in generate_dataset(SynthSpec(), 20, seed=8):
        assert not detect_failure(s.labels)


def test_erased_class_in_ten_percent_of_columns_fails():
    s = generate_sample(SynthSpec(seed=4))
    lab = s.labels.copy()
    cols = np.arange(0, lab.shape[1], 10)
    sub = lab[:, cols]
    sub[sub == 4] = 3
    lab[:, cols] = sub
    assert defective_fraction(lab) == pytest.approx(cols.size / lab.shape[1])
    assert detect_failure(lab)


def test_threshold_is_strict_one_percent():
    lab = generate_sample(SynthSpec(width=200, seed=4)).labels.copy()
    lab[:, 0] = 0
    lab[:, 1] = 0
    assert defective_fraction(lab) == 0.01 and not detect_failure(lab)
    lab[:, 2] = 0
    assert detect_failure(lab)


def test_failure_rate_counting():
    good = generate_sample(SynthSpec(seed=1)).labels
    bad = np.zeros_like(good)
    assert failure_rate([good] * 8 + [bad] * 2) == pytest.approx(0.2)


# -- evaluation -----------------------------------------------------------------

def echo_predictor(samples):
    lookup = {s.image.tobytes(): s.labels for s in samples}

    def predict(images):
        labs = np.stack([lookup[im[0].tobytes()] for im in images])
        return (labs[:, None] == np.arange(9)[None, :, None, None]).astype(np.float32)
    return predict


def test_ground_truth_echo_gives_perfect_report(tmp_path):
    samples = generate_dataset(SynthSpec(), 12, seed=3)
    rep = evaluate(echo_predictor(samples), samples)
    d = rep.to_dict()
    assert d["dice"] == [1.0, 0.0] and d["iou"] == [1.0, 0.0]
    assert d["ce_um"] == [0.0, 0.0] and d["te_um"] == [0.0, 0.0]
    assert d["failure_rate"] == 0.0 and d["num_scans"] == 12
    paths = write_report(rep, tmp_path)
    rows = list(csv.DictReader(open(paths["csv"])))
    assert tuple(rows[0]) == TABLE1_COLUMNS == ("Method", "Dice", "IoU", "FailureRate", "CE_um", "TE_um")
    assert rows[0]["FailureRate"] == "0.00%"
    layer_header = next(csv.reader(open(paths["layers_csv"])))
    assert layer_header == ["Method", "NFL", "IPL", "INL", "OPL", "ONL", "EZ", "RPE", "All"]
    assert json.loads(paths["json"].read_text())["method"] == "BreakNet"


def test_failed_scans_excluded_from_ce():
    samples = generate_dataset(SynthSpec(), 4, seed=3)
    echo = echo_predictor(samples)

    def predict(images):
        p = echo(images)
        p[0] = 0
        p[0, 5] = 1      # first scan of every batch predicted as a single class
        return p
    rep = evaluate(predict, samples, batch_size=2)
    assert rep.failure_rate == 0.5
    assert rep.ce() == [0.0, 0.0]
    assert rep.to_dict()["failed_scans"] == [0, 2]


def test_class_count_mismatch():
    samples = generate_dataset(SynthSpec(), 2, seed=3)
    with pytest.raises(ValueError):
        evaluate(lambda x: np.zeros((x.shape[0], 5) + x.shape[2:]), samples)


def test_empty_dataset():
    with pytest.raises(ValueError):
        evaluate(lambda x: x, [])


def test_score_scan_ranges():
    s = generate_sample(SynthSpec(seed=2))
    noisy = s.labels.copy()
    noisy[40:45] = 3
    m = score_scan(noisy, s.labels, 2.0)
    assert np.all((0 <= m.dice) & (m.dice <= 1)) and np.all((0 <= m.iou) & (m.iou <= 1))


def test_names_and_reference():
    assert LAYER_NAMES == ("NFL", "IPL", "INL", "OPL", "ONL", "EZ", "RPE")
    assert len(BOUNDARY_NAMES) == 8
    assert REFERENCE_BREAKNET_RAT["Dice"] == (0.90, 0.04) and REFERENCE_BREAKNET_RAT["FailureRate"] == 0.01


def test_intersect_labels():
    a = np.array([[0, 1], [2, 3]])
    b = np.array([[0, 2], [2, 3]])
    lab, agree = intersect_labels(a, b)
    assert agree.tolist() == [[True, False], [True, True]]
    assert lab.tolist() == [[0, -1], [2, 3]]
    same, _ = intersect_labels(a, a)
    np.testing.assert_array_equal(same, a)
