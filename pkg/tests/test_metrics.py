import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimicparts.body import make_part_layout, single_part_layout
from mimicparts.metrics import (
    FeatureDist,
    StyleClassifier,
    bc_score,
    beat_consistency,
    diversity,
    fgd,
    matrix_sqrt_psd,
    motion_beats,
    sra,
    write_report,
)


def test_matrix_sqrt_examples():
    np.testing.assert_array_equal(matrix_sqrt_psd(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)
    with pytest.raises(ValueError):
        matrix_sqrt_psd(np.diag([1.0, -0.5]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_matrix_sqrt_reconstructs_random_psd(seed, rank):
    g = np.random.default_rng(seed).normal(size=(8, rank))
    a = g @ g.T
    b = matrix_sqrt_psd(a)
    np.testing.assert_allclose(b, b.T, atol=1e-14)
    assert np.linalg.eigvalsh(b).min() > -1e-10
    assert np.linalg.norm(b @ b - a) / np.linalg.norm(a) < 1e-8


def test_fgd_examples():
    rng = np.random.default_rng(0)
    d = FeatureDist.from_features(rng.normal(size=(50, 4)))
    assert abs(fgd(d, d)) < 1e-8
    a = FeatureDist(np.array([0.0]), np.array([[1.0]]))
    b = FeatureDist(np.array([2.0]), np.array([[1.0]]))
    assert fgd(a, b) == pytest.approx(4.0, abs=1e-12)
    with pytest.raises(ValueError):
        fgd(a, d)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_fgd_diagonal_closed_form_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    m1, m2 = rng.normal(size=5), rng.normal(size=5)
    v1, v2 = rng.uniform(0.1, 3, 5), rng.uniform(0.1, 3, 5)
    a, b = FeatureDist(m1, np.diag(v1)), FeatureDist(m2, np.diag(v2))
    expect = np.sum((m1 - m2) ** 2 + (np.sqrt(v1) - np.sqrt(v2)) ** 2)
    assert fgd(a, b) == pytest.approx(expect, rel=1e-10, abs=1e-12)
    g1, g2 = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    a, b = FeatureDist(m1, g1 @ g1.T), FeatureDist(m2, g2 @ g2.T)
    assert fgd(a, b) == pytest.approx(fgd(b, a), rel=1e-9, abs=1e-9)
    assert fgd(a, b) >= -1e-8


def test_bc_examples():
    beats = np.array([0.5, 1.2, 2.0])
    assert bc_score(beats, beats, 0.1) == 1.0
    assert bc_score(beats + 0.1, beats, 0.1) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert bc_score(np.zeros(0), beats, 0.1) == 0.0
    with pytest.raises(ValueError):
        bc_score(beats, np.zeros(0), 0.1)
    with pytest.raises(ValueError):
        beat_consistency(np.zeros((0, 3)), beats, 30.0)


def brute_bc(m, a, sigma):
    total = 0.0
    for b in a:
        best = min((b - x) ** 2 for x in m)
        total += math.exp(-best / (2 * sigma ** 2))
    return total / len(a)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12))
def test_bc_matches_brute_force_and_ignores_duplicates(seed, n_m, n_a):
    rng = np.random.default_rng(seed)
    m, a = np.sort(rng.uniform(0, 4, n_m)), np.sort(rng.uniform(0, 4, n_a))
    assert abs(bc_score(m, a, 0.1) - brute_bc(m, a, 0.1)) <= 1e-12
    assert bc_score(np.concatenate([m, m[:2]]), a, 0.1) == bc_score(m, a, 0.1)


def test_motion_beats_found_at_velocity_minima():
    fps = 30.0
    t = np.arange(120) / fps
    # speed |cos| vanishes at the turning points of sin
    x = np.sin(2 * np.pi * 1.0 * t)[:, None] * np.ones((1, 3))
    beats = motion_beats(x, fps)
    turning = np.array([0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.25, 3.75])
    assert len(beats) == len(turning)
    assert np.abs(beats - turning).max() <= 1 / fps
    assert beat_consistency(x, turning, fps) > 0.9


def test_diversity_examples():
    x = np.random.default_rng(0).normal(size=(1, 6, 4))
    assert diversity(np.concatenate([x, x])) == 0.0
    assert diversity(np.concatenate([x, x + 1.0])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        diversity(x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_diversity_exhaustive_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    clips = rng.normal(size=(5, 8, 3))
    pairs = [(i, j) for i in range(5) for j in range(i + 1, 5)]
    expect = np.mean([np.abs(clips[i] - clips[j]).mean() for i, j in pairs])
    assert diversity(clips) == pytest.approx(expect, rel=1e-12)
    assert diversity(clips[rng.permutation(5)]) == pytest.approx(expect, rel=1e-12)
    assert diversity(clips, n_pairs=100) == pytest.approx(expect, rel=1e-12)
    sub = diversity(clips, n_pairs=4, seed=3)
    assert sub == diversity(clips, n_pairs=4, seed=3)


def test_single_part_variants_equal_full_metric():
    rng = np.random.default_rng(1)
    clips = np.cumsum(rng.normal(size=(4, 64, 5)), axis=1)
    lay = single_part_layout(5)
    full = list(range(5))
    assert diversity(clips, channels=lay.indices[0]) == diversity(clips)
    beats = np.array([0.5, 1.0, 1.5])
    assert beat_consistency(clips[0], beats, 30.0, channels=full) == beat_consistency(clips[0], beats, 30.0)


@pytest.fixture(scope="module")
def small_corpus():
    from mimicparts.data import make_dataset
    return make_dataset(clips_per_style=40, seed=5)


def test_classifier_consistency_and_negative_control(small_corpus):
    ds = small_corpus
    tr, te = ds.index("train"), ds.index("test")
    clf = StyleClassifier(ds.layout, ds.fps, 4).fit(ds.motion[tr], ds.styles[tr])
    holdout = clf.accuracy(ds.motion[te], ds.styles[te])
    assert holdout >= 0.9
    assert sra(ds.motion[te], ds.styles[te], clf) == holdout
    noise = np.random.default_rng(0).normal(size=(400, 128, ds.layout.n_channels))
    labels = np.arange(400) % 4
    acc = sra(noise, labels, clf)
    assert abs(acc - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 400)
    with pytest.raises(ValueError):
        sra(ds.motion[te], np.full(len(te), 7), clf)


def test_report_files(tmp_path):
    rows = [{"metric": "bc", "scope": "all", "value": 0.5, "n": 3, "config_hash": "abc"}]
    write_report(rows, tmp_path / "r.json", tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[1] == "bc,all,0.5,3,abc"
