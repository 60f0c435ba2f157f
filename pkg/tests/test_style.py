import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mimicparts.numerics as nx
from mimicparts.body import make_part_layout, split_clip
from mimicparts.numerics import Tensor, grad_check, grad_check_params
from mimicparts.style import (
    StyleConfig,
    StyleEncoderModel,
    dump_embeddings_csv,
    encode_style,
    make_pairs,
    nt_xent,
)


def brute_force_nt_xent(e, pair_ids, tau):
    n = len(e)
    total = 0.0
    for i in range(n):
        j = next(k for k in range(n) if k != i and pair_ids[k] == pair_ids[i])
        cos = lambda a, b: float(np.dot(e[a], e[b]) / (np.linalg.norm(e[a]) * np.linalg.norm(e[b])))
        denom = sum(math.exp(cos(i, k) / tau) for k in range(n) if k != i)
        total += -math.log(math.exp(cos(i, j) / tau) / denom)
    return total / n


def test_make_pairs_examples():
    clip = np.arange(8.0).reshape(1, 8, 1)
    views, ids = make_pairs(clip)
    assert views.shape == (2, 4, 1) and ids.tolist() == [0, 0]
    np.testing.assert_array_equal(views[0, :, 0], [0, 1, 2, 3])
    np.testing.assert_array_equal(views[1, :, 0], [4, 5, 6, 7])
    x = np.random.default_rng(0).normal(size=(4, 10, 3))
    views, ids = make_pairs(x)
    assert views.shape == (8, 5, 3) and ids.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    for k in range(4):
        np.testing.assert_array_equal(views[k], x[k, :5])
        np.testing.assert_array_equal(views[4 + k], x[k, 5:])
    with pytest.raises(ValueError):
        make_pairs(np.ones((2, 7, 3)))


def test_nt_xent_examples():
    e = np.random.default_rng(0).normal(size=(2, 5))
    assert nt_xent(e, [0, 0], 0.1).item() == pytest.approx(0.0, abs=1e-15)
    same = np.tile([[0.3, -1.2, 2.0]], (8, 1))
    assert nt_xent(same, [0, 1, 2, 3, 0, 1, 2, 3], 0.37).item() == pytest.approx(math.log(7), abs=1e-12)
    e = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    assert nt_xent(e, [0, 1, 0, 1], 1.0).item() == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
    assert -math.log(math.e / (math.e + 2)) == pytest.approx(0.55144, abs=1e-5)


def test_nt_xent_errors():
    with pytest.raises(ZeroDivisionError):
        nt_xent(np.array([[0.0, 0.0], [1.0, 0.0]]), [0, 0], 0.1)
    with pytest.raises(ValueError):
        nt_xent(np.ones((2, 2)), [0, 0], 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.floats(0.05, 2.0), st.integers(0, 10_000))
def test_nt_xent_matches_brute_force(n_s, d, tau, seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(2 * n_s, d))
    ids = np.concatenate([np.arange(n_s), np.arange(n_s)])
    assert abs(nt_xent(e, ids, tau).item() - brute_force_nt_xent(e, ids, tau)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_nt_xent_scale_invariant_and_non_negative(n_s, c, seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(2 * n_s, 4))
    ids = np.concatenate([np.arange(n_s), np.arange(n_s)])
    base = nt_xent(e, ids, 0.1).item()
    assert base >= 0
    assert nt_xent(e * c, ids, 0.1).item() == pytest.approx(base, rel=1e-12, abs=1e-12)


def test_nt_xent_gradient_on_four_sample_batch():
    rng = np.random.default_rng(11)
    report = grad_check(lambda e: nt_xent(e, [0, 1, 0, 1], 0.1), rng.normal(size=(4, 3)), h=1e-5)
    assert report.passed and report.max_rel_err < 1e-4


def _tiny(mode="part", seed=0):
    cfg = StyleConfig(part_channels=(2, 2, 1), d_style=4, n_layers=1, n_heads=2, half_frames=3, patch=1, mode=mode, seed=seed)
    return cfg, StyleEncoderModel(cfg, np.random.default_rng(seed))


@pytest.mark.parametrize("mode", ["part", "global"])
def test_style_loss_gradients(mode):
    cfg, model = _tiny(mode)
    assert model.n_parameters() <= 1000
    lay = make_part_layout(cfg.part_channels)
    x = np.random.default_rng(1).normal(size=(3, 6, 5))
    report = grad_check_params(lambda: model.loss(split_clip(x, lay)), model.parameters(), h=1e-5)
    assert report.passed, report


def test_part_isolation_is_exact():
    cfg = StyleConfig(part_channels=(6, 5, 4), d_style=8, n_layers=2, n_heads=2)
    model = StyleEncoderModel(cfg, np.random.default_rng(0))
    lay = make_part_layout(cfg.part_channels)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 16, 15))
    base = encode_style(x, model, lay)
    for p, idx in enumerate(lay.indices):
        y = x.copy()
        y[:, :, list(idx)] = rng.normal(size=(3, 16, len(idx))) * 5
        out = encode_style(y, model, lay)
        for q in range(3):
            if q != p:
                assert np.array_equal(out[:, q], base[:, q])
        assert not np.array_equal(out[:, p], base[:, p])
    # permuting lower-body channel values leaves upper style untouched
    y = x.copy()
    y[:, :, list(lay.indices[2])] = y[:, :, list(lay.indices[2])][:, :, ::-1]
    assert np.array_equal(encode_style(y, model, lay)[:, 0], base[:, 0])


def test_encode_is_deterministic_and_checks_layout():
    cfg, model = _tiny()
    lay = make_part_layout(cfg.part_channels)
    x = np.random.default_rng(0).normal(size=(6, 5))
    a = encode_style(x, model, lay)
    assert a.shape == (3, 4)
    np.testing.assert_array_equal(a, encode_style(np.stack([x, x]), model, lay)[1])
    with pytest.raises(ValueError):
        encode_style(x, model, make_part_layout((1, 2, 2)))


def test_global_mode_shares_one_vector():
    cfg, model = _tiny("global")
    lay = make_part_layout(cfg.part_channels)
    s = encode_style(np.random.default_rng(0).normal(size=(2, 6, 5)), model, lay)
    np.testing.assert_array_equal(s[:, 0], s[:, 1])
    np.testing.assert_array_equal(s[:, 0], s[:, 2])


def test_checkpoint_and_csv(tmp_path):
    cfg, model = _tiny()
    lay = make_part_layout(cfg.part_channels)
    x = np.random.default_rng(0).normal(size=(2, 6, 5))
    model.save(tmp_path / "s.ckpt")
    back, _, _ = StyleEncoderModel.load(tmp_path / "s.ckpt")
    np.testing.assert_array_equal(encode_style(x, back, lay), encode_style(x, model, lay))
    emb = encode_style(x, model, lay)
    dump_embeddings_csv(tmp_path / "e.csv", ["a", "b"], emb, lay.names)
    rows = (tmp_path / "e.csv").read_text().strip().splitlines()
    assert rows[0].split(",")[:3] == ["clip_id", "part", "s0"] and len(rows) == 7
    assert float(rows[1].split(",")[2]) == emb[0, 0, 0]
