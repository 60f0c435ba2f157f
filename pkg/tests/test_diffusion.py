import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mimicparts.numerics as nx
from mimicparts.diffusion import (
    Conditions,
    DiffusionConfig,
    Denoiser,
    GuidanceWeights,
    NoiseSchedule,
    PartAttentionBlock,
    cfg_denoise,
    denoise,
    fuse_parts,
    fuse_style_content,
    make_schedule,
    q_sample,
    q_step,
    sample,
    sample_latent,
    sampling_manifest,
    sampling_timesteps,
    learning_rate,
    train_diffusion,
    training_loss,
)
from mimicparts.numerics import Tensor, grad_check_params


def tiny_config(**kw):
    base = dict(part_dims=(2, 2, 2), n_tokens=2, downscale=2, d_model=6, n_heads=3, n_groups=1, ff_mult=1,
                d_style=2, d_content=2, d_rhythm=2, d_emotion=2, n_steps=10)
    base.update(kw)
    return DiffusionConfig(**base)


def small_config(**kw):
    base = dict(part_dims=(3, 4, 2), n_tokens=4, downscale=4, d_model=12, n_heads=6, n_groups=2,
                d_style=5, d_content=3, d_rhythm=2, d_emotion=3, n_steps=50)
    base.update(kw)
    return DiffusionConfig(**base)


def random_conditions(cfg, b, rng):
    f = cfg.n_frames
    return Conditions(rng.normal(size=(b, cfg.n_parts, cfg.d_style)), rng.normal(size=(b, f, cfg.d_content)),
                      rng.normal(size=(b, f, cfg.d_rhythm)), rng.normal(size=(b, f, cfg.d_emotion)))


# schedule ------------------------------------------------------------------------------

def test_single_step_schedule():
    s = NoiseSchedule(np.array([0.99]))
    assert s.alpha_bar[1] == 0.99 and s.alpha_bar[0] == 1.0


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_invariants(kind):
    s = make_schedule(1000, kind)
    assert np.all((s.alphas[1:] > 0) & (s.alphas[1:] < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(s.alphas), rtol=0, atol=0)
    with pytest.raises(ValueError):
        make_schedule(10, "quadratic")
    with pytest.raises(ValueError):
        make_schedule(0)


def test_q_sample_examples():
    s = make_schedule(100)
    z0 = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(q_sample(z0, 5, np.zeros_like(z0), s), np.sqrt(s.alpha_bar[5]) * z0)
    near = NoiseSchedule(np.full(3, 1 - 1e-12))
    np.testing.assert_allclose(q_sample(z0, 1, np.ones_like(z0), near), z0, atol=2e-6)
    for bad in (0, 101):
        with pytest.raises(ValueError):
            q_sample(z0, bad, z0, s)


def test_iterated_steps_match_closed_form_marginal():
    s = make_schedule(200, "linear")
    rng = np.random.default_rng(42)
    n, t = 100_000, 10
    z0 = np.array([1.5, -0.7])
    z = np.tile(z0, (n, 1))
    for k in range(1, t + 1):
        z = q_step(z, k, rng.normal(size=z.shape), s)
    mean, var = np.sqrt(s.alpha_bar[t]) * z0, 1 - s.alpha_bar[t]
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2 / (n - 1))
    assert np.all(np.abs(z.mean(0) - mean) < 3 * se_mean)
    assert np.all(np.abs(z.var(0, ddof=1) - var) < 3 * se_var)
    direct = q_sample(np.tile(z0, (n, 1)), t, rng.normal(size=(n, 2)), s)
    np.testing.assert_allclose(direct.mean(0), mean, atol=0.01 * np.abs(mean).max())
    np.testing.assert_allclose(direct.var(0), var, rtol=0.01)


# blocks --------------------------------------------------------------------------------

def test_self_block_single_token_identity_degenerate():
    rng = np.random.default_rng(0)
    blk = PartAttentionBlock(3, 4, 2, rng)
    for lin in (blk.q, blk.k, blk.v):
        lin.weight.data = np.tile(np.eye(4), (3, 1, 1))
        lin.bias.data[:] = 0
    blk.fc.weight.data = np.eye(12)
    blk.fc.bias.data[:] = 0
    f = Tensor(rng.normal(size=(2, 3, 1, 4)))
    pre = blk.attend(f)
    np.testing.assert_allclose(pre.data, f.data, atol=1e-15)
    fused = blk.fc(fuse_parts(pre)).data
    np.testing.assert_allclose(fused, fuse_parts(f).data, atol=1e-15)


def test_self_block_part_isolation():
    rng = np.random.default_rng(1)
    blk = PartAttentionBlock(3, 4, 2, rng)
    f = rng.normal(size=(2, 3, 5, 4))
    base = blk.attend(Tensor(f)).data
    g = f.copy()
    g[:, 2] += rng.normal(size=(2, 5, 4))
    out = blk.attend(Tensor(g)).data
    assert np.array_equal(out[:, :2], base[:, :2]) and not np.array_equal(out[:, 2], base[:, 2])


def test_cross_block_equal_condition_tokens():
    rng = np.random.default_rng(2)
    blk = PartAttentionBlock(3, 4, 2, rng, context_dim=3)
    f = Tensor(rng.normal(size=(2, 3, 5, 4)))
    ctx = np.tile(rng.normal(size=(2, 1, 3)), (1, 7, 1))
    pre = blk.attend(f, ctx).data
    kv = blk.ctx_in(Tensor(ctx[:, None])).data
    v = (kv @ blk.v.weight.data + blk.v.bias.data)[:, :, :1]  # value of the (shared) token
    np.testing.assert_allclose(pre, np.broadcast_to(v, pre.shape), atol=1e-12)
    q = blk.q(f).data.reshape(2, 3, 5, 2, 2).transpose(0, 1, 3, 2, 4)
    k = blk.k(Tensor(kv)).data.reshape(2, 3, 7, 2, 2).transpose(0, 1, 3, 2, 4)
    scores = q @ np.swapaxes(k, -1, -2)
    w = np.exp(scores - scores.max(-1, keepdims=True))
    w /= w.sum(-1, keepdims=True)
    np.testing.assert_allclose(w, 1 / 7, atol=1e-12)
    with pytest.raises(ValueError):
        blk.attend(f)


def test_fuse_style_content_examples():
    rng = np.random.default_rng(3)
    b, n = 2, 32
    z = [rng.normal(size=(b, n, 64)) for _ in range(3)]
    a_c = rng.normal(size=(b, n, 32))
    zero = [np.zeros((b, 64))] * 3
    out = fuse_style_content(z, zero, a_c)
    assert out[0].shape == (b, n, 96)
    for zi, oi in zip(z, out):
        np.testing.assert_array_equal(oi.data, np.concatenate([zi, a_c], -1))
    s = [rng.normal(size=(b, 64)) for _ in range(3)]
    base = fuse_style_content(z, s, a_c)
    delta = rng.normal(size=(b, 64))
    moved = fuse_style_content(z, [s[0] + delta, s[1], s[2]], a_c)
    np.testing.assert_allclose(moved[0].data[..., :64] - base[0].data[..., :64],
                               np.broadcast_to(delta[:, None], (b, n, 64)), atol=1e-12)
    np.testing.assert_array_equal(moved[0].data[..., 64:], base[0].data[..., 64:])
    for i in (1, 2):
        np.testing.assert_array_equal(moved[i].data, base[i].data)
    with pytest.raises(ValueError):
        fuse_style_content(z, s, a_c[:, :30])


# denoiser ------------------------------------------------------------------------------

def test_denoise_shape_determinism_and_null_path():
    cfg = small_config()
    model = Denoiser(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, cfg.n_tokens, sum(cfg.part_dims)))
    cond = random_conditions(cfg, 3, rng)
    out = denoise(z, 7, cond, model)
    assert out.shape == z.shape
    np.testing.assert_array_equal(out, denoise(z, 7, cond, model))
    a = denoise(z, 7, Conditions(), model)
    b = denoise(z, 7, Conditions(), model)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        denoise(z[:, :3], 7, cond, model)


def test_keep_mask_matches_null_condition():
    cfg = small_config()
    model = Denoiser(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    z = rng.normal(size=(2, cfg.n_tokens, sum(cfg.part_dims)))
    cond = random_conditions(cfg, 2, rng)
    masked = Conditions(cond.style, cond.content, cond.rhythm, cond.emotion,
                        keep={n: np.array([False, False]) for n in ("style", "content", "rhythm", "emotion")})
    np.testing.assert_allclose(denoise(z, 3, masked, model), denoise(z, 3, Conditions(), model), atol=1e-12)


def test_denoiser_part_isolation_first_block():
    cfg = small_config()
    model = Denoiser(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(3)
    z = rng.normal(size=(2, cfg.n_tokens, sum(cfg.part_dims)))
    cond = random_conditions(cfg, 2, rng)
    _, base = model(z, 4, cond, return_pre=True)
    z2 = z.copy()
    z2[..., 7:] += 1.0  # lower part slice
    s2 = cond.style.copy()
    s2[:, 2] += 1.0
    _, pre = model(z2, 4, Conditions(s2, cond.content, cond.rhythm, cond.emotion), return_pre=True)
    assert np.array_equal(pre[0].data[:, :2], base[0].data[:, :2])
    assert not np.array_equal(pre[0].data[:, 2], base[0].data[:, 2])


def test_training_loss_gradients_tiny_model():
    cfg = tiny_config()
    model = Denoiser(cfg, np.random.default_rng(5))
    assert model.n_parameters() <= 1000
    rng = np.random.default_rng(6)
    z0 = rng.normal(size=(2, cfg.n_tokens, sum(cfg.part_dims)))
    cond = random_conditions(cfg, 2, rng)
    sched = make_schedule(cfg.n_steps)

    def loss():
        return training_loss(model, z0, cond, sched, np.random.default_rng(9), p_drop=0.0)[0]

    report = grad_check_params(loss, model.parameters(), h=1e-5)
    assert report.passed, report


def test_perfect_predictor_has_zero_loss():
    z0 = np.random.default_rng(0).normal(size=(4, 3))
    assert nx.smooth_l1(Tensor(z0), Tensor(z0)).item() == 0.0


def test_condition_drop_rates():
    cfg = tiny_config()

    class Stub:
        config = cfg

        def __call__(self, z_t, t, c):
            return Tensor(np.zeros_like(z_t))

    rng = np.random.default_rng(11)
    sched = make_schedule(cfg.n_steps)
    z0 = np.zeros((1, cfg.n_tokens, sum(cfg.part_dims)))
    counts = {"style": 0, "content": 0, "rhythm_emotion": 0}
    for _ in range(10_000):
        _, info = training_loss(Stub(), z0, Conditions(), sched, rng)
        for g, d in info["dropped"].items():
            counts[g] += d
    for g, c in counts.items():
        assert abs(c / 10_000 - 0.1) <= 0.01, (g, c)


# guidance and sampling -----------------------------------------------------------------

@pytest.mark.parametrize("split_re", [False, True])
def test_cfg_reductions(split_re):
    cfg = small_config()
    model = Denoiser(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(4)
    z = rng.normal(size=(2, cfg.n_tokens, sum(cfg.part_dims)))
    cond = random_conditions(cfg, 2, rng)
    run = lambda w: cfg_denoise(model, z, 9, cond, GuidanceWeights(*w), split_re=split_re)
    uncond = denoise(z, 9, Conditions(), model)
    assert np.abs(run((0, 0, 0)) - uncond).max() <= 1e-12
    assert np.abs(run((1, 0, 0)) - denoise(z, 9, cond.with_only("content"), model)).max() <= 1e-12
    assert np.abs(run((1, 1, 0)) - denoise(z, 9, cond.with_only("content", "style"), model)).max() <= 1e-12
    full = denoise(z, 9, cond.with_only("content", "rhythm", "emotion"), model)
    if not split_re:
        assert np.abs(run((1, 0, 1)) - full).max() <= 1e-12


def test_guidance_weights_must_be_finite():
    with pytest.raises(ValueError):
        GuidanceWeights(1.0, np.inf, 1.0)


def test_sampling_steps_and_determinism(tmp_path):
    cfg = small_config()
    model = Denoiser(cfg, np.random.default_rng(0))
    sched = make_schedule(cfg.n_steps)
    cond = random_conditions(cfg, 2, np.random.default_rng(1))
    w = GuidanceWeights()
    a = sample_latent(model, sched, cond, w, 5, seed=3)
    b = sample_latent(model, sched, cond, w, 5, seed=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2, cfg.n_tokens, sum(cfg.part_dims))
    motion = sample(model, sched, cond, w, 5, 3, latent_to_motion=lambda z: np.repeat(z, 4, axis=1))
    assert motion.shape[1] == 4 * cfg.n_tokens
    assert sampling_timesteps(50, 5) == [50, 38, 26, 13, 1]
    with pytest.raises(ValueError):
        sampling_timesteps(50, 51)
    man = sampling_manifest(3, w, sched, 5, cond)
    assert man["seed"] == 3 and man["conditions"]["rhythm"] is not None


def test_train_diffusion_reduces_loss_and_is_reproducible():
    cfg = small_config(steps=200, batch_size=8, lr=3e-3, lr_schedule="constant")
    rng = np.random.default_rng(0)
    n = 16
    cond = random_conditions(cfg, n, rng)
    latents = np.repeat(cond.content[:, ::cfg.downscale, :1], sum(cfg.part_dims), axis=2)
    model, log, _, _ = train_diffusion(latents, cond, cfg)
    losses = log.losses()
    sched = make_schedule(cfg.n_steps)

    def held_loss(m):
        rng_eval = np.random.default_rng(99)
        return np.mean([training_loss(m, latents, cond, sched, rng_eval, p_drop=0.0)[0].item() for _ in range(20)])

    assert held_loss(model) < 0.5 * held_loss(Denoiser(cfg, np.random.default_rng(cfg.seed)))
    _, log2, _, _ = train_diffusion(latents, cond, cfg)
    np.testing.assert_array_equal(log2.losses(), losses)


def test_checkpoint_roundtrip(tmp_path):
    cfg = small_config()
    model = Denoiser(cfg, np.random.default_rng(0))
    model.save(tmp_path / "d.ckpt", extra={"step": 3}, extra_tensors={"stats.mean": np.ones(3)})
    back, extra, rest = Denoiser.load(tmp_path / "d.ckpt")
    z = np.random.default_rng(1).normal(size=(1, cfg.n_tokens, sum(cfg.part_dims)))
    np.testing.assert_array_equal(denoise(z, 2, Conditions(), back), denoise(z, 2, Conditions(), model))
    assert extra["step"] == 3 and np.array_equal(rest["stats.mean"], np.ones(3))


def test_cosine_learning_rate_schedule():
    cfg = small_config(lr=2e-3)
    assert learning_rate(cfg, 0, 100) == 2e-3
    assert learning_rate(cfg, 50, 100) == pytest.approx(2e-3 * (0.05 + 0.95 * 0.5))
    assert learning_rate(cfg, 100, 100) == pytest.approx(1e-4)
    rates = [learning_rate(cfg, k, 100) for k in range(101)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert learning_rate(small_config(lr=2e-3, lr_schedule="constant"), 70, 100) == 2e-3
    with pytest.raises(ValueError):
        small_config(lr_schedule="step")
