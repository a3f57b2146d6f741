import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from baton.data import PoseSequence
from baton.diffusion import (NoiseSchedule, SamplingDivergedError, ddim_sigma, ddim_step,
                             ddim_timesteps, ddpm_step, make_schedule, predict_eps_from_x0,
                             predict_x0_from_eps, q_sample, sample, sample_flat)

SCHED = make_schedule()


# --- schedule -------------------------------------------------------------

def test_schedule_examples():
    assert SCHED.alpha_bars[0] == 1 - 1e-4
    assert np.array_equal(NoiseSchedule(np.array([0.5, 0.5])).alpha_bars, [0.5, 0.25])
    assert np.allclose(NoiseSchedule(np.array([0.1])).alpha_bars, [0.9], rtol=0, atol=1e-15)


def test_schedule_invariants():
    ab = SCHED.alpha_bars
    assert SCHED.T == 1000 and SCHED.betas[0] == 1e-4 and SCHED.betas[-1] == pytest.approx(0.02)
    assert np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab < 1))
    running = 1.0
    for t in range(SCHED.T):
        running *= 1.0 - SCHED.betas[t]
        assert abs(ab[t] - running) <= 1e-12 * running
    assert np.allclose(SCHED.alphas, 1 - SCHED.betas)
    assert SCHED.alpha_bar(0) == 1.0


@pytest.mark.parametrize("kw", [dict(T=0), dict(beta_start=0.0), dict(beta_start=0.1, beta_end=0.01),
                                dict(beta_end=1.0), dict(kind="cosine")])
def test_schedule_rejects_bad_arguments(kw):
    with pytest.raises(ValueError):
        make_schedule(**kw)


def test_schedule_is_read_only():
    with pytest.raises(ValueError):
        SCHED.betas[0] = 0.5


# --- forward process ------------------------------------------------------

def test_q_sample_examples(rng):
    x0 = rng.normal(size=(60, 26))
    for t in (1, 10, 500, 1000):
        ab = SCHED.alpha_bars[t - 1]
        assert np.array_equal(q_sample(x0, t, np.zeros_like(x0), SCHED), math.sqrt(ab) * x0)
        e = rng.normal(size=x0.shape)
        assert np.array_equal(q_sample(np.zeros_like(x0), t, e, SCHED), math.sqrt(1 - ab) * e)
    with pytest.raises(ValueError):
        q_sample(x0, 1, x0[:-1], SCHED)
    with pytest.raises(ValueError):
        q_sample(x0, 0, x0, SCHED)
    with pytest.raises(ValueError):
        q_sample(x0, 1001, x0, SCHED)


@pytest.mark.parametrize("t", [1, 100, 600, 1000])
def test_q_sample_monte_carlo(t):
    gen = np.random.default_rng(t)
    x0 = np.array([0.7, -0.4, 0.0])
    eps = gen.standard_normal((100_000, 3))
    xt = q_sample(np.broadcast_to(x0, eps.shape), t, eps, SCHED)
    ab = SCHED.alpha_bars[t - 1]
    mean_ref, std_ref = math.sqrt(ab) * x0, math.sqrt(1 - ab)
    # 1% of the scale of x_t
    scale = np.maximum(np.abs(mean_ref), std_ref)
    assert np.all(np.abs(xt.mean(0) - mean_ref) <= 0.01 * scale)
    assert np.all(np.abs(xt.std(0) - std_ref) <= 0.01 * std_ref)


def test_q_sample_batched_timesteps_torch():
    x0 = torch.randn(4, 5, 26, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([1, 7, 300, 1000])
    out = q_sample(x0, t, eps, SCHED)
    for i, ti in enumerate(t.tolist()):
        assert torch.allclose(out[i], q_sample(x0[i], ti, eps[i], SCHED), atol=1e-14)


# --- parameterization -----------------------------------------------------

def test_parameterization_inverses(rng):
    x0, e = rng.normal(size=(60, 26)), rng.normal(size=(60, 26))
    for t in (1, 50, 999, 1000):
        xt = q_sample(x0, t, e, SCHED)
        assert np.abs(predict_eps_from_x0(xt, t, x0, SCHED) - e).max() < 1e-10
        assert np.abs(predict_x0_from_eps(xt, t, e, SCHED) - x0).max() < 1e-10


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6, 26), elements=st.floats(-3, 3)),
       arrays(np.float64, (6, 26), elements=st.floats(-3, 3)),
       st.integers(1, 1000))
def test_round_trip_x0_eps_x0(x0, xt, t):
    eps = predict_eps_from_x0(xt, t, x0, SCHED)
    back = predict_x0_from_eps(xt, t, eps, SCHED)
    assert np.abs(back - x0).max() < 1e-10


# --- DDPM step ------------------------------------------------------------

def test_ddpm_final_step_ignores_noise(rng):
    xt, x0 = rng.normal(size=(4, 26)), rng.normal(size=(4, 26))
    a = ddpm_step(xt, 1, x0, rng.normal(size=xt.shape), SCHED)
    b = ddpm_step(xt, 1, x0, np.zeros_like(xt), SCHED)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        ddpm_step(xt, 0, x0, xt, SCHED)


def test_ddpm_oracle_denoiser_keeps_x0(rng):
    x0, e = rng.normal(size=(10, 26)), rng.normal(size=(10, 26))
    for t in (2, 30, 500, 1000):
        xt = q_sample(x0, t, e, SCHED)
        prev = ddpm_step(xt, t, x0, np.zeros_like(x0), SCHED)
        # x_{t-1} lies on the same x0 line: recover x0 from it with the implied noise
        ab_prev = SCHED.alpha_bars[t - 2]
        eps_prev = predict_eps_from_x0(prev, t - 1, x0, SCHED)
        rebuilt = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps_prev
        assert np.abs(predict_x0_from_eps(rebuilt, t - 1, eps_prev, SCHED) - x0).max() < 1e-8
        # and the step is exactly the posterior mean given (x_t, x0)
        beta, ab = SCHED.betas[t - 1], SCHED.alpha_bars[t - 1]
        mean = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0 \
            + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * xt
        assert np.abs(prev - mean).max() < 1e-8


def test_ddpm_degenerate_step(rng):
    sched = NoiseSchedule(np.array([0.1, 0.0, 0.2]))
    xt, x0 = rng.normal(size=(3, 26)), rng.normal(size=(3, 26))
    assert np.allclose(ddpm_step(xt, 2, x0, np.zeros_like(xt), sched), xt, atol=1e-12)


# --- DDIM step ------------------------------------------------------------

def test_ddim_examples(rng):
    xt, x0 = rng.normal(size=(5, 26)), rng.normal(size=(5, 26))
    a = ddim_step(xt, 500, 480, x0, 0.0, rng.normal(size=xt.shape), SCHED)
    b = ddim_step(xt, 500, 480, x0, 0.0, rng.normal(size=xt.shape), SCHED)
    assert np.array_equal(a, b)
    assert ddim_step(xt, 20, 0, x0, 0.7, xt, SCHED) is x0
    for bad in [dict(t_prev=500), dict(t_prev=600), dict(eta=1.5), dict(eta=-0.1)]:
        kw = dict(t_prev=480, eta=0.0) | bad
        with pytest.raises(ValueError):
            ddim_step(xt, 500, kw["t_prev"], x0, kw["eta"], xt, SCHED)


def test_ddim_oracle_denoiser_stays_on_forward_marginal(rng):
    x0, e = rng.normal(size=(10, 26)), rng.normal(size=(10, 26))
    for t, tp in [(1000, 980), (500, 1), (37, 36), (2, 1)]:
        xt = q_sample(x0, t, e, SCHED)
        eps_hat = predict_eps_from_x0(xt, t, x0, SCHED)
        out = ddim_step(xt, t, tp, x0, 0.0, np.zeros_like(x0), SCHED)
        assert np.abs(out - q_sample(x0, tp, eps_hat, SCHED)).max() < 1e-12


def _linear_coefficients(step):
    """Coefficients of (x_t, x0_hat, z) in a step that is linear in all three."""
    one, zero = np.ones(1), np.zeros(1)
    return np.array([step(one, zero, zero)[0], step(zero, one, zero)[0], step(zero, zero, one)[0]])


def test_ddim_eta_one_matches_ddpm_coefficients():
    for t in range(2, SCHED.T + 1):
        ddim = _linear_coefficients(lambda a, b, c: ddim_step(a, t, t - 1, b, 1.0, c, SCHED))
        ddpm = _linear_coefficients(lambda a, b, c: ddpm_step(a, t, b, c, SCHED))
        # mean coefficients coincide; the noise scale is the posterior std, not sqrt(beta)
        assert np.abs(ddim[:2] - ddpm[:2]).max() < 1e-10
        ab, ab_prev, beta = SCHED._ab_full[t], SCHED._ab_full[t - 1], SCHED.betas[t - 1]
        assert abs(ddim[2] - math.sqrt(beta * (1 - ab_prev) / (1 - ab))) < 1e-10
        assert abs(ddpm[2] - math.sqrt(beta)) < 1e-12
        assert ddim[2] == pytest.approx(ddim_sigma(t, t - 1, 1.0, SCHED), abs=1e-15)


def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 1000 and ts[-1] == 1
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert ddim_timesteps(1000, 1) == [1000]
    assert ddim_timesteps(10, 10) == list(range(10, 0, -1))
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)
    with pytest.raises(ValueError):
        ddim_timesteps(10, 0)


# --- samplers -------------------------------------------------------------

MU, SIGMA = 0.3, 0.5


def gaussian_oracle(x_t, t, emb):
    """Posterior mean of x0 given x_t when x0 ~ N(MU, SIGMA^2 I)."""
    ab = torch.tensor(SCHED._ab_full, dtype=x_t.dtype)[t].reshape(-1, 1, 1)
    gain = SIGMA**2 * ab.sqrt() / (ab * SIGMA**2 + 1 - ab)
    return MU + gain * (x_t - ab.sqrt() * MU)


def test_ddim_gaussian_oracle_moments():
    emb = torch.zeros(1000, 1, 4, dtype=torch.float64)
    x = sample_flat(gaussian_oracle, emb, SCHED, "ddim", 50, 0.0, rng_seed=3, clamp=None)
    assert x.shape == (1000, 1, 26)
    assert abs(x.mean().item() - MU) <= 0.05 * MU
    assert abs(x.std().item() - SIGMA) <= 0.10 * SIGMA


def test_ddpm_gaussian_oracle_moments():
    sched = make_schedule(100, beta_start=1e-3, beta_end=0.2)

    def oracle(x_t, t, emb):
        ab = torch.tensor(sched._ab_full, dtype=x_t.dtype)[t].reshape(-1, 1, 1)
        return MU + SIGMA**2 * ab.sqrt() / (ab * SIGMA**2 + 1 - ab) * (x_t - ab.sqrt() * MU)

    x = sample_flat(oracle, torch.zeros(1000, 1, 4, dtype=torch.float64), sched, "ddpm",
                    rng_seed=4, clamp=None)
    assert abs(x.mean().item() - MU) <= 0.05 * MU
    assert abs(x.std().item() - SIGMA) <= 0.10 * SIGMA


def _toy_model(x_t, t, emb):
    return 0.5 * torch.tanh(x_t) + emb.mean(-1, keepdim=True)


def test_sampler_determinism_and_guidance_identity():
    emb = torch.randn(3, 8, 5, generator=torch.Generator().manual_seed(1))
    a = sample_flat(_toy_model, emb, SCHED, "ddim", 20, 0.0, rng_seed=9)
    b = sample_flat(_toy_model, emb, SCHED, "ddim", 20, 0.0, rng_seed=9)
    assert torch.equal(a, b)
    c = sample_flat(_toy_model, emb, SCHED, "ddim", 20, 0.0, guidance_scale=1.0,
                    rng_seed=9, uncond_emb=torch.zeros_like(emb))
    assert torch.equal(a, c)
    d = sample_flat(_toy_model, emb, SCHED, "ddim", 20, 0.0, rng_seed=10)
    assert not torch.equal(a, d)
    g = sample_flat(_toy_model, emb, SCHED, "ddim", 20, 0.0, guidance_scale=2.0,
                    rng_seed=9, uncond_emb=torch.zeros_like(emb))
    assert not torch.equal(a, g)


def test_guidance_mixing_rule():
    seen = []

    def model(x_t, t, emb):
        out = torch.full_like(x_t, float(emb[0, 0, 0]))
        seen.append(out)
        return out

    cond, uncond = torch.ones(1, 2, 3), torch.zeros(1, 2, 3)
    x = sample_flat(model, cond, SCHED, "ddim", 1, 0.0, guidance_scale=1.2, uncond_emb=uncond,
                    clamp=None)
    # one DDIM jump to t=0 returns the guided x0 directly: 0 + 1.2 * (1 - 0)
    assert torch.allclose(x, torch.full_like(x, 1.2))
    with pytest.raises(ValueError):
        sample_flat(model, cond, SCHED, guidance_scale=2.0)


def test_x0_clamp():
    big = lambda x_t, t, emb: torch.full_like(x_t, 10.0)  # noqa: E731
    x = sample_flat(big, torch.zeros(1, 2, 3), SCHED, "ddim", 1, 0.0)
    assert torch.all(x == 1.5)


def test_sampling_divergence_reports_timestep():
    bad = lambda x_t, t, emb: torch.full_like(x_t, float("nan"))  # noqa: E731
    with pytest.raises(SamplingDivergedError) as info:
        sample_flat(bad, torch.zeros(1, 2, 3), SCHED, "ddim", 5, 0.0, clamp=None)
    assert info.value.t == 1000


def test_sample_returns_pose_sequences():
    emb = torch.randn(6, 4)
    one = sample(_toy_model, emb, SCHED, ddim_steps=5)
    assert isinstance(one, PoseSequence) and one.frames.shape == (6, 13, 2)
    many = sample(_toy_model, emb[None].repeat(2, 1, 1), SCHED, ddim_steps=5)
    assert len(many) == 2
    again = sample(_toy_model, emb[None].repeat(2, 1, 1), SCHED, ddim_steps=5)
    assert np.array_equal(many[1].frames, again[1].frames)
    assert not np.array_equal(many[0].frames, many[1].frames)
    with pytest.raises(ValueError):
        sample(_toy_model, emb, SCHED, method="euler")
