import numpy as np
import pytest

import tensor_core as tc
from config import DiffusionConfig
from diffusion_head import (DiffusionHead, make_schedule, posterior, predict_start_from_noise, q_sample,
                            sampling_timesteps)
from errors import ConfigError, ContractError


@pytest.fixture
def head(float64, diffusion_config):
    return DiffusionHead(diffusion_config)


def test_schedule_is_monotone():
    schedule = make_schedule(1000)
    assert np.all(np.diff(schedule.betas) > 0)
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert 0.0 < schedule.alpha_bars[-1] < schedule.alpha_bars[0] < 1.0
    assert schedule.betas[0] == pytest.approx(0.00085)


@pytest.mark.parametrize("start, end, T", [(0.02, 0.01, 100), (0.0, 0.01, 100), (0.001, 0.01, 1)])
def test_bad_schedule(start, end, T):
    with pytest.raises(ConfigError):
        make_schedule(T, start, end)


def test_timestep_range_is_checked():
    schedule = make_schedule(10)
    with pytest.raises(ContractError):
        schedule.alpha_bar(0)
    with pytest.raises(ContractError):
        schedule.alpha_bar(11)


def test_noising_inverts_given_the_noise(rng):
    schedule = make_schedule(1000)
    z0 = rng.normal(size=(6, 4))
    eps = rng.normal(size=(6, 4))
    t = np.array([1, 10, 100, 500, 900, 1000])
    z_t = q_sample(schedule, z0, t, eps)
    assert np.max(np.abs(predict_start_from_noise(schedule, z_t, t, eps) - z0)) < 1e-10


def test_sampling_timesteps():
    ts = sampling_timesteps(1000, 100)
    assert len(ts) == 100
    assert ts[0] == 1000 and ts[-1] == 1
    assert np.all(np.diff(ts) < 0)
    assert sampling_timesteps(1000, 1).tolist() == [1000]
    with pytest.raises(ConfigError):
        sampling_timesteps(1000, 0)


def test_last_posterior_step_returns_the_prediction(rng):
    schedule = make_schedule(100)
    x0, z_t = rng.normal(size=4), rng.normal(size=4)
    mean, variance = posterior(schedule, x0, z_t, 5, 0)
    assert variance == 0.0
    assert np.allclose(mean, x0)


def test_attention_aggregator_accepts_any_holder_count(head, rng):
    assert head.aggregate_condition(rng.normal(size=(3, 2, 8))).shape == (3, 8)
    assert head.aggregate_condition(rng.normal(size=(5, 8))).shape == (1, 8)
    with pytest.raises(ContractError):
        head.aggregate_condition(np.zeros((1, 0, 8)))


def test_linear_aggregator_needs_configured_holders(float64, diffusion_config, rng):
    diffusion_config.aggregator = "linear"
    head = DiffusionHead(diffusion_config)
    assert head.aggregate_condition(rng.normal(size=(3, 2, 8))).shape == (3, 8)
    with pytest.raises(ContractError):
        head.aggregate_condition(rng.normal(size=(3, 3, 8)))


def test_guided_noise_combines_branches(head, rng):
    z_t = rng.normal(size=(2, 4))
    cond = head.aggregate_condition(rng.normal(size=(2, 2, 8)))
    eps_c = head.guided_noise(z_t, 7, cond, 1.0)
    eps_u = head.guided_noise(z_t, 7, cond, 0.0)
    assert np.allclose(head.guided_noise(z_t, 7, cond, 3.0), eps_u + 3.0 * (eps_c - eps_u))


def test_unit_guidance_matches_unguided_sampling(head, rng):
    states = rng.normal(size=(2, 8))
    guided = head.ddpm_sample(states, omega=1.0, seed=5)
    plain = head.ddpm_sample(states, omega=4.0, seed=5, guidance=False)
    assert np.array_equal(guided, plain)
    assert guided.shape == (4,)


def test_zero_guidance_is_unconditional_sampling(head, rng):
    states = rng.normal(size=(2, 8))
    assert np.array_equal(head.ddpm_sample(states, omega=0.0, seed=6), head.ddpm_sample(None, seed=6))


def test_sampling_is_seeded(head, rng):
    states = rng.normal(size=(3, 2, 8))
    a = head.ddpm_sample(states, seed=1)
    assert a.shape == (3, 4)
    assert np.array_equal(a, head.ddpm_sample(states, seed=1))
    assert not np.array_equal(a, head.ddpm_sample(states, seed=2))
    assert np.all(np.isfinite(head.ddpm_sample(None, seed=1)))


def test_negative_guidance(head, rng):
    with pytest.raises(ConfigError):
        head.ddpm_sample(rng.normal(size=(2, 8)), omega=-1.0)


def test_dropped_conditions_train_the_null_embedding(head, rng):
    cond = head.aggregate_condition(rng.normal(size=(4, 2, 8)))
    loss = head.diffusion_loss(rng.normal(size=(4, 4)), cond, np.random.default_rng(0), p_drop=1.0)
    tc.backward(loss)
    assert float(loss.data) > 0.0
    assert np.any(head.null_embed.grad != 0.0)


def test_kept_conditions_leave_the_null_embedding_alone(head, rng):
    cond = head.aggregate_condition(rng.normal(size=(4, 2, 8)))
    tc.backward(head.diffusion_loss(rng.normal(size=(4, 4)), cond, np.random.default_rng(0), p_drop=0.0))
    assert head.null_embed.grad is None or not np.any(head.null_embed.grad)
    assert np.any(head.agg_query.grad != 0.0)


def test_mse_head_regresses_the_latent_directly(float64, diffusion_config, rng):
    diffusion_config.head = "mse"
    head = DiffusionHead(diffusion_config)
    assert not any(name.startswith("denoiser.") for name in head.named_parameters())
    states = rng.normal(size=(3, 2, 8))
    z0 = head.ddpm_sample(states, steps=5, seed=0)
    assert np.array_equal(z0, head.ddpm_sample(states, steps=10, seed=1))
    cond = head.aggregate_condition(states)
    assert float(head.diffusion_loss(z0, cond, rng).data) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ConfigError):
        head.denoise(z0, 5, cond)


def test_mse_head_gradients(float64, diffusion_config, rng):
    diffusion_config.head = "mse"
    head = DiffusionHead(diffusion_config)
    states, z0 = rng.normal(size=(3, 2, 8)), rng.normal(size=(3, 4))
    assert tc.grad_check(lambda: head.diffusion_loss(z0, head.aggregate_condition(states), rng),
                         head.parameters(), max_coords=4) < 1e-4


def test_unknown_head():
    with pytest.raises(ConfigError):
        DiffusionConfig(head="flow").validate()
