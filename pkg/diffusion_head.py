"""Conditional DDPM over motion latents with an AdaLN-modulated MLP denoiser.

Timesteps are 1-based: t in [1, T], ``alpha_bars[t - 1]`` is the cumulative
product up to step t.
"""
import logging
from dataclasses import dataclass

import numpy as np

import tensor_core as tc
from config import DiffusionConfig
from errors import ConfigError, ContractError
from nn_layers import (MLP, Linear, Module, Parameter, init_normal, merge_heads,
                       scaled_dot_attention, sinusoidal_embedding, split_heads)

logger = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "scaled_linear"

    @property
    def T(self):
        return len(self.betas)

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ContractError(f"timestep out of range [1, {self.T}]: {t}")
        return t.astype(np.int64)

    def alpha_bar(self, t):
        return self.alpha_bars[self.check_t(t) - 1]


def make_schedule(T=1000, beta_start=0.00085, beta_end=0.012):
    """Scaled-linear betas: linear in sqrt(beta) between the endpoints"""
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ConfigError(f"beta endpoints must satisfy 0 < start < end < 1, got ({beta_start}, {beta_end})")
    if T < 2:
        raise ConfigError("a noise schedule needs T >= 2")
    betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2
    betas[0] = beta_start
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def _column(values, like):
    """Per-sample scalars shaped to broadcast against [B, d]"""
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(-1, *([1] * (np.ndim(like) - 1))) if values.ndim else values


def q_sample(schedule, z0, t, eps):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps"""
    abar = _column(schedule.alpha_bar(t), z0)
    return np.sqrt(abar) * np.asarray(z0, dtype=np.float64) + np.sqrt(1.0 - abar) * np.asarray(eps, dtype=np.float64)


def predict_start_from_noise(schedule, z_t, t, eps):
    abar = _column(schedule.alpha_bar(t), z_t)
    return (np.asarray(z_t, dtype=np.float64) - np.sqrt(1.0 - abar) * np.asarray(eps, dtype=np.float64)) / np.sqrt(abar)


def sampling_timesteps(T, steps):
    """Evenly strided, strictly decreasing timesteps ending at 1"""
    if not 1 <= steps <= T:
        raise ConfigError(f"sample steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T], dtype=np.int64)
    ts = 1 + np.floor(np.arange(steps) * (T - 1) / (steps - 1)).astype(np.int64)
    return ts[::-1].copy()


def posterior(schedule, x0, z_t, t, t_prev):
    """Mean and variance of q(z_{t_prev} | z_t, x0) for a strided step (t_prev=0 means the end)"""
    abar_t = schedule.alpha_bars[t - 1]
    abar_prev = schedule.alpha_bars[t_prev - 1] if t_prev > 0 else 1.0
    beta = 1.0 - abar_t / abar_prev
    mean = (np.sqrt(abar_prev) * beta / (1.0 - abar_t)) * x0 \
        + (np.sqrt(abar_t / abar_prev) * (1.0 - abar_prev) / (1.0 - abar_t)) * z_t
    variance = beta * (1.0 - abar_prev) / (1.0 - abar_t)
    return mean, variance


class AdaLNBlock(Module):
    """Residual MLP block whose normalized input is shifted/scaled and output gated by the condition"""

    def __init__(self, hidden, cond_in, rng):
        self.modulation = Linear(cond_in, 3 * hidden, rng)
        self.fc1 = Linear(hidden, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self._hidden = hidden

    def __call__(self, x, cond):
        h = self._hidden
        mod = self.modulation(cond)
        shift, scale, gate = mod[:, :h], mod[:, h:2 * h], mod[:, 2 * h:]
        normed = tc.layer_norm(x) * (scale + 1.0) + shift
        return x + gate * self.fc2(tc.gelu(self.fc1(normed)))


class Denoiser(Module):
    """eps_theta(z_t | t, c)"""

    def __init__(self, config, rng):
        cond_in = config.cond_dim + config.time_dim
        self.time_mlp = MLP(config.time_dim, config.time_dim, config.time_dim, rng)
        self.input_proj = Linear(config.latent_dim, config.hidden, rng)
        self.blocks = [AdaLNBlock(config.hidden, cond_in, rng) for _ in range(config.blocks)]
        self.final_mod = Linear(cond_in, 2 * config.hidden, rng)
        self.output_proj = Linear(config.hidden, config.latent_dim, rng)
        self._time_dim = config.time_dim
        self._hidden = config.hidden

    def __call__(self, z_t, t, c):
        z_t = tc.as_tensor(z_t)
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        t_emb = self.time_mlp(sinusoidal_embedding(t, self._time_dim))
        cond = tc.gelu(tc.concat([tc.as_tensor(c), t_emb], axis=1))
        x = self.input_proj(z_t)
        for block in self.blocks:
            x = block(x, cond)
        mod = self.final_mod(cond)
        x = tc.layer_norm(x) * (mod[:, self._hidden:] + 1.0) + mod[:, :self._hidden]
        return self.output_proj(x)


class DiffusionHead(Module):
    def __init__(self, config=None, rng=None):
        config = config or DiffusionConfig()
        config.validate()
        rng = rng or np.random.default_rng(config.seed)
        self._config = config
        self._schedule = make_schedule(config.timesteps, config.beta_start, config.beta_end)
        c = config.cond_dim
        if config.aggregator == "attention":
            self.agg_query = Parameter(init_normal(rng, (1, c)))
            self.agg_key = Linear(c, c, rng)
            self.agg_value = Linear(c, c, rng)
            self.agg_out = Linear(c, c, rng)
        else:
            self.agg_linear = Linear(config.holders * c, c, rng)
        null = np.zeros(c) if config.null_init == "zeros" else rng.standard_normal(c)
        self.null_embed = Parameter(null.astype(tc.get_dtype()))
        if config.head == "mse":
            # baseline without denoising: the condition is regressed onto the latent
            self.regressor = Linear(c, config.latent_dim, rng)
        else:
            self.denoiser = Denoiser(config, rng)

    @property
    def config(self):
        return self._config

    @property
    def schedule(self):
        return self._schedule

    def aggregate_condition(self, states):
        """[H, c] or [B, H, c] holder condition states -> [B, c] global condition"""
        states = tc.as_tensor(states)
        if states.ndim == 2:
            states = states.reshape(1, *states.shape)
        batch, holders, c = states.shape
        if holders == 0:
            raise ContractError("condition aggregation needs at least one holder state")
        if self._config.aggregator == "linear":
            if holders != self._config.holders:
                raise ContractError(f"linear aggregator expects {self._config.holders} holders, got {holders}")
            return self.agg_linear(states.reshape(batch, holders * c))
        heads = self._config.aggregator_heads
        query = self.agg_query.reshape(1, 1, c) * np.ones((batch, 1, 1), dtype=tc.get_dtype())
        q = split_heads(query, heads)
        k = split_heads(self.agg_key(states), heads)
        v = split_heads(self.agg_value(states), heads)
        pooled, _ = scaled_dot_attention(q, k, v)
        return self.agg_out(merge_heads(pooled).reshape(batch, c))

    def null_condition(self, batch):
        return self.null_embed.reshape(1, -1) * np.ones((batch, 1), dtype=tc.get_dtype())

    def denoise(self, z_t, t, c):
        if self._config.head == "mse":
            raise ConfigError("the mse head has no denoiser")
        return self.denoiser(z_t, t, c)

    def diffusion_loss(self, z0, c, rng, p_drop=None, t=None, eps=None):
        """||eps - eps_theta(z_t | t, c)||^2 summed over latent dims, mean over the batch.

        With probability p_drop a sample's condition is replaced by the null embedding.
        The mse head instead scores ||z0 - W c||^2 directly.
        """
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        c = tc.as_tensor(c)
        batch = z0.shape[0]
        if self._config.head == "mse":
            diff = self.regressor(c) - z0.astype(tc.get_dtype())
            return (diff * diff).sum(axis=-1).mean()
        p_drop = self._config.p_drop if p_drop is None else p_drop
        t = rng.integers(1, self._schedule.T + 1, size=batch) if t is None else np.broadcast_to(t, (batch,))
        eps = rng.standard_normal(z0.shape) if eps is None else np.asarray(eps, dtype=np.float64)
        z_t = q_sample(self._schedule, z0, t, eps).astype(tc.get_dtype())
        if p_drop > 0:
            drop = (rng.random(batch) < p_drop).astype(tc.get_dtype())[:, None]
            c = c * (1.0 - drop) + self.null_condition(batch) * drop
        diff = self.denoise(z_t, t, c) - eps.astype(tc.get_dtype())
        return (diff * diff).sum(axis=-1).mean()

    def guided_noise(self, z_t, t, cond, omega, guidance=True):
        """eps_u + omega (eps_c - eps_u); omega 1 and 0 evaluate only one branch"""
        batch = z_t.shape[0]
        if cond is None or omega == 0:
            return self.denoise(z_t, t, self.null_condition(batch)).data
        eps_c = self.denoise(z_t, t, cond).data
        if not guidance or omega == 1:
            return eps_c
        eps_u = self.denoise(z_t, t, self.null_condition(batch)).data
        return eps_u + omega * (eps_c - eps_u)

    def ddpm_sample(self, cond_states, steps=None, omega=None, seed=0, guidance=True, noise_scale=1.0):
        """Ancestral sampling on a strided schedule; returns z0 of shape [d] (one condition) or [B, d].

        ``cond_states`` are holder condition states ([H, c] or [B, H, c]); None samples
        unconditionally. ``noise_scale=0`` gives the deterministic zero-noise sampler.
        """
        steps = steps or self._config.sample_steps
        omega = self._config.cfg_omega if omega is None else omega
        if omega < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {omega}")
        rng = np.random.default_rng(seed)
        with tc.no_grad():
            cond = None
            single = cond_states is not None and np.ndim(cond_states) == 2
            if cond_states is not None:
                cond = self.aggregate_condition(np.asarray(cond_states, dtype=tc.get_dtype()))
            batch = 1 if cond is None else cond.shape[0]
            if self._config.head == "mse":
                z = self.regressor(self.null_condition(batch) if cond is None else cond).data
                return z[0] if single or cond_states is None else z
            z = rng.standard_normal((batch, self._config.latent_dim))
            timesteps = sampling_timesteps(self._schedule.T, steps)
            for i, t in enumerate(timesteps):
                t_prev = int(timesteps[i + 1]) if i + 1 < len(timesteps) else 0
                eps = self.guided_noise(z.astype(tc.get_dtype()), int(t), cond, omega, guidance)
                x0 = predict_start_from_noise(self._schedule, z, int(t), eps)
                mean, variance = posterior(self._schedule, x0, z, int(t), t_prev)
                if t_prev > 0:
                    z = mean + noise_scale * np.sqrt(variance) * rng.standard_normal(z.shape)
                else:
                    z = mean
        return z[0] if single or cond_states is None else z
