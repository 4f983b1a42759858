"""Transformer VAE mapping a variable-length clip to one continuous latent and back.

The encoder reads frame embeddings behind two learnable distribution tokens whose
outputs become mu and log sigma; the decoder's learned per-frame queries
cross-attend to a single memory token made from z. Both stacks use long skips.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

import tensor_core as tc
from config import VAEConfig
from data_processor import destandardize, group_by_length
from errors import LengthError
from nn_layers import (LayerNorm, Linear, Module, Parameter, TransformerBlock, init_normal,
                       padding_mask, read_checkpoint, save_module, sinusoidal_embedding, skip_forward)
from synth_corpus import JOINTS

logger = logging.getLogger(__name__)

LOG_SIGMA_BOUND = 10.0


@dataclass
class LatentDistribution:
    mu: tc.Tensor
    log_sigma: tc.Tensor

    @property
    def sigma(self):
        return tc.exp(self.log_sigma)

    def kl(self):
        """Per-sample KL(N(mu, sigma^2) || N(0, I)) summed over latent dims"""
        sigma_sq = tc.exp(self.log_sigma * 2.0)
        terms = self.mu * self.mu + sigma_sq - 1.0 - self.log_sigma * 2.0
        return terms.sum(axis=-1) * 0.5


@dataclass
class Latent:
    z: tc.Tensor
    source: str = "sampled"

    def numpy(self):
        return self.z.data


def reparameterize(dist, seed=None, eps=None):
    """z = mu + sigma * eps with eps drawn from a generator seeded by ``seed``"""
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(dist.mu.shape)
    return Latent(dist.mu + dist.sigma * np.asarray(eps, dtype=dist.mu.dtype), "sampled")


def kl_divergence(dist):
    return dist.kl().mean()


def vae_loss(clip, recon, dist, lambda_kl, valid=None, kind="mse"):
    """(total, recon_term, kl_term); recon averaged over valid frames and dims"""
    mask = None if valid is None else np.asarray(valid, dtype=bool)[..., None]
    if kind == "smooth_l1":
        recon_term = tc.smooth_l1_loss(recon, clip, mask)
    else:
        recon_term = tc.mse_loss(recon, clip, mask)
    kl_term = kl_divergence(dist)
    return recon_term + kl_term * lambda_kl, recon_term, kl_term


class MotionVAE(Module):
    def __init__(self, config=None, rng=None):
        config = config or VAEConfig()
        rng = rng or np.random.default_rng(config.seed)
        self._config = config
        d = config.model_dim

        self.frame_embed = Linear(config.motion_dims, d, rng)
        self.dist_tokens = Parameter(init_normal(rng, (2, d)))
        self.encoder = [TransformerBlock(d, config.heads, config.ffn_dim, rng) for _ in range(config.layers)]
        self.enc_norm = LayerNorm(d)
        self.mu_head = Linear(d, config.latent_dim, rng)
        self.log_sigma_head = Linear(d, config.latent_dim, rng)

        self.latent_in = Linear(config.latent_dim, d, rng)
        self.queries = Parameter(init_normal(rng, (config.max_frames, d)))
        self.decoder = [TransformerBlock(d, config.heads, config.ffn_dim, rng, cross_dim=d)
                        for _ in range(config.layers)]
        self.dec_norm = LayerNorm(d)
        self.out_proj = Linear(d, config.motion_dims, rng)

        # Train-set statistics of mu, so diffusion can work in unit scale
        self.register_buffer("latent_mean", np.zeros(config.latent_dim))
        self.register_buffer("latent_std", np.ones(config.latent_dim))

    @property
    def config(self):
        return self._config

    def _check_length(self, length):
        if not self._config.min_frames <= length <= self._config.max_frames:
            raise LengthError(f"clip length {length} outside [{self._config.min_frames}, {self._config.max_frames}]")

    def encode(self, values, valid=None):
        """[B, L, D] standardized clips (or one [L, D] clip) -> LatentDistribution"""
        values = np.asarray(values)
        if values.ndim == 2:
            values = values[None]
        batch, length, _ = values.shape
        self._check_length(length if valid is None else int(np.asarray(valid).sum(axis=1).max()))
        if valid is None:
            valid = np.ones((batch, length), dtype=bool)

        pos = sinusoidal_embedding(np.arange(length), self._config.model_dim)
        frames = self.frame_embed(values.astype(tc.get_dtype())) + pos
        tokens = tc.concat([self.dist_tokens.reshape(1, 2, -1) * np.ones((batch, 1, 1), dtype=tc.get_dtype()),
                            frames], axis=1)
        key_valid = np.concatenate([np.ones((batch, 2), dtype=bool), valid], axis=1)
        h = skip_forward(self.encoder, tokens, mask=padding_mask(key_valid))
        h = self.enc_norm(h)
        mu = self.mu_head(h[:, 0, :])
        log_sigma = tc.clamp(self.log_sigma_head(h[:, 1, :]), -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)
        return LatentDistribution(mu, log_sigma)

    def decode(self, z, length, valid=None):
        """Latent [B, d] -> [B, length, D] reconstruction; exactly ``length`` frames"""
        self._check_length(length)
        z = z.z if isinstance(z, Latent) else tc.as_tensor(z)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        batch = z.shape[0]
        memory = self.latent_in(z).reshape(batch, 1, -1)
        queries = self.queries[:length].reshape(1, length, -1) * np.ones((batch, 1, 1), dtype=tc.get_dtype())
        mask = None if valid is None else padding_mask(valid)
        h = skip_forward(self.decoder, queries, mask=mask, memory=memory)
        return self.out_proj(self.dec_norm(h))

    def __call__(self, values, valid=None, seed=None):
        dist = self.encode(values, valid)
        latent = reparameterize(dist, seed)
        recon = self.decode(latent, np.asarray(values).shape[-2], valid)
        return recon, dist, latent

    # Latent scaling shared with the diffusion head

    def fit_latent_stats(self, mus):
        mus = np.asarray(mus, dtype=np.float64)
        self.latent_mean = mus.mean(axis=0)
        self.latent_std = np.maximum(mus.std(axis=0), 1e-6)
        logger.info("Latent stats fitted on %d clips: |mean| max %.3f, std mean %.3f",
                    len(mus), np.abs(self.latent_mean).max(), self.latent_std.mean())

    def normalize_latent(self, z):
        return (np.asarray(z) - self.latent_mean) / self.latent_std

    def denormalize_latent(self, z):
        return np.asarray(z) * self.latent_std + self.latent_mean

    # Batched inference helpers

    def encode_mean(self, clips, batch_size=64):
        """Mean latents of standardized clips, batched by equal length; [N, d] array"""
        out = np.zeros((len(clips), self._config.latent_dim))
        with tc.no_grad():
            for length, idx in group_by_length([c.shape[0] for c in clips]).items():
                for start in range(0, len(idx), batch_size):
                    chunk = idx[start:start + batch_size]
                    dist = self.encode(np.stack([clips[i] for i in chunk]))
                    out[chunk] = dist.mu.data
        return out

    def decode_latents(self, z, lengths):
        """Decode each row of ``z`` to its own length; list of [L, D] arrays"""
        z = np.atleast_2d(np.asarray(z))
        outputs = [None] * len(z)
        with tc.no_grad():
            for length, idx in group_by_length(lengths).items():
                recon = self.decode(z[idx].astype(tc.get_dtype()), length)
                for j, i in enumerate(idx):
                    outputs[i] = recon.data[j].astype(np.float64)
        return outputs

    def save(self, path, metadata=None):
        meta = {"kind": "vae", "config": self._config.to_dict()}
        meta.update(metadata or {})
        save_module(self, path, meta)

    @classmethod
    def from_checkpoint(cls, path):
        arrays, metadata = read_checkpoint(path)
        model = cls(VAEConfig.from_dict(metadata["config"]))
        model.load_state_dict(arrays)
        return model


def reconstruction_metrics(vae, clips, stats):
    """Per-clip MSE in standardized units and per-joint L2 error in corpus units"""
    rows = []
    mus = vae.encode_mean(clips)
    recons = vae.decode_latents(mus, [c.shape[0] for c in clips])
    for i, (clip, recon) in enumerate(zip(clips, recons)):
        row = {"index": i, "frames": clip.shape[0], "mse": float(np.mean((clip - recon) ** 2))}
        raw_true = destandardize(clip, stats).reshape(clip.shape[0], len(JOINTS), 3)
        raw_recon = destandardize(recon, stats).reshape(clip.shape[0], len(JOINTS), 3)
        l2 = np.linalg.norm(raw_true - raw_recon, axis=-1).mean(axis=0)
        row.update({f"l2_{joint}": float(v) for joint, v in zip(JOINTS, l2)})
        rows.append(row)
    return pd.DataFrame(rows)
