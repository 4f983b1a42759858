"""AdamW with parameter groups, loss composition and the staged training schedule.

Stage 0 pretrains the text branch on caption paraphrasing. Stage 1 learns
text-to-motion with the text branch frozen, stage 2 aligns both directions plus
motion prediction, stage 3 fine-tunes everything on instruction-formatted tasks.
"""
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

import tensor_core as tc
from array_store import load_arrays, read_metadata, save_arrays
from bimodal_backbone import BimodalBackbone
from config import BackboneConfig, DiffusionConfig, PARAM_GROUPS, TASKS
from data_processor import (load_normalizer, load_split, pad_clips, prefix_clip, sample_batch,
                            standardized_clips)
from diffusion_head import DiffusionHead
from errors import ConfigError, ContractError, NaNGradientError, PrerequisiteError
from motion_vae import MotionVAE, vae_loss
from nn_layers import Module, read_checkpoint, save_module
from synth_corpus import Vocabulary, make_instruction, paraphrase, INSTRUCTION_PHRASINGS

logger = logging.getLogger(__name__)


# Optimizer

@dataclass
class ParamGroup:
    name: str
    params: dict
    lr: float
    frozen: bool = False


def adamw_update(param, grad, m, v, step, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay Adam update; returns (param, m, v)"""
    beta1, beta2 = betas
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    return param - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param), m, v


class AdamW:
    """AdamW over named parameter groups; frozen groups get no gradient and no state"""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.groups = list(groups)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {}
        self.step_count = 0
        for group in self.groups:
            for p in group.params.values():
                p.requires_grad = not group.frozen

    def trainable(self):
        for group in self.groups:
            if not group.frozen:
                yield from group.params.items()

    def step(self, lr_scale=1.0):
        # Nothing moves if any gradient is non-finite
        for name, p in self.trainable():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NaNGradientError(name)
        self.step_count += 1
        for group in self.groups:
            if group.frozen:
                continue
            lr = group.lr * lr_scale
            for name, p in group.params.items():
                if p.grad is None:
                    continue
                m, v = self.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
                new, m, v = adamw_update(p.data, p.grad, m, v, self.step_count, lr,
                                         self.betas, self.eps, self.weight_decay)
                p.data = np.ascontiguousarray(new, dtype=p.data.dtype)
                self.state[name] = (m, v)

    def zero_grad(self):
        for group in self.groups:
            for p in group.params.values():
                p.grad = None

    def state_dict(self):
        arrays = {"step": np.array(self.step_count, dtype=np.int64)}
        for name, (m, v) in self.state.items():
            arrays[f"m/{name}"] = m
            arrays[f"v/{name}"] = v
        return arrays

    def load_state_dict(self, arrays):
        self.step_count = int(arrays["step"])
        self.state = {}
        for key, value in arrays.items():
            if key.startswith("m/"):
                name = key[2:]
                self.state[name] = (np.array(value), np.array(arrays[f"v/{name}"]))


def clip_grad_norm(params, max_norm):
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping"""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def warmup_scale(step, max_steps, warmup_frac):
    warmup = max(1, int(round(warmup_frac * max_steps)))
    return min(1.0, (step + 1) / warmup)


# Model bundle

class ModelBundle(Module):
    """Backbone plus diffusion head, saved and frozen together"""

    def __init__(self, backbone, diffusion):
        cb, cd = backbone.config, diffusion.config
        if (cb.latent_dim, cb.cond_dim, cb.holders) != (cd.latent_dim, cd.cond_dim, cd.holders):
            raise ConfigError("backbone and diffusion head disagree on latent_dim, cond_dim or holders")
        self.backbone = backbone
        self.diffusion = diffusion

    def parameter_groups(self):
        groups = {name: {} for name in PARAM_GROUPS}
        for name, p in self.named_parameters().items():
            if name.startswith("diffusion."):
                groups["diffusion"][name] = p
            elif name.startswith("backbone.text."):
                groups["text.base"][name] = p
            elif name == "backbone.wte_special":
                groups["text.special"][name] = p
            else:
                groups["motion"][name] = p
        return groups

    def apply_freeze(self, frozen_groups):
        for group, params in self.parameter_groups().items():
            for p in params.values():
                p.requires_grad = group not in frozen_groups

    def save(self, path, metadata=None):
        meta = {
            "kind": "bundle",
            "backbone_config": self.backbone.config.to_dict(),
            "diffusion_config": self.diffusion.config.to_dict(),
        }
        meta.update(metadata or {})
        save_module(self, path, meta)

    @classmethod
    def from_checkpoint(cls, path):
        arrays, metadata = read_checkpoint(path)
        bundle = cls(BimodalBackbone(BackboneConfig.from_dict(metadata["backbone_config"])),
                     DiffusionHead(DiffusionConfig.from_dict(metadata["diffusion_config"])))
        bundle.load_state_dict(arrays)
        return bundle, metadata


def build_bundle(vocab_size, backbone_config=None, diffusion_config=None):
    """Fresh bundle whose diffusion head matches the backbone's latent/condition geometry"""
    backbone_config = backbone_config or BackboneConfig()
    backbone_config.vocab_size = vocab_size
    backbone_config.validate()
    diffusion_config = diffusion_config or DiffusionConfig(
        latent_dim=backbone_config.latent_dim,
        cond_dim=backbone_config.cond_dim,
        holders=backbone_config.holders,
        seed=backbone_config.seed,
    )
    return ModelBundle(BimodalBackbone(backbone_config), DiffusionHead(diffusion_config))


# Losses

@dataclass
class LossTerms:
    total: tc.Tensor
    ce: float
    diffusion: float
    n_text: int
    n_motion: int
    output: object = None


def supervision_targets(output, seqs, vocab):
    """Next-token targets and CE mask over the text-routed rows of a forward output.

    A row is supervised when the next item is marked supervised; <eom> and holder
    targets are never supervised.
    """
    layout = output.layout
    seq_index, position = layout.position(layout.text_rows)
    targets = np.zeros(len(layout.text_rows), dtype=np.int64)
    mask = np.zeros(len(layout.text_rows), dtype=bool)
    unsupervised = (vocab.eom_id, vocab.mholder_in_id, vocab.mholder_out_id)
    for row, (b, i) in enumerate(zip(seq_index, position)):
        seq = seqs[b]
        if i + 1 >= len(seq) or not seq.supervised[i + 1]:
            continue
        target = seq.token_ids[i + 1]
        if target in unsupervised:
            continue
        targets[row] = target
        mask[row] = True
    return targets, mask


def compose_losses(bundle, seqs, vocab, rng, lambda_diff=1.0, retain_logits=False):
    """CE over supervised text targets plus lambda_diff times the diffusion loss.

    Returns None (with a warning) when the batch has nothing to supervise.
    """
    backbone, diffusion = bundle.backbone, bundle.diffusion
    output = backbone.forward_batch(seqs, vocab)
    if retain_logits:
        output.text_logits.retain_grad()
    targets, mask = supervision_targets(output, seqs, vocab)
    motion_targets = [b for b, s in enumerate(seqs)
                      if s.target_latent is not None and vocab.mholder_out_id in s.token_ids]
    if not mask.any() and not motion_targets:
        logger.warning("Skipping batch of %d sequences: no supervised positions", len(seqs))
        return None

    total = None
    ce_value = diff_value = 0.0
    if mask.any():
        total = tc.cross_entropy_masked(output.text_logits, targets, mask)
        ce_value = float(total.data)
    if motion_targets:
        holders, cond_dim = backbone.config.holders, backbone.config.cond_dim
        states = tc.concat([backbone.holder_conditions(output, b, vocab).reshape(1, holders, cond_dim)
                            for b in motion_targets], axis=0)
        z0 = np.stack([seqs[b].target_latent for b in motion_targets])
        diff = diffusion.diffusion_loss(z0, diffusion.aggregate_condition(states), rng)
        diff_value = float(diff.data)
        total = diff * lambda_diff if total is None else total + diff * lambda_diff
    return LossTerms(total, ce_value, diff_value, int(mask.sum()), len(motion_targets), output)


@dataclass
class FreezeReport:
    frozen_groups: list
    trainable_groups: list
    violations: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.violations


def verify_freeze(bundle, frozen_groups):
    """Every parameter of a frozen group must be non-trainable with an absent or all-zero gradient"""
    groups = bundle.parameter_groups()
    report = FreezeReport(sorted(frozen_groups), sorted(g for g in groups if g not in frozen_groups))
    for group in frozen_groups:
        for name, p in groups[group].items():
            if p.requires_grad or (p.grad is not None and np.any(p.grad != 0)):
                report.violations.append(name)
                logger.warning("Freeze violation in group %s: %s", group, name)
    return report


# Task data

def encode_corpus_latents(vae, df, stats, prefix_ratio=0.5):
    """Standardized mean latents of full clips and of their leading ``prefix_ratio`` frames"""
    clips = standardized_clips(df, stats)
    full = vae.normalize_latent(vae.encode_mean(clips))
    prefixes = [prefix_clip(c, prefix_ratio, vae.config.min_frames) for c in clips]
    prefix = vae.normalize_latent(vae.encode_mean(prefixes))
    return full, prefix


class TaskSampler:
    """Builds instruction-formatted HybridSequences for a task mixture"""

    def __init__(self, df, vocab, holders, mixture, latents=None, prefix_latents=None, varied=False):
        self.df = df.reset_index(drop=True)
        self.vocab = vocab
        self.holders = holders
        self.tasks = [t for t in TASKS if mixture.get(t, 0) > 0]
        weights = np.array([mixture[t] for t in self.tasks], dtype=np.float64)
        self.weights = weights / weights.sum()
        self.latents = latents
        self.prefix_latents = prefix_latents
        self.varied = varied
        if latents is None and any(t != "PLAIN_TEXT" for t in self.tasks):
            raise ConfigError(f"tasks {self.tasks} need motion latents")

    def example(self, task, index, rng):
        row = self.df.iloc[index]
        phrasing = int(rng.integers(len(INSTRUCTION_PHRASINGS[task]))) if self.varied else 0
        if task == "T2M":
            return make_instruction("T2M", self.vocab, caption=row["caption"],
                                    motion_slots={"target": self.latents[index]},
                                    holders=self.holders, phrasing=phrasing)
        if task == "M2T":
            return make_instruction("M2T", self.vocab, motion_slots={"input": self.latents[index]},
                                    answer=row["caption"], phrasing=phrasing)
        if task == "PREDICT":
            return make_instruction("PREDICT", self.vocab,
                                    motion_slots={"input": self.prefix_latents[index], "target": self.latents[index]},
                                    holders=self.holders, phrasing=phrasing)
        answer = paraphrase(row["class"], row["params"], row["caption"], rng)
        return make_instruction("PLAIN_TEXT", self.vocab, caption=row["caption"], answer=answer, phrasing=phrasing)

    def batch(self, batch_size, rng):
        tasks = rng.choice(len(self.tasks), size=batch_size, p=self.weights)
        indices = rng.integers(len(self.df), size=batch_size)
        return [self.example(self.tasks[t], int(i), rng) for t, i in zip(tasks, indices)]


# Metrics log

def append_metrics(rows, path, truncate_after=None):
    """Append metric rows to a CSV; ``truncate_after`` drops rows past a resumed step first"""
    if not rows and truncate_after is None:
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    new = pd.DataFrame(rows)
    if os.path.exists(path):
        old = pd.read_csv(path)
        if truncate_after is not None and "step" in old.columns:
            old = old[old["step"] <= truncate_after]
        new = pd.concat([old, new], ignore_index=True)
    new.to_csv(path, index=False)


# Stages

@dataclass
class StageResult:
    stage: int
    checkpoint: str
    best_val: float
    steps: int
    metrics_path: str


def _load_stage_inputs(paths, stage_config, vae):
    vocab = Vocabulary.load(paths.vocab)
    train, val = load_split(paths.split("train")), load_split(paths.split("val"))
    latents = {"train": (None, None), "val": (None, None)}
    if vae is not None:
        stats = load_normalizer(paths.norm_stats)
        latents["train"] = encode_corpus_latents(vae, train, stats, stage_config.predict_prefix)
        latents["val"] = encode_corpus_latents(vae, val, stats, stage_config.predict_prefix)
    return vocab, train, val, latents


def _initial_bundle(stage, paths, registry, vocab_size, backbone_config, diffusion_config):
    if stage == 0:
        return build_bundle(vocab_size, backbone_config, diffusion_config)
    previous = f"stage{stage - 1}"
    if stage == 1 and registry.latest_checkpoint(previous) is None and not os.path.exists(paths.checkpoint(previous)):
        logger.warning("No stage-0 text model found; stage 1 starts from an untrained text branch")
        return build_bundle(vocab_size, backbone_config, diffusion_config)
    path = registry.require_checkpoint(previous, paths.checkpoint(previous),
                                       hint=f"run `bimot train --stage {stage - 1}` first")
    bundle, _ = ModelBundle.from_checkpoint(path)
    return bundle


def load_trained_bundle(paths, registry):
    """Bundle of the most advanced stage (3, 2, then 1) with a checkpoint on disk"""
    for stage in (3, 2, 1):
        kind = f"stage{stage}"
        row = registry.latest_checkpoint(kind)
        path = row["path"] if row else paths.checkpoint(kind)
        if os.path.exists(path):
            logger.info("Using %s checkpoint %s", kind, path)
            return ModelBundle.from_checkpoint(path)
    raise PrerequisiteError("no trained motion-language model found; run `bimot train --stage 1` first")


def validation_loss(bundle, sampler, config, vocab):
    totals, ces, diffs = [], [], []
    with tc.no_grad():
        for v in range(config.val_batches):
            rng = np.random.default_rng([config.seed, 1_000_000 + v])
            terms = compose_losses(bundle, sampler.batch(config.batch_size, rng), vocab, rng, config.lambda_diff)
            if terms is None:
                continue
            totals.append(float(terms.total.data))
            ces.append(terms.ce)
            diffs.append(terms.diffusion)
    if not totals:
        return float("nan"), float("nan"), float("nan")
    return float(np.mean(totals)), float(np.mean(ces)), float(np.mean(diffs))


def run_stage(config, paths, registry, run_id=None, resume=False, backbone_config=None, diffusion_config=None):
    """Train one stage; keeps the best-validation checkpoint and a resumable snapshot"""
    config.validate()
    stage = config.stage
    kind = f"stage{stage}"
    needs_motion = any(config.mixture.get(t, 0) > 0 for t in ("T2M", "M2T", "PREDICT"))
    vae = None
    if stage > 0 or needs_motion:
        vae_path = registry.require_checkpoint("vae", paths.checkpoint("vae"), hint="run `bimot train-vae` first")
        vae = MotionVAE.from_checkpoint(vae_path)

    snapshot = paths.checkpoint(f"{kind}_last")
    start_step = 0
    optimizer_arrays = None
    if resume and os.path.exists(snapshot):
        bundle, meta = ModelBundle.from_checkpoint(snapshot)
        optimizer_arrays, _ = load_arrays(paths.optimizer_state(kind))
        start_step = int(meta["step"]) + 1
        logger.info("Resuming stage %d from step %d", stage, start_step)
    else:
        vocab_size = Vocabulary.load(paths.vocab).size
        bundle = _initial_bundle(stage, paths, registry, vocab_size, backbone_config, diffusion_config)
        if bundle.backbone.config.vocab_size != vocab_size:
            raise ConfigError(f"checkpoint vocabulary {bundle.backbone.config.vocab_size} != corpus {vocab_size}")
    if vae is not None and vae.config.latent_dim != bundle.backbone.config.latent_dim:
        raise ConfigError(f"VAE latent_dim {vae.config.latent_dim} != backbone latent_dim "
                          f"{bundle.backbone.config.latent_dim}")

    vocab, train, val, latents = _load_stage_inputs(paths, config, vae)
    holders = bundle.backbone.config.holders
    train_sampler = TaskSampler(train, vocab, holders, config.mixture, *latents["train"], config.varied_instructions)
    val_sampler = TaskSampler(val, vocab, holders, config.mixture, *latents["val"], config.varied_instructions)

    bundle.apply_freeze(config.frozen_groups)
    groups = bundle.parameter_groups()
    lrs = {"text.base": config.lr_backbone, "text.special": config.lr_backbone,
           "motion": config.lr_backbone, "diffusion": config.lr_diffusion}
    optimizer = AdamW([ParamGroup(g, groups[g], lrs[g], g in config.frozen_groups) for g in PARAM_GROUPS],
                      config.betas, config.eps, config.weight_decay)
    if optimizer_arrays is not None:
        optimizer.load_state_dict(optimizer_arrays)
    trainable = [p for _, p in optimizer.trainable()]
    frozen_backbone = [g for g in config.frozen_groups if g != "diffusion"]
    checksums = {g: bundle.backbone.group_checksum(g) for g in frozen_backbone}

    metrics_path = paths.metrics_csv(kind)
    append_metrics([], metrics_path, truncate_after=start_step - 1 if resume else None)
    if not resume and os.path.exists(metrics_path):
        os.remove(metrics_path)
    best_path = paths.checkpoint(kind)
    best_val = float("inf")
    if start_step and os.path.exists(best_path):
        # a resumed run only replaces the best checkpoint when it beats it
        best_val = float(read_metadata(best_path).get("val_loss", best_val))
        logger.info("Best stage %d validation loss so far: %.4f", stage, best_val)
    rows = []
    logger.info("Stage %d: %d steps, mixture %s, frozen %s, %d trainable tensors",
                stage, config.max_steps, config.mixture, config.frozen_groups or "none", len(trainable))

    for step in range(start_step, config.max_steps):
        rng = np.random.default_rng([config.seed, step])
        seqs = train_sampler.batch(config.batch_size, rng)
        terms = compose_losses(bundle, seqs, vocab, rng, config.lambda_diff)
        if terms is None:
            continue
        tc.backward(terms.total)
        report = verify_freeze(bundle, config.frozen_groups)
        if not report.passed:
            raise ContractError(f"frozen parameters received gradient: {report.violations}")
        grad_norm = clip_grad_norm(trainable, config.grad_clip)
        scale = warmup_scale(step, config.max_steps, config.warmup_frac)
        optimizer.step(scale)
        optimizer.zero_grad()

        row = {"step": step, "loss": float(terms.total.data), "ce": terms.ce,
               "diffusion": terms.diffusion, "grad_norm": grad_norm, "lr": config.lr_backbone * scale}
        if step % config.log_every == 0:
            logger.info("stage %d step %d: loss %.4f (ce %.4f, diffusion %.4f) lr %.2e",
                        stage, step, row["loss"], terms.ce, terms.diffusion, row["lr"])

        last = step == config.max_steps - 1
        if step % config.eval_every == 0 or last:
            val_total, val_ce, val_diff = validation_loss(bundle, val_sampler, config, vocab)
            row.update({"val_loss": val_total, "val_ce": val_ce, "val_diffusion": val_diff})
            logger.info("stage %d step %d: val loss %.4f (ce %.4f, diffusion %.4f)",
                        stage, step, val_total, val_ce, val_diff)
            meta = {"stage": stage, "step": step, "frozen_groups": config.frozen_groups,
                    "val_loss": val_total, "seed": config.seed}
            if val_total < best_val or not os.path.exists(best_path):
                best_val = val_total
                bundle.save(best_path, meta)
                if run_id is not None:
                    registry.record_checkpoint(run_id, kind, best_path, step, val_total)
            bundle.save(snapshot, meta)
            save_arrays(paths.optimizer_state(kind), optimizer.state_dict(), {"stage": stage, "step": step})
        rows.append(row)
        if last or step % config.eval_every == 0:
            append_metrics(rows, metrics_path)
            rows = []

    append_metrics(rows, metrics_path)
    for group, checksum in checksums.items():
        if bundle.backbone.group_checksum(group) != checksum:
            raise ContractError(f"frozen group {group} changed during stage {stage}")
    return StageResult(stage, best_path, best_val, config.max_steps, metrics_path)


# VAE

def vae_val_mse(vae, clips):
    mus = vae.encode_mean(clips)
    recons = vae.decode_latents(mus, [c.shape[0] for c in clips])
    return float(np.mean([np.mean((c - r) ** 2) for c, r in zip(clips, recons)]))


def train_vae(config, paths, registry=None, run_id=None):
    """Fit the motion VAE on standardized train clips; stores latent statistics with the best weights"""
    stats = load_normalizer(paths.norm_stats)
    train_clips = standardized_clips(load_split(paths.split("train")), stats)
    val_clips = standardized_clips(load_split(paths.split("val")), stats)
    vae = MotionVAE(config)
    optimizer = AdamW([ParamGroup("vae", vae.named_parameters(), config.lr)])
    params = [p for _, p in optimizer.trainable()]
    warmup = max(1, int(round(config.kl_warmup_frac * config.steps)))
    best_path = paths.checkpoint("vae")
    best_mse, best_state = float("inf"), None
    rows = []
    metrics_path = paths.metrics_csv("vae")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)

    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, step])
        values, valid = pad_clips([train_clips[i] for i in sample_batch(len(train_clips), config.batch_size, rng)])
        recon, dist, _ = vae(values, valid, seed=int(rng.integers(2 ** 31)))
        lambda_kl = config.lambda_kl * min(1.0, (step + 1) / warmup)
        total, recon_term, kl_term = vae_loss(values, recon, dist, lambda_kl, valid, config.recon_loss)
        if float(kl_term.data) < -1e-9:
            raise ContractError(f"negative KL term {float(kl_term.data)} at step {step}")
        tc.backward(total)
        clip_grad_norm(params, 1.0)
        optimizer.step()
        optimizer.zero_grad()
        row = {"step": step, "loss": float(total.data), "recon": float(recon_term.data), "kl": float(kl_term.data)}
        if step % config.eval_every == 0 or step == config.steps - 1:
            row["val_mse"] = vae_val_mse(vae, val_clips)
            logger.info("vae step %d: loss %.4f (recon %.4f, kl %.4f) val mse %.4f",
                        step, row["loss"], row["recon"], row["kl"], row["val_mse"])
            if row["val_mse"] < best_mse:
                best_mse, best_state = row["val_mse"], vae.state_dict()
        rows.append(row)

    if best_state is not None:
        vae.load_state_dict(best_state)
    vae.fit_latent_stats(vae.encode_mean(train_clips))
    vae.save(best_path, {"val_mse": best_mse, "steps": config.steps})
    append_metrics(rows, metrics_path)
    if registry is not None and run_id is not None:
        registry.record_checkpoint(run_id, "vae", best_path, config.steps, best_mse)
    return vae, best_mse
