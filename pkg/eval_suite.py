"""Contrastive text-motion evaluator and the metrics computed in its embedding space.

Retrieval and distribution metrics (R-Precision, MM Dist, FID, Diversity,
MultiModality) take embedding arrays; caption metrics (BLEU, ROUGE-L) take token
lists or strings. ``run_evaluation`` ties them to a trained model and writes the
metric report.
"""
import logging
import os
from collections import Counter

import numpy as np
import pandas as pd
from sklearn.metrics.pairwise import euclidean_distances, paired_distances

import tensor_core as tc
from config import EvaluatorConfig
from data_processor import (group_by_length, load_normalizer, load_split, pad_clips, sample_batch,
                            standardized_clips, summarize)
from errors import DataError, EvaluationError, EvaluatorUnfitError
from motion_vae import MotionVAE
from nn_layers import (LayerNorm, Linear, Module, Parameter, TransformerBlock, init_normal, masked_mean,
                       padding_mask, read_checkpoint, save_module, sinusoidal_embedding)
from synth_corpus import (CLASS_NAMES, MOTION_CLASSES, Vocabulary, canonical_caption, class_word,
                          make_instruction, render_caption, split_words)
from trainer import AdamW, ParamGroup, append_metrics, clip_grad_norm, load_trained_bundle, warmup_scale

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["metric", "value", "ci95", "n_rep"]


# Evaluator

def l2_normalize(x, eps=1e-12):
    x = tc.as_tensor(x)
    return x / tc.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)


def _pad_tokens(token_lists):
    if any(len(ids) == 0 for ids in token_lists):
        raise EvaluationError("cannot embed an empty caption")
    length = max(len(ids) for ids in token_lists)
    ids = np.zeros((len(token_lists), length), dtype=np.int64)
    valid = np.zeros((len(token_lists), length), dtype=bool)
    for i, row in enumerate(token_lists):
        ids[i, :len(row)] = row
        valid[i, :len(row)] = True
    return ids, valid


class EvaluatorEmbedder(Module):
    """Text and motion encoders mapping into one L2-normalized embedding space"""

    def __init__(self, config=None, vocab_size=0, rng=None):
        config = config or EvaluatorConfig()
        if vocab_size < 1:
            raise EvaluationError("evaluator needs the corpus vocabulary size")
        rng = rng or np.random.default_rng(config.seed)
        self._config = config
        self._vocab_size = vocab_size
        d = config.model_dim
        self.token_embed = Parameter(init_normal(rng, (vocab_size, d)))
        self.text_blocks = [TransformerBlock(d, config.heads, 2 * d, rng) for _ in range(config.layers)]
        self.text_norm = LayerNorm(d)
        self.text_out = Linear(d, config.embed_dim, rng)
        self.frame_embed = Linear(config.motion_dims, d, rng)
        self.motion_blocks = [TransformerBlock(d, config.heads, 2 * d, rng) for _ in range(config.layers)]
        self.motion_norm = LayerNorm(d)
        self.motion_out = Linear(d, config.embed_dim, rng)

    @property
    def config(self):
        return self._config

    @property
    def vocab_size(self):
        return self._vocab_size

    def _pool(self, x, valid, blocks, norm, out):
        x = x + sinusoidal_embedding(np.arange(x.shape[1]), self._config.model_dim)[None]
        mask = padding_mask(valid)
        for block in blocks:
            x = block(x, mask=mask)
        return l2_normalize(out(norm(masked_mean(x, valid))))

    def encode_text(self, token_lists):
        ids, valid = _pad_tokens(token_lists)
        x = tc.embedding_lookup(self.token_embed, ids)
        return self._pool(x, valid, self.text_blocks, self.text_norm, self.text_out)

    def encode_motion(self, clips):
        values, valid = pad_clips(clips)
        x = self.frame_embed(values.astype(tc.get_dtype()))
        return self._pool(x, valid, self.motion_blocks, self.motion_norm, self.motion_out)

    def _embed(self, items, encode, batch_size):
        # Equal-length groups keep every embedding independent of batch composition
        out = np.zeros((len(items), self._config.embed_dim))
        with tc.no_grad():
            for _, idx in group_by_length([len(x) for x in items]).items():
                for start in range(0, len(idx), batch_size):
                    chunk = idx[start:start + batch_size]
                    out[chunk] = encode([items[i] for i in chunk]).data
        return out

    def embed_texts(self, token_lists, batch_size=128):
        return self._embed(list(token_lists), self.encode_text, batch_size)

    def embed_motions(self, clips, batch_size=128):
        return self._embed(list(clips), self.encode_motion, batch_size)

    def save(self, path, metadata=None):
        meta = {"kind": "evaluator", "config": self._config.to_dict(), "vocab_size": self._vocab_size}
        meta.update(metadata or {})
        save_module(self, path, meta)

    @classmethod
    def from_checkpoint(cls, path):
        arrays, metadata = read_checkpoint(path)
        evaluator = cls(EvaluatorConfig.from_dict(metadata["config"]), int(metadata["vocab_size"]))
        evaluator.load_state_dict(arrays)
        evaluator.set_trainable(False)
        return evaluator, metadata


def contrastive_loss(text, motion, temperature=0.07):
    """Symmetric cross-entropy over the text-motion similarity matrix"""
    n = text.shape[0]
    logits = tc.matmul(text, motion.T) * (1.0 / temperature)
    targets = np.arange(n)
    mask = np.ones(n, dtype=bool)
    return (tc.cross_entropy_masked(logits, targets, mask) + tc.cross_entropy_masked(logits.T, targets, mask)) * 0.5


def separation_margin(text_emb, motion_emb):
    """Mean matched-pair cosine similarity minus mean mismatched similarity"""
    text_emb, motion_emb = np.asarray(text_emb), np.asarray(motion_emb)
    n = len(text_emb)
    if n < 2 or len(motion_emb) != n:
        raise EvaluationError("separation margin needs at least two matched pairs")
    sims = text_emb @ motion_emb.T
    matched = np.trace(sims) / n
    mismatched = (sims.sum() - np.trace(sims)) / (n * n - n)
    return float(matched - mismatched)


def train_evaluator(config, paths, registry=None, run_id=None, shuffle_pairs=False):
    """Fit the evaluator on train pairs; raises EvaluatorUnfitError below the val margin.

    ``shuffle_pairs`` trains on deliberately mismatched pairs as a negative control
    and saves under its own checkpoint kind.
    """
    vocab = Vocabulary.load(paths.vocab)
    stats = load_normalizer(paths.norm_stats)
    train, val = load_split(paths.split("train")), load_split(paths.split("val"))
    train_text = [vocab.tokenize(c) for c in train["caption"]]
    train_clips = standardized_clips(train, stats)
    if shuffle_pairs:
        order = np.random.default_rng([config.seed, 7]).permutation(len(train_clips))
        train_clips = [train_clips[i] for i in order]

    evaluator = EvaluatorEmbedder(config, vocab.size)
    optimizer = AdamW([ParamGroup("evaluator", evaluator.named_parameters(), config.lr)])
    params = [p for _, p in optimizer.trainable()]
    kind = "evaluator_shuffled" if shuffle_pairs else "evaluator"
    metrics_path = paths.metrics_csv(kind)
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    log_every = max(1, config.steps // 10)
    rows = []

    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, step])
        idx = sample_batch(len(train_clips), config.batch_size, rng)
        text = evaluator.encode_text([train_text[i] for i in idx])
        motion = evaluator.encode_motion([train_clips[i] for i in idx])
        loss = contrastive_loss(text, motion, config.temperature)
        tc.backward(loss)
        clip_grad_norm(params, 1.0)
        optimizer.step(warmup_scale(step, config.steps, 0.05))
        optimizer.zero_grad()
        rows.append({"step": step, "contrastive": float(loss.data)})
        if step % log_every == 0:
            logger.info("evaluator step %d: contrastive loss %.4f", step, float(loss.data))

    val_text = evaluator.embed_texts([vocab.tokenize(c) for c in val["caption"]])
    val_motion = evaluator.embed_motions(standardized_clips(val, stats))
    margin = separation_margin(val_text, val_motion)
    fit = margin >= config.margin
    rows[-1]["val_margin"] = margin
    append_metrics(rows, metrics_path)

    path = paths.checkpoint(kind)
    evaluator.save(path, {"margin": margin, "fit": fit, "shuffled": shuffle_pairs, "steps": config.steps})
    if registry is not None and run_id is not None:
        registry.record_checkpoint(run_id, kind, path, config.steps, margin)
    logger.info("Evaluator val margin %.3f (required %.2f)", margin, config.margin)
    if not fit:
        raise EvaluatorUnfitError(f"evaluator separation margin {margin:.3f} is below {config.margin}; "
                                  "metrics computed with it would be meaningless")
    return evaluator, margin


def load_evaluator(paths, registry):
    """The latest trained evaluator; refuses one that missed its margin"""
    path = registry.require_checkpoint("evaluator", paths.checkpoint("evaluator"),
                                       hint="run `bimot train-evaluator` first")
    evaluator, metadata = EvaluatorEmbedder.from_checkpoint(path)
    if not metadata.get("fit", False):
        raise EvaluatorUnfitError(f"evaluator at {path} missed its separation margin "
                                  f"({metadata.get('margin', float('nan')):.3f}); retrain it")
    return evaluator


# Retrieval and distribution metrics

def _features(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise EvaluationError(f"{name} must be a 2-D feature array, got shape {x.shape}")
    return x


def _paired(text_emb, motion_emb):
    text_emb, motion_emb = _features(text_emb, "text embeddings"), _features(motion_emb, "motion embeddings")
    if text_emb.shape != motion_emb.shape:
        raise EvaluationError(f"unpaired embeddings {text_emb.shape} and {motion_emb.shape}")
    return text_emb, motion_emb


def r_precision(text_emb, motion_emb, batch_size=8, top_k=3, seed=None):
    """Fraction of texts whose own motion ranks within the top k of its batch, k = 1..top_k.

    Pairs are put in a content-defined order before batching, so the result does
    not depend on the order of the evaluation set; ``seed`` then shuffles batches.
    """
    text_emb, motion_emb = _paired(text_emb, motion_emb)
    n = len(text_emb)
    if n < batch_size:
        raise EvaluationError(f"R-Precision needs at least {batch_size} pairs, got {n}")
    order = np.lexsort(np.concatenate([text_emb, motion_emb], axis=1).T[::-1])
    if seed is not None:
        order = order[np.random.default_rng(seed).permutation(n)]
    hits = np.zeros(top_k)
    batches = n // batch_size
    for b in range(batches):
        idx = order[b * batch_size:(b + 1) * batch_size]
        dist = euclidean_distances(text_emb[idx], motion_emb[idx])
        rank = (dist < np.diag(dist)[:, None]).sum(axis=1)
        hits += [(rank < k).sum() for k in range(1, top_k + 1)]
    return {f"top{k}": float(hits[k - 1] / (batches * batch_size)) for k in range(1, top_k + 1)}


def mm_dist(text_emb, motion_emb):
    text_emb, motion_emb = _paired(text_emb, motion_emb)
    return float(np.linalg.norm(text_emb - motion_emb, axis=1).mean())


def feature_statistics(features):
    features = _features(features, "features")
    if len(features) < 2:
        raise EvaluationError("FID needs at least two samples per side")
    return features.mean(axis=0), np.cov(features, rowvar=False)


def _psd_sqrt(matrix):
    w, v = np.linalg.eigh((matrix + matrix.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2):
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^1/2) through symmetric eigendecompositions"""
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    if not (np.all(np.isfinite(sigma1)) and np.all(np.isfinite(sigma2))):
        raise DataError("non-finite covariance in FID")
    root1 = _psd_sqrt(sigma1)
    inner = root1 @ sigma2 @ root1
    tr_covmean = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)).sum()
    diff = np.atleast_1d(mu1) - np.atleast_1d(mu2)
    return max(0.0, float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_covmean))


def fid(real_features, gen_features):
    return frechet_distance(*feature_statistics(real_features), *feature_statistics(gen_features))


def diversity(features, subset=32, seed=0):
    """Mean distance between two random equal-size subsets"""
    features = _features(features, "features")
    if len(features) < subset:
        raise EvaluationError(f"diversity needs at least {subset} samples, got {len(features)}")
    rng = np.random.default_rng(seed)
    first = rng.choice(len(features), subset, replace=False)
    second = rng.choice(len(features), subset, replace=False)
    return float(paired_distances(features[first], features[second]).mean())


def multimodality(groups):
    """Mean pairwise distance among repeated generations of one caption, averaged over captions"""
    scores = []
    for group in groups:
        group = _features(group, "repeated generations")
        if len(group) < 2:
            raise EvaluationError("multimodality needs at least two generations per caption")
        dist = euclidean_distances(group)
        scores.append(dist[np.triu_indices(len(group), k=1)].mean())
    if not scores:
        raise EvaluationError("multimodality needs at least one caption")
    return float(np.mean(scores))


# Caption metrics

def _tokens(text):
    return split_words(text) if isinstance(text, str) else [str(t) for t in text]


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidate, references, n):
    counts = _ngrams(candidate, n)
    total = sum(counts.values())
    if total == 0:
        return 0.0
    max_ref = Counter()
    for ref in references:
        for gram, count in _ngrams(ref, n).items():
            max_ref[gram] = max(max_ref[gram], count)
    return sum(min(count, max_ref[gram]) for gram, count in counts.items()) / total


def bleu(candidate, references, n=4):
    """Geometric mean of clipped 1..n-gram precisions times the brevity penalty"""
    candidate = _tokens(candidate)
    references = [_tokens(references)] if isinstance(references, str) else [_tokens(r) for r in references]
    if not candidate or not references:
        return 0.0
    precisions = [modified_precision(candidate, references, k) for k in range(1, n + 1)]
    if min(precisions) == 0.0:
        return 0.0
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    penalty = 1.0 if c > r else float(np.exp(1.0 - r / c))
    return penalty * float(np.exp(np.mean(np.log(precisions))))


def _lcs_length(a, b):
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i, x in enumerate(a, 1):
        for j, y in enumerate(b, 1):
            table[i, j] = table[i - 1, j - 1] + 1 if x == y else max(table[i - 1, j], table[i, j - 1])
    return int(table[-1, -1])


def rouge_l(candidate, reference, beta=1.2):
    candidate, reference = _tokens(candidate), _tokens(reference)
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision, recall = lcs / len(candidate), lcs / len(reference)
    return float((1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision))


# Nearest-template classifier

def class_text_embeddings(evaluator, vocab):
    return evaluator.embed_texts([vocab.tokenize(canonical_caption(c)) for c in CLASS_NAMES])


def classify_motions(motion_emb, class_emb):
    nearest = euclidean_distances(_features(motion_emb, "motion embeddings"), class_emb).argmin(axis=1)
    return [CLASS_NAMES[i] for i in nearest]


# Generation for evaluation

def t2m_prompt(vocab, caption, holders, phrasing=0):
    """T2M inference prompt closed with a forced <som> and H holders"""
    seq = make_instruction("T2M", vocab, caption=caption, holders=holders, phrasing=phrasing, with_answer=False)
    seq.append(vocab.som_id)
    for _ in range(holders):
        seq.append(vocab.mholder_out_id, 1, False)
    return seq


def prompt_conditions(bundle, vocab, captions, batch_size=32):
    """Holder condition states [N, H, c] of each caption's T2M prompt"""
    backbone = bundle.backbone
    holders = backbone.config.holders
    states = []
    with tc.no_grad():
        for start in range(0, len(captions), batch_size):
            seqs = [t2m_prompt(vocab, c, holders) for c in captions[start:start + batch_size]]
            output = backbone.forward_batch(seqs, vocab)
            states.extend(backbone.holder_conditions(output, i, vocab).data for i in range(len(seqs)))
    return np.stack(states)


def sample_clips(bundle, vae, conditions, lengths, steps=None, omega=None, seed=0, noise_scale=1.0):
    """Standardized clips decoded from latents sampled under ``conditions``"""
    z = bundle.diffusion.ddpm_sample(conditions, steps=steps, omega=omega, seed=seed, noise_scale=noise_scale)
    return vae.decode_latents(vae.denormalize_latent(np.atleast_2d(z)), list(lengths))


def caption_motion(bundle, vocab, latent, max_len=24):
    """Greedy M2T caption of one standardized latent"""
    prompt = make_instruction("M2T", vocab, motion_slots={"input": latent}, with_answer=False)
    seq = bundle.backbone.generate_text(prompt, vocab, "greedy", max_len=max_len)
    new = seq.token_ids[len(prompt):]
    if vocab.eos_id in new:
        new = new[:new.index(vocab.eos_id)]
    return vocab.detokenize(new, skip_special=True)


def mentions_class(caption, class_label):
    """True when some word of ``caption`` is an inflection of the class word (walk, walks, walking)"""
    stem = class_word(class_label)
    return any(word.startswith(stem) for word in split_words(caption))


def reference_captions(class_label, params):
    return [render_caption(class_label, params, i) for i in range(len(MOTION_CLASSES[class_label]["templates"]))]


# Report

def report_rows(per_rep):
    rows = []
    for metric, values in per_rep.items():
        value, ci95 = summarize(values)
        rows.append({"metric": metric, "value": value, "ci95": ci95, "n_rep": len(values)})
    return rows


def write_report(report, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    report[REPORT_COLUMNS].to_csv(path, index=False)
    logger.info("Wrote metric report %s", path)
    return path


class ModelEvaluator:
    """Metrics of one trained bundle on one corpus split, in the evaluator's space"""

    def __init__(self, bundle, vae, evaluator, vocab, df, stats, config=None):
        self.bundle = bundle
        self.vae = vae
        self.evaluator = evaluator
        self.vocab = vocab
        self.config = config or evaluator.config
        self.df = df.reset_index(drop=True)
        self.captions = list(self.df["caption"])
        self.lengths = [int(n) for n in self.df["frames"]]
        self.clips = standardized_clips(self.df, stats)
        self.text_emb = evaluator.embed_texts([vocab.tokenize(c) for c in self.captions])
        self.real_emb = evaluator.embed_motions(self.clips)
        self.class_emb = class_text_embeddings(evaluator, vocab)
        self._conditions = None

    @property
    def conditions(self):
        if self._conditions is None:
            self._conditions = prompt_conditions(self.bundle, self.vocab, self.captions)
        return self._conditions

    def generated_embeddings(self, steps, omega, seed, noise_scale=1.0, conditions=None, lengths=None):
        conditions = self.conditions if conditions is None else conditions
        clips = sample_clips(self.bundle, self.vae, conditions, lengths or self.lengths, steps, omega, seed, noise_scale)
        return self.evaluator.embed_motions(clips)

    def t2m_metrics(self, steps=None, omega=None, seed=0):
        cfg = self.config
        per_rep = {name: [] for name in ("r_precision_top1", "r_precision_top2", "r_precision_top3", "fid",
                                         "mm_dist", "diversity", "class_accuracy", "real_r_precision_top1",
                                         "real_diversity")}
        labels = np.asarray(self.df["class"])
        for rep in range(cfg.repetitions):
            gen_emb = self.generated_embeddings(steps, omega, [seed, rep])
            rp = r_precision(self.text_emb, gen_emb, cfg.eval_batch, seed=[seed, rep])
            for k in (1, 2, 3):
                per_rep[f"r_precision_top{k}"].append(rp[f"top{k}"])
            per_rep["fid"].append(fid(self.real_emb, gen_emb))
            per_rep["mm_dist"].append(mm_dist(self.text_emb, gen_emb))
            subset = min(cfg.div_subset, len(gen_emb))
            per_rep["diversity"].append(diversity(gen_emb, subset, [seed, rep]))
            per_rep["class_accuracy"].append(float(np.mean(np.asarray(classify_motions(gen_emb, self.class_emb)) == labels)))
            per_rep["real_r_precision_top1"].append(
                r_precision(self.text_emb, self.real_emb, cfg.eval_batch, seed=[seed, rep])["top1"])
            per_rep["real_diversity"].append(diversity(self.real_emb, subset, [seed, rep]))
            logger.info("repetition %d: R@1 %.3f, FID %.3f, class accuracy %.3f", rep,
                        rp["top1"], per_rep["fid"][-1], per_rep["class_accuracy"][-1])
        return per_rep

    def multimodality(self, steps=None, omega=None, seed=0, captions=16, noise_scale=1.0):
        """MultiModality over the first ``captions`` prompts, ``mm_repeats`` generations each"""
        count = min(captions, len(self.captions))
        repeats = self.config.mm_repeats
        conditions = np.repeat(self.conditions[:count], repeats, axis=0)
        lengths = np.repeat(self.lengths[:count], repeats)
        emb = self.generated_embeddings(steps, omega, [seed, 99], noise_scale, conditions, list(lengths))
        return multimodality(emb.reshape(count, repeats, -1))

    def m2t_metrics(self, max_len=24):
        latents = self.vae.normalize_latent(self.vae.encode_mean(self.clips))
        per_item = {"class_word_accuracy": [], "bleu1": [], "bleu4": [], "rouge_l": []}
        for i, row in self.df.iterrows():
            caption = caption_motion(self.bundle, self.vocab, latents[i], max_len)
            references = reference_captions(row["class"], row["params"])
            per_item["class_word_accuracy"].append(float(mentions_class(caption, row["class"])))
            per_item["bleu1"].append(bleu(caption, references, 1))
            per_item["bleu4"].append(bleu(caption, references, 4))
            per_item["rouge_l"].append(max(rouge_l(caption, ref) for ref in references))
        return [{"metric": k, "value": float(np.mean(v)), "ci95": 0.0, "n_rep": 1} for k, v in per_item.items()]

    def report(self, steps=None, omega=None, seed=0, captioning=True):
        rows = report_rows(self.t2m_metrics(steps, omega, seed))
        rows.append({"metric": "multimodality", "value": self.multimodality(steps, omega, seed),
                     "ci95": 0.0, "n_rep": 1})
        if captioning:
            rows.extend(self.m2t_metrics())
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def cfg_sweep(self, omegas, steps=None, seed=0):
        rows = []
        for omega in omegas:
            fids, tops = [], []
            for rep in range(self.config.repetitions):
                gen_emb = self.generated_embeddings(steps, omega, [seed, rep])
                fids.append(fid(self.real_emb, gen_emb))
                tops.append(r_precision(self.text_emb, gen_emb, self.config.eval_batch, seed=[seed, rep])["top1"])
            value, ci95 = summarize(fids)
            rows.append({"omega": float(omega), "fid": value, "fid_ci95": ci95,
                         "r_precision_top1": float(np.mean(tops))})
            logger.info("guidance %.1f: FID %.3f, R@1 %.3f", omega, value, rows[-1]["r_precision_top1"])
        return pd.DataFrame(rows)


def run_evaluation(paths, registry, split="val", steps=None, omega=None, seed=0, omega_sweep=None,
                   repetitions=None):
    """Evaluate the latest trained model on ``split``; returns the written report paths"""
    evaluator = load_evaluator(paths, registry)
    bundle, _ = load_trained_bundle(paths, registry)
    vae = MotionVAE.from_checkpoint(registry.require_checkpoint("vae", paths.checkpoint("vae"),
                                                                hint="run `bimot train-vae` first"))
    vocab = Vocabulary.load(paths.vocab)
    config = evaluator.config
    if repetitions:
        config = EvaluatorConfig.from_dict({**config.to_dict(), "repetitions": repetitions})
    model_eval = ModelEvaluator(bundle, vae, evaluator, vocab, load_split(paths.split(split)),
                                load_normalizer(paths.norm_stats), config)
    written = {"report": write_report(model_eval.report(steps, omega, seed), paths.metrics_csv(f"eval_{split}"))}
    if omega_sweep:
        sweep = model_eval.cfg_sweep(omega_sweep, steps, seed)
        sweep_path = paths.metrics_csv(f"cfg_sweep_{split}")
        sweep.to_csv(sweep_path, index=False)
        written["sweep"] = sweep_path
    return written
