"""Decoder-only transformer with parallel text and motion branches.

Every position is owned by one branch (its routing flag). Each branch embeds,
projects Q/K/V, normalizes and runs the feed-forward for its own positions; the
Q/K/V rows are scattered back into original order so one causal attention can
run over the merged sequence, and the outputs are gathered back per branch.
"""
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

import tensor_core as tc
from errors import ConfigError, ContextLengthError, ContractError
from nn_layers import (MLP, NEG_INF, LayerNorm, Linear, Module, Parameter, init_normal,
                       merge_heads, scaled_dot_attention, split_heads)

logger = logging.getLogger(__name__)

SAMPLERS = ("greedy", "top_k", "temperature")


class BranchLayer(Module):
    """One branch's share of a layer: LN, QKV and output projections, LN, FFN"""

    def __init__(self, dim, ffn_dim, rng):
        self.ln1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.c_proj = Linear(dim, dim, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, ffn_dim, dim, rng)


class TextBranch(Module):
    def __init__(self, config, rng):
        base_rows = config.vocab_size - config.special_rows
        self.wte_base = Parameter(init_normal(rng, (base_rows, config.model_dim)))
        self.wpe = Parameter(init_normal(rng, (config.context, config.model_dim), std=0.01))
        self.layers = [BranchLayer(config.model_dim, config.ffn_dim, rng) for _ in range(config.layers)]
        self.ln_f = LayerNorm(config.model_dim)


class MotionBranch(Module):
    def __init__(self, config, rng):
        self.layers = [BranchLayer(config.model_dim, config.motion_ffn_dim, rng) for _ in range(config.layers)]
        self.ln_f = LayerNorm(config.model_dim)
        # MotionUndHead: latent -> input embedding space
        self.und_head = MLP(config.latent_dim, config.model_dim, config.model_dim, rng)
        self.holder_embed = Parameter(init_normal(rng, (config.model_dim,)))
        self.proj_head = MLP(config.model_dim, config.model_dim, config.cond_dim, rng)


@dataclass
class HybridLayout:
    """Padded [B, K] view of a batch of sequences plus the flat row index of each branch"""
    tokens: np.ndarray
    modality: np.ndarray
    valid: np.ndarray
    text_rows: np.ndarray
    motion_rows: np.ndarray

    @property
    def batch(self):
        return self.tokens.shape[0]

    @property
    def length(self):
        return self.tokens.shape[1]

    def position(self, rows):
        """(sequence index, position) of flat rows"""
        return np.divmod(np.asarray(rows), self.length)


@dataclass
class BackboneOutput:
    layout: HybridLayout
    text_logits: tc.Tensor
    motion_hidden: tc.Tensor = None
    attention: list = field(default_factory=list)
    text_hidden: tc.Tensor = None

    def logits_at(self, seq_index, position):
        """Row of text_logits for one (sequence, position)"""
        row = seq_index * self.layout.length + position
        hit = np.nonzero(self.layout.text_rows == row)[0]
        if hit.size == 0:
            raise ContractError(f"position {position} of sequence {seq_index} is not text-routed")
        return self.text_logits.data[hit[0]]

    def motion_rows_of(self, seq_index, token_id=None):
        """Indices into motion_hidden for one sequence, optionally one token kind"""
        b, pos = self.layout.position(self.layout.motion_rows)
        keep = b == seq_index
        if token_id is not None:
            keep &= self.layout.tokens[b, pos] == token_id
        return np.nonzero(keep)[0]


def attention_mask(modality, valid, shared):
    """Additive [B, 1, K, K] mask: valid keys, causal order, and same branch unless shared"""
    length = modality.shape[1]
    allowed = valid[:, None, :] & np.tril(np.ones((length, length), dtype=bool))[None]
    if not shared:
        allowed = allowed & (modality[:, :, None] == modality[:, None, :])
    return np.where(allowed, 0.0, NEG_INF)[:, None, :, :]


class BimodalBackbone(Module):
    def __init__(self, config, rng=None):
        config.validate()
        if config.vocab_size <= config.special_rows:
            raise ConfigError("vocab_size must exceed the number of special rows")
        rng = rng or np.random.default_rng(config.seed)
        self._config = config
        self.text = TextBranch(config, rng)
        self.wte_special = Parameter(init_normal(rng, (config.special_rows, config.model_dim)))
        self.motion = MotionBranch(config, rng)
        self._forward_count = 0

    @property
    def config(self):
        return self._config

    @property
    def forward_count(self):
        return self._forward_count

    def token_table(self):
        """Extended vocabulary embedding, also the tied unembedding"""
        return tc.concat([self.text.wte_base, self.wte_special], axis=0)

    def parameter_groups(self):
        groups = {"text.base": {}, "text.special": {}, "motion": {}}
        for name, p in self.named_parameters().items():
            if name.startswith("text."):
                groups["text.base"][name] = p
            elif name == "wte_special":
                groups["text.special"][name] = p
            else:
                groups["motion"][name] = p
        return groups

    def group_checksum(self, group):
        digest = hashlib.sha256()
        for name, p in sorted(self.parameter_groups()[group].items()):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    # Embedding

    def layout(self, seqs, pad_id=0):
        length = max(len(s) for s in seqs)
        if length > self._config.context:
            raise ContextLengthError(f"sequence length {length} exceeds context {self._config.context}")
        tokens = np.full((len(seqs), length), pad_id, dtype=np.int64)
        modality = np.zeros((len(seqs), length), dtype=np.int64)
        valid = np.zeros((len(seqs), length), dtype=bool)
        for b, seq in enumerate(seqs):
            k = len(seq)
            tokens[b, :k] = seq.token_ids
            modality[b, :k] = seq.modality
            valid[b, :k] = True
        flat = np.arange(tokens.size).reshape(tokens.shape)
        return HybridLayout(tokens, modality, valid,
                            text_rows=flat[valid & (modality == 0)],
                            motion_rows=flat[valid & (modality == 1)])

    def embed_text(self, layout, table):
        ids = layout.tokens.reshape(-1)[layout.text_rows]
        positions = layout.text_rows % layout.length
        return tc.embedding_lookup(table, ids) + tc.embedding_lookup(self.text.wpe, positions)

    def embed_motion(self, layout, seqs, mholder_in_id, mholder_out_id):
        """Motion stream states: MotionUndHead(z) at <mholder_in>, the holder embedding at <mholder_out>"""
        rows = layout.motion_rows
        b_idx, pos = layout.position(rows)
        ids = layout.tokens[b_idx, pos]
        in_local = np.nonzero(ids == mholder_in_id)[0]
        out_local = np.nonzero(ids == mholder_out_id)[0]
        if in_local.size + out_local.size != rows.size:
            raise ContractError("motion-routed positions must hold <mholder_in> or <mholder_out>")

        dim = self._config.model_dim
        states = tc.Tensor(np.zeros((rows.size, dim), dtype=tc.get_dtype()))
        if in_local.size:
            latents = []
            for b, p in zip(b_idx[in_local], pos[in_local]):
                if p not in seqs[b].latents:
                    raise ContractError(f"<mholder_in> at position {p} of sequence {b} has no latent")
                latents.append(seqs[b].latents[p])
            states = tc.scatter_by_index(states, self.motion.und_head(np.stack(latents).astype(tc.get_dtype())),
                                         in_local)
        if out_local.size:
            holders = self.motion.holder_embed.reshape(1, dim) * np.ones((out_local.size, 1), dtype=tc.get_dtype())
            states = tc.scatter_by_index(states, holders, out_local)
        return states + tc.embedding_lookup(self.text.wpe, pos)

    # Layers

    def _attend(self, qkv, mask):
        dim, heads = self._config.model_dim, self._config.heads
        q = split_heads(qkv[:, :, :dim], heads)
        k = split_heads(qkv[:, :, dim:2 * dim], heads)
        v = split_heads(qkv[:, :, 2 * dim:], heads)
        out, weights = scaled_dot_attention(q, k, v, mask)
        return merge_heads(out), weights

    def shared_attention_layer(self, index, h_text, h_motion, layout, mask):
        """Scatter both branches' Q/K/V rows into original order, attend once, gather back"""
        text_layer, motion_layer = self.text.layers[index], self.motion.layers[index]
        rows, dim = layout.batch * layout.length, self._config.model_dim
        merged = tc.Tensor(np.zeros((rows, 3 * dim), dtype=tc.get_dtype()))
        merged = tc.scatter_by_index(merged, text_layer.qkv(text_layer.ln1(h_text)), layout.text_rows)
        if layout.motion_rows.size:
            merged = tc.scatter_by_index(merged, motion_layer.qkv(motion_layer.ln1(h_motion)), layout.motion_rows)
        attended, weights = self._attend(merged.reshape(layout.batch, layout.length, 3 * dim), mask)
        attended = attended.reshape(rows, dim)
        h_text = h_text + text_layer.c_proj(tc.index_select(attended, layout.text_rows))
        if layout.motion_rows.size:
            h_motion = h_motion + motion_layer.c_proj(tc.index_select(attended, layout.motion_rows))
        return h_text, h_motion, weights

    def forward_batch(self, seqs, vocab, keep_attention=False):
        """Text logits at text-routed positions, final motion states at motion-routed ones"""
        self._forward_count += 1
        layout = self.layout(seqs, vocab.pad_id)
        if layout.text_rows.size == 0:
            raise ContractError("a hybrid sequence needs at least one text-routed position")
        table = self.token_table()
        h_text = self.embed_text(layout, table)
        h_motion = None
        if layout.motion_rows.size:
            h_motion = self.embed_motion(layout, seqs, vocab.mholder_in_id, vocab.mholder_out_id)

        masks = {shared: attention_mask(layout.modality, layout.valid, shared) for shared in (True, False)}
        attention = []
        for index in range(self._config.layers):
            h_text, h_motion, weights = self.shared_attention_layer(
                index, h_text, h_motion, layout, masks[bool(self._config.placement[index])])
            text_layer = self.text.layers[index]
            h_text = h_text + text_layer.mlp(text_layer.ln2(h_text))
            if h_motion is not None:
                motion_layer = self.motion.layers[index]
                h_motion = h_motion + motion_layer.mlp(motion_layer.ln2(h_motion))
            if keep_attention:
                attention.append(weights.data)

        text_final = self.text.ln_f(h_text)
        logits = tc.matmul(text_final, table.T)
        motion_final = self.motion.ln_f(h_motion) if h_motion is not None else None
        return BackboneOutput(layout, logits, motion_final, attention, text_final)

    def forward_text(self, token_batch, valid=None):
        """The text branch on its own: plain causal attention over padded ids [B, K] -> logits [B, K, V]"""
        tokens = np.atleast_2d(np.asarray(token_batch, dtype=np.int64))
        batch, length = tokens.shape
        if length > self._config.context:
            raise ContextLengthError(f"sequence length {length} exceeds context {self._config.context}")
        valid = np.ones_like(tokens, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        table = self.token_table()
        h = tc.embedding_lookup(table, tokens) + tc.embedding_lookup(self.text.wpe, np.arange(length))
        mask = attention_mask(np.zeros_like(tokens), valid, True)
        for layer in self.text.layers:
            attended, _ = self._attend(layer.qkv(layer.ln1(h)), mask)
            h = h + layer.c_proj(attended)
            h = h + layer.mlp(layer.ln2(h))
        return tc.matmul(self.text.ln_f(h), table.T)

    def motion_proj_head(self, holder_states, holders=None):
        """[H, d] final holder states -> [H, c_dim] condition states"""
        holders = holders or self._config.holders
        if holder_states.shape[0] != holders:
            raise ContractError(f"expected {holders} holder states, got {holder_states.shape[0]}")
        return self.motion.proj_head(holder_states)

    def holder_conditions(self, output, seq_index, vocab):
        """Condition states of the <mholder_out> block of one sequence"""
        rows = output.motion_rows_of(seq_index, vocab.mholder_out_id)
        return self.motion_proj_head(tc.index_select(output.motion_hidden, rows))

    # Generation

    def next_token(self, logits, vocab, sampler="greedy", rng=None, temperature=1.0, top_k=5):
        logits = np.asarray(logits, dtype=np.float64).copy()
        # Holders are inserted by the loop, never sampled
        for banned in (vocab.pad_id, vocab.bos_id, vocab.mholder_in_id, vocab.mholder_out_id):
            logits[banned] = -np.inf
        if sampler == "greedy":
            return int(np.argmax(logits))
        if sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler '{sampler}', expected one of {SAMPLERS}")
        rng = rng or np.random.default_rng(0)
        scaled = logits / max(temperature, 1e-6)
        if sampler == "top_k":
            cutoff = np.sort(scaled)[-min(top_k, np.isfinite(scaled).sum())]
            scaled = np.where(scaled >= cutoff, scaled, -np.inf)
        probs = np.exp(scaled - scaled.max())
        probs /= probs.sum()
        return int(rng.choice(len(probs), p=probs))

    def generate_text(self, seq, vocab, sampler="greedy", max_len=32, seed=0, temperature=1.0, top_k=5):
        """Append tokens until <eos>, <som> or ``max_len`` new tokens"""
        seq = seq.copy()
        rng = np.random.default_rng(seed)
        with tc.no_grad():
            for _ in range(max_len):
                if len(seq) >= self._config.context:
                    break
                output = self.forward_batch([seq], vocab)
                token = self.next_token(output.logits_at(0, len(seq) - 1), vocab, sampler, rng, temperature, top_k)
                seq.append(token, 0, False)
                if token in (vocab.eos_id, vocab.som_id):
                    break
        return seq

    def generate_motion(self, seq, vocab, diffusion, steps=None, omega=None, seed=0, holders=None):
        """Insert H holders after <som>, run one forward pass, sample z0 and close with <eom>"""
        if len(seq) == 0 or seq.token_ids[-1] != vocab.som_id:
            raise ContractError("generate_motion needs a sequence ending in <som>")
        holders = holders or self._config.holders
        seq = seq.copy()
        for _ in range(holders):
            seq.append(vocab.mholder_out_id, 1, False)
        with tc.no_grad():
            output = self.forward_batch([seq], vocab)
            cond = self.holder_conditions(output, 0, vocab)
            z0 = diffusion.ddpm_sample(cond.data, steps=steps, omega=omega, seed=seed)
        seq.append(vocab.eom_id, 0, False)
        return z0, seq

