"""Parameter containers and the layers every network here is built from"""
import logging
import os

import numpy as np

import array_store
import tensor_core as tc
from errors import DataError, PrerequisiteError
from tensor_core import Tensor

logger = logging.getLogger(__name__)

NEG_INF = -1e9


class Parameter(Tensor):
    """A trainable leaf tensor"""

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


def init_normal(rng, shape, std=0.02):
    return (rng.standard_normal(shape) * std).astype(tc.get_dtype())


class Module:
    """Walks attributes to find parameters, sub-modules and numpy buffers"""

    def register_buffer(self, name, value):
        names = self.__dict__.setdefault("_buffer_names", [])
        if name not in names:
            names.append(name)
        setattr(self, name, np.asarray(value))

    def _children(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        params = {}
        for key, value in self._children():
            full = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = full
                params[full] = value
            else:
                params.update(value.named_parameters(full + "."))
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self, prefix=""):
        buffers = {f"{prefix}{name}": getattr(self, name) for name in self.__dict__.get("_buffer_names", [])}
        for key, value in self._children():
            if isinstance(value, Module):
                buffers.update(value.named_buffers(f"{prefix}{key}."))
        return buffers

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = [name for name in params if name not in state]
        if missing:
            raise DataError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DataError(f"parameter '{name}': checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(value, dtype=p.data.dtype)
        for name in self.named_buffers():
            if name in state:
                owner, attr = self._locate(name)
                setattr(owner, attr, np.array(state[name], copy=True))

    def _locate(self, dotted):
        owner = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            owner = owner[int(part)] if isinstance(owner, (list, tuple)) else getattr(owner, part)
        return owner, parts[-1]


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, std=0.02):
        self.weight = Parameter(init_normal(rng, (in_dim, out_dim), std))
        self.bias = Parameter(np.zeros(out_dim, dtype=tc.get_dtype())) if bias else None

    def __call__(self, x):
        out = tc.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Parameter(np.ones(dim, dtype=tc.get_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=tc.get_dtype()))
        self._eps = eps

    def __call__(self, x):
        return tc.layer_norm(x, self.gain, self.bias, self._eps)


class MLP(Module):
    """Linear -> GELU -> Linear"""

    def __init__(self, in_dim, hidden_dim, out_dim, rng):
        self.fc = Linear(in_dim, hidden_dim, rng)
        self.proj = Linear(hidden_dim, out_dim, rng)

    def __call__(self, x):
        return self.proj(tc.gelu(self.fc(x)))


def split_heads(x, heads):
    """[B, L, D] -> [B, heads, L, D / heads]"""
    batch, length, dim = x.shape
    return x.reshape(batch, length, heads, dim // heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    """[B, heads, L, dh] -> [B, L, heads * dh]"""
    batch, heads, length, head_dim = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, length, heads * head_dim)


def scaled_dot_attention(q, k, v, mask=None):
    """Softmax attention; ``mask`` is an additive numpy array broadcastable to the scores"""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = tc.matmul(q, k.transpose(0, 1, 3, 2)) * scale
    if mask is not None:
        scores = scores + mask.astype(scores.dtype)
    weights = tc.softmax(scores, axis=-1)
    return tc.matmul(weights, v), weights


def padding_mask(valid):
    """Additive key mask [B, 1, 1, L] from a boolean [B, L] validity array"""
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def causal_mask(length):
    allowed = np.tril(np.ones((length, length), dtype=bool))
    return np.where(allowed, 0.0, NEG_INF)[None, None, :, :]


def sinusoidal_embedding(positions, dim, max_period=10000.0):
    """Fixed sin/cos features of integer or real ``positions``"""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(tc.get_dtype())


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng, kv_dim=None):
        kv_dim = kv_dim or dim
        self.query = Linear(dim, dim, rng)
        self.key = Linear(kv_dim, dim, rng)
        self.value = Linear(kv_dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self._heads = heads

    def __call__(self, x, context=None, mask=None):
        context = x if context is None else context
        q = split_heads(self.query(x), self._heads)
        k = split_heads(self.key(context), self._heads)
        v = split_heads(self.value(context), self._heads)
        attended, _ = scaled_dot_attention(q, k, v, mask)
        return self.out(merge_heads(attended))


class TransformerBlock(Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward"""

    def __init__(self, dim, heads, ffn_dim, rng, cross_dim=None):
        self.ln_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln_cross = LayerNorm(dim) if cross_dim else None
        self.cross = MultiHeadAttention(dim, heads, rng, kv_dim=cross_dim) if cross_dim else None
        self.ln_ffn = LayerNorm(dim)
        self.ffn = MLP(dim, ffn_dim, dim, rng)

    def __call__(self, x, mask=None, memory=None, memory_mask=None):
        x = x + self.attn(self.ln_attn(x), mask=mask)
        if self.cross is not None and memory is not None:
            x = x + self.cross(self.ln_cross(x), context=memory, mask=memory_mask)
        return x + self.ffn(self.ln_ffn(x))


def masked_mean(x, valid):
    """Mean over axis 1 of [B, L, D] counting only valid positions"""
    valid = np.asarray(valid, dtype=x.dtype)
    counts = np.maximum(valid.sum(axis=1, keepdims=True), 1.0)
    return (x * valid[:, :, None]).sum(axis=1) * (1.0 / counts)


def skip_forward(blocks, x, **kwargs):
    """Run ``blocks`` with long skips: block i's output is added to block N-1-i's input"""
    stash = []
    n = len(blocks)
    for i, block in enumerate(blocks):
        if i >= n - n // 2:
            x = x + stash.pop()
        x = block(x, **kwargs)
        if i < n // 2:
            stash.append(x)
    return x


def save_module(module, path, metadata=None):
    """Parameters and buffers of ``module`` into a named-array container"""
    array_store.save_arrays(path, module.state_dict(), metadata)
    logger.info("Saved %d parameters to %s", module.num_parameters(), path)


def read_checkpoint(path):
    if not os.path.exists(path):
        raise PrerequisiteError(f"checkpoint not found: {path}")
    return array_store.load_arrays(path)
