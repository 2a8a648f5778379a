"""Post-LN transformer encoder used for both teacher and students."""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, field

import numpy as np

from . import numerics as nx
from .exceptions import ConfigurationError, InputError
from .numerics import Tensor

ACTIVATION_NAMES = ("gelu", "relu", "silu")


@dataclass(frozen=True, order=True)
class ArchState:
    """One student/teacher architecture.

    Field order is the canonical tuple order, so ``sorted`` over states is the
    lexicographic tie-break used by the controller ranking.
    """

    hidden_layers: int
    attention_heads: int
    hidden_size: int
    intermediate_size: int
    activation: str

    def __post_init__(self):
        dims = (self.hidden_layers, self.attention_heads, self.hidden_size, self.intermediate_size)
        if any(int(d) != d or d <= 0 for d in dims):
            raise ConfigurationError(f"architecture sizes must be positive integers, got {dims}")
        if self.activation not in ACTIVATION_NAMES:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.hidden_size % self.attention_heads:
            raise ConfigurationError(
                f"hidden size {self.hidden_size} is not divisible by {self.attention_heads} heads")

    @property
    def head_dim(self):
        return self.hidden_size // self.attention_heads

    def as_tuple(self):
        return astuple(self)

    def __str__(self):
        return ",".join(str(v) for v in astuple(self))


@dataclass
class ModelOutputs:
    hidden_states: list
    qkv: dict = field(default_factory=dict)


def param_count(arch, vocab_size, max_seq):
    """Number of trainable scalars in :func:`build_model`'s encoder."""
    d, f, n_layers = arch.hidden_size, arch.intermediate_size, arch.hidden_layers
    embeddings = vocab_size * d + max_seq * d + 2 * d
    attention = 4 * (d * d + d) + 2 * d
    ffn = d * f + f + f * d + d + 2 * d
    return embeddings + n_layers * (attention + ffn)


class TransformerEncoder:
    def __init__(self, arch, vocab_size, max_seq, params):
        self.arch = arch
        self.vocab_size = vocab_size
        self.max_seq = max_seq
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return TransformerEncoder(self.arch, self.vocab_size, self.max_seq, params)

    def forward(self, tokens, capture_qkv_layers=()):
        """Run the encoder.

        ``tokens`` is ``(T,)`` or ``(B, T)``; outputs keep the same leading
        shape. Layer indices in ``capture_qkv_layers`` are 1-based.
        """
        ids = np.asarray(tokens)
        if ids.dtype.kind not in "iu":
            raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise InputError(f"tokens must be 1-D or 2-D, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise InputError(f"token id out of range [0, {self.vocab_size})")
        seq = ids.shape[1]
        if seq > self.max_seq:
            raise InputError(f"sequence length {seq} exceeds max_seq {self.max_seq}")
        capture = set(capture_qkv_layers)
        bad = [i for i in capture if not 1 <= i <= self.arch.hidden_layers]
        if bad:
            raise InputError(f"qkv capture layers {bad} outside [1, {self.arch.hidden_layers}]")

        p = self.params
        arch = self.arch
        n_heads, head_dim = arch.attention_heads, arch.head_dim
        batch = ids.shape[0]

        x = nx.embedding(p["embeddings.word"], ids) + p["embeddings.position"][:seq]
        x = nx.layer_norm(x, p["embeddings.ln.gamma"], p["embeddings.ln.beta"])
        hidden, qkv = [], {}
        scale = 1.0 / math.sqrt(head_dim)
        for layer in range(1, arch.hidden_layers + 1):
            pre = f"layers.{layer}."
            q = x @ p[pre + "attn.q.weight"] + p[pre + "attn.q.bias"]
            k = x @ p[pre + "attn.k.weight"] + p[pre + "attn.k.bias"]
            v = x @ p[pre + "attn.v.weight"] + p[pre + "attn.v.bias"]
            if layer in capture:
                qkv[layer] = (q[0], k[0], v[0]) if squeeze else (q, k, v)
            qh = q.reshape(batch, seq, n_heads, head_dim).transpose(0, 2, 1, 3)
            kh = k.reshape(batch, seq, n_heads, head_dim).transpose(0, 2, 1, 3)
            vh = v.reshape(batch, seq, n_heads, head_dim).transpose(0, 2, 1, 3)
            attn = nx.softmax_rows((qh @ kh.swapaxes(-1, -2)) * scale)
            ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(batch, seq, arch.hidden_size)
            out = ctx @ p[pre + "attn.o.weight"] + p[pre + "attn.o.bias"]
            x = nx.layer_norm(x + out, p[pre + "attn_ln.gamma"], p[pre + "attn_ln.beta"])
            ff = nx.activation(arch.activation, x @ p[pre + "ffn.in.weight"] + p[pre + "ffn.in.bias"])
            ff = ff @ p[pre + "ffn.out.weight"] + p[pre + "ffn.out.bias"]
            x = nx.layer_norm(x + ff, p[pre + "ffn_ln.gamma"], p[pre + "ffn_ln.beta"])
            hidden.append(x[0] if squeeze else x)
        return ModelOutputs(hidden, qkv)

    __call__ = forward


def _param_shapes(arch, vocab_size, max_seq):
    d, f = arch.hidden_size, arch.intermediate_size
    shapes = {
        "embeddings.word": (vocab_size, d),
        "embeddings.position": (max_seq, d),
        "embeddings.ln.gamma": (d,),
        "embeddings.ln.beta": (d,),
    }
    for layer in range(1, arch.hidden_layers + 1):
        pre = f"layers.{layer}."
        for name in "qkvo":
            shapes[pre + f"attn.{name}.weight"] = (d, d)
            shapes[pre + f"attn.{name}.bias"] = (d,)
        shapes[pre + "attn_ln.gamma"] = (d,)
        shapes[pre + "attn_ln.beta"] = (d,)
        shapes[pre + "ffn.in.weight"] = (d, f)
        shapes[pre + "ffn.in.bias"] = (f,)
        shapes[pre + "ffn.out.weight"] = (f, d)
        shapes[pre + "ffn.out.bias"] = (d,)
        shapes[pre + "ffn_ln.gamma"] = (d,)
        shapes[pre + "ffn_ln.beta"] = (d,)
    return shapes


def build_model(arch, vocab_size=512, max_seq=32, seed=0, init_std=0.02):
    """Deterministically initialise an encoder (BERT-style N(0, 0.02) weights)."""
    if not isinstance(arch, ArchState):
        raise ConfigurationError(f"expected ArchState, got {type(arch).__name__}")
    if vocab_size < 2 or max_seq < 1:
        raise ConfigurationError(f"need vocab_size >= 2 and max_seq >= 1, got {vocab_size}, {max_seq}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(arch, vocab_size, max_seq).items():
        if name.endswith("gamma"):
            data = np.ones(shape)
        elif name.endswith(("beta", "bias")):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, init_std, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return TransformerEncoder(arch, vocab_size, max_seq, params)


def forward(model, tokens, capture_qkv_layers=()):
    return model.forward(tokens, capture_qkv_layers)
