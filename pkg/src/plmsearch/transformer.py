"""Transformer encoder in which every width is its own hyper-parameter.

Per layer: multi-head attention whose head outputs are projected and summed,
residual + post layer norm, then a rectifier FFN with residual + post layer
norm. Logits use the transpose of the token embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import nn_core as nn
from .errors import BoundsError, ContractError, DimensionError, ValidationError

ARCH_FIELDS = ("l_t", "d_m", "d_q", "d_k", "d_v", "d_f", "d_o", "h")

LAYER_TENSORS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                 "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


@dataclass(frozen=True, order=True)
class ArchConfig:
    l_t: int
    d_m: int
    d_q: int
    d_k: int
    d_v: int
    d_f: int
    d_o: int
    h: int

    @classmethod
    def make(cls, l_t: int, d_m: int, d_f: int, h: int, d_qkv: int) -> "ArchConfig":
        """Build an arch with tied query/key/value widths and d_o = d_m."""
        return cls(l_t=l_t, d_m=d_m, d_q=d_qkv, d_k=d_qkv, d_v=d_qkv, d_f=d_f, d_o=d_m, h=h)

    @classmethod
    def parse(cls, text: str) -> "ArchConfig":
        """Parse the compact ``l_t-d_m-d_f-h-d_qkv`` form, e.g. ``5-564-1054-8-512``."""
        parts = text.strip().split("-")
        if len(parts) != 5:
            raise ValueError(f"expected 'l_t-d_m-d_f-h-d_qkv', got {text!r}")
        try:
            l_t, d_m, d_f, h, d_qkv = (int(p) for p in parts)
        except ValueError:
            raise ValueError(f"non-integer field in arch string {text!r}") from None
        return cls.make(l_t, d_m, d_f, h, d_qkv)

    def compact(self) -> str:
        if not (self.d_q == self.d_k == self.d_v):
            raise ValueError("compact form requires d_q == d_k == d_v")
        return f"{self.l_t}-{self.d_m}-{self.d_f}-{self.h}-{self.d_q}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ArchConfig":
        missing = [k for k in ARCH_FIELDS if k not in data]
        if missing:
            raise ValueError(f"arch is missing keys: {missing}")
        return cls(**{k: int(data[k]) for k in ARCH_FIELDS})

    @property
    def head_dim_q(self) -> int:
        return self.d_q // self.h

    @property
    def head_dim_v(self) -> int:
        return self.d_v // self.h

    def __str__(self):
        try:
            return self.compact()
        except ValueError:
            return repr(self)


def validate(arch: ArchConfig) -> list[str]:
    """Every violated structural constraint; an empty list means valid."""
    problems = []
    for name in ARCH_FIELDS:
        if getattr(arch, name) < 1:
            problems.append(f"{name} must be >= 1")
    if arch.d_q != arch.d_k:
        problems.append("d_q != d_k")
    if arch.d_o != arch.d_m:
        problems.append("d_o != d_m")
    if arch.h >= 1:
        if arch.d_q % arch.h:
            problems.append("d_q not divisible by h")
        if arch.d_k % arch.h:
            problems.append("d_k not divisible by h")
        if arch.d_v % arch.h:
            problems.append("d_v not divisible by h")
    return problems


def check(arch: ArchConfig) -> ArchConfig:
    problems = validate(arch)
    if problems:
        raise ValidationError(problems)
    return arch


def layer_prefix(i: int) -> str:
    return f"layers.{i}."


def param_shapes(arch: ArchConfig, vocab_size: int, max_len: int) -> dict[str, tuple]:
    """Ordered name -> shape map of every tensor of a model."""
    check(arch)
    shapes = {"tok_emb": (vocab_size, arch.d_m), "pos_emb": (max_len, arch.d_m)}
    for i in range(arch.l_t):
        p = layer_prefix(i)
        shapes.update({
            p + "wq": (arch.d_m, arch.d_q), p + "bq": (arch.d_q,),
            p + "wk": (arch.d_m, arch.d_k), p + "bk": (arch.d_k,),
            p + "wv": (arch.d_m, arch.d_v), p + "bv": (arch.d_v,),
            p + "wo": (arch.d_v, arch.d_o), p + "bo": (arch.d_o,),
            p + "ln1_g": (arch.d_m,), p + "ln1_b": (arch.d_m,),
            p + "w1": (arch.d_m, arch.d_f), p + "b1": (arch.d_f,),
            p + "w2": (arch.d_f, arch.d_m), p + "b2": (arch.d_m,),
            p + "ln2_g": (arch.d_m,), p + "ln2_b": (arch.d_m,),
        })
    return shapes


def param_count(arch: ArchConfig, vocab_size: int, max_len: int) -> int:
    check(arch)
    qkv = arch.d_q + arch.d_k + arch.d_v
    per_layer = (arch.d_m * qkv + qkv + arch.d_v * arch.d_o + arch.d_o
                 + arch.d_m * arch.d_f + arch.d_f + arch.d_f * arch.d_m + arch.d_m
                 + 4 * arch.d_m)
    return vocab_size * arch.d_m + max_len * arch.d_m + arch.l_t * per_layer


def flops_forward(arch: ArchConfig, seq_len: int) -> int:
    """Multiply-accumulates of one forward pass over ``seq_len`` tokens.

    Counts the Q/K/V projections, the score and context products, the output
    projection and both FFN matrices. Softmax, layer norm, bias adds,
    embeddings and the vocabulary head are excluded.
    """
    check(arch)
    if seq_len < 1:
        raise ContractError("seq_len must be >= 1")
    l = seq_len
    per_layer = (l * arch.d_m * (arch.d_q + arch.d_k + arch.d_v)
                 + l * l * arch.d_q + l * l * arch.d_v
                 + l * arch.d_v * arch.d_o
                 + l * arch.d_m * arch.d_f + l * arch.d_f * arch.d_m)
    return arch.l_t * per_layer


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations, by redrawing."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def init_params(arch: ArchConfig, vocab_size: int, max_len: int, rng: np.random.Generator,
                std: float = 0.02) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(arch, vocab_size, max_len).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif len(shape) == 1:
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = truncated_normal(rng, shape, std)
    return params


def _split_heads(tape, x, h):
    # [..., l, d] -> [..., h, l, d/h]
    lead = x.shape[:-2]
    l, d = x.shape[-2:]
    x = nn.reshape(tape, x, lead + (l, h, d // h))
    k = len(lead)
    return nn.transpose(tape, x, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(tape, x):
    lead = x.shape[:-3]
    h, l, dh = x.shape[-3:]
    k = len(lead)
    x = nn.transpose(tape, x, tuple(range(k)) + (k + 1, k, k + 2))
    return nn.reshape(tape, x, lead + (l, h * dh))


def mha_forward(tape: nn.Tape, H, w: Mapping, h: int, eps: float = 1e-12):
    """Multi-head attention block with residual and post layer norm.

    ``w`` maps wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b to nodes or arrays.
    Head ``i`` owns the contiguous column block ``[i*d/h, (i+1)*d/h)`` of the
    query/key/value projections and the matching row block of ``wo``; the
    per-head outputs are summed, which is the same as projecting the
    concatenated heads. Returns ``(output, attention)`` where attention has
    shape ``[..., h, l, l]``.
    """
    Hv = nn._value(H)
    d_q = nn._value(w["wq"]).shape[1]
    d_v = nn._value(w["wv"]).shape[1]
    if Hv.shape[-1] != nn._value(w["wq"]).shape[0]:
        raise DimensionError(f"hidden states {Hv.shape} do not match wq {nn._value(w['wq']).shape}")
    if d_q % h or d_v % h:
        raise DimensionError(f"d_q={d_q}, d_v={d_v} not divisible by h={h}")
    q = nn.add(tape, nn.matmul(tape, H, w["wq"]), w["bq"])
    k = nn.add(tape, nn.matmul(tape, H, w["wk"]), w["bk"])
    v = nn.add(tape, nn.matmul(tape, H, w["wv"]), w["bv"])
    qh, kh, vh = _split_heads(tape, q, h), _split_heads(tape, k, h), _split_heads(tape, v, h)
    nd = qh.value.ndim
    kt = nn.transpose(tape, kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = nn.scale(tape, nn.matmul(tape, qh, kt), 1.0 / math.sqrt(d_q / h))
    attn = nn.softmax_rows(tape, scores)
    ctx = _merge_heads(tape, nn.matmul(tape, attn, vh))
    out = nn.add(tape, nn.matmul(tape, ctx, w["wo"]), w["bo"])
    res = nn.add(tape, H, out)
    return nn.layer_norm(tape, res, w["ln1_g"], w["ln1_b"], eps), attn


def ffn_forward(tape: nn.Tape, H_mha, w: Mapping, eps: float = 1e-12):
    """``LayerNorm(H + max(0, H W1 + b1) W2 + b2)``."""
    a = nn.relu(tape, nn.add(tape, nn.matmul(tape, H_mha, w["w1"]), w["b1"]))
    f = nn.add(tape, nn.matmul(tape, a, w["w2"]), w["b2"])
    return nn.layer_norm(tape, nn.add(tape, H_mha, f), w["ln2_g"], w["ln2_b"], eps)


@dataclass
class EncoderOutput:
    hidden: nn.Node
    attentions: list
    logits: nn.Node
    tape: nn.Tape
    params: dict


def register(tape: nn.Tape, params: Mapping[str, np.ndarray], arch: ArchConfig) -> dict[str, nn.Node]:
    """Put every model tensor on ``tape`` after checking its shape."""
    V, d_m = np.shape(params["tok_emb"])
    L = np.shape(params["pos_emb"])[0]
    nodes = {}
    for name, shape in param_shapes(arch, V, L).items():
        if name not in params:
            raise DimensionError(f"missing parameter {name}")
        if tuple(np.shape(params[name])) != shape:
            raise DimensionError(f"{name}: expected {shape}, got {tuple(np.shape(params[name]))}")
        nodes[name] = tape.param(name, params[name])
    return nodes


def encoder_forward(params: Mapping[str, np.ndarray], arch: ArchConfig, ids,
                    tape: nn.Tape | None = None) -> EncoderOutput:
    """Embeddings, ``arch.l_t`` identical layers, tied-embedding logits.

    ``ids`` is ``[l]`` or ``[batch, l]``. Pass a recording tape to take
    gradients; without one an inference-only tape is used.
    """
    ids = np.asarray(ids, dtype=np.int64)
    tape = tape if tape is not None else nn.Tape(record=False)
    nodes = register(tape, params, arch)
    V = nodes["tok_emb"].shape[0]
    L = nodes["pos_emb"].shape[0]
    l = ids.shape[-1]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise BoundsError(f"token id out of range [0, {V})")
    if l > L:
        raise ContractError(f"sequence length {l} exceeds max_len {L}")
    x = nn.add(tape, nn.embedding(tape, nodes["tok_emb"], ids),
               nn.embedding(tape, nodes["pos_emb"], np.arange(l)))
    attentions = []
    for i in range(arch.l_t):
        p = layer_prefix(i)
        w = {k: nodes[p + k] for k in LAYER_TENSORS}
        x, attn = mha_forward(tape, x, w, arch.h)
        x = ffn_forward(tape, x, w)
        attentions.append(attn)
    et = nn.transpose(tape, nodes["tok_emb"], (1, 0))
    logits = nn.matmul(tape, x, et)
    return EncoderOutput(hidden=x, attentions=attentions, logits=logits, tape=tape, params=nodes)


def relu_pattern(params: Mapping[str, np.ndarray], arch: ArchConfig, ids) -> bytes:
    """On/off pattern of every FFN rectifier for ``ids``; a region signature
    for finite-difference checks."""
    tape = nn.Tape(record=False, trace_relu=True)
    encoder_forward(params, arch, ids, tape)
    return b"".join(np.packbits(m).tobytes() for m in tape.relu_masks)
