"""Weight-sharing supernet and sub-model extraction.

A sub-model reads the first ``l_t`` layers and, on every axis, an index
prefix of each supernet tensor. Attention projections support two layouts:

* ``HEAD_PREFIX`` keeps the per-head width and takes the first ``h`` heads.
* ``PER_HEAD_SLICE`` keeps every head and takes the first ``d_q / h``
  columns inside each head block (needed when a student's attention maps
  must line up head-for-head with a teacher's).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import checkpoint
from . import transformer as tf
from .errors import BoundsError, CheckpointError, ContractError, DimensionError
from .transformer import ArchConfig


class Strategy(str, enum.Enum):
    HEAD_PREFIX = "HEAD_PREFIX"
    PER_HEAD_SLICE = "PER_HEAD_SLICE"


@dataclass
class Model:
    """A stand-alone model: an architecture plus its own parameter arrays."""

    arch: ArchConfig
    params: dict

    @property
    def vocab_size(self) -> int:
        return self.params["tok_emb"].shape[0]

    @property
    def max_len(self) -> int:
        return self.params["pos_emb"].shape[0]

    def forward(self, ids, tape=None):
        return tf.encoder_forward(self.params, self.arch, ids, tape)

    def save(self, path, meta: Mapping | None = None) -> str:
        header = {"kind": "model", "arch": self.arch.to_dict(), **(meta or {})}
        return checkpoint.save(path, self.params, header)

    @classmethod
    def load(cls, path) -> "Model":
        tensors, header = checkpoint.load(path)
        meta = header["meta"]
        if meta.get("kind") != "model":
            raise CheckpointError(f"{path} holds a {meta.get('kind')!r}, not a model")
        return cls(ArchConfig.from_dict(meta["arch"]), tensors)


@dataclass
class SuperNet:
    config: ArchConfig
    vocab_size: int
    max_len: int
    params: dict = field(repr=False)
    seed: int | None = None

    def save(self, path, meta: Mapping | None = None) -> str:
        header = {"kind": "supernet", "super_config": self.config.to_dict(),
                  "vocab_size": self.vocab_size, "max_len": self.max_len,
                  "seed": self.seed, **(meta or {})}
        return checkpoint.save(path, self.params, header)

    @classmethod
    def load(cls, path) -> tuple["SuperNet", dict]:
        tensors, header = checkpoint.load(path)
        meta = header["meta"]
        if meta.get("kind") != "supernet":
            raise CheckpointError(f"{path} holds a {meta.get('kind')!r}, not a supernet")
        net = cls(ArchConfig.from_dict(meta["super_config"]), int(meta["vocab_size"]),
                  int(meta["max_len"]), tensors, meta.get("seed"))
        return net, meta

    def copy(self) -> "SuperNet":
        return SuperNet(self.config, self.vocab_size, self.max_len,
                        {k: v.copy() for k, v in self.params.items()}, self.seed)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.params.items()}

    def digest(self) -> str:
        return checkpoint.tensors_sha256(self.params)


def build_supernet(super_config: ArchConfig, vocab_size: int, max_len: int, seed: int,
                   std: float = 0.02) -> SuperNet:
    tf.check(super_config)
    rng = np.random.default_rng(seed)
    params = tf.init_params(super_config, vocab_size, max_len, rng, std)
    return SuperNet(super_config, vocab_size, max_len, params, seed)


def _head_columns(total_heads: int, head_width: int, take: int) -> np.ndarray:
    return np.concatenate([np.arange(i * head_width, i * head_width + take) for i in range(total_heads)])


@dataclass
class SubModelView:
    """Index ranges into a supernet that realise one architecture.

    ``index`` maps each tensor name of the sub-model to a per-axis tuple of
    slices (prefix ranges) or integer arrays (per-head column selections).
    """

    supernet: SuperNet = field(repr=False)
    arch: ArchConfig
    strategy: Strategy
    index: dict = field(repr=False)

    def params(self) -> dict[str, np.ndarray]:
        """Sub-model tensors; prefix slices are zero-copy views."""
        return {name: _read(self.supernet.params[name], idx) for name, idx in self.index.items()}

    def forward(self, ids, tape=None):
        return tf.encoder_forward(self.params(), self.arch, ids, tape)

    def flat_indices(self, name: str) -> np.ndarray:
        """Flat positions within the supernet tensor that the view reads."""
        shape = self.supernet.params[name].shape
        axes = [np.arange(n)[ix] if isinstance(ix, slice) else ix for ix, n in zip(self.index[name], shape)]
        grid = np.ix_(*axes)
        return np.ravel_multi_index(tuple(np.broadcast_arrays(*grid)), shape).reshape(-1)


def _read(arr: np.ndarray, idx: tuple) -> np.ndarray:
    if all(isinstance(ix, slice) for ix in idx):
        return arr[idx]
    axes = [np.arange(n)[ix] if isinstance(ix, slice) else ix for ix, n in zip(idx, arr.shape)]
    return arr[np.ix_(*axes)]


def fits(super_config: ArchConfig, arch: ArchConfig) -> list[str]:
    """Dimensions of ``arch`` that exceed the supernet's."""
    over = []
    for name in ("l_t", "d_m", "d_q", "d_k", "d_v", "d_f", "d_o", "h"):
        if getattr(arch, name) > getattr(super_config, name):
            over.append(f"{name}={getattr(arch, name)} > {getattr(super_config, name)}")
    return over


def extract_submodel(supernet: SuperNet, arch: ArchConfig, strategy=Strategy.HEAD_PREFIX) -> SubModelView:
    tf.check(arch)
    strategy = Strategy(strategy)
    sup = supernet.config
    over = fits(sup, arch)
    if over:
        raise BoundsError("architecture exceeds supernet: " + ", ".join(over))
    if strategy is Strategy.HEAD_PREFIX:
        if arch.d_q // arch.h != sup.d_q // sup.h or arch.d_v // arch.h != sup.d_v // sup.h:
            raise ContractError(
                f"HEAD_PREFIX keeps the per-head width {sup.d_q // sup.h}; "
                f"arch has {arch.d_q // arch.h} (q) and {arch.d_v // arch.h} (v)")
        qcols = slice(0, arch.d_q)
        vcols = slice(0, arch.d_v)
    else:
        if arch.h != sup.h:
            raise ContractError(f"PER_HEAD_SLICE requires h == {sup.h}, got h={arch.h}")
        qcols = _head_columns(sup.h, sup.d_q // sup.h, arch.d_q // sup.h)
        vcols = _head_columns(sup.h, sup.d_v // sup.h, arch.d_v // sup.h)
    m = slice(0, arch.d_m)
    f = slice(0, arch.d_f)
    full = slice(None)
    index = {"tok_emb": (full, m), "pos_emb": (full, m)}
    for i in range(arch.l_t):
        p = tf.layer_prefix(i)
        index.update({
            p + "wq": (m, qcols), p + "bq": (qcols,),
            p + "wk": (m, qcols), p + "bk": (qcols,),
            p + "wv": (m, vcols), p + "bv": (vcols,),
            p + "wo": (vcols, m), p + "bo": (m,),
            p + "ln1_g": (m,), p + "ln1_b": (m,),
            p + "w1": (m, f), p + "b1": (f,),
            p + "w2": (f, m), p + "b2": (m,),
            p + "ln2_g": (m,), p + "ln2_b": (m,),
        })
    return SubModelView(supernet, arch, strategy, index)


def materialize(view: SubModelView) -> Model:
    """Copy the view's tensors into an independent model."""
    return Model(view.arch, {k: np.array(v, dtype=np.float32, copy=True) for k, v in view.params().items()})


def scatter_gradients(view: SubModelView, grads: Mapping[str, np.ndarray],
                      buffer: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Add sub-model gradients into a dense supernet-shaped buffer.

    Each gradient lands on exactly the slices the view reads; a fresh zero
    buffer is created when none is given.
    """
    if buffer is None:
        buffer = view.supernet.zero_grads()
    for name, g in grads.items():
        if name not in view.index:
            raise DimensionError(f"gradient for {name!r} which the view does not read")
        idx = view.index[name]
        target = buffer[name]
        expected = _read(target, idx).shape
        if np.shape(g) != expected:
            raise DimensionError(f"gradient {name}: {np.shape(g)} vs view shape {expected}")
        if all(isinstance(ix, slice) for ix in idx):
            target[idx] += g
        else:
            axes = [np.arange(n)[ix] if isinstance(ix, slice) else ix for ix, n in zip(idx, target.shape)]
            target[np.ix_(*axes)] += g
    return buffer
