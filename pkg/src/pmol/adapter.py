"""Grouped LoRA experts behind a softmax router with one extra "empty" slot.

Row-vector convention throughout: an activation ``x`` of width ``a`` maps
through ``x @ A @ B`` (``A`` is a×r, ``B`` is r×b) and the frozen projection
is ``x @ W0`` with ``W0`` a×b.  The router emits K+1 weights; the last one
belongs to the empty expert, which has no parameters and contributes
nothing, so the real experts share at most all of the mass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import DimensionError, Rng, Tensor

DEFAULT_SC = 0.8
LARGE_EXPERT_COUNT = 128


class ConfigError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """The packed expert tensors no longer match the per-expert matrices."""


@dataclass(frozen=True)
class GroupEntry:
    preference: int
    start: int
    end: int
    sc: float = DEFAULT_SC
    name: str | None = None

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class ExpertGroupTable:
    """Maps each preference to a contiguous expert range ``[start, end)``."""

    entries: tuple[GroupEntry, ...]
    K: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.K < 1:
            raise ConfigError("need at least one expert")
        seen = set()
        covered = np.zeros(self.K, dtype=int)
        for e in self.entries:
            if e.preference in seen:
                raise ConfigError(f"preference {e.preference} listed twice")
            seen.add(e.preference)
            if not (0 <= e.start < e.end <= self.K):
                raise ConfigError(f"bad expert range ({e.start}, {e.end}) for K={self.K}")
            if not (0.0 < e.sc <= 1.0):
                raise ConfigError(f"soft constraint {e.sc} outside (0, 1]")
            covered[e.start:e.end] += 1
        if (covered > 1).any():
            raise ConfigError("expert ranges overlap")
        if (covered == 0).any():
            raise ConfigError(f"expert ranges leave experts {np.flatnonzero(covered == 0).tolist()} uncovered")

    @classmethod
    def even(cls, n_preferences: int, experts_per_group: int, sc=DEFAULT_SC,
             names=None) -> ExpertGroupTable:
        scs = [sc] * n_preferences if np.isscalar(sc) else list(sc)
        if len(scs) != n_preferences:
            raise ConfigError("one sc value per preference")
        entries = [
            GroupEntry(i, i * experts_per_group, (i + 1) * experts_per_group, float(scs[i]),
                       None if names is None else names[i])
            for i in range(n_preferences)
        ]
        return cls(tuple(entries), n_preferences * experts_per_group)

    @property
    def preferences(self) -> list[int]:
        return [e.preference for e in self.entries]

    def entry(self, preference) -> GroupEntry:
        for e in self.entries:
            if e.preference == preference:
                return e
        raise KeyError(f"unknown preference {preference!r}")

    def resolve(self, label) -> int:
        """Preference id for an int id, a registered name, or a numeric string."""
        for e in self.entries:
            if label == e.preference or (e.name is not None and label == e.name):
                return e.preference
        if isinstance(label, str) and label.strip().lstrip("-").isdigit():
            return self.resolve(int(label))
        raise KeyError(f"unknown preference {label!r}")

    def with_sc(self, scs: dict) -> ExpertGroupTable:
        entries = [GroupEntry(e.preference, e.start, e.end, float(scs.get(e.preference, e.sc)), e.name)
                   for e in self.entries]
        return ExpertGroupTable(tuple(entries), self.K)

    def to_dict(self) -> dict:
        return {"K": self.K, "entries": [
            {"preference": e.preference, "start": e.start, "end": e.end, "sc": e.sc, "name": e.name}
            for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> ExpertGroupTable:
        return cls(tuple(GroupEntry(**e) for e in d["entries"]), int(d["K"]))


@dataclass
class LoraExpert:
    A: Tensor  # a x r
    B: Tensor  # r x b

    @property
    def rank(self) -> int:
        return self.A.shape[1]


@dataclass
class Router:
    W: Tensor  # h x (K+1)
    bias: Tensor  # K+1


@dataclass
class PmolLayer:
    experts: list[LoraExpert]
    router: Router
    groups: ExpertGroupTable
    _packed: tuple | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.experts)

    @property
    def a(self) -> int:
        return self.experts[0].A.shape[0]

    @property
    def b(self) -> int:
        return self.experts[0].B.shape[1]

    @property
    def r(self) -> int:
        return self.experts[0].rank

    @property
    def stacked(self) -> tuple[np.ndarray, np.ndarray] | None:
        """``(A_all[K,a,r], B_all[K,r,b])`` from the last pack, if any."""
        if self._packed is None:
            return None
        return self._packed[0], self._packed[1]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, e in enumerate(self.experts):
            out[f"experts.{k}.A"] = e.A
            out[f"experts.{k}.B"] = e.B
        out["router.W"] = self.router.W
        out["router.bias"] = self.router.bias
        return out

    def _versions(self) -> tuple:
        return tuple((id(e.A.data), e.A.version, id(e.B.data), e.B.version) for e in self.experts)

    def is_packed_current(self) -> bool:
        return self._packed is not None and self._packed[4] == self._versions()


def init_pmol_layer(a: int, b: int, r: int, groups: ExpertGroupTable, rng: Rng,
                    router_in: int | None = None) -> PmolLayer:
    """Fresh layer: A ~ N(0, std 1/r), B = 0, router W ~ N(0, std 0.02), bias 0.

    ``router_in`` defaults to ``a`` (the router reads the same activation the
    experts consume).
    """
    if min(a, b, r) < 1:
        raise ConfigError("dimensions must be positive")
    if r > min(a, b) / 2:
        raise ConfigError(f"rank {r} too large for a={a}, b={b} (max {min(a, b) // 2})")
    K = groups.K
    if K >= LARGE_EXPERT_COUNT:
        warnings.warn(f"{K} experts: most will receive negligible router weight", stacklevel=2)
    h = a if router_in is None else router_in
    experts = [
        LoraExpert(Tensor(rng.normal((a, r), std=1.0 / r), requires_grad=True),
                   Tensor(np.zeros((r, b)), requires_grad=True))
        for _ in range(K)
    ]
    router = Router(Tensor(rng.normal((h, K + 1), std=0.02), requires_grad=True),
                    Tensor(np.zeros(K + 1), requires_grad=True))
    layer = PmolLayer(experts, router, groups)
    stack_experts(layer)
    return layer


def router_forward(layer: PmolLayer, x: Tensor) -> Tensor:
    """softmax(x W_r + b) over K+1 slots; slot K is the empty expert."""
    W = layer.router.W
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"router expects width {W.shape[0]}, got input {x.shape}")
    return nc.softmax(nc.matmul(x, W) + layer.router.bias, axis=-1)


def lora_forward(expert: LoraExpert, x: Tensor) -> Tensor:
    """``(x A) B``; the a×b product is never formed."""
    if x.shape[-1] != expert.A.shape[0]:
        raise DimensionError(f"expert expects width {expert.A.shape[0]}, got input {x.shape}")
    return nc.matmul(nc.matmul(x, expert.A), expert.B)


def _check_base(layer: PmolLayer, W0: Tensor, x: Tensor) -> None:
    if W0.shape != (layer.a, layer.b):
        raise DimensionError(f"W0 shape {W0.shape} does not match experts ({layer.a}, {layer.b})")
    if x.ndim < 2 or x.shape[-1] != layer.a:
        raise DimensionError(f"input shape {x.shape} incompatible with width {layer.a}")


def pmol_forward_sequential(layer: PmolLayer, W0: Tensor, x: Tensor, weights: Tensor | None = None,
                            return_weights: bool = False):
    """Reference path: ``x W0 + sum_i w_i E_i(x)`` one expert at a time."""
    _check_base(layer, W0, x)
    w = router_forward(layer, x) if weights is None else weights
    out = nc.matmul(x, W0)
    for i, expert in enumerate(layer.experts):
        out = out + w[..., i:i + 1] * lora_forward(expert, x)
    return (out, w) if return_weights else out


def stack_experts(layer: PmolLayer) -> None:
    """Pack expert matrices into contiguous arrays for the batched path.

    Must run after every optimizer step; the batched path refuses to use a
    pack whose source tensors have changed since.
    """
    K, a, r, b = layer.K, layer.a, layer.r, layer.b
    A_all = np.stack([e.A.data for e in layer.experts])
    B_all = np.stack([e.B.data for e in layer.experts])
    A_cat = np.ascontiguousarray(A_all.transpose(1, 0, 2).reshape(a, K * r))
    B_cat = B_all.reshape(K * r, b)
    layer._packed = (A_all, B_all, A_cat, B_cat, layer._versions())


def _grouped_lora_mix(layer: PmolLayer, x: Tensor, w: Tensor) -> Tensor:
    """``sum_k w_k (x A_k) B_k`` as two GEMMs over the packed experts.

    U = x A_cat holds every expert's rank-r projection side by side
    ([N, K*r]).  Scaling each r-wide block by its router weight and then
    multiplying by B_cat contracts over (expert, rank) in one product,
    which equals weighting the per-expert outputs afterwards.
    """
    if not layer.is_packed_current():
        raise StaleCacheError("packed experts are stale; call stack_experts after updating experts")
    _, _, A_cat, B_cat, _ = layer._packed
    K, a, r, b = layer.K, layer.a, layer.r, layer.b
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, a)
    w2 = w.data.reshape(-1, K + 1)
    U = x2 @ A_cat
    wr = np.repeat(w2[:, :K], r, axis=1)
    Uw = U * wr
    out = (Uw @ B_cat).reshape(*lead, b)

    def bw(g):
        g2 = g.reshape(-1, b)
        gUw = g2 @ B_cat.T
        gU = gUw * wr
        gx = (gU @ A_cat.T).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.zeros_like(w2)
            gw[:, :K] = (gUw * U).reshape(-1, K, r).sum(axis=-1)
            gw = gw.reshape(w.shape)
        gA = (x2.T @ gU).reshape(a, K, r).transpose(1, 0, 2)
        gB = (Uw.T @ g2).reshape(K, r, b)
        return (gx, gw, *gA, *gB)

    inputs = [x, w] + [e.A for e in layer.experts] + [e.B for e in layer.experts]
    return nc.record(out, inputs, bw)


def pmol_forward_parallel(layer: PmolLayer, W0: Tensor, x_batch: Tensor, weights: Tensor | None = None,
                          return_weights: bool = False):
    """Batched path, numerically equivalent to :func:`pmol_forward_sequential`."""
    _check_base(layer, W0, x_batch)
    w = router_forward(layer, x_batch) if weights is None else weights
    out = nc.matmul(x_batch, W0) + _grouped_lora_mix(layer, x_batch, w)
    return (out, w) if return_weights else out
