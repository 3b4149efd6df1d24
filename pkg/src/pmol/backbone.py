"""Tiny pre-LN decoder-only transformer used as the frozen base model.

Each block's FFN is ``gelu(LN(h) W_up + b_up) W_down + b_down``; when an
adapter list is given, ``W_down`` is routed through the matching PmolLayer
and the router reads the same post-GELU activation the down-projection
consumes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .adapter import ConfigError, PmolLayer, pmol_forward_parallel, pmol_forward_sequential
from .numcore import Rng, Tensor

MASK_VALUE = -1e9


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 64
    seed: int = 0

    def validate(self) -> None:
        dims = (self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len)
        if min(dims) < 1:
            raise ConfigError(f"all backbone dimensions must be >= 1: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BackboneParams:
    cfg: BackboneConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    frozen: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def freeze(self) -> BackboneParams:
        self.frozen = True
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self) -> BackboneParams:
        self.frozen = False
        for t in self.tensors.values():
            t.requires_grad = True
        return self

    def copy(self) -> BackboneParams:
        new = BackboneParams(self.cfg, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                        for k, v in self.tensors.items()}, self.frozen)
        return new


def init_backbone(cfg: BackboneConfig, rng: Rng) -> BackboneParams:
    """Gaussian(0, 0.02) weights; layer-norm gains 1, all biases 0."""
    cfg.validate()
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    t: dict[str, Tensor] = {}

    def g(name, shape):
        t[name] = Tensor(rng.normal(shape, std=0.02), requires_grad=True)

    def const(name, shape, value):
        t[name] = Tensor(np.full(shape, value, dtype=float), requires_grad=True)

    g("tok_emb", (V, d))
    g("pos_emb", (cfg.max_seq_len, d))
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        const(p + "ln1.g", (d,), 1.0)
        const(p + "ln1.b", (d,), 0.0)
        for w in ("wq", "wk", "wv", "wo"):
            g(p + "attn." + w, (d, d))
        const(p + "ln2.g", (d,), 1.0)
        const(p + "ln2.b", (d,), 0.0)
        g(p + "ffn.w_up", (d, f))
        const(p + "ffn.b_up", (f,), 0.0)
        g(p + "ffn.w_down", (f, d))
        const(p + "ffn.b_down", (d,), 0.0)
    const("ln_f.g", (d,), 1.0)
    const("ln_f.b", (d,), 0.0)
    g("lm_head.w", (d, V))
    const("lm_head.b", (V,), 0.0)
    return BackboneParams(cfg, t)


def _check_tokens(cfg: BackboneConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] == 0:
        raise DataError("empty token sequence")
    if tokens.shape[1] > cfg.max_seq_len:
        raise DataError(f"sequence length {tokens.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise DataError(f"token id out of range [0, {cfg.vocab_size})")
    return tokens


def _attention(params: BackboneParams, prefix: str, h: Tensor) -> Tensor:
    cfg = params.cfg
    B, T, d = h.shape
    H, dh = cfg.n_heads, cfg.head_dim

    def heads(w):
        return nc.matmul(h, params[prefix + w]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = nc.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    att = nc.softmax(nc.masked_fill(scores, causal, MASK_VALUE), axis=-1)
    y = nc.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, d)
    return nc.matmul(y, params[prefix + "wo"])


def forward_batch(params: BackboneParams, adapters: list[PmolLayer] | None, tokens,
                  path: str = "parallel"):
    """Causal forward over a [B, T] token batch.

    Returns ``(logits[B, T, V], router_weights)`` where ``router_weights`` is
    a per-layer list of [B, T, K+1] tensors (empty without adapters).
    Right-padding is safe: positions only attend to their own past.
    """
    cfg = params.cfg
    tokens = _check_tokens(cfg, tokens)
    if adapters is not None and len(adapters) != cfg.n_layers:
        raise ConfigError(f"{len(adapters)} adapters for {cfg.n_layers} layers")
    mix = {"parallel": pmol_forward_parallel, "sequential": pmol_forward_sequential}[path]
    T = tokens.shape[1]
    x = nc.take_rows(params["tok_emb"], tokens) + params["pos_emb"][:T]
    router = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        x = x + _attention(params, p + "attn.", nc.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"]))
        h = nc.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = nc.gelu(nc.matmul(h, params[p + "ffn.w_up"]) + params[p + "ffn.b_up"])
        if adapters is None:
            down = nc.matmul(u, params[p + "ffn.w_down"])
        else:
            down, w = mix(adapters[i], params[p + "ffn.w_down"], u, return_weights=True)
            router.append(w)
        x = x + down + params[p + "ffn.b_down"]
    x = nc.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    logits = nc.matmul(x, params["lm_head.w"]) + params["lm_head.b"]
    return logits, router


def forward_logits(params: BackboneParams, adapters: list[PmolLayer] | None, tokens) -> Tensor:
    """Logits [T, V] for a single token sequence."""
    logits, _ = forward_batch(params, adapters, np.asarray(tokens, dtype=np.int64)[None, :])
    return logits[0]


def pack_sequences(prompts, responses) -> tuple[np.ndarray, np.ndarray]:
    """Right-padded ``prompt + response`` batch and its response-target mask.

    ``mask[b, t]`` is 1 where position ``t`` predicts a response token
    (i.e. token ``t+1`` belongs to the response), over the T-1 prediction
    slots.
    """
    if len(prompts) != len(responses):
        raise DataError("prompts and responses differ in count")
    seqs = []
    for p, r in zip(prompts, responses):
        if len(p) == 0:
            raise DataError("empty prompt")
        if len(r) == 0:
            raise DataError("empty response")
        seqs.append(list(p) + list(r))
    T = max(len(s) for s in seqs)
    tokens = np.zeros((len(seqs), T), dtype=np.int64)
    mask = np.zeros((len(seqs), T - 1))
    for b, (s, p) in enumerate(zip(seqs, prompts)):
        tokens[b, :len(s)] = s
        mask[b, len(p) - 1:len(s) - 1] = 1.0
    return tokens, mask


def batch_log_probs(params: BackboneParams, adapters, prompts, responses, path: str = "parallel"):
    """Summed response log-probs per sequence plus router weights.

    Returns ``(logp[N], router_weights, tokens, mask)``.
    """
    tokens, mask = pack_sequences(prompts, responses)
    logits, router = forward_batch(params, adapters, tokens, path=path)
    lsm = nc.log_softmax(logits[:, :-1], axis=-1)
    picked = nc.pick(lsm, tokens[:, 1:])
    return (picked * mask).sum(axis=1), router, tokens, mask


def sequence_log_prob(params: BackboneParams, adapters, prompt, response) -> Tensor:
    """log p(response | prompt), summed over response tokens only."""
    if len(response) == 0:
        raise DataError("empty response")
    logp, _, _, _ = batch_log_probs(params, adapters, [prompt], [response])
    return logp[0]


def pretrain_backbone(params: BackboneParams, corpus, steps: int, lr: float = 3e-3,
                      batch_size: int = 16, rng: Rng | None = None, log_every: int = 0,
                      logger=None) -> BackboneParams:
    """Next-token cross-entropy training on ``corpus`` (lists of token ids).

    Works on a copy; the returned params are frozen.  ``steps=0`` returns an
    unchanged (frozen) copy.
    """
    from .trainengine import Adam  # deferred: trainengine imports this module

    corpus = [list(s) for s in corpus if len(s) >= 2]
    if not corpus:
        raise DataError("pretraining corpus is empty")
    rng = rng or Rng(params.cfg.seed).fork("pretrain")
    out = params.copy().unfreeze()
    opt = Adam(lr=lr)
    cap = params.cfg.max_seq_len
    for step in range(steps):
        idx = rng.integers(0, len(corpus), size=min(batch_size, len(corpus)))
        seqs = [corpus[i][:cap] for i in idx]
        T = max(len(s) for s in seqs)
        tokens = np.zeros((len(seqs), T), dtype=np.int64)
        mask = np.zeros((len(seqs), T - 1))
        for b, s in enumerate(seqs):
            tokens[b, :len(s)] = s
            mask[b, :len(s) - 1] = 1.0
        with nc.Tape() as tape:
            logits, _ = forward_batch(out, None, tokens)
            lsm = nc.log_softmax(logits[:, :-1], axis=-1)
            nll = -(nc.pick(lsm, tokens[:, 1:]) * mask).sum() * (1.0 / mask.sum())
        nc.backward(nll, tape)
        opt.step(out.tensors)
        if logger is not None and log_every and (step % log_every == 0 or step == steps - 1):
            logger.info("pretrain step %d  loss %.4f", step, nll.item())
    return out.freeze()

