"""Adapter-only preference training: Adam, DPO/ORPO + routing loss steps, eval.

Only router and LoRA parameters train; the backbone is frozen and also
serves, without adapters, as the DPO reference model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .adapter import ConfigError, ExpertGroupTable, PmolLayer, init_pmol_layer, stack_experts
from .backbone import BackboneParams, DataError, batch_log_probs
from .checkpoint import adapter_arrays, adapters_from_arrays, load_container, save_container
from .losses import (LOSS_VARIANTS, LossBreakdown, balance_distribution, dpo_loss, orpo_loss,
                     routing_loss_batch, total_loss)
from .numcore import Rng, Tensor

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    beta_egs: float = 0.1
    beta_dpo: float = 0.1
    sc: list[float] | None = None
    lr: float = 1e-3
    epochs: int = 2
    batch_size: int = 8
    loss_variant: str = "soft"
    algorithm: str = "dpo"
    lambda_orpo: float = 0.1
    switch_alpha: float = 1.0
    routing_stride: int = 1
    experts_per_group: int = 2
    rank: int = 8
    train_fraction: float = 0.9
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3
    eval_batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.algorithm not in ("dpo", "orpo"):
            raise ConfigError("algorithm must be 'dpo' or 'orpo'")
        if self.beta_egs < 0:
            raise ConfigError("beta_egs must be non-negative")
        for name in ("beta_dpo", "lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("batch_size", "routing_stride", "experts_per_group", "rank", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0 or self.pretrain_steps < 0 or self.lambda_orpo < 0:
            raise ConfigError("epochs, pretrain_steps and lambda_orpo must be non-negative")
        if self.sc is not None and not all(0 < s <= 1 for s in self.sc):
            raise ConfigError("every sc must lie in (0, 1]")

    @property
    def effective_beta_egs(self) -> float:
        return 0.0 if self.loss_variant == "none" else self.beta_egs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class PmolModel:
    backbone: BackboneParams
    adapters: list[PmolLayer]
    groups: ExpertGroupTable

    def trainable(self) -> dict[str, Tensor]:
        return partition_parameters(self.backbone, self.adapters)[1]


def build_model(backbone: BackboneParams, groups: ExpertGroupTable, rank: int, rng: Rng) -> PmolModel:
    """One adapter per block on the FFN down-projection (a=d_ff, b=d_model)."""
    cfg = backbone.cfg
    adapters = [init_pmol_layer(cfg.d_ff, cfg.d_model, rank, groups, rng.fork(f"adapter{i}"))
                for i in range(cfg.n_layers)]
    return PmolModel(backbone.freeze(), adapters, groups)


def partition_parameters(backbone: BackboneParams, adapters: list[PmolLayer]):
    """``(frozen, trainable)`` name -> tensor maps."""
    frozen = {f"backbone.{k}": v for k, v in backbone.tensors.items()}
    trainable = {}
    for i, layer in enumerate(adapters):
        for name, t in layer.parameters().items():
            trainable[f"adapters.{i}.{name}"] = t
    return frozen, trainable


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], moments: dict, lr: float,
              step: int) -> None:
    """One bias-corrected Adam update (beta1 0.9, beta2 0.999, eps 1e-8).

    ``moments`` maps names to ``(m, v)`` and is updated in place; ``step``
    counts from 1.
    """
    if step < 1:
        raise ValueError("adam step counts from 1")
    c1 = 1.0 - ADAM_BETA1 ** step
    c2 = 1.0 - ADAM_BETA2 ** step
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise nc.DimensionError(f"gradient shape {g.shape} for {name} of shape {p.shape}")
        m, v = moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        moments[name] = (m, v)
        p.assign(p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS))


class Adam:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr
        self.t = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        """Update every requires-grad tensor that has a gradient, then clear grads."""
        live = {k: p for k, p in params.items() if p.requires_grad and p.grad is not None}
        self.t += 1
        adam_step(live, {k: p.grad for k, p in live.items()}, self.moments, self.lr, self.t)
        for p in params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (m, v) in self.moments.items():
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.moments = {}
        for key, m in arrays.items():
            if key.startswith("adam.m."):
                name = key[len("adam.m."):]
                self.moments[name] = (m.copy(), arrays[f"adam.v.{name}"].copy())


# ---------------------------------------------------------------------------

def _routed_mask(tokens_shape, pairs) -> np.ndarray:
    """[B, T] mask over the chosen-response token positions of each pair."""
    mask = np.zeros((len(pairs), tokens_shape[1]))
    for b, p in enumerate(pairs):
        mask[b, len(p.prompt):len(p.prompt) + len(p.chosen)] = 1.0
    return mask


class ReferenceCache:
    """Memoized reference (adapter-free backbone) response log-probs."""

    def __init__(self, backbone: BackboneParams, batch_size: int = 64):
        self.backbone = backbone
        self.batch_size = batch_size
        self._cache: dict[tuple, float] = {}

    def __call__(self, prompts, responses) -> np.ndarray:
        keys = [(tuple(p), tuple(r)) for p, r in zip(prompts, responses)]
        todo = [k for k in dict.fromkeys(keys) if k not in self._cache]
        for s in range(0, len(todo), self.batch_size):
            chunk = todo[s:s + self.batch_size]
            with nc.no_grad():
                lp, _, _, _ = batch_log_probs(self.backbone, None, [k[0] for k in chunk], [k[1] for k in chunk])
            self._cache.update(zip(chunk, lp.data.tolist()))
        return np.array([self._cache[k] for k in keys])


def _check_preferences(batch, groups: ExpertGroupTable) -> None:
    known = set(groups.preferences)
    bad = sorted({p.preference_id for p in batch} - known)
    if bad:
        raise DataError(f"batch contains unregistered preferences {bad}")


def train_step(batch, model: PmolModel, cfg: TrainConfig, optimizer: Adam,
               ref: ReferenceCache | None = None, step: int = 0) -> tuple[LossBreakdown, np.ndarray]:
    """One optimizer step on ``batch``; returns the loss breakdown (floats)
    and the mean per-group router mass on chosen tokens (last entry: empty
    expert), averaged over layers."""
    if not batch:
        raise DataError("empty batch")
    _check_preferences(batch, model.groups)
    B = len(batch)
    prompts = [p.prompt for p in batch] * 2
    responses = [p.chosen for p in batch] + [p.rejected for p in batch]
    variant = cfg.loss_variant
    beta = cfg.effective_beta_egs
    use_routing = variant != "none" and step % cfg.routing_stride == 0

    with nc.Tape() as tape:
        logp, router, tokens, _ = batch_log_probs(model.backbone, model.adapters, prompts, responses)
        if cfg.algorithm == "dpo":
            ref = ref or ReferenceCache(model.backbone)
            ref_lp = ref(prompts, responses)
            pref_loss = dpo_loss(logp[:B], logp[B:], ref_lp[:B], ref_lp[B:], cfg.beta_dpo)
        else:
            pref_loss = orpo_loss(logp[:B], logp[B:], cfg.lambda_orpo,
                                  [len(p.chosen) for p in batch], [len(p.rejected) for p in batch])
        rmask = _routed_mask(tokens.shape, batch)
        if use_routing:
            targets = None
            if variant in ("soft", "hard"):
                targets = np.stack([balance_distribution(model.groups, p.preference_id,
                                                         sc=1.0 if variant == "hard" else None).D
                                    for p in batch])
            per_layer = [routing_loss_batch(w[:B], rmask, targets, variant, cfg.switch_alpha) for w in router]
            routing = nc.concat([r.reshape(1) for r in per_layer]).mean()
        else:
            routing = Tensor(0.0)
        parts = total_loss(pref_loss, routing, beta)
    if not math.isfinite(parts.total.item()):
        raise NumericalError(f"non-finite loss at step {step}")
    nc.backward(parts.total, tape)
    optimizer.step(model.trainable())
    for layer in model.adapters:
        stack_experts(layer)

    wsum = sum((w.data[:B] * rmask[:, :, None]).sum(axis=(0, 1)) for w in router)
    mean_w = wsum / (rmask.sum() * len(router))
    masses = np.array([mean_w[e.start:e.end].sum() for e in model.groups.entries] + [mean_w[-1]])
    return LossBreakdown(**parts.floats()), masses


# ---------------------------------------------------------------------------

@dataclass
class PairStats:
    """Per-pair evaluation quantities gathered without recording a tape."""

    preference: np.ndarray          # [N]
    policy_chosen: np.ndarray       # [N]
    policy_rejected: np.ndarray
    ref_chosen: np.ndarray
    ref_rejected: np.ndarray
    router_mean: np.ndarray         # [L, N, K+1] token-mean weights on chosen tokens

    @property
    def reward_margin(self) -> np.ndarray:
        return (self.policy_chosen - self.ref_chosen) - (self.policy_rejected - self.ref_rejected)

    @property
    def policy_margin(self) -> np.ndarray:
        return self.policy_chosen - self.policy_rejected


def collect_stats(model: PmolModel, pairs, batch_size: int = 64, ref: ReferenceCache | None = None) -> PairStats:
    ref = ref or ReferenceCache(model.backbone, batch_size)
    pc, pr, rm = [], [], []
    for s in range(0, len(pairs), batch_size):
        batch = pairs[s:s + batch_size]
        B = len(batch)
        prompts = [p.prompt for p in batch] * 2
        responses = [p.chosen for p in batch] + [p.rejected for p in batch]
        with nc.no_grad():
            lp, router, tokens, _ = batch_log_probs(model.backbone, model.adapters, prompts, responses)
        mask = _routed_mask(tokens.shape, batch)
        counts = mask.sum(axis=1)[:, None]
        rm.append(np.stack([(w.data[:B] * mask[:, :, None]).sum(axis=1) / counts for w in router]))
        pc.append(lp.data[:B])
        pr.append(lp.data[B:])
    prompts = [p.prompt for p in pairs]
    return PairStats(
        preference=np.array([p.preference_id for p in pairs]),
        policy_chosen=np.concatenate(pc), policy_rejected=np.concatenate(pr),
        ref_chosen=ref(prompts, [p.chosen for p in pairs]),
        ref_rejected=ref(prompts, [p.rejected for p in pairs]),
        router_mean=np.concatenate(rm, axis=1),
    )


def _accuracy(margins: np.ndarray) -> float:
    # ties (an untouched model gives exactly 0) count as half
    return float(np.mean((margins > 0) + 0.5 * (margins == 0)))


def evaluate(model: PmolModel, held_out, batch_size: int = 64, ref: ReferenceCache | None = None,
             stats: PairStats | None = None) -> dict[int, dict[str, float]]:
    """Per-preference metrics on ``held_out``; no parameter is touched.

    ``reward_margin`` is the DPO implicit reward margin (policy minus
    reference log-ratio of chosen vs rejected); ``accuracy`` is the rate of
    positive reward margins with ties counted as half.  ``policy_margin`` is
    the raw policy log-prob gap.  ``mass_<g>`` is the top-layer router mass
    on group ``g`` over chosen tokens and ``mass_empty`` the empty expert's.
    """
    if not held_out:
        raise DataError("held-out set is empty")
    stats = stats or collect_stats(model, held_out, batch_size, ref)
    out = {}
    top = stats.router_mean[-1]
    for pref in sorted(set(stats.preference.tolist())):
        sel = stats.preference == pref
        rmarg = stats.reward_margin[sel]
        row = {"n": int(sel.sum()), "accuracy": _accuracy(rmarg), "reward_margin": float(rmarg.mean()),
               "policy_margin": float(stats.policy_margin[sel].mean())}
        w = top[sel].mean(axis=0)
        for e in model.groups.entries:
            row[f"mass_{e.preference}"] = float(w[e.start:e.end].sum())
        row["mass_empty"] = float(w[-1])
        out[pref] = row
    return out


# ---------------------------------------------------------------------------

@dataclass
class TrainHistory:
    loss_rows: list[dict] = field(default_factory=list)
    eval_rows: list[dict] = field(default_factory=list)
    records: list = field(default_factory=list)


class Trainer:
    """Epoch loop with deterministic per-epoch shuffles and resumable state."""

    def __init__(self, model: PmolModel, cfg: TrainConfig, train_pairs, held_out=None):
        cfg.validate()
        if not train_pairs:
            raise DataError("no training pairs")
        _check_preferences(train_pairs, model.groups)
        if held_out:
            _check_preferences(held_out, model.groups)
        self.model = model
        self.cfg = cfg
        self.train_pairs = list(train_pairs)
        self.held_out = list(held_out or [])
        self.optimizer = Adam(cfg.lr)
        self.step = 0
        self.ref = ReferenceCache(model.backbone, cfg.eval_batch_size)
        self.rng = Rng(cfg.seed)
        self.history = TrainHistory()

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_pairs) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.cfg.epochs

    def batch_at(self, step: int):
        epoch, k = divmod(step, self.steps_per_epoch)
        order = self.rng.fork(f"epoch{epoch}").permutation(len(self.train_pairs))
        bs = self.cfg.batch_size
        return [self.train_pairs[i] for i in order[k * bs:(k + 1) * bs]]

    def evaluate(self):
        from .telemetry import record_expert_weights  # telemetry builds on this module

        stats = collect_stats(self.model, self.held_out, self.cfg.eval_batch_size, self.ref)
        metrics = evaluate(self.model, self.held_out, stats=stats)
        records = record_expert_weights(self.model, self.held_out, step=self.step, stats=stats)
        return metrics, records

    def _log_eval(self) -> None:
        from .telemetry import specialization_score

        metrics, records = self.evaluate()
        # the score needs every preference in the held-out set
        covered = set(self.model.groups.preferences) <= set(metrics)
        score = specialization_score(records, self.model.groups) if covered else math.nan
        for pref, row in metrics.items():
            self.history.eval_rows.append({"step": self.step, "preference": pref, **row,
                                           "specialization_score": score})
        self.history.records.extend(records)
        log.info("eval step %d  specialization %.3f  acc %s", self.step, score,
                 " ".join(f"{p}:{r['accuracy']:.2f}" for p, r in metrics.items()))

    def run(self, checkpoint_dir=None, until: int | None = None) -> TrainHistory:
        """Train from ``self.step`` to ``until`` (default: all epochs).

        Evaluates on the held-out set before the first step of a fresh run
        and after each epoch.  Checkpoints after each epoch when a directory
        is given.
        """
        end = self.total_steps if until is None else min(until, self.total_steps)
        if self.step == 0 and self.held_out:
            self._log_eval()
        while self.step < end:
            epoch = self.step // self.steps_per_epoch
            parts, masses = train_step(self.batch_at(self.step), self.model, self.cfg, self.optimizer,
                                       self.ref, self.step)
            self.step += 1
            row = {"step": self.step, "epoch": epoch, **{k: v for k, v in parts.floats().items()
                                                          if k != "beta_egs"}}
            for e, m in zip(self.model.groups.entries, masses):
                row[f"mass_{e.preference}"] = float(m)
            row["mass_empty"] = float(masses[-1])
            self.history.loss_rows.append(row)
            if self.step % self.steps_per_epoch == 0:
                log.info("epoch %d done  step %d  loss %.4f", epoch, self.step, parts.floats()["total"])
                if self.held_out:
                    self._log_eval()
                if checkpoint_dir is not None:
                    self.save(Path(checkpoint_dir) / f"step_{self.step:06d}.npz")
        return self.history

    def save(self, path) -> None:
        meta = {"kind": "train", "step": self.step, "adam_t": self.optimizer.t,
                "config": self.cfg.to_dict(), "config_hash": self.cfg.hash(),
                "groups": self.model.groups.to_dict(), "n_layers": len(self.model.adapters)}
        save_container(path, meta, {**adapter_arrays(self.model.adapters), **self.optimizer.state_arrays()})

    def load(self, path) -> None:
        meta, arrays = load_container(path)
        if meta.get("kind") != "train":
            raise ConfigError(f"{path} is not a training checkpoint")
        if meta["config_hash"] != self.cfg.hash():
            raise ConfigError("checkpoint was written under a different config")
        self.model.adapters[:] = adapters_from_arrays(arrays, self.model.groups, meta["n_layers"])
        self.optimizer.load_state_arrays(arrays, meta["adam_t"])
        self.step = int(meta["step"])
