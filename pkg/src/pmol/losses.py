"""Preference objectives (DPO, ORPO) and router auxiliary losses.

The group losses use the generalized KL ``sum_i D_i ln(D_i / w_i)`` over the
K real experts with ``0 ln 0 = 0``.  Neither side is renormalized: the target
sums to ``sc`` and the real-expert weights sum to less than one, so the loss
can go negative.  Its minimum, ``sc ln sc``, is reached when all mass sits
evenly on the preference's group.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .adapter import ConfigError, ExpertGroupTable
from .backbone import DataError
from .numcore import Tensor

LOSS_VARIANTS = ("soft", "hard", "switch", "balance", "none")


@dataclass(frozen=True)
class BalanceDistribution:
    D: np.ndarray
    preference_id: int

    @property
    def K(self) -> int:
        return self.D.shape[0]


@dataclass
class LossBreakdown:
    preference_loss: Tensor | float
    routing_loss: Tensor | float
    total: Tensor | float
    beta_egs: float

    def floats(self) -> dict[str, float]:
        def f(v):
            return v.item() if isinstance(v, Tensor) else float(v)

        return {"preference_loss": f(self.preference_loss), "routing_loss": f(self.routing_loss),
                "total": f(self.total), "beta_egs": self.beta_egs}


def balance_distribution(groups: ExpertGroupTable, preference_id, sc: float | None = None) -> BalanceDistribution:
    """Target mass ``sc / |group|`` on the preference's experts, 0 elsewhere."""
    try:
        e = groups.entry(preference_id)
    except KeyError as err:
        raise DataError(str(err)) from None
    sc = e.sc if sc is None else sc
    D = np.zeros(groups.K)
    D[e.start:e.end] = sc / (e.end - e.start)
    return BalanceDistribution(D, e.preference)


def _generalized_kl(router_weights: Tensor, D: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Token-mean of ``sum_i D_i ln(D_i/w_i)``; works on [T, K+1] or batched [B, T, K+1]."""
    K = D.shape[-1]
    if router_weights.shape[-1] != K + 1:
        raise nc.DimensionError(f"router weights {router_weights.shape} vs K={K}")
    w = router_weights.data[..., :K]
    support = D > 0
    if np.any((w == 0) & (support if D.ndim == 1 else support[:, None, :])):
        warnings.warn("router weight exactly zero on a target expert; returning +inf", RuntimeWarning,
                      stacklevel=3)
        with nc.allow_nonfinite():
            return Tensor(math.inf)
    # constant part sum D ln D, with 0 ln 0 = 0
    safe = np.where(support, D, 1.0)
    const = (D * np.log(safe)).sum(axis=-1)
    # off-support columns get +1 so their log stays finite; D = 0 there kills them
    off = (~support).astype(float)
    logw = nc.log(router_weights[..., :K] + (off if D.ndim == 1 else off[:, None, :]))
    if D.ndim == 1:
        per_token = -(logw * D).sum(axis=-1) + float(const)
        return per_token.mean()
    per_token = -(logw * D[:, None, :]).sum(axis=-1) + const[:, None]
    return _masked_pair_mean(per_token, mask)


def _masked_pair_mean(per_token: Tensor, mask: np.ndarray) -> Tensor:
    """Token-mean within each pair (rows of ``mask``), then mean over pairs."""
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DataError("a pair has no routed tokens")
    weights = mask / counts[:, None] / mask.shape[0]
    return (per_token * weights).sum()


def egs_loss(router_weights: Tensor, D: BalanceDistribution) -> Tensor:
    """Expert group soft loss for one preference datum over its tokens.

    ``router_weights`` is [tokens, K+1]; the empty-expert column is ignored.
    """
    return _generalized_kl(router_weights, D.D)


def egs_hard_loss(router_weights: Tensor, groups: ExpertGroupTable, preference_id) -> Tensor:
    """The group loss with the soft constraint forced to 1."""
    return _generalized_kl(router_weights, balance_distribution(groups, preference_id, sc=1.0).D)


def expert_balance_loss(router_weights: Tensor) -> Tensor:
    """Generalized KL from the uniform 1/K target over real experts."""
    K = router_weights.shape[-1] - 1
    return _generalized_kl(router_weights, np.full(K, 1.0 / K))


def switch_loss(per_token_weights: Tensor, alpha: float = 1.0) -> Tensor:
    """``alpha * K * sum_i f_i p_i`` over the K real experts.

    ``p_i`` is the token-mean weight of expert i and ``f_i`` the fraction of
    tokens whose largest real-expert weight is expert i (ties go to the lowest
    index, which is what ``argmax`` does).  ``f`` carries no gradient.
    """
    T = per_token_weights.shape[0]
    if T == 0:
        raise DataError("switch loss needs at least one token")
    K = per_token_weights.shape[-1] - 1
    w = per_token_weights[:, :K]
    f = np.bincount(np.argmax(w.data, axis=-1), minlength=K) / T
    p = w.mean(axis=0)
    return (p * f).sum() * (alpha * K)


def routing_loss_batch(router_weights: Tensor, mask: np.ndarray, targets: np.ndarray | None,
                       variant: str, switch_alpha: float = 1.0) -> Tensor:
    """Pair-averaged routing loss for a batch.

    ``router_weights`` is [B, T, K+1], ``mask`` [B, T] marks the routed tokens
    of each pair and ``targets`` [B, K] holds each pair's balance
    distribution (ignored by ``switch`` and ``balance``).  Equals the mean
    over pairs of the single-datum loss on that pair's masked tokens.
    """
    B, T, K1 = router_weights.shape
    K = K1 - 1
    if variant in ("soft", "hard"):
        return _generalized_kl(router_weights, np.asarray(targets, dtype=float), mask)
    if variant == "balance":
        return _generalized_kl(router_weights, np.full((B, K), 1.0 / K), mask)
    if variant == "switch":
        w = router_weights[:, :, :K]
        counts = mask.sum(axis=1)
        arg = np.argmax(w.data, axis=-1)
        f = np.zeros((B, K))
        for b in range(B):
            f[b] = np.bincount(arg[b][mask[b] > 0], minlength=K) / counts[b]
        # p[b, i] = masked token-mean of w; loss_b = alpha K sum_i f p
        coeff = mask[:, :, None] * f[:, None, :] / counts[:, None, None] * (switch_alpha * K / B)
        return (w * coeff).sum()
    raise ConfigError(f"unknown routing loss variant {variant!r}")


def _check_finite_inputs(*xs) -> None:
    for x in xs:
        v = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)
        if not np.all(np.isfinite(v)):
            raise DataError("non-finite log-probability input")


def dpo_loss(logp_chosen_policy, logp_rejected_policy, logp_chosen_ref, logp_rejected_ref,
             beta_dpo: float = 0.1) -> Tensor:
    """``-log sigmoid(beta * ((pc - rc) - (pr - rr)))``, averaged if batched."""
    _check_finite_inputs(logp_chosen_policy, logp_rejected_policy, logp_chosen_ref, logp_rejected_ref)
    if beta_dpo <= 0:
        raise ConfigError("beta_dpo must be positive")
    margin = (nc.as_tensor(logp_chosen_policy) - logp_chosen_ref) - (nc.as_tensor(logp_rejected_policy)
                                                                     - logp_rejected_ref)
    return -nc.log_sigmoid(margin * beta_dpo).mean()


def orpo_loss(logp_chosen, logp_rejected, lambda_orpo: float, chosen_len, rejected_len) -> Tensor:
    """Chosen NLL plus ``lambda * -log sigmoid(log odds ratio)``.

    Both sequence log-probs are length-normalized first (mean per-token log
    prob ``m``), the odds of a sequence are ``exp(m) / (1 - exp(m))`` and the
    NLL term is ``-m_chosen``.  Averaged if batched.
    """
    _check_finite_inputs(logp_chosen, logp_rejected)
    cl = np.asarray(chosen_len, dtype=float)
    rl = np.asarray(rejected_len, dtype=float)
    if np.any(cl < 1) or np.any(rl < 1):
        raise DataError("sequence lengths must be >= 1")
    mc = nc.as_tensor(logp_chosen) * (1.0 / cl)
    mr = nc.as_tensor(logp_rejected) * (1.0 / rl)
    log_odds = (mc - mr) - (nc.log1mexp(mc) - nc.log1mexp(mr))
    return (-mc - nc.log_sigmoid(log_odds) * lambda_orpo).mean()


def total_loss(preference_loss, routing_loss, beta_egs: float = 0.1) -> LossBreakdown:
    if beta_egs < 0:
        raise ConfigError("beta_egs must be non-negative")
    total = nc.as_tensor(preference_loss) + nc.as_tensor(routing_loss) * beta_egs
    return LossBreakdown(preference_loss, routing_loss, total, beta_egs)
