"""Preference losses: SFT, DPO, DPO-Positive, IPO and SLiC.

Every per-pair function is a batch of one through :func:`batch_loss`, so the
single-pair and batched paths share code.  DPO is evaluated as DPO-Positive
with a zero penalty weight, which makes the two bit-identical at ``lam=0``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError, ContractError
from .model import batch_log_probs, batch_token_log_probs

KINDS = ("sft", "dpo", "dpop", "ipo", "slic")
_NEEDS_REF = ("dpo", "dpop", "ipo")


@dataclass
class LossConfig:
    kind: str = "dpop"
    beta: float = 0.3
    lam: float = 50.0
    tau: float = 0.1
    slic_reg_weight: float = 1.0

    def __post_init__(self):
        self.kind = str(self.kind).lower()
        if self.kind not in KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if not self.beta > 0:
            raise ConfigError("beta must be > 0")
        if not self.lam >= 0:
            raise ConfigError("lambda must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if not self.slic_reg_weight >= 0:
            raise ConfigError("slic_reg_weight must be >= 0")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown loss config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {"kind": self.kind, "beta": self.beta, "lambda": self.lam,
                "tau": self.tau, "slic_reg_weight": self.slic_reg_weight}


@dataclass
class LossOutput:
    """Scalar loss tensor plus detached batch-mean diagnostics.

    ``per_pair`` holds detached per-pair arrays (loss, chosen/rejected
    log-probs, log-ratios, penalty) for callers that need them.
    """

    loss: ad.Tensor
    log_ratio_w: float = 0.0
    log_ratio_l: float = 0.0
    penalty: float = 0.0
    implicit_reward_w: float = 0.0
    implicit_reward_l: float = 0.0
    per_pair: dict = field(default_factory=dict, repr=False)

    @property
    def value(self):
        return self.loss.item()


# ----------------------------------------------------------------------------
# scalar utilities

def _check_ref(theta, ref):
    if ref is None:
        raise ContractError("this loss needs a reference model")
    if not ref.frozen:
        raise ContractError("reference parameters must be frozen (use snapshot_reference)")
    if ref.config.vocab_size != theta.config.vocab_size:
        raise ConfigError("policy and reference vocabularies differ")


def log_ratio(theta, ref, x, y):
    """``log pi_theta(y|x) - log pi_ref(y|x)`` as a scalar tensor (grad flows into theta)."""
    _check_ref(theta, ref)
    with ad.no_grad():
        ref_lp = batch_log_probs(ref, [x], [y]).data
    return ad.reshape(ad.sub(batch_log_probs(theta, [x], [y]), ref_lp), ())


def implicit_reward(theta, ref, x, y, beta):
    with ad.no_grad():
        return beta * log_ratio(theta, ref, x, y).item()


def bt_preference_prob(r_w, r_l):
    """Bradley-Terry probability that the first completion is preferred."""
    z = r_w - r_l
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def softplus(z):
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def reward_nll(pairs):
    """Mean of ``-log sigmoid(r_w - r_l)`` over ``(r_w, r_l)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("reward_nll needs at least one pair")
    return math.fsum(softplus(-(rw - rl)) for rw, rl in pairs) / len(pairs)


def dpop_penalty(log_ratio_w, lam):
    """``lam * max(0, -log_ratio_w)``: active only when pi_ratio(y_w|x) < 1."""
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    return ad.scale(ad.max0(ad.neg(log_ratio_w)), lam)


# ----------------------------------------------------------------------------
# batched objective

def preference_objective(pol_w, pol_l, ref_w, ref_l, cfg, len_w=None):
    """Per-pair losses from sequence log-probs.

    ``pol_w``/``pol_l`` are ``(B,)`` tensors under the policy; ``ref_w`` and
    ``ref_l`` are plain arrays under the reference (ignored by SFT and SLiC).
    ``len_w`` (completion lengths) is needed for the per-token SFT loss.
    Returns ``(losses, penalty)`` where ``penalty`` is a tensor or None.
    """
    kind = cfg.kind
    if kind == "sft":
        return ad.neg(ad.mul(pol_w, 1.0 / np.asarray(len_w, dtype=np.float64))), None
    if kind == "slic":
        hinge = ad.max0(ad.add(ad.sub(pol_l, pol_w), cfg.beta))
        return ad.sub(hinge, ad.scale(pol_w, cfg.slic_reg_weight)), None
    lrw = ad.sub(pol_w, ref_w)
    lrl = ad.sub(pol_l, ref_l)
    if kind == "ipo":
        return ad.square(ad.sub(ad.sub(lrw, lrl), 1.0 / (2.0 * cfg.tau))), None
    lam = cfg.lam if kind == "dpop" else 0.0
    penalty = dpop_penalty(lrw, lam)
    margin = ad.sub(ad.sub(lrw, lrl), penalty)
    return ad.neg(ad.log_sigmoid(ad.scale(margin, cfg.beta))), penalty


def _ordered(batch):
    # fixed summation order regardless of how the caller arranged the batch
    return sorted(batch, key=lambda p: p.id)


def batch_loss(theta, ref, batch, cfg, ref_logps=None):
    """Mean loss over ``batch`` with diagnostics.

    ``ref_logps`` may map pair id to cached ``(log pi_ref(y_w|x), log pi_ref(y_l|x))``.
    """
    batch = _ordered(batch)
    if not batch:
        raise ContractError("empty batch")
    if cfg.kind in _NEEDS_REF or ref is not None:
        if ref_logps is None:
            _check_ref(theta, ref)
    B = len(batch)
    prompts = [p.prompt for p in batch]
    if cfg.kind == "sft":
        pol_w = batch_log_probs(theta, prompts, [p.chosen for p in batch])
        pol_l = None
    else:
        both = batch_log_probs(theta, prompts + prompts,
                               [p.chosen for p in batch] + [p.rejected for p in batch])
        pol_w = ad.embedding(ad.reshape(both, (2 * B, 1)), np.arange(B))
        pol_w = ad.reshape(pol_w, (B,))
        pol_l = ad.reshape(ad.embedding(ad.reshape(both, (2 * B, 1)), np.arange(B, 2 * B)), (B,))

    if ref_logps is not None:
        ref_w = np.array([ref_logps[p.id][0] for p in batch])
        ref_l = np.array([ref_logps[p.id][1] for p in batch])
    elif ref is not None:
        ref_w, ref_l = reference_log_probs(ref, batch)
    else:
        ref_w = ref_l = None

    losses, penalty = preference_objective(pol_w, pol_l, ref_w, ref_l, cfg,
                                           len_w=[len(p.chosen) for p in batch])
    loss = ad.mean(losses)

    per_pair = {"loss": losses.data.copy(), "chosen_logp": pol_w.data.copy()}
    out = LossOutput(loss=loss, per_pair=per_pair)
    if pol_l is not None:
        per_pair["rejected_logp"] = pol_l.data.copy()
    if ref_w is not None and pol_l is not None:
        lrw = pol_w.data - ref_w
        lrl = pol_l.data - ref_l
        pen = penalty.data.copy() if penalty is not None else np.zeros(B)
        per_pair.update(log_ratio_w=lrw, log_ratio_l=lrl, penalty=pen)
        out.log_ratio_w = float(np.mean(lrw))
        out.log_ratio_l = float(np.mean(lrl))
        out.penalty = float(np.mean(pen))
        out.implicit_reward_w = float(np.mean(cfg.beta * (lrw - pen)))
        out.implicit_reward_l = float(np.mean(cfg.beta * lrl))
    return out


def reference_log_probs(ref, pairs):
    with ad.no_grad():
        prompts = [p.prompt for p in pairs]
        w = batch_log_probs(ref, prompts, [p.chosen for p in pairs]).data.copy()
        l = batch_log_probs(ref, prompts, [p.rejected for p in pairs]).data.copy()
    return w, l


# ----------------------------------------------------------------------------
# per-pair entry points

def _single(kind, theta, ref, pair, cfg):
    if cfg.kind != kind:
        raise ConfigError(f"{kind}_loss called with a {cfg.kind!r} config")
    return batch_loss(theta, ref, [pair], cfg)


def dpo_loss(theta, ref, pair, cfg):
    return _single("dpo", theta, ref, pair, cfg)


def dpop_loss(theta, ref, pair, cfg):
    return _single("dpop", theta, ref, pair, cfg)


def ipo_loss(theta, ref, pair, cfg):
    return _single("ipo", theta, ref, pair, cfg)


def slic_loss(theta, pair, cfg, ref=None):
    """Hinge on the log-prob gap plus ``slic_reg_weight * NLL(y_w)``; y_ref is y_w."""
    return _single("slic", theta, ref, pair, cfg)


def sft_loss(theta, pair, cfg, ref=None):
    """Mean per-token negative log-likelihood of the chosen completion."""
    return _single("sft", theta, ref, pair, cfg)


def loss_for(theta, ref, pair, cfg):
    """Dispatch on ``cfg.kind``."""
    return batch_loss(theta, ref, [pair], cfg)


def masked_dpo_inner(theta, pair, start):
    """DPO inner term restricted to completion positions ``>= start``.

    Used to show that the shared prefix before the first edit contributes no
    gradient: ``sum_k log pi(t_k|y_w^<k) - log pi(t'_k|y_l^<k)`` over ``k >= start``.
    """
    tok, mask = batch_token_log_probs(theta, [pair.prompt, pair.prompt], [pair.chosen, pair.rejected])
    keep = np.zeros(mask.shape)
    keep[:, start:] = 1.0
    sign = np.array([[1.0], [-1.0]])
    return ad.sum(ad.mul(tok, keep * sign))
