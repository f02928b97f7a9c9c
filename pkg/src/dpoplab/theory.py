"""Closed-form logit gradients of the DPO / DPO-Positive inner terms.

All gradients here are of the bracket inside the loss (the ascent direction):
a negative value at the correct token means a gradient step lowers that
token's logit.  Positions are 0-based completion indices.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataforge import hamming_distance
from .exceptions import ContractError
from .model import forward_batch

_NORM_TOL = 1e-12


@dataclass
class SoftmaxRowPair:
    s_w: np.ndarray
    s_l: np.ndarray
    target_index: int

    def __post_init__(self):
        self.s_w = np.asarray(self.s_w, dtype=np.float64)
        self.s_l = np.asarray(self.s_l, dtype=np.float64)
        self.target_index = int(self.target_index)
        L = self.s_w.size
        if self.s_w.shape != (L,) or self.s_l.shape != (L,):
            raise ContractError("softmax rows must be 1-D vectors of equal length")
        if not 0 <= self.target_index < L:
            raise ContractError("target index outside the vocabulary")
        for name, s in (("s_w", self.s_w), ("s_l", self.s_l)):
            if np.any(s < 0) or abs(s.sum() - 1.0) > _NORM_TOL:
                raise ContractError(f"{name} is not a probability vector")


def dpo_logit_grad(rows):
    """Gradient of the DPO inner term at a shared-target position: ``s_l - s_w``."""
    return rows.s_l - rows.s_w


def dpop_logit_grad(rows, lam, ratio_below_one):
    """DPO-Positive gradient; equals :func:`dpo_logit_grad` unless the ratio gate is active.

    With the gate active the preferred log-prob enters with weight ``1 + lam``:
    ``lam (1 - s_w_i) + s_l_i - s_w_i`` at the target and
    ``-(lam + 1) s_w_j + s_l_j`` elsewhere.
    """
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    if not ratio_below_one:
        return dpo_logit_grad(rows)
    onehot = np.zeros_like(rows.s_w)
    onehot[rows.target_index] = 1.0
    return (1.0 + lam) * (onehot - rows.s_w) - (onehot - rows.s_l)


def check_sft_assumption(rows, slack=1e-12):
    """True iff the preferred context puts at least as much mass on the target and no more elsewhere."""
    i = rows.target_index
    others = np.arange(rows.s_w.size) != i
    return bool(rows.s_w[i] >= rows.s_l[i] - slack
                and np.all(rows.s_w[others] <= rows.s_l[others] + slack))


def min_dominating_lambda(rows):
    """``max_j s_l_j / s_w_j``; every larger lambda gives DPO-Positive the right signs."""
    if np.any(rows.s_w <= 0):
        raise ContractError("needs strictly positive preferred-context probabilities")
    return float(np.max(rows.s_l / rows.s_w))


# ----------------------------------------------------------------------------
# model-based checks

def _softmax_rows(theta, pair):
    """Next-token distributions for the chosen/rejected sequences, each ``(K, L)``."""
    x = np.asarray(pair.prompt)
    seqs = np.stack([np.concatenate([x, pair.chosen]), np.concatenate([x, pair.rejected])])
    with ad.no_grad():
        logits = forward_batch(theta, seqs).data
    start = len(pair.prompt) - 1
    K = len(pair.chosen)
    return logits[0, start:start + K], logits[1, start:start + K]


def _require_hamming1(pair):
    if len(pair.chosen) != len(pair.rejected) or hamming_distance(pair.chosen, pair.rejected) != 1:
        raise ContractError("pair completions must be at Hamming distance 1")
    m = next(i for i, (a, b) in enumerate(zip(pair.chosen, pair.rejected)) if a != b)
    if pair.first_edit_index is not None and pair.first_edit_index != m:
        raise ContractError("first_edit_index disagrees with the completions")
    return m


def _rows_from_logits(zw, zl, target):
    sw = np.exp(zw - zw.max())
    sl = np.exp(zl - zl.max())
    return SoftmaxRowPair(sw / sw.sum(), sl / sl.sum(), target)


def autodiff_inner_grad(zw, zl, target):
    """d/d theta_j of ``log softmax(theta+zw)[t] - log softmax(theta+zl)[t]`` at theta=0.

    The position logits are a shared leaf, as in the logit-only analysis.
    """
    theta = ad.Tensor(np.zeros(zw.shape), requires_grad=True)
    lw = ad.log_softmax(ad.add(theta, zw))
    ll = ad.log_softmax(ad.add(theta, zl))
    f = ad.sub(ad.gather(lw, np.array(target)), ad.gather(ll, np.array(target)))
    ad.backward(f)
    return theta.grad


def verify_eq2_against_autodiff(theta, pair, k, analytic=dpo_logit_grad):
    """Max abs difference between the autodiff and closed-form logit gradient at position ``k``.

    ``k`` must differ from the edit index; positions before it are the shared
    prefix, where both gradients vanish.
    """
    m = _require_hamming1(pair)
    K = len(pair.chosen)
    if not 0 <= k < K or k == m:
        raise ContractError(f"position {k} must be in [0, {K}) and differ from the edit index {m}")
    zw, zl = _softmax_rows(theta, pair)
    target = pair.chosen[k]
    auto = autodiff_inner_grad(zw[k], zl[k], target)
    closed = analytic(_rows_from_logits(zw[k], zl[k], target))
    return float(np.max(np.abs(auto - closed)))


def prefix_gradient(theta, pair, k):
    """Autodiff logit gradient of the inner term at a shared-prefix position ``k < m``."""
    m = _require_hamming1(pair)
    if not 0 <= k < m:
        raise ContractError("position is not in the shared prefix")
    zw, zl = _softmax_rows(theta, pair)
    return autodiff_inner_grad(zw[k], zl[k], pair.chosen[k])


# ----------------------------------------------------------------------------
# wrong-way report

@dataclass
class GradientReport:
    rows: list = field(default_factory=list)

    @property
    def n_positions(self):
        return len(self.rows)

    @property
    def n_assumption(self):
        return sum(r["assumption_holds"] for r in self.rows)

    @property
    def wrong_way_fraction(self):
        """Fraction of assumption-satisfying positions whose target gradient is negative."""
        held = [r for r in self.rows if r["assumption_holds"]]
        return sum(r["wrong_way"] for r in held) / len(held) if held else 0.0

    def summary(self):
        return {"positions": self.n_positions, "assumption_holds": self.n_assumption,
                "wrong_way_fraction": self.wrong_way_fraction}

    def write_csv(self, path):
        cols = ["pair_id", "position", "target_grad_sign", "max_offtarget_grad",
                "assumption_holds", "wrong_way"]
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["pair_id"], r["position"], r["target_grad_sign"],
                            repr(r["max_offtarget_grad"]), int(r["assumption_holds"]),
                            int(r["wrong_way"])])


def wrong_way_report(theta, pairs, loss="dpo", lam=50.0, ratio_below_one=True):
    """Per position after the first edit (same target token in both completions),
    record the sign of the closed-form target-logit gradient."""
    report = GradientReport()
    for pair in pairs:
        if pair.first_edit_index is None or len(pair.chosen) != len(pair.rejected):
            continue
        zw, zl = _softmax_rows(theta, pair)
        for k in range(pair.first_edit_index + 1, len(pair.chosen)):
            t = pair.chosen[k]
            if pair.rejected[k] != t:
                continue
            rows = _rows_from_logits(zw[k], zl[k], t)
            if loss == "dpo":
                g = dpo_logit_grad(rows)
            else:
                g = dpop_logit_grad(rows, lam, ratio_below_one)
            off = np.delete(g, t)
            report.rows.append({
                "pair_id": pair.id,
                "position": k,
                "target_grad_sign": int(np.sign(g[t])),
                "max_offtarget_grad": float(off.max()) if off.size else 0.0,
                "assumption_holds": check_sft_assumption(rows),
                "wrong_way": bool(g[t] < 0),
            })
    return report
