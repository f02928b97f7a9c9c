"""SFT warm-up, preference optimisation and the log-probability analyses."""

import csv
import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError, ContractError, NumericError, TrainingDiverged
from .losses import LossConfig, batch_loss, preference_objective, reference_log_probs
from .model import (LMParams, batch_log_probs, batch_token_log_probs, checkpoint_bytes,
                    save_checkpoint, snapshot_reference)

logger = logging.getLogger(__name__)

EVAL_CHUNK = 128


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    max_steps: int = 1000
    eval_every: int = 50
    seed: int = 0
    sft_steps: int = 2000
    probe_size: int = 900
    grad_clip: float = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if not self.adam_eps > 0 or self.weight_decay < 0:
            raise ConfigError("adam_eps must be > 0 and weight_decay >= 0")
        for name in ("batch_size", "max_steps", "eval_every", "probe_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.sft_steps < 0:
            raise ConfigError("sft_steps must be non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive when set")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    mean_chosen_logprob: float
    mean_rejected_logprob: float
    mean_log_ratio_w: float
    mean_log_ratio_l: float
    preference_accuracy: float
    mean_penalty: float
    grad_norm: float
    mean_chosen_logprob_seq: float = 0.0


METRIC_COLUMNS = [f.name for f in fields(MetricsRecord)]


# ----------------------------------------------------------------------------
# optimiser

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, cfg):
    """One AdamW update in place: bias-corrected Adam plus decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(state.step + 1, cause=f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name].data
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


def _collect_grads(params):
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in params.tensors.items()}


def _global_norm(grads):
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))


def clone_params(params):
    c = snapshot_reference(params)
    return LMParams(c.config, c.tensors, frozen=False)


def params_digest(params):
    return hashlib.sha256(checkpoint_bytes(params)).hexdigest()


# ----------------------------------------------------------------------------
# batching

def _stage_rng(seed, tag, epoch=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, epoch]))


def iter_batches(n, batch_size, seed, tag):
    """Endless stream of index batches drawn from successive seeded permutations."""
    epoch, buf = 0, []
    while True:
        buf.extend(_stage_rng(seed, tag, epoch).permutation(n).tolist())
        epoch += 1
        while len(buf) >= batch_size:
            yield buf[:batch_size]
            buf = buf[batch_size:]


def select_probe(pairs, size, seed):
    """Fixed seeded sample of the training pairs used for every evaluation."""
    if len(pairs) <= size:
        return list(pairs)
    idx = np.sort(_stage_rng(seed, 7).choice(len(pairs), size=size, replace=False))
    return [pairs[i] for i in idx]


_SFT_TAG, _PREF_TAG = 1, 2


def _train_step(params, state, cfg, loss_out):
    ad.backward(loss_out.loss)
    grads = _collect_grads(params)
    norm = _global_norm(grads)
    if cfg.grad_clip is not None and norm > cfg.grad_clip:
        grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    adamw_step(params, grads, state, cfg)
    params.zero_grad()
    return norm


def _diverged(step, params_before, out_dir, err):
    path = None
    if out_dir is not None:
        path = os.path.join(out_dir, "last_good.ckpt")
        save_checkpoint(params_before, path)
    return TrainingDiverged(step, path, cause=err)


def run_sft(params, dataset, cfg, on_step=None, out_dir=None):
    """Train a copy of ``params`` for ``cfg.sft_steps`` steps on chosen completions."""
    policy = clone_params(params)
    if cfg.sft_steps == 0:
        return policy
    if not dataset:
        raise ContractError("empty dataset")
    sft_cfg = LossConfig(kind="sft", beta=cfg.loss.beta)
    state = AdamWState()
    batches = iter_batches(len(dataset), min(cfg.batch_size, len(dataset)), cfg.seed, _SFT_TAG)
    for step in range(1, cfg.sft_steps + 1):
        batch = [dataset[i] for i in next(batches)]
        try:
            out = batch_loss(policy, None, batch, sft_cfg)
            _train_step(policy, state, cfg, out)
        except (NumericError, TrainingDiverged) as e:
            raise _diverged(step, policy, out_dir, e) from e
        if on_step is not None:
            on_step(step, out.value)
    return policy


# ----------------------------------------------------------------------------
# evaluation

def _probe_log_probs(params, pairs):
    """Sequence log-probs of chosen and rejected completions, computed in fixed chunks."""
    w, l = [], []
    with ad.no_grad():
        for i in range(0, len(pairs), EVAL_CHUNK):
            chunk = pairs[i:i + EVAL_CHUNK]
            prompts = [p.prompt for p in chunk]
            w.append(batch_log_probs(params, prompts, [p.chosen for p in chunk]).data)
            l.append(batch_log_probs(params, prompts, [p.rejected for p in chunk]).data)
    return np.concatenate(w), np.concatenate(l)


def _accuracy(lw, ll):
    return float(np.mean(np.where(lw > ll, 1.0, np.where(lw == ll, 0.5, 0.0))))


def eval_preference_accuracy(params, pairs):
    """Fraction of pairs where the chosen completion is more likely; ties count 1/2."""
    if not pairs:
        raise ContractError("no pairs to evaluate")
    lw, ll = _probe_log_probs(params, list(pairs))
    return _accuracy(lw, ll)


def mean_chosen_logprob(params, pairs, per_token=True):
    if not pairs:
        raise ContractError("no pairs to evaluate")
    pairs = list(pairs)
    with ad.no_grad():
        vals = []
        for i in range(0, len(pairs), EVAL_CHUNK):
            chunk = pairs[i:i + EVAL_CHUNK]
            vals.append(batch_log_probs(params, [p.prompt for p in chunk], [p.chosen for p in chunk]).data)
    lp = np.concatenate(vals)
    if per_token:
        lp = lp / np.array([len(p.chosen) for p in pairs])
    return float(np.mean(lp))


def evaluate(params, probe, ref_w, ref_l, loss_cfg, step, grad_norm=0.0):
    lw, ll = _probe_log_probs(params, probe)
    lens_w = np.array([len(p.chosen) for p in probe], dtype=np.float64)
    lens_l = np.array([len(p.rejected) for p in probe], dtype=np.float64)
    with ad.no_grad():
        losses, pen = preference_objective(ad.Tensor(lw), ad.Tensor(ll), ref_w, ref_l,
                                           loss_cfg, len_w=lens_w)
    lrw, lrl = lw - ref_w, ll - ref_l
    return MetricsRecord(
        step=step,
        train_loss=float(np.mean(losses.data)),
        mean_chosen_logprob=float(np.mean(lw / lens_w)),
        mean_rejected_logprob=float(np.mean(ll / lens_l)),
        mean_log_ratio_w=float(np.mean(lrw)),
        mean_log_ratio_l=float(np.mean(lrl)),
        preference_accuracy=_accuracy(lw, ll),
        mean_penalty=float(np.mean(pen.data)) if pen is not None else 0.0,
        grad_norm=float(grad_norm),
        mean_chosen_logprob_seq=float(np.mean(lw)),
    )


def run_preference_opt(params, dataset, cfg, out_dir=None, reference=None, on_record=None):
    """Preference-optimise a copy of ``params``.

    The reference is a frozen snapshot of the incoming ``params`` unless one is
    given.  Returns ``(final_params, records)``; a record is computed on the
    probe set at step 0 and every ``eval_every`` steps (and at the last step).
    """
    if not dataset:
        raise ContractError("empty dataset")
    ref = reference if reference is not None else snapshot_reference(params)
    ref_digest = params_digest(ref)
    policy = clone_params(params)
    loss_cfg = cfg.loss

    ref_w, ref_l = reference_log_probs(ref, dataset)
    ref_cache = {p.id: (w, l) for p, w, l in zip(dataset, ref_w, ref_l)}
    if len(ref_cache) != len(dataset):
        raise ContractError("pair ids must be unique within a dataset")
    probe = select_probe(dataset, cfg.probe_size, cfg.seed)
    probe_ref_w = np.array([ref_cache[p.id][0] for p in probe])
    probe_ref_l = np.array([ref_cache[p.id][1] for p in probe])

    def record(step, norm):
        r = evaluate(policy, probe, probe_ref_w, probe_ref_l, loss_cfg, step, norm)
        if not all(math.isfinite(v) for v in asdict(r).values()):
            raise _diverged(step, policy, out_dir, "non-finite metrics")
        records.append(r)
        if on_record is not None:
            on_record(r)

    records = []
    record(0, 0.0)
    state = AdamWState()
    batches = iter_batches(len(dataset), min(cfg.batch_size, len(dataset)), cfg.seed, _PREF_TAG)
    norm = 0.0
    for step in range(1, cfg.max_steps + 1):
        batch = [dataset[i] for i in next(batches)]
        try:
            out = batch_loss(policy, ref, batch, loss_cfg, ref_logps=ref_cache)
            norm = _train_step(policy, state, cfg, out)
        except (NumericError, TrainingDiverged) as e:
            raise _diverged(step, policy, out_dir, e) from e
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            record(step, norm)
    if params_digest(ref) != ref_digest:
        raise RuntimeError("reference parameters changed during training")
    return policy, records


# ----------------------------------------------------------------------------
# position profile

@dataclass
class PositionProfile:
    offsets: list
    values: list
    counts: list

    def as_dict(self):
        return dict(zip(self.offsets, self.values))

    def mean_over(self, lo, hi):
        vals = [v for o, v in zip(self.offsets, self.values) if lo <= o <= hi]
        if not vals:
            raise ContractError(f"no profile values for offsets [{lo}, {hi}]")
        return float(np.mean(vals))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["offset", "mean_logprob_diff", "n_pairs"])
            for o, v, n in zip(self.offsets, self.values, self.counts):
                w.writerow([o, repr(v), n])


def chosen_token_log_probs(params, pairs):
    """List of per-token log-prob arrays for the chosen completions."""
    out = []
    with ad.no_grad():
        for i in range(0, len(pairs), EVAL_CHUNK):
            chunk = pairs[i:i + EVAL_CHUNK]
            tok, mask = batch_token_log_probs(params, [p.prompt for p in chunk], [p.chosen for p in chunk])
            for row, mrow in zip(tok.data, mask):
                out.append(row[mrow > 0].copy())
    return out


def position_profile(params, pairs, window=5):
    """Mean chosen-token log-prob by offset from the first edit, shifted so offset -1 is 0.

    Offsets no pair reaches are omitted.
    """
    if window < 1:
        raise ContractError("window must be >= 1")
    pairs = list(pairs)
    if not pairs:
        raise ContractError("no pairs to profile")
    if any(p.first_edit_index is None for p in pairs):
        raise ContractError("every pair needs a first_edit_index (use the calc_chain generator)")
    per_tok = chosen_token_log_probs(params, pairs)
    sums = {o: [] for o in range(-window, window + 1)}
    for p, lp in zip(pairs, per_tok):
        for o in sums:
            k = p.first_edit_index + o
            if 0 <= k < lp.size:
                sums[o].append(lp[k])
    if not sums[-1]:
        raise ContractError("no pair has a token before its first edit; cannot anchor at offset -1")
    anchor = math.fsum(sums[-1]) / len(sums[-1])
    offsets, values, counts = [], [], []
    for o in sorted(sums):
        if sums[o]:
            offsets.append(o)
            values.append(math.fsum(sums[o]) / len(sums[o]) - anchor)
            counts.append(len(sums[o]))
    return PositionProfile(offsets, values, counts)


def mean_after_edit(params, pairs, completion="chosen", horizon=None):
    """Mean per-token log-prob over tokens strictly after the first edit."""
    vals = []
    with ad.no_grad():
        for i in range(0, len(pairs), EVAL_CHUNK):
            chunk = pairs[i:i + EVAL_CHUNK]
            comps = [getattr(p, completion) for p in chunk]
            tok, mask = batch_token_log_probs(params, [p.prompt for p in chunk], comps)
            for p, row, mrow in zip(chunk, tok.data, mask):
                lp = row[mrow > 0]
                end = lp.size if horizon is None else min(lp.size, p.first_edit_index + 1 + horizon)
                vals.extend(lp[p.first_edit_index + 1:end])
    return float(np.mean(vals))


# ----------------------------------------------------------------------------
# ablation and CSV output

def run_ablation(grid, base_cfg, dataset, sft_params):
    """One preference run per (beta, lambda) cell starting from the same SFT model.

    ``grid`` maps "beta" and/or "lambda" to lists of values; a missing axis uses
    the base config value.  Returns ``[(beta, lam, records), ...]``.
    """
    betas = list(grid.get("beta") or [])
    lams = list(grid.get("lambda") or [])
    if not betas and not lams:
        raise ConfigError("ablation grid is empty")
    betas = betas or [base_cfg.loss.beta]
    lams = lams or [base_cfg.loss.lam]
    results = []
    for beta in betas:
        for lam in lams:
            loss = LossConfig(kind=base_cfg.loss.kind, beta=float(beta), lam=float(lam),
                              tau=base_cfg.loss.tau, slic_reg_weight=base_cfg.loss.slic_reg_weight)
            cfg = TrainConfig(**{**{f.name: getattr(base_cfg, f.name) for f in fields(TrainConfig)},
                                 "loss": loss})
            logger.info("ablation cell beta=%s lambda=%s", beta, lam)
            _, records = run_preference_opt(sft_params, dataset, cfg)
            results.append((float(beta), float(lam), records))
    return results


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics_csv(records, path, extra=None):
    """One row per record; ``extra`` prepends constant columns (e.g. ablation cell)."""
    extra = extra or {}
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(extra) + METRIC_COLUMNS)
        for r in records:
            w.writerow([_fmt(v) for v in extra.values()] + [_fmt(getattr(r, c)) for c in METRIC_COLUMNS])


def write_ablation_csv(results, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["beta", "lambda"] + METRIC_COLUMNS)
        for beta, lam, records in results:
            for r in records:
                w.writerow([_fmt(beta), _fmt(lam)] + [_fmt(getattr(r, c)) for c in METRIC_COLUMNS])


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [MetricsRecord(**{c: (int(r[c]) if c == "step" else float(r[c])) for c in METRIC_COLUMNS})
            for r in rows]
