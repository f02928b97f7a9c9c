"""scikit-learn style wrappers around SFT and preference optimisation.

``X`` is always a sequence of preference pairs (see
:func:`dpoplab._validation.check_pairs`); there is no separate ``y`` because the
preference label is carried by the chosen/rejected split.
"""

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_pairs, check_vocab
from .losses import LossConfig, reference_log_probs
from .model import LMConfig, init_params, snapshot_reference
from .trainer import (TrainConfig, eval_preference_accuracy, mean_chosen_logprob,
                      position_profile, run_preference_opt, run_sft)


class _LMEstimator(BaseEstimator):

    def _model_config(self):
        return LMConfig(vocab_size=self.vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                        n_heads=self.n_heads, max_seq_len=self.max_seq_len)

    def score(self, X, y=None):
        """Mean per-token log-prob of the chosen completions."""
        check_is_fitted(self, "params_")
        return mean_chosen_logprob(self.params_, check_pairs(X))

    def transform(self, X):
        """Position profile around the first edit (offset -1 anchored at 0)."""
        check_is_fitted(self, "params_")
        return position_profile(self.params_, check_pairs(X), window=5)


class SFTModel(_LMEstimator):
    """Supervised fine-tuning on the chosen completions of ``X``."""

    def __init__(self, vocab_size=24, d_model=64, n_layers=2, n_heads=2, max_seq_len=128,
                 sft_steps=2000, learning_rate=3e-4, batch_size=32, weight_decay=0.0, seed=0):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_seq_len = max_seq_len
        self.sft_steps = sft_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y=None):
        pairs = check_vocab(check_pairs(X), self.vocab_size)
        cfg = TrainConfig(loss=LossConfig("sft"), sft_steps=self.sft_steps,
                          learning_rate=self.learning_rate, batch_size=self.batch_size,
                          weight_decay=self.weight_decay, seed=self.seed)
        self.losses_ = []
        self.params_ = run_sft(init_params(self._model_config(), self.seed), pairs, cfg,
                               on_step=lambda step, loss: self.losses_.append(loss))
        return self


class PreferenceOptimizer(_LMEstimator):
    """Preference optimisation (DPO, DPO-Positive, IPO or SLiC) from a frozen reference.

    ``init`` may be a fitted :class:`SFTModel`; otherwise a fresh model is
    SFT-trained for ``sft_steps`` steps and used as the reference.
    """

    def __init__(self, loss="dpop", beta=0.3, lam=50.0, tau=0.1, slic_reg_weight=1.0,
                 max_steps=1000, learning_rate=3e-4, batch_size=32, weight_decay=0.0,
                 eval_every=50, probe_size=900, seed=0, init=None, sft_steps=2000,
                 vocab_size=24, d_model=64, n_layers=2, n_heads=2, max_seq_len=128):
        self.loss = loss
        self.beta = beta
        self.lam = lam
        self.tau = tau
        self.slic_reg_weight = slic_reg_weight
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.eval_every = eval_every
        self.probe_size = probe_size
        self.seed = seed
        self.init = init
        self.sft_steps = sft_steps
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_seq_len = max_seq_len

    def _train_config(self):
        loss = LossConfig(self.loss, beta=self.beta, lam=self.lam, tau=self.tau,
                          slic_reg_weight=self.slic_reg_weight)
        return TrainConfig(loss=loss, learning_rate=self.learning_rate, batch_size=self.batch_size,
                           weight_decay=self.weight_decay, max_steps=self.max_steps,
                           eval_every=self.eval_every, probe_size=self.probe_size, seed=self.seed,
                           sft_steps=self.sft_steps)

    def fit(self, X, y=None):
        pairs = check_pairs(X)
        cfg = self._train_config()
        if self.init is not None:
            check_is_fitted(self.init, "params_")
            start = self.init.params_
        else:
            start = run_sft(init_params(self._model_config(), self.seed), pairs, cfg)
        check_vocab(pairs, start.config.vocab_size)
        self.reference_ = snapshot_reference(start)
        self.params_, self.history_ = run_preference_opt(start, pairs, cfg, reference=self.reference_)
        return self

    def decision_function(self, X):
        """Implicit reward margin ``beta * (log-ratio(chosen) - log-ratio(rejected))`` per pair."""
        check_is_fitted(self, "params_")
        pairs = check_pairs(X)
        pw, pl = reference_log_probs(self.params_, pairs)
        rw, rl = reference_log_probs(self.reference_, pairs)
        return self.beta * ((pw - rw) - (pl - rl))

    def predict_proba(self, X):
        """Bradley-Terry probabilities ``[P(rejected preferred), P(chosen preferred)]``."""
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        """1 where the policy gives the chosen completion the higher implicit reward."""
        return (self.decision_function(X) > 0).astype(int)

    def accuracy(self, X):
        """Fraction of pairs where the chosen completion has the higher log-prob."""
        check_is_fitted(self, "params_")
        return eval_preference_accuracy(self.params_, check_pairs(X))
