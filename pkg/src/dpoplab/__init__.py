"""Desk-scale study of DPO and DPO-Positive preference optimisation.

Modules: ``autodiff`` (reverse-mode engine), ``model`` (tiny causal LM),
``losses``, ``theory`` (closed-form logit gradients), ``dataforge`` (datasets),
``trainer`` (SFT, preference optimisation, analyses) and ``cli``.
"""

__version__ = "0.1.0"
