"""Tiny decoder-only causal language model on top of :mod:`dpoplab.autodiff`."""

import copy
import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ContractError, DimensionError

CHECKPOINT_MAGIC = b"DPOPLAB\x00"
CHECKPOINT_VERSION = 1
_MASK_VALUE = -1e9


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 24
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 128

    def __post_init__(self):
        if not 1 <= self.vocab_size <= 256:
            raise ConfigError(f"vocab_size must be in [1, 256], got {self.vocab_size}")
        if self.d_model < 1 or self.n_heads < 1 or self.max_seq_len < 1:
            raise ConfigError("d_model, n_heads and max_seq_len must be positive")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be non-negative")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class LMParams:
    """Named parameter tensors plus their config.

    A frozen instance (a reference snapshot) never records gradients.
    """

    def __init__(self, config, tensors, frozen=False):
        self.config = config
        self.tensors = dict(tensors)
        self.frozen = frozen
        for t in self.tensors.values():
            t.requires_grad = not frozen

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def __repr__(self):
        n = sum(t.size for t in self.tensors.values())
        return f"LMParams({self.config}, n_params={n}, frozen={self.frozen})"


def param_shapes(config):
    d, L, T = config.d_model, config.vocab_size, config.max_seq_len
    shapes = {"tok_emb": (L, d), "pos_emb": (T, d)}
    for i in range(config.n_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wqkv": (d, 3 * d), p + "attn.wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, 4 * d), p + "mlp.b1": (4 * d,),
            p + "mlp.w2": (4 * d, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, L), "head.b": (L,)})
    return shapes


def init_params(config, seed):
    """Seeded init: N(0, 0.02) weights, residual projections scaled down by depth."""
    rng = np.random.default_rng(seed)
    resid_std = 0.02 / math.sqrt(2 * max(config.n_layers, 1))
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2")):
            data = np.zeros(shape)
        elif name.endswith(("attn.wo", "mlp.w2")):
            data = rng.normal(0.0, resid_std, size=shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(data)
    return LMParams(config, tensors)


def zeros_like_params(config):
    return LMParams(config, {k: Tensor(np.zeros(s)) for k, s in param_shapes(config).items()})


def snapshot_reference(params):
    """Deep, frozen copy of ``params`` (the reference policy)."""
    tensors = {k: Tensor(v.data.copy()) for k, v in params.tensors.items()}
    return LMParams(copy.deepcopy(params.config), tensors, frozen=True)


def check_tokens(seq, config, what="sequence"):
    arr = np.asarray(seq, dtype=np.int64)
    if arr.ndim != 1:
        raise DimensionError(f"{what} must be 1-D")
    if arr.size and (arr.min() < 0 or arr.max() >= config.vocab_size):
        raise ContractError(f"{what} has token ids outside [0, {config.vocab_size})")
    return arr


# ----------------------------------------------------------------------------
# forward

def _attention(params, prefix, x, config):
    B, T, d = x.shape
    H = config.n_heads
    dh = d // H

    qkv = ad.reshape(ad.matmul(x, params[prefix + "attn.wqkv"]), (B, T, 3, H, dh))
    qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
    q, k, v = (ad.select(qkv, i) for i in range(3))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    att = ad.softmax(ad.masked_fill(scores, future, _MASK_VALUE), axis=-1)
    y = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
    return ad.matmul(y, params[prefix + "attn.wo"])


def forward_batch(params, tokens):
    """Logits for a ``(B, T)`` integer batch, shape ``(B, T, L)``.

    Row ``t`` depends only on tokens ``0..t``, so right padding is harmless.
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise DimensionError("tokens must be a (B, T) array")
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise ContractError(f"sequence length {T} exceeds max_seq_len={cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ContractError(f"token ids outside [0, {cfg.vocab_size})")
    pos = ad.embedding(params["pos_emb"], np.arange(T))
    x = ad.add(ad.embedding(params["tok_emb"], tokens), pos)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        h = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = ad.add(x, _attention(params, p, h, cfg))
        h = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = ad.max0(ad.affine(h, params[p + "mlp.w1"], params[p + "mlp.b1"]))
        x = ad.add(x, ad.affine(h, params[p + "mlp.w2"], params[p + "mlp.b2"]))
    x = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return ad.affine(x, params["head.w"], params["head.b"])


def forward_logits(params, seq):
    """Logits ``[len(seq), L]``; row t scores the token following position t."""
    seq = check_tokens(seq, params.config)
    logits = forward_batch(params, seq[None, :])
    return ad.reshape(logits, logits.shape[1:])


def _pack(prompts, completions, config):
    """Right-padded (prompt ++ completion) batch plus target ids / mask."""
    seqs, starts, lens = [], [], []
    for x, y in zip(prompts, completions):
        x = check_tokens(x, config, "prompt")
        y = check_tokens(y, config, "completion")
        if x.size == 0:
            raise ContractError("prompt must be non-empty")
        if y.size == 0:
            raise ContractError("completion must be non-empty")
        seqs.append(np.concatenate([x, y]))
        starts.append(x.size)
        lens.append(y.size)
    B = len(seqs)
    T = max(s.size for s in seqs)
    K = max(lens)
    if T > config.max_seq_len:
        raise ContractError(f"prompt+completion length {T} exceeds max_seq_len={config.max_seq_len}")
    tokens = np.zeros((B, T), dtype=np.int64)
    rows = np.zeros((B, K), dtype=np.int64)
    targets = np.zeros((B, K), dtype=np.int64)
    mask = np.zeros((B, K))
    for b, s in enumerate(seqs):
        tokens[b, :s.size] = s
        k = lens[b]
        rows[b, :k] = np.arange(starts[b] - 1, starts[b] - 1 + k)
        targets[b, :k] = s[starts[b]:]
        mask[b, :k] = 1.0
    return tokens, rows, targets, mask


def batch_token_log_probs(params, prompts, completions):
    """Teacher-forced per-token log-probs, as a ``(B, K_max)`` tensor and 0/1 mask."""
    if len(prompts) != len(completions) or not prompts:
        raise ContractError("need equally many (non-zero) prompts and completions")
    tokens, rows, targets, mask = _pack(prompts, completions, params.config)
    B, K = rows.shape
    logp = ad.log_softmax(forward_batch(params, tokens), axis=-1)
    # pick the rows that predict completion tokens: (B, K, L)
    flat = ad.reshape(logp, (B * tokens.shape[1], -1))
    picked = ad.embedding(flat, rows + np.arange(B)[:, None] * tokens.shape[1])
    tok = ad.gather(picked, targets)
    return ad.mul(tok, mask), mask


def batch_log_probs(params, prompts, completions):
    """Sequence log-probs ``log pi(y|x)`` for a batch, shape ``(B,)``."""
    tok, _ = batch_token_log_probs(params, prompts, completions)
    return ad.sum(tok, axis=1)


def per_token_log_probs(params, prompt, completion):
    tok, _ = batch_token_log_probs(params, [prompt], [completion])
    return tok.data[0].copy()


def completion_log_prob(params, prompt, completion):
    with ad.no_grad():
        return float(batch_log_probs(params, [prompt], [completion]).data[0])


# ----------------------------------------------------------------------------
# checkpoints
#
# Layout (version 1): MAGIC(8) | u32 little-endian header length | UTF-8 JSON
# header | raw little-endian float64 tensor data in header order.  The header
# holds the format version, config, frozen flag and [name, shape] entries.

def save_checkpoint(params, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params))


def checkpoint_bytes(params):
    header = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "frozen": params.frozen,
        "tensors": [[k, list(v.shape)] for k, v in params.tensors.items()],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for v in params.tensors.values():
        buf.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a dpoplab checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {header.get('version')}")
    config = LMConfig.from_dict(header["config"])
    off = 12 + n
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
        tensors[name] = Tensor(data.reshape(shape))
        off += 8 * count
    if off != len(raw):
        raise ContractError(f"{path}: trailing bytes in checkpoint")
    expected = param_shapes(config)
    if {k: tuple(t.shape) for k, t in tensors.items()} != expected:
        raise ContractError(f"{path}: tensor set does not match config")
    return LMParams(config, tensors, frozen=header["frozen"])
