"""Synthetic paired-preference datasets with controllable edit distance.

Two generators:

* calc chains: a prompt lists single-digit operands, the preferred completion
  evaluates them step by step (values zero-padded to two digits) and one
  intermediate result is corrupted in the dispreferred copy, leaving every
  later token untouched.  Pairs differ in one or two characters.
* multiple choice: the preferred completion is the correct two-digit answer
  and each distinct wrong option yields its own pair, so pairs are far apart
  in edit distance.

Text is tokenised one character per token over a fixed :data:`ALPHABET`.
"""

import csv
import json
import logging
import statistics
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DatasetParseError, TokenizationError

logger = logging.getLogger(__name__)

BOS = "\x02"
PLUS, MINUS, TIMES = "+", "−", "×"
_CHARS = "0123456789" + PLUS + MINUS + TIMES + "=;?" + "QAans" + " :" + BOS


class Alphabet:
    """Bijective character <-> id map."""

    def __init__(self, chars=_CHARS):
        if len(set(chars)) != len(chars):
            raise ValueError("alphabet characters must be unique")
        if len(chars) > 64:
            raise ValueError("alphabet larger than 64 symbols")
        self.chars = chars
        self._index = {c: i for i, c in enumerate(chars)}

    def __len__(self):
        return len(self.chars)

    @property
    def bos_id(self):
        return self._index[BOS]

    def encode(self, text):
        bad = sorted({c for c in text if c not in self._index})
        if bad:
            raise TokenizationError(f"characters outside the alphabet: {bad!r}")
        return tuple(self._index[c] for c in text)

    def decode(self, ids):
        return "".join(self.chars[i] for i in ids)


ALPHABET = Alphabet()


@dataclass
class PreferencePair:
    """Token-level preference pair.  ``prompt`` starts with the BOS token."""

    prompt: tuple
    chosen: tuple
    rejected: tuple
    first_edit_index: int = None
    id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prompt = tuple(int(t) for t in self.prompt)
        self.chosen = tuple(int(t) for t in self.chosen)
        self.rejected = tuple(int(t) for t in self.rejected)
        if not self.chosen or not self.rejected:
            raise ContractError("completions must be non-empty")
        if self.chosen == self.rejected:
            raise ContractError("chosen and rejected completions are identical")
        m = self.first_edit_index
        if m is not None:
            n = min(len(self.chosen), len(self.rejected))
            if not 0 <= m < n or self.chosen[:m] != self.rejected[:m] or self.chosen[m] == self.rejected[m]:
                raise ContractError(f"first_edit_index={m} does not mark the first differing token")

    @classmethod
    def from_text(cls, prompt, chosen, rejected, first_edit_index=None, id=0, meta=None,
                  alphabet=ALPHABET):
        return cls((alphabet.bos_id,) + alphabet.encode(prompt), alphabet.encode(chosen),
                   alphabet.encode(rejected), first_edit_index, id, dict(meta or {}))

    def text(self, alphabet=ALPHABET):
        return (alphabet.decode(self.prompt[1:]), alphabet.decode(self.chosen),
                alphabet.decode(self.rejected))


def first_difference(a, b):
    """Index of the first differing position, or None if one is a prefix of the other."""
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return None


# ----------------------------------------------------------------------------
# distances

def hamming_distance(a, b):
    if len(a) != len(b):
        raise ContractError(f"hamming distance needs equal lengths, got {len(a)} and {len(b)}")
    return sum(x != y for x, y in zip(a, b))


def levenshtein(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(a, b):
    """Levenshtein distance divided by the longer length, in [0, 1]."""
    if not len(a) or not len(b):
        raise ContractError("normalized edit distance needs non-empty sequences")
    return levenshtein(a, b) / max(len(a), len(b))


# ----------------------------------------------------------------------------
# calc-chain generator

_OPS = {PLUS: lambda a, b: a + b, MINUS: lambda a, b: a - b, TIMES: lambda a, b: a * b}


def derive_seed(master_seed, index):
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def _fmt(v):
    return f"{v:02d}"


def gen_calc_chain(seed, n_steps=2, operand_max=9, ops=(PLUS, MINUS, TIMES), swap_prob=0.0,
                   max_tries=1000):
    """Return ``(prompt_text, chosen_text)`` for a random chain of ``n_steps`` operations.

    With ``swap_prob > 0`` each commutative step is written operand-first with
    that probability ("05 + 07" for "07 + 05"), so the same prompt has several
    correct renderings.
    """
    if n_steps < 2:
        raise ContractError("n_steps must be at least 2")
    if not 1 <= operand_max <= 9:
        raise ContractError("operand_max must be in [1, 9]")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        operands = [int(v) for v in rng.integers(0, operand_max + 1, size=n_steps + 1)]
        chosen_ops = [ops[int(i)] for i in rng.integers(0, len(ops), size=n_steps)]
        swaps = (rng.random(n_steps) < swap_prob).tolist() if swap_prob > 0 else None
        text = render_calc_chain(operands, chosen_ops, swaps)
        if text is not None:
            return text
    raise ContractError("could not draw a chain whose values all fit in two digits")


def render_calc_chain(operands, ops, swaps=None):
    """Render a chain, or None if an intermediate leaves [0, 99].

    ``swaps[i]`` writes step ``i`` as "operand op accumulator"; it is ignored
    for the non-commutative minus.
    """
    prompt = "Q: " + " ".join(
        [str(operands[0])] + [f"{op} {v}" for op, v in zip(ops, operands[1:])]) + " = ?"
    steps, acc = [], operands[0]
    swaps = swaps or [False] * len(ops)
    for op, v, swap in zip(ops, operands[1:], swaps):
        nxt = _OPS[op](acc, v)
        if not 0 <= nxt <= 99:
            return None
        a, b = (v, acc) if swap and op != MINUS else (acc, v)
        steps.append(f"{_fmt(a)} {op} {_fmt(b)} = {_fmt(nxt)}")
        acc = nxt
    return prompt, " ; ".join(steps) + f" ; ans {_fmt(acc)}"


def parse_calc_chain(chosen):
    """Character spans ``(start, end)`` of the step results in a rendered chain."""
    parts = chosen.split(" ; ")
    if len(parts) < 2 or not parts[-1].startswith("ans "):
        raise ContractError("text does not follow the calc-chain grammar")
    spans, pos = [], 0
    for step in parts[:-1]:
        lhs, sep, rhs = step.partition(" = ")
        if not sep or len(rhs) != 2 or not rhs.isdigit():
            raise ContractError(f"malformed step {step!r}")
        start = pos + len(lhs) + 3
        spans.append((start, start + 2))
        pos += len(step) + 3
    return spans


def corrupt_intermediate(chosen, seed, alphabet=ALPHABET):
    """Replace one non-final step result by a wrong two-digit value.

    ``chosen`` may be text or token ids.  Text after the corrupted value,
    including later references to the original value and the final answer, is
    copied verbatim.  With probability 3/4 a single digit is changed,
    otherwise the whole value is redrawn.  Returns ``(rejected, first_edit_index)``
    in the same representation as ``chosen``.
    """
    as_text = isinstance(chosen, str)
    text = chosen if as_text else alphabet.decode(chosen)
    spans = parse_calc_chain(text)[:-1]
    if not spans:
        raise ContractError("no intermediate value available to corrupt")
    rng = np.random.default_rng(seed)
    start, end = spans[int(rng.integers(len(spans)))]
    old = text[start:end]
    if rng.random() < 0.75:
        d = int(rng.integers(2))
        digits = [c for c in "0123456789" if c != old[d]]
        new = old[:d] + digits[int(rng.integers(9))] + old[d + 1:]
    else:
        values = [_fmt(v) for v in range(100) if _fmt(v) != old]
        new = values[int(rng.integers(len(values)))]
    rejected = text[:start] + new + text[end:]
    m = first_difference(text, rejected)
    return (rejected if as_text else alphabet.encode(rejected)), m


def make_calc_chain_dataset(n_pairs, seed, n_steps=2, operand_max=9, swap_prob=0.0,
                            alphabet=ALPHABET):
    pairs = []
    for i in range(n_pairs):
        s = derive_seed(seed, i)
        prompt, chosen = gen_calc_chain(s, n_steps=n_steps, operand_max=operand_max,
                                        swap_prob=swap_prob)
        rejected, m = corrupt_intermediate(chosen, s + 1)
        pairs.append(PreferencePair.from_text(
            prompt, chosen, rejected, first_edit_index=m, id=i,
            meta={"generator": "calc_chain", "seed": s}, alphabet=alphabet))
    return pairs


# ----------------------------------------------------------------------------
# multiple choice

def pairs_from_multiple_choice(prompt, correct, incorrect, start_id=0, meta=None):
    """One pair per distinct wrong option, all sharing prompt and chosen.

    Options equal to ``correct`` are skipped and counted in the log.
    ``first_edit_index`` is set only when the completions have equal length.
    """
    pairs, skipped = [], 0
    for wrong in incorrect:
        wrong = tuple(wrong)
        if wrong == tuple(correct):
            skipped += 1
            continue
        m = first_difference(correct, wrong) if len(wrong) == len(correct) else None
        pairs.append(PreferencePair(prompt, correct, wrong, first_edit_index=m,
                                    id=start_id + len(pairs), meta=dict(meta or {})))
    if skipped:
        logger.warning("skipped %d incorrect option(s) equal to the correct one", skipped)
    return pairs


def gen_multiple_choice_question(seed, n_options=4, operand_max=9, max_tries=1000):
    """``(prompt_text, correct_text, [wrong_text, ...])`` for a two-operation sum."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        a, b, c = (int(v) for v in rng.integers(0, operand_max + 1, size=3))
        op1, op2 = (TIMES, PLUS) if rng.random() < 0.5 else (TIMES, MINUS)
        value = a * b + c if op2 == PLUS else a * b - c
        if 0 <= value <= 99:
            break
    else:
        raise ContractError("could not draw a question with a two-digit answer")
    prompt = f"Q: {a} {op1} {b} {op2} {c} = ? A:"
    wrong = rng.choice([v for v in range(100) if v != value], size=n_options - 1, replace=False)
    return prompt, _fmt(value), [_fmt(int(v)) for v in wrong]


def make_multiple_choice_dataset(n_questions, seed, n_options=4, alphabet=ALPHABET):
    pairs = []
    for q in range(n_questions):
        s = derive_seed(seed, q)
        prompt, correct, wrong = gen_multiple_choice_question(s, n_options=n_options)
        x = (alphabet.bos_id,) + alphabet.encode(prompt)
        pairs.extend(pairs_from_multiple_choice(
            x, alphabet.encode(correct), [alphabet.encode(w) for w in wrong],
            start_id=len(pairs), meta={"generator": "multiple_choice", "seed": s}))
    return pairs


GENERATORS = {
    "calc_chain": make_calc_chain_dataset,
    "multiple_choice": make_multiple_choice_dataset,
}


# ----------------------------------------------------------------------------
# stats

@dataclass
class DatasetStats:
    n_pairs: int
    mean_norm_edit_distance: float
    median_norm_edit_distance: float
    mean_completion_length: float
    fraction_hamming1: float
    rows: list = field(default_factory=list, repr=False)

    def summary(self):
        return {k: getattr(self, k) for k in (
            "n_pairs", "mean_norm_edit_distance", "median_norm_edit_distance",
            "mean_completion_length", "fraction_hamming1")}


def dataset_stats(pairs):
    if not pairs:
        raise ContractError("cannot compute statistics of an empty dataset")
    rows = []
    for p in pairs:
        ham = hamming_distance(p.chosen, p.rejected) if len(p.chosen) == len(p.rejected) else None
        rows.append({
            "pair_id": p.id,
            "len_chosen": len(p.chosen),
            "len_rejected": len(p.rejected),
            "hamming": ham,
            "norm_edit_distance": normalized_edit_distance(p.chosen, p.rejected),
        })
    ned = [r["norm_edit_distance"] for r in rows]
    lengths = [(r["len_chosen"] + r["len_rejected"]) / 2 for r in rows]
    return DatasetStats(
        n_pairs=len(rows),
        mean_norm_edit_distance=float(np.mean(ned)),
        median_norm_edit_distance=float(statistics.median(ned)),
        mean_completion_length=float(np.mean(lengths)),
        fraction_hamming1=sum(r["hamming"] == 1 for r in rows) / len(rows),
        rows=rows,
    )


def write_stats_csv(stats, path):
    cols = ["pair_id", "len_chosen", "len_rejected", "hamming", "norm_edit_distance"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in stats.rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in cols])


# ----------------------------------------------------------------------------
# JSONL

_REQUIRED = ("id", "prompt", "chosen", "rejected")


def pair_to_record(pair, alphabet=ALPHABET):
    prompt, chosen, rejected = pair.text(alphabet)
    return {
        "id": pair.id,
        "prompt": prompt,
        "chosen": chosen,
        "rejected": rejected,
        "first_edit_index": pair.first_edit_index,
        "meta": {"generator": pair.meta.get("generator", ""), "seed": int(pair.meta.get("seed", 0))},
    }


def write_jsonl(pairs, path, alphabet=ALPHABET):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in pairs:
            f.write(json.dumps(pair_to_record(p, alphabet), ensure_ascii=False) + "\n")


def read_jsonl(path, alphabet=ALPHABET):
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(f"invalid JSON ({e.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise DatasetParseError("record is not an object", lineno)
            for key in _REQUIRED:
                if key not in rec:
                    raise DatasetParseError(f"missing field {key!r}", lineno)
            try:
                pairs.append(PreferencePair.from_text(
                    rec["prompt"], rec["chosen"], rec["rejected"],
                    first_edit_index=rec.get("first_edit_index"), id=int(rec["id"]),
                    meta=rec.get("meta") or {}, alphabet=alphabet))
            except TokenizationError as e:
                raise TokenizationError(f"line {lineno}: {e}") from None
            except ContractError as e:
                raise DatasetParseError(str(e), lineno) from None
    return pairs
