import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpoplab.dataforge import (ALPHABET, GENERATORS, PreferencePair, corrupt_intermediate,
                               dataset_stats, gen_calc_chain, gen_multiple_choice_question,
                               hamming_distance, levenshtein, make_calc_chain_dataset,
                               make_multiple_choice_dataset, normalized_edit_distance,
                               pairs_from_multiple_choice, parse_calc_chain, read_jsonl,
                               render_calc_chain, write_jsonl, write_stats_csv)
from dpoplab.exceptions import ContractError, DatasetParseError, TokenizationError


def brute_levenshtein(a, b):
    """Full-table dynamic programme, kept deliberately naive."""
    D = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        D[i][0] = i
    for j in range(len(b) + 1):
        D[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            D[i][j] = min(D[i - 1][j] + 1, D[i][j - 1] + 1, D[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return D[-1][-1]


# ----------------------------------------------------------------------------
# alphabet and pairs

def test_alphabet_round_trip():
    text = "Q: 3 + 4 × 5 = ? A: 23 ; ans 99"
    assert ALPHABET.decode(ALPHABET.encode(text)) == text
    assert len(ALPHABET) == 24


def test_alphabet_reports_bad_characters():
    with pytest.raises(TokenizationError, match="é"):
        ALPHABET.encode("café")


def test_pair_validation():
    with pytest.raises(ContractError):
        PreferencePair([0], [1, 2], [1, 2])
    with pytest.raises(ContractError):
        PreferencePair([0], [1, 2, 3], [1, 4, 3], first_edit_index=0)
    assert PreferencePair([0], [1, 2, 3], [1, 4, 3], first_edit_index=1).first_edit_index == 1


# ----------------------------------------------------------------------------
# distances

def test_hamming_examples():
    assert hamming_distance("2+2=4", "2+2=5") == 1
    assert hamming_distance("abc", "abc") == 0
    assert hamming_distance("0110", "1001") == 4
    with pytest.raises(ContractError):
        hamming_distance("ab", "abc")


def test_normalized_edit_distance_examples():
    assert normalized_edit_distance("kitten", "sitting") == pytest.approx(3 / 7)
    assert normalized_edit_distance("abc", "abc") == 0.0
    assert normalized_edit_distance("abc", "xyz") == 1.0
    with pytest.raises(ContractError):
        normalized_edit_distance("", "a")


words = st.text(alphabet="abcd", max_size=9)


@settings(max_examples=150, deadline=None)
@given(words, words)
def test_levenshtein_matches_oracle(a, b):
    assert levenshtein(a, b) == brute_levenshtein(a, b)


@settings(max_examples=150, deadline=None)
@given(words, words, words)
def test_levenshtein_metric(a, b, c):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert (levenshtein(a, b) == 0) == (a == b)


# ----------------------------------------------------------------------------
# calc chain

def test_render_example():
    prompt, chosen = render_calc_chain([3, 4, 5], ["+", "+"])
    assert prompt == "Q: 3 + 4 + 5 = ?"
    assert chosen == "03 + 04 = 07 ; 07 + 05 = 12 ; ans 12"


def test_render_swapped_operands():
    _, chosen = render_calc_chain([3, 4, 5], ["+", "−"], swaps=[True, True])
    assert chosen == "04 + 03 = 07 ; 07 − 05 = 02 ; ans 02"


def test_render_rejects_out_of_range():
    assert render_calc_chain([9, 9, 9], ["×", "×"]) is None
    assert render_calc_chain([1, 5, 0], ["−", "+"]) is None


def test_gen_calc_chain_deterministic():
    assert gen_calc_chain(42) == gen_calc_chain(42)
    with pytest.raises(ContractError):
        gen_calc_chain(0, n_steps=1)


def test_corrupt_positions():
    chosen = "03 + 04 = 07 ; 07 + 05 = 12 ; ans 12"
    for seed in range(30):
        rejected, m = corrupt_intermediate(chosen, seed)
        assert len(rejected) == len(chosen)
        diff = [i for i, (a, b) in enumerate(zip(chosen, rejected)) if a != b]
        assert diff and set(diff) <= {10, 11}
        assert m == diff[0]
        assert rejected[10:12] != "07" and rejected[10:12].isdigit()
        assert corrupt_intermediate(chosen, seed) == (rejected, m)


def test_corrupt_tokens_matches_text():
    chosen = "03 + 04 = 07 ; 07 + 05 = 12 ; ans 12"
    rej, m = corrupt_intermediate(ALPHABET.encode(chosen), 5)
    assert (ALPHABET.decode(rej), m) == corrupt_intermediate(chosen, 5)


def test_corrupt_requires_intermediate():
    with pytest.raises(ContractError):
        corrupt_intermediate("03 + 04 = 07 ; ans 07", 0)
    with pytest.raises(ContractError):
        parse_calc_chain("no chain here")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.5]))
def test_calc_chain_values_are_correct(seed, swap_prob):
    prompt, chosen = gen_calc_chain(seed, n_steps=3, swap_prob=swap_prob)
    tokens = prompt[3:-4].split(" ")
    acc = int(tokens[0])
    for op, v in zip(tokens[1::2], tokens[2::2]):
        acc = {"+": acc + int(v), "−": acc - int(v), "×": acc * int(v)}[op]
    assert chosen.endswith(f"ans {acc:02d}")
    spans = parse_calc_chain(chosen)
    assert int(chosen[slice(*spans[-1])]) == acc


def test_calc_chain_dataset_low_edit_distance():
    pairs = make_calc_chain_dataset(300, 0)
    stats = dataset_stats(pairs)
    assert stats.mean_norm_edit_distance <= 0.10
    assert stats.fraction_hamming1 >= 0.5
    assert all(p.first_edit_index is not None for p in pairs)
    assert [p.id for p in pairs] == list(range(300))
    swapped = make_calc_chain_dataset(300, 0, swap_prob=0.5)
    assert dataset_stats(swapped).mean_norm_edit_distance <= 0.10


# ----------------------------------------------------------------------------
# multiple choice

def test_pairs_from_multiple_choice():
    pairs = pairs_from_multiple_choice((0, 1), (2, 3), [(4, 5), (2, 6), (7,)])
    assert len(pairs) == 3 and all(p.chosen == (2, 3) for p in pairs)
    assert pairs[1].first_edit_index == 1 and pairs[2].first_edit_index is None


def test_pairs_from_multiple_choice_skips_equal(caplog):
    with caplog.at_level(logging.WARNING):
        assert pairs_from_multiple_choice((0,), (2, 3), [(2, 3)]) == []
    assert "skipped 1" in caplog.text


def test_multiple_choice_dataset_high_edit_distance():
    pairs = make_multiple_choice_dataset(100, 1)
    assert len(pairs) == 300
    assert dataset_stats(pairs).mean_norm_edit_distance >= 0.5
    prompt, correct, wrong = gen_multiple_choice_question(3)
    assert correct not in wrong and len(set(wrong)) == 3


def test_generators_are_pure(tmp_path):
    for name, gen in GENERATORS.items():
        write_jsonl(gen(20, 7), tmp_path / "a.jsonl")
        write_jsonl(gen(20, 7), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes(), name


# ----------------------------------------------------------------------------
# stats and I/O

def test_stats_csv(tmp_path):
    pairs = make_calc_chain_dataset(10, 0)
    stats = dataset_stats(pairs)
    write_stats_csv(stats, tmp_path / "stats.csv")
    lines = (tmp_path / "stats.csv").read_text().splitlines()
    assert lines[0].startswith("pair_id,len_chosen,len_rejected,hamming,norm_edit_distance")
    assert len(lines) >= 11
    with pytest.raises(ContractError):
        dataset_stats([])


def test_jsonl_round_trip(tmp_path):
    pairs = make_calc_chain_dataset(15, 2) + make_multiple_choice_dataset(3, 2)
    write_jsonl(pairs, tmp_path / "d.jsonl")
    back = read_jsonl(tmp_path / "d.jsonl")
    assert [(p.prompt, p.chosen, p.rejected, p.first_edit_index) for p in back] == \
           [(p.prompt, p.chosen, p.rejected, p.first_edit_index) for p in pairs]


def test_jsonl_missing_field(tmp_path):
    path = tmp_path / "d.jsonl"
    good = json.dumps({"id": 0, "prompt": "Q: 1", "chosen": "01", "rejected": "02"})
    path.write_text(good + "\n" + json.dumps({"id": 1, "prompt": "Q: 1", "chosen": "01"}) + "\n")
    with pytest.raises(DatasetParseError, match=r"line 2.*rejected"):
        read_jsonl(path)


def test_jsonl_bad_json(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(DatasetParseError, match="line 1"):
        read_jsonl(path)


def test_jsonl_bad_characters(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"id": 0, "prompt": "Q: ✓", "chosen": "01", "rejected": "02"},
                               ensure_ascii=False) + "\n", encoding="utf-8")
    with pytest.raises(TokenizationError, match="✓"):
        read_jsonl(path)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 23), min_size=1, max_size=8),
       st.lists(st.integers(0, 23), min_size=1, max_size=8),
       st.lists(st.integers(0, 23), min_size=1, max_size=8))
def test_jsonl_round_trip_property(tmp_path_factory, x, yw, yl):
    if yw == yl:
        return
    bos = ALPHABET.bos_id
    x = [t for t in x if t != bos]
    pair = PreferencePair([bos] + x, yw, yl)
    path = tmp_path_factory.mktemp("rt") / "p.jsonl"
    write_jsonl([pair], path)
    back = read_jsonl(path)[0]
    assert (back.prompt, back.chosen, back.rejected) == (pair.prompt, pair.chosen, pair.rejected)
    assert np.isfinite(normalized_edit_distance(back.chosen, back.rejected))
