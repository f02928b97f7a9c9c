import math

import numpy as np
import pytest

from dpoplab import trainer as tr
from dpoplab.autodiff import Tensor
from dpoplab.dataforge import PreferencePair, make_calc_chain_dataset
from dpoplab.exceptions import ConfigError, ContractError, NumericError, TrainingDiverged
from dpoplab.losses import LossConfig
from dpoplab.model import LMConfig, checkpoint_bytes, init_params, load_checkpoint, zeros_like_params
from dpoplab.trainer import (AdamWState, TrainConfig, adamw_step, eval_preference_accuracy,
                             iter_batches, mean_chosen_logprob, position_profile,
                             read_metrics_csv, run_ablation, run_preference_opt, run_sft,
                             select_probe, write_metrics_csv)

SMALL = LMConfig(vocab_size=24, d_model=16, n_layers=1, n_heads=2, max_seq_len=64)


def small_cfg(kind="dpop", **kw):
    base = dict(loss=LossConfig(kind), learning_rate=3e-3, batch_size=8, max_steps=6,
                eval_every=3, sft_steps=5, probe_size=16, seed=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return make_calc_chain_dataset(40, 3)


# ----------------------------------------------------------------------------
# optimiser

def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adamw_step(p, {"w": np.zeros(2)}, AdamWState(), TrainConfig())
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_decoupled_decay():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
    adamw_step(p, {"w": np.zeros(2)}, AdamWState(), cfg)
    np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * 0.95, rtol=0, atol=1e-15)


def test_adamw_hand_recursion():
    cfg = TrainConfig(learning_rate=0.01, adam_beta1=0.9, adam_beta2=0.99, adam_eps=1e-8)
    g = 0.5
    x = 1.0
    m = v = 0.0
    for t in (1, 2):
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        x -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
    p = {"w": Tensor(np.array(1.0))}
    state = AdamWState()
    for _ in range(2):
        adamw_step(p, {"w": np.array(g)}, state, cfg)
    assert p["w"].data == pytest.approx(x, abs=1e-15)
    assert state.step == 2


def test_adamw_rejects_non_finite():
    p = {"w": Tensor(np.array([1.0]))}
    state = AdamWState(step=6)
    with pytest.raises(TrainingDiverged, match="step 7"):
        adamw_step(p, {"w": np.array([np.nan])}, state, TrainConfig())


def test_config_validation_and_round_trip():
    cfg = TrainConfig.from_dict({"loss": {"kind": "dpo", "beta": 0.1}, "max_steps": 5})
    assert cfg.loss.kind == "dpo" and cfg.max_steps == 5
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 1.0})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


# ----------------------------------------------------------------------------
# batching and probe

def test_iter_batches_is_epoch_permutation():
    it = iter_batches(10, 5, 0, 1)
    first = next(it) + next(it)
    assert sorted(first) == list(range(10))
    again = iter_batches(10, 5, 0, 1)
    assert next(again) + next(again) == first


def test_select_probe_reproducible(data):
    a = select_probe(data, 10, 3)
    assert [p.id for p in a] == [p.id for p in select_probe(data, 10, 3)]
    assert len(a) == 10 and len(select_probe(data, 100, 3)) == len(data)


# ----------------------------------------------------------------------------
# evaluation

def test_eval_uniform_model():
    cfg = LMConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2, max_seq_len=16)
    p = zeros_like_params(cfg)
    pairs = [PreferencePair([0, 1], [2, 3, 4], [2, 5, 4], first_edit_index=1, id=i) for i in range(3)]
    assert eval_preference_accuracy(p, pairs) == 0.5
    assert mean_chosen_logprob(p, pairs) == pytest.approx(-math.log(16), abs=1e-12)
    assert mean_chosen_logprob(p, pairs, per_token=False) == pytest.approx(-3 * math.log(16), abs=1e-12)
    with pytest.raises(ContractError):
        eval_preference_accuracy(p, [])


def test_position_profile_anchored(data):
    p = init_params(SMALL, 0)
    prof = position_profile(p, data, window=3)
    assert prof.as_dict()[-1] == 0.0
    assert set(prof.offsets) <= set(range(-3, 4))
    assert all(n > 0 for n in prof.counts)


def test_position_profile_needs_edit_index():
    p = init_params(SMALL, 0)
    with pytest.raises(ContractError, match="calc_chain"):
        position_profile(p, [PreferencePair([0], [1, 2], [3])])


def test_position_profile_omits_uncovered_offsets():
    p = init_params(SMALL, 0)
    pair = PreferencePair([0], [1, 2, 3], [1, 4, 3], first_edit_index=1)
    prof = position_profile(p, [pair], window=4)
    assert prof.offsets == [-1, 0, 1]


# ----------------------------------------------------------------------------
# training loops

def test_sft_zero_steps_returns_copy(data):
    p = init_params(SMALL, 0)
    out = run_sft(p, data, small_cfg(sft_steps=0))
    assert checkpoint_bytes(out) == checkpoint_bytes(p) and out is not p


def test_sft_learns_and_is_deterministic(data):
    p = init_params(SMALL, 0)
    cfg = small_cfg(sft_steps=30)
    a = run_sft(p, data, cfg)
    b = run_sft(p, data, cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert mean_chosen_logprob(a, data) > mean_chosen_logprob(p, data)


def test_preference_records_and_reference_untouched(data, tmp_path):
    p = run_sft(init_params(SMALL, 0), data, small_cfg())
    before = checkpoint_bytes(p)
    policy, records = run_preference_opt(p, data, small_cfg(max_steps=7))
    assert [r.step for r in records] == [0, 3, 6, 7]
    assert checkpoint_bytes(p) == before
    assert records[0].mean_log_ratio_w == 0.0 and records[0].mean_penalty == 0.0
    write_metrics_csv(records, tmp_path / "m.csv")
    assert read_metrics_csv(tmp_path / "m.csv") == records
    assert (tmp_path / "m.csv").read_text().splitlines()[0].startswith(
        "step,train_loss,mean_chosen_logprob,mean_rejected_logprob,mean_log_ratio_w,"
        "mean_log_ratio_l,preference_accuracy,mean_penalty,grad_norm")


def test_dpop_lambda_zero_timeline_equals_dpo(data, tmp_path):
    p = run_sft(init_params(SMALL, 0), data, small_cfg())
    _, dpo = run_preference_opt(p, data, small_cfg(loss=LossConfig("dpo")))
    _, dpop = run_preference_opt(p, data, small_cfg(loss=LossConfig("dpop", lam=0.0)))
    write_metrics_csv(dpo, tmp_path / "a.csv")
    write_metrics_csv(dpop, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.mark.parametrize("kind", ["ipo", "slic"])
def test_other_losses_train(data, kind):
    p = init_params(SMALL, 0)
    _, records = run_preference_opt(p, data, small_cfg(loss=LossConfig(kind), max_steps=3))
    assert all(math.isfinite(r.train_loss) for r in records)


def test_divergence_saves_last_good(data, tmp_path, monkeypatch):
    p = init_params(SMALL, 0)
    real = tr.batch_loss
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NumericError("log produced non-finite values")
        return real(*a, **kw)

    monkeypatch.setattr(tr, "batch_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        run_preference_opt(p, data, small_cfg(), out_dir=tmp_path)
    assert info.value.step == 3
    assert load_checkpoint(info.value.checkpoint_path).config == SMALL


def test_empty_dataset_rejected():
    with pytest.raises(ContractError):
        run_preference_opt(init_params(SMALL, 0), [], small_cfg())


def test_ablation_grid(data):
    p = init_params(SMALL, 0)
    res = run_ablation({"lambda": [5, 50]}, small_cfg(max_steps=2, eval_every=2), data, p)
    assert [(b, l) for b, l, _ in res] == [(0.3, 5.0), (0.3, 50.0)]
    with pytest.raises(ConfigError):
        run_ablation({}, small_cfg(), data, p)
