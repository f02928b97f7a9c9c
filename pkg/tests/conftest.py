import numpy as np
import pytest

from dpoplab.dataforge import PreferencePair
from dpoplab.model import LMConfig, init_params, snapshot_reference


def random_params(config, seed, scale=1.0):
    """Init, then perturb every tensor so the model is far from uniform."""
    p = init_params(config, seed)
    rng = np.random.default_rng(seed + 1000)
    for t in p.values():
        t.data += rng.normal(0.0, 0.3 * scale, size=t.shape)
    return p


def random_hamming1_pair(rng, vocab, prompt_len=(2, 5), comp_len=(3, 7), pair_id=0):
    x = rng.integers(0, vocab, size=int(rng.integers(*prompt_len)))
    y = rng.integers(0, vocab, size=int(rng.integers(*comp_len)))
    m = int(rng.integers(0, y.size))
    yl = y.copy()
    yl[m] = (y[m] + int(rng.integers(1, vocab))) % vocab
    return PreferencePair(x, y, yl, first_edit_index=m, id=pair_id)


def random_pair(rng, vocab, pair_id=0):
    x = rng.integers(0, vocab, size=int(rng.integers(2, 5)))
    while True:
        yw = rng.integers(0, vocab, size=int(rng.integers(2, 6)))
        yl = rng.integers(0, vocab, size=int(rng.integers(2, 6)))
        if yw.tolist() != yl.tolist():
            return PreferencePair(x, yw, yl, id=pair_id)


@pytest.fixture
def tiny_config():
    return LMConfig(vocab_size=16, d_model=32, n_layers=1, n_heads=2, max_seq_len=16)


@pytest.fixture
def tiny_pair_models(tiny_config):
    theta = random_params(tiny_config, 1)
    ref = snapshot_reference(random_params(tiny_config, 2))
    return theta, ref


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
