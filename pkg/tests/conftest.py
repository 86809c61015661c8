import numpy as np
import pytest

from dpwavelet.armodel import ModelConfig, ModelParams, init_params
from dpwavelet.tokenizer import SequenceLayout, TokenSequence

# A tiny hand-built layout: 4 coarse slots (ids 0..3) then 3 detail bands
# of 4 slots each (ids 4..15).
TOY_LAYOUT = SequenceLayout(
    plane_shapes=(("LL", (1, 2, 2)), ("LH0", (1, 4, 4)), ("HL0", (1, 4, 4)), ("HH0", (1, 4, 4))),
    patch_sizes=(("LL", (1, 1)), ("LH0", (2, 2)), ("HL0", (2, 2)), ("HH0", (2, 2))),
    vocab_offsets=(("LL", 0, 4), ("LH0", 4, 4), ("HL0", 8, 4), ("HH0", 12, 4)),
)


def toy_config(seed=0, d=16, layers=2, heads=2, mlp=32, init_std=0.02):
    return ModelConfig(
        vocab_size=16,
        max_len=1 + len(TOY_LAYOUT),
        d_model=d,
        n_layers=layers,
        n_heads=heads,
        d_mlp=mlp,
        cond_vocab=3,
        coarse_len=4,
        approx_vocab=4,
        seed=seed,
        init_std=init_std,
    )


def random_params(seed=0, std=0.3, **kw) -> ModelParams:
    """Fully random parameters (head and norms included) so gradients are generic."""
    cfg = toy_config(seed=seed, **kw)
    p = init_params(cfg)
    rng = np.random.default_rng(1000 + seed)
    theta = p.theta + std * rng.standard_normal(p.theta.size)
    return ModelParams(cfg, theta)


def random_sequence(rng, n_body=None, cond=None) -> TokenSequence:
    n_body = len(TOY_LAYOUT) if n_body is None else n_body
    body = [int(rng.integers(*TOY_LAYOUT.slot_range(p))) for p in range(n_body)]
    cond = (int(rng.integers(0, 3)),) if cond is None else cond
    return TokenSequence(cond, body, TOY_LAYOUT)


@pytest.fixture
def layout():
    return TOY_LAYOUT


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
