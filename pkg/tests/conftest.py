import pytest

from pfl.core_math import make_rng
from pfl.model import ModelConfig, init_params
from pfl.synthbench import SynthConfig, generate_benchmark

# 8 Xv ids x 4 views x 3 seqs = 96 against 4 Xc ids x 2 views x 4 seqs = 32: ratio exactly 3
TINY_SYNTH = SynthConfig(n_train_ids=12, n_test_ids=4, xv_fraction=2 / 3, views=(0, 18, 36, 54),
                         xc_views=(0, 18), frames_per_seq=4, frame_dim=8, view_planes=2)
TINY_MODEL = ModelConfig(frame_dim=8, feature_dim=8, parts=2, embed_dim=4, head_dim=4)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_benchmark(TINY_SYNTH, make_rng(0))


@pytest.fixture
def tiny_params():
    return init_params(TINY_MODEL, make_rng(1))


@pytest.fixture
def rng():
    return make_rng(12345)


def random_params(config, seed, scale=0.5):
    """Initial parameters plus a dense perturbation so no tensor is trivially zero."""
    r = make_rng(seed)
    params = init_params(config, r)
    for _, arr in params.items():
        arr += scale * r.standard_normal(arr.shape)
    return params


# acceptance criteria report one line each; collected here and printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
