import numpy as np
import pytest
import torch
from hypothesis import settings

from alignti.model import ModelConfig, TinyTransformer
from alignti.synthdata import TaskSpec, generate_dataset, to_batch

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def spec():
    return TaskSpec(seed=7)


@pytest.fixture(scope="session")
def records(spec):
    return generate_dataset(spec, 64)


@pytest.fixture
def batch(records):
    return to_batch(records[:5])


def tiny_model(vocab, n_layers=2, n_heads=2, hidden=16, seed=0, max_len=256):
    return TinyTransformer(ModelConfig(vocab, n_layers, n_heads, hidden, max_len, seed=seed))


@pytest.fixture
def teacher(spec):
    return tiny_model(spec.vocab.size, 2, 2, 16, seed=11)


@pytest.fixture
def student(spec):
    return tiny_model(spec.vocab.size, 1, 2, 8, seed=12)


def make_uniform(model):
    """Zero the query/key projections so every attention row is uniform over allowed keys."""
    with torch.no_grad():
        for block in model.blocks:
            h = model.cfg.hidden_dim
            block.qkv.weight[: 2 * h].zero_()
            block.qkv.bias[: 2 * h].zero_()
    return model


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, name, detail = RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n}. {name}: {detail}")
