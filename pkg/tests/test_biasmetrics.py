import numpy as np
import pytest
import torch

from alignti.biasmetrics import (
    MarkovChainLM,
    accumulated_error_sampled,
    accumulated_error_test,
    accumulated_error_train,
    bias_curve,
    excess_accumulated_error,
    excess_percent,
    rollout,
)
from alignti.errors import ContractError
from alignti.model import SequenceBatch, forward_pass
from alignti.numerics import make_rng
from alignti.synthdata import DatasetRecord

from conftest import tiny_model

P = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.3, 0.3, 0.4]])
Q = np.array([[0.5, 0.3, 0.2], [0.2, 0.2, 0.6], [0.25, 0.5, 0.25]])


def kl_rows(p, q):
    return np.sum(p * np.log(p / q), axis=-1)


def chain_records(n, start, length=10):
    return [DatasetRecord(f"r{i}", [], [start], [0] * length) for i in range(n)]


def long_records(records, n, max_len):
    return [r for r in records if len(r.response_tokens) >= max_len][:n]


def test_identical_models_give_zero_and_undefined():
    m = MarkovChainLM(P)
    recs = chain_records(4, 0)
    pct, defined, r, e = excess_accumulated_error(m, m, recs, 6, seed=1)
    assert np.all(r == 0) and np.all(e == 0)
    assert not defined.any() and np.isnan(pct).all()
    assert np.all(accumulated_error_train(m, m, recs, 6) == 0)


def test_curves_nondecreasing(teacher, student, records):
    recs = long_records(records, 6, 12)
    for curve in (accumulated_error_train(teacher, student, recs, 12),
                  accumulated_error_test(teacher, student, recs, 12, seed=2)):
        assert np.all(np.diff(curve) >= 0)


@torch.no_grad()
def test_train_curve_matches_per_step_loop(teacher, student, records):
    recs = long_records(records, 5, 8)
    got = accumulated_error_train(teacher, student, recs, 8)
    per_step = np.zeros(8)
    for r in recs:
        for t in range(8):
            batch = SequenceBatch.from_segments([(r.visual_tokens, r.instruction_tokens, r.response_tokens[:t])])
            last = batch.tokens.shape[1] - 1
            pt = torch.softmax(forward_pass(teacher, batch)[0][0, last], -1).numpy()
            ps = torch.softmax(forward_pass(student, batch)[0][0, last], -1).numpy()
            per_step[t] += np.sum(pt * np.log(pt / ps)) / len(recs)
    assert np.allclose(got, np.cumsum(per_step), atol=1e-10)


def greedy_path(T, start, n):
    path, s = [], start
    for _ in range(n):
        s = int(np.argmax(T[s]))
        path.append(s)
    return path


def test_markov_greedy_closed_form():
    teacher, student = MarkovChainLM(P), MarkovChainLM(Q)
    recs = chain_records(3, 1)
    L = 6
    step_kl = kl_rows(P, Q)

    def along(states):
        return np.cumsum([step_kl[s] for s in states])

    r_expected = along([1] + greedy_path(Q, 1, L - 1))
    e_expected = along([1] + greedy_path(P, 1, L - 1))
    pct, defined, r, e = excess_accumulated_error(teacher, student, recs, L, strategy="greedy")
    assert np.allclose(r, r_expected, atol=1e-6)
    assert np.allclose(e, e_expected, atol=1e-6)
    assert np.allclose(accumulated_error_test(teacher, student, recs, L, strategy="greedy"), r_expected, atol=1e-6)
    assert defined.all()
    assert np.allclose(pct, (r_expected - e_expected) / e_expected * 100, atol=1e-6)


def exact_sampled_curve(sampler, start, L):
    step_kl = kl_rows(P, Q)
    pi = np.eye(3)[start]
    out = []
    for _ in range(L):
        out.append(pi @ step_kl)
        pi = pi @ sampler
    return np.cumsum(out)


@pytest.mark.parametrize("which", ["student", "teacher"])
def test_markov_sampled_matches_exact_propagation(which):
    teacher, student = MarkovChainLM(P), MarkovChainLM(Q)
    recs = chain_records(4000, 2)
    L = 6
    sampler = student if which == "student" else teacher
    got = accumulated_error_sampled(teacher, student, recs, L, sampler, seed=3, nucleus_p=1.0)
    exact = exact_sampled_curve(Q if which == "student" else P, 2, L)
    assert np.allclose(got, exact, rtol=0.03)


def test_regret_and_baseline_use_the_right_sampler():
    a, b = MarkovChainLM(P), MarkovChainLM(Q)
    recs = chain_records(5, 1)
    _, _, r, e = excess_accumulated_error(a, b, recs, 5, seed=4, strategy="greedy")
    assert np.array_equal(r, accumulated_error_sampled(a, b, recs, 5, b, seed=4, strategy="greedy"))
    assert np.array_equal(e, accumulated_error_sampled(a, b, recs, 5, a, seed=4, strategy="greedy"))
    # from state 1 the two chains' greedy paths diverge, so the curves must too
    assert not np.array_equal(r, e)
    # swapping roles swaps which chain samples the regret prefixes
    _, _, r_swap, e_swap = excess_accumulated_error(b, a, recs, 5, seed=4, strategy="greedy")
    assert not np.array_equal(r_swap, r)


def test_short_records_rejected(teacher, student, records):
    short = min(records, key=lambda r: len(r.response_tokens))
    with pytest.raises(ContractError, match="shorter"):
        accumulated_error_train(teacher, student, [short], len(short.response_tokens) + 1)


def test_excess_percent_examples():
    vals, defined = excess_percent([1.0, 2.0, 3.0, 0.5], [1.0, 1.0, 0.0, 1e-12])
    assert defined.tolist() == [True, True, False, False]
    assert vals[0] == 0.0 and vals[1] == 100.0 and np.isnan(vals[2:]).all()


def test_rollout_ignores_eos_and_is_seeded(teacher, records):
    prompts = [r.prompt for r in records[:3]]
    a = rollout(teacher, prompts, 12, rng=make_rng(5))
    b = rollout(teacher, prompts, 12, rng=make_rng(5))
    assert a.shape == (3, 12) and torch.equal(a, b)
    with pytest.raises(ContractError):
        rollout(teacher, prompts, 3, strategy="nucleus")


def test_bias_curve_and_csv(tmp_path, teacher, student, records):
    recs = long_records(records, 4, 10)
    curve = bias_curve(teacher, student, recs, 10, seeds=(0, 1))
    assert np.array_equal(curve.e_test, curve.regret_r)
    assert curve.defined.all()
    single = [excess_accumulated_error(teacher, student, recs, 10, s)[0] for s in (0, 1)]
    assert np.allclose(curve.ex_acc_err, np.mean(single, axis=0), atol=1e-12)
    assert curve.plateau(2, 5) == pytest.approx(float(np.mean(curve.ex_acc_err[1:5])))
    lines = curve.to_csv(tmp_path / "bias.csv").read_text().splitlines()
    assert lines[0] == "l,E_train,E_test,R,E,ExAccErr,defined,ExAccErr_std"
    assert len(lines) == 11


def test_markov_validation():
    with pytest.raises(ContractError):
        MarkovChainLM(np.array([[0.5, 0.6], [0.5, 0.5]]))
