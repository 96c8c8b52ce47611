import math

import numpy as np
import pytest
import torch

from alignti.errors import ContractError, DegenerateInputError
from alignti.losses import (
    STRATEGIES,
    LossOptions,
    aligned_nodes_closed_form,
    aligned_nodes_enumerated,
    compute_importance_weights,
    compute_iva_loss,
    compute_kd_loss,
    compute_sft_loss,
    compute_tpa_loss,
    draw_from,
    naive_tpa_loss,
    objective,
    sample_candidates,
    total_loss,
    uniform_weights,
    visual_prediction_positions,
    ImportanceWeights,
)
from alignti.model import SequenceBatch, forward_pass
from alignti.numerics import kl_divergence, make_rng
from alignti.ribbon import BACKBONE, CANDIDATE, assemble_augmented_batch, build_ribbon_layout
from alignti.synthdata import to_batch

from conftest import make_uniform, tiny_model


def random_logits(batch, vocab, seed):
    return torch.from_numpy(make_rng(seed).normal(0, 2, size=(*batch.tokens.shape, vocab)))


# --- SFT / KD -----------------------------------------------------------------

def test_sft_perfect_student_is_zero(batch, spec):
    v = spec.vocab.size
    logits = torch.full((*batch.tokens.shape, v), -1e4)
    rows, cols, targets = batch.supervised()
    logits[rows, cols, targets] = 1e4
    assert float(compute_sft_loss(logits, batch)) == 0.0


def test_sft_uniform_student(batch, spec):
    v = spec.vocab.size
    assert float(compute_sft_loss(torch.zeros(*batch.tokens.shape, v), batch)) == pytest.approx(math.log(v), abs=1e-12)


def test_sft_matches_per_position_oracle(batch, spec):
    logits = random_logits(batch, spec.vocab.size, 1)
    terms = []
    for b in range(len(batch)):
        for t in range(batch.tokens.shape[1] - 1):
            if batch.loss_mask[b, t]:
                row = logits[b, t].numpy()
                m = row.max()
                lse = m + np.log(np.exp(row - m).sum())
                terms.append(lse - row[int(batch.tokens[b, t + 1])])
    assert float(compute_sft_loss(logits, batch)) == pytest.approx(np.mean(terms), abs=1e-10)


def test_sft_empty_mask(batch, spec):
    empty = SequenceBatch(batch.tokens, batch.segment_ids, batch.position_ids, torch.zeros_like(batch.loss_mask))
    with pytest.raises(ContractError):
        compute_sft_loss(torch.zeros(*batch.tokens.shape, spec.vocab.size), empty)


def test_kd_identity_and_single_position(batch, spec, teacher):
    t = forward_pass(teacher, batch)[0].detach()
    assert abs(float(compute_kd_loss(t, t, batch))) <= 1e-10
    s = random_logits(batch, spec.vocab.size, 2)
    one = SequenceBatch(batch.tokens, batch.segment_ids, batch.position_ids, torch.zeros_like(batch.loss_mask))
    rows, cols, _ = batch.supervised()
    one.loss_mask[rows[3], cols[3]] = True
    assert float(compute_kd_loss(t, s, one)) == pytest.approx(float(kl_divergence(t[rows[3], cols[3]], s[rows[3], cols[3]])), abs=1e-12)


def test_kd_matches_position_oracle(batch, spec):
    t = random_logits(batch, spec.vocab.size, 3)
    s = random_logits(batch, spec.vocab.size, 4)
    vals = []
    for b in range(len(batch)):
        for pos in range(batch.tokens.shape[1]):
            if batch.loss_mask[b, pos]:
                p = torch.softmax(t[b, pos], -1).numpy()
                q = torch.softmax(s[b, pos], -1).numpy()
                vals.append(float(np.sum(p * (np.log(p) - np.log(q)))))
    assert float(compute_kd_loss(t, s, batch)) == pytest.approx(np.mean(vals), abs=1e-10)


def test_kd_vocab_mismatch(batch):
    with pytest.raises(ContractError):
        compute_kd_loss(torch.zeros(*batch.tokens.shape, 5), torch.zeros(*batch.tokens.shape, 6), batch)


def test_kd_treats_teacher_as_constant(batch, spec):
    t = random_logits(batch, spec.vocab.size, 5).requires_grad_(True)
    s = random_logits(batch, spec.vocab.size, 6).requires_grad_(True)
    compute_kd_loss(t, s, batch).backward()
    assert t.grad is None and s.grad is not None


# --- importance weights / IVA ----------------------------------------------------

def with_instruction(record, instr):
    return type(record)(record.record_id, record.visual_tokens, list(instr), record.response_tokens, None)


def same_shape_records(records, n, n_instr=2):
    return [r for r in records if len(r.instruction_tokens) == n_instr][:n]


def test_importance_weights_uniform_attention(spec, records):
    model = make_uniform(tiny_model(spec.vocab.size, seed=1))
    r = records[0]
    batch = SequenceBatch.from_segments([(r.visual_tokens, r.instruction_tokens[:1], ())])
    _, trace = forward_pass(model, batch, capture={1})
    w = compute_importance_weights(trace, batch, 1)
    s = batch.tokens.shape[1]
    assert torch.allclose(w.weights, torch.full_like(w.weights, 1 / s), atol=1e-15)


def test_importance_weights_single_instruction_row(teacher, records):
    r = records[1]
    batch = SequenceBatch.from_segments([(r.visual_tokens, r.instruction_tokens[:1], r.response_tokens)])
    _, trace = forward_pass(teacher, batch, capture={0})
    w = compute_importance_weights(trace, batch, 0)
    n_v = len(r.visual_tokens)
    row = trace.weights[0].mean(dim=1)[0, 1 + n_v, 1 : 1 + n_v]
    assert torch.equal(w.weights[0], row)


def test_importance_weights_slice_then_average_oracle(teacher, records):
    recs = same_shape_records(records, 4)
    batch = to_batch(recs)
    _, trace = forward_pass(teacher, batch, capture={1})
    w = compute_importance_weights(trace, batch, 1)
    att = trace.weights[1].numpy()
    n_v = len(recs[0].visual_tokens)
    for b in range(4):
        ins = [1 + n_v + u for u in range(2)]
        expect = [np.mean([np.mean(att[b, :, q, 1 + k]) for q in ins]) for k in range(n_v)]
        assert np.allclose(w.weights[b].numpy(), expect, atol=1e-15)
    assert (w.weights >= 0).all() and (w.weights.sum(-1) <= 1 + 1e-9).all()


def test_iva_zero_weights_and_identity(teacher, student, records):
    batch = to_batch(same_shape_records(records, 3))
    t, _ = forward_pass(teacher, batch)
    s, _ = forward_pass(student, batch)
    n_v = len(records[0].visual_tokens)
    zero = ImportanceWeights(torch.zeros(3, n_v), "teacher", 0)
    assert float(compute_iva_loss(t, s, zero, batch)) == 0.0
    w = uniform_weights(batch)
    assert abs(float(compute_iva_loss(t, t, w, batch))) <= 1e-10


def test_iva_three_visual_tokens_hand_expanded(spec):
    v = spec.vocab
    visual = [v.visual[0], v.visual[5], v.visual[2]]
    instr = [v.instr_family["color-at-cell"], v.instr_cell[1]]
    batch = SequenceBatch.from_segments([(visual, instr, [v.word["the"], 2])])
    t = random_logits(batch, v.size, 7)
    s = random_logits(batch, v.size, 8)
    w = torch.tensor([[0.2, 0.5, 0.1]])

    def kl(pos):
        p = torch.softmax(t[0, pos], -1).numpy()
        q = torch.softmax(s[0, pos], -1).numpy()
        return float(np.sum(p * np.log(p / q)))

    # v_1 is predicted at BOS (0), v_2 at v_1 (1), v_3 at v_2 (2)
    expected = 0.2 * kl(0) + 0.5 * kl(1) + 0.1 * kl(2)
    got = compute_iva_loss(t, s, ImportanceWeights(w, "teacher", 0), batch)
    assert float(got) == pytest.approx(expected, abs=1e-10)
    assert visual_prediction_positions(batch).tolist() == [[0, 1, 2]]


def test_iva_weight_length_mismatch(batch, spec):
    t = random_logits(batch, spec.vocab.size, 1)
    with pytest.raises(ContractError):
        compute_iva_loss(t, t, ImportanceWeights(torch.zeros(len(batch), 3), "teacher", 0), batch)


def test_uniform_override_is_plain_mean(teacher, student, records):
    batch = to_batch(same_shape_records(records, 2))
    t, _ = forward_pass(teacher, batch)
    s, _ = forward_pass(student, batch)
    pos = visual_prediction_positions(batch)
    rows = torch.arange(2)[:, None].expand_as(pos)
    plain = kl_divergence(t[rows, pos], s[rows, pos]).mean(dim=1).mean()
    assert float(compute_iva_loss(t, s, uniform_weights(batch), batch)) == pytest.approx(float(plain), abs=1e-14)


# --- candidate sampling ------------------------------------------------------------

def test_greedy_d1_is_argmax(batch, spec):
    logits = random_logits(batch, spec.vocab.size, 9)
    c = sample_candidates(logits, batch, "greedy", 1)
    rows, cols, _ = batch.supervised()
    steps = c.tokens[c.valid]
    assert torch.equal(steps[:, 0], logits[rows, cols].argmax(-1))


def test_greedy_top_d_matches_full_sort(batch, spec):
    logits = random_logits(batch, spec.vocab.size, 10)
    c = sample_candidates(logits, batch, "greedy", 5)
    rows, cols, _ = batch.supervised()
    for i, (r, col) in enumerate(zip(rows.tolist(), cols.tolist())):
        p = torch.softmax(logits[r, col], -1).tolist()
        brute = sorted(range(len(p)), key=lambda j: (-p[j], j))[:5]
        assert c.tokens[c.valid][i].tolist() == brute
    assert all(len(set(row.tolist())) == 5 for row in c.tokens[c.valid])


def test_greedy_ties_go_to_lower_id(batch, spec):
    logits = torch.zeros(*batch.tokens.shape, spec.vocab.size)
    c = sample_candidates(logits, batch, "greedy", 3)
    assert all(row.tolist() == [0, 1, 2] for row in c.tokens[c.valid])


def test_nucleus_degenerate_support(batch, spec):
    logits = torch.full((*batch.tokens.shape, spec.vocab.size), -50.0)
    logits[..., 7] = 50.0
    c = sample_candidates(logits, batch, "nucleus", 4, seed=3, nucleus_p=1.0)
    assert torch.all(c.tokens[c.valid] == 7)


def test_nucleus_seeded_and_positive(batch, spec):
    logits = random_logits(batch, spec.vocab.size, 11)
    a = sample_candidates(logits, batch, "nucleus", 4, seed=5)
    b = sample_candidates(logits, batch, "nucleus", 4, seed=5)
    c = sample_candidates(logits, batch, "nucleus", 4, seed=6)
    assert torch.equal(a.tokens, b.tokens) and not torch.equal(a.tokens, c.tokens)
    assert (a.probs[a.valid] > 0).all()


def test_draw_from_matches_distribution():
    probs = torch.tensor([[0.1, 0.0, 0.6, 0.3]])
    draws = draw_from(probs.expand(20000, 4), make_rng(0), 1).flatten().numpy()
    freq = np.bincount(draws, minlength=4) / len(draws)
    assert freq[1] == 0
    assert np.allclose(freq, [0.1, 0.0, 0.6, 0.3], atol=0.015)


def test_d_larger_than_vocab(batch, spec):
    with pytest.raises(ContractError):
        sample_candidates(random_logits(batch, spec.vocab.size, 1), batch, "greedy", spec.vocab.size + 1)


# --- ribbon layout -----------------------------------------------------------------

def allowed_sets(layout):
    names = []
    for o in layout.origin:
        names.append(f"y{o[1] - 1}" if o[0] == BACKBONE else f"c{o[1]}.{o[2]}")
    return {names[i]: {names[j] for j in range(layout.length) if layout.mask[i, j]} for i in range(layout.length)}


def test_ribbon_l2_d2_enumeration():
    lay = build_ribbon_layout(2, torch.tensor([[10, 11], [12, 13]]), torch.tensor([5, 6]), base_position=20)
    assert lay.augmented_tokens.tolist() == [5, 10, 11, 6, 12, 13]
    assert allowed_sets(lay) == {
        "y0": {"y0"},
        "c1.1": {"y0", "c1.1"},
        "c1.2": {"y0", "c1.2"},
        "y1": {"y0", "y1"},
        "c2.1": {"y0", "y1", "c2.1"},
        "c2.2": {"y0", "y1", "c2.2"},
    }
    assert lay.position_ids.tolist() == [20, 21, 21, 21, 22, 22]
    assert lay.kd_eval_positions == [0, 3]
    assert lay.tpa_eval_positions == [[1, 2], [4, 5]]


def test_ribbon_d0_is_causal():
    lay = build_ribbon_layout(4, torch.zeros(4, 0, dtype=torch.long), torch.arange(4))
    assert torch.equal(lay.mask, torch.ones(4, 4, dtype=torch.bool).tril())


@pytest.mark.parametrize("L,d", [(1, 1), (3, 2), (5, 4), (8, 3)])
def test_ribbon_invariants(L, d):
    lay = build_ribbon_layout(L, torch.arange(L * d).reshape(L, d), torch.arange(L), base_position=7)
    bb = lay.kd_eval_positions
    assert torch.equal(lay.mask[bb][:, bb], torch.ones(L, L, dtype=torch.bool).tril())
    assert not lay.mask.triu(1).any()
    for i, o in enumerate(lay.origin):
        k = o[1]
        assert i // (1 + d) == k - 1
        if o[0] == CANDIDATE:
            attends = set(torch.nonzero(lay.mask[i]).flatten().tolist())
            assert attends == set(bb[:k]) | {i}
            assert int(lay.position_ids[i]) == 7 + k
        else:
            assert int(lay.position_ids[i]) == 7 + k - 1


def test_ribbon_rejects_empty():
    with pytest.raises(ContractError):
        build_ribbon_layout(0, torch.zeros(0, 2, dtype=torch.long), torch.zeros(0, dtype=torch.long))


# --- TPA ---------------------------------------------------------------------------

def test_tpa_identity_is_zero(teacher, batch):
    logits, _ = forward_pass(teacher, batch)
    c = sample_candidates(logits, batch, "nucleus", 3, seed=1)
    aug = assemble_augmented_batch(batch, c.tokens)
    assert abs(float(compute_tpa_loss(teacher, teacher, batch, aug, c))) <= 1e-9


@pytest.mark.parametrize("strategy,d", [("greedy", 1), ("greedy", 3), ("nucleus", 2), ("nucleus", 4)])
def test_tpa_matches_naive_oracle(teacher, student, records, strategy, d):
    batch = to_batch(records[:3])
    logits, _ = forward_pass(student, batch)
    c = sample_candidates(logits, batch, strategy, d, seed=d)
    aug = assemble_augmented_batch(batch, c.tokens)
    fast = float(compute_tpa_loss(teacher, student, batch, aug, c))
    slow = float(naive_tpa_loss(teacher, student, batch, c))
    assert abs(fast - slow) <= 1e-6 * abs(slow)


def test_tpa_layout_mismatch(teacher, student, records):
    batch = to_batch(records[:2])
    logits, _ = forward_pass(student, batch)
    c = sample_candidates(logits, batch, "greedy", 2)
    other = sample_candidates(logits, batch, "greedy", 3)
    aug = assemble_augmented_batch(batch, c.tokens)
    with pytest.raises(ContractError):
        compute_tpa_loss(teacher, student, batch, aug, other)


def test_augmented_backbone_reproduces_plain_pass(teacher, records):
    batch = to_batch(records[:4])
    plain, _ = forward_pass(teacher, batch)
    c = sample_candidates(plain, batch, "nucleus", 3, seed=2)
    aug = assemble_augmented_batch(batch, c.tokens)
    out, _ = forward_pass(teacher, aug.seq, aug.mask)
    rows, cols, targets = batch.supervised()
    ar, ac, at = aug.supervised()
    assert torch.equal(targets, at)
    assert torch.allclose(plain[rows, cols], out[ar, ac], atol=1e-12)


def test_ribbon_isolation(teacher, records):
    batch = to_batch(records[4:6])
    logits, _ = forward_pass(teacher, batch)
    c = sample_candidates(logits, batch, "nucleus", 3, seed=8)
    aug = assemble_augmented_batch(batch, c.tokens)
    base, _ = forward_pass(teacher, aug.seq, aug.mask)
    b, step, u = 1, 2, 1
    col = int(aug.tpa_cols[[i for i, r in enumerate(aug.tpa_rows.tolist()) if r == b][step], u])
    tokens = aug.seq.tokens.clone()
    tokens[b, col] = (tokens[b, col] + 5) % teacher.cfg.vocab_size
    pert, _ = forward_pass(teacher, SequenceBatch(tokens, aug.seq.segment_ids, aug.seq.position_ids, aug.seq.loss_mask), aug.mask)
    diff = (pert - base).abs().amax(-1)
    changed = set(torch.nonzero(diff[b] > 0).flatten().tolist())
    assert changed == {col}
    assert float(diff[0].max()) == 0.0


# --- total / objective ------------------------------------------------------------

def test_total_loss_examples():
    assert float(total_loss({"sft": 0.0, "kd": 0.0, "iva": 0.0, "tpa": 0.0}).total) == 0.0
    assert float(total_loss({"sft": 1.0, "kd": 2.0, "iva": 3.0, "tpa": 4.0}).total) == 10.0
    lb = total_loss({"sft": 1.0, "kd": 2.0, "iva": 3.0, "tpa": 4.0}, "vanilla-kd")
    assert (float(lb.iva), float(lb.tpa), float(lb.total)) == (0.0, 0.0, 3.0)


@pytest.mark.parametrize("strategy", sorted(STRATEGIES))
def test_objective_components_by_strategy(teacher, student, records, strategy):
    batch = to_batch(same_shape_records(records, 3))
    lb = objective(student, teacher, batch, LossOptions(strategy=strategy, d=2, iva_layer=1), seed=3)
    vals = lb.as_floats()
    for name in ("sft", "kd", "iva", "tpa"):
        if name in STRATEGIES[strategy]:
            assert vals[name] > 0
        else:
            assert vals[name] == 0.0
    assert vals["total"] == pytest.approx(sum(vals[k] for k in ("sft", "kd", "iva", "tpa")), abs=1e-9)


@pytest.mark.parametrize("strategy,expected", [("sft", (1, 0)), ("vanilla-kd", (1, 1)), ("iva-only", (1, 1)),
                                               ("tpa-only", (2, 1)), ("align-ti", (2, 1))])
def test_forward_pass_accounting_per_step(teacher, student, records, strategy, expected):
    batch = to_batch(same_shape_records(records, 3))
    teacher.n_forward = student.n_forward = 0
    objective(student, teacher if strategy != "sft" else None, batch,
              LossOptions(strategy=strategy, d=2, iva_layer=0), seed=1)
    assert (student.n_forward, teacher.n_forward) == expected


def test_objective_needs_iva_layer(teacher, student, batch):
    with pytest.raises(ContractError):
        objective(student, teacher, batch, LossOptions(strategy="iva-only"))


def test_kd_from_augmented_pass_equals_plain_kd(teacher, student, records):
    batch = to_batch(records[:4])
    t, _ = forward_pass(teacher, batch)
    s, _ = forward_pass(student, batch)
    plain = compute_kd_loss(t, s, batch)
    c = sample_candidates(s, batch, "greedy", 2)
    aug = assemble_augmented_batch(batch, c.tokens)
    ta, _ = forward_pass(teacher, aug.seq, aug.mask)
    sa, _ = forward_pass(student, aug.seq, aug.mask)
    assert float(compute_kd_loss(ta, sa, aug)) == pytest.approx(float(plain), rel=1e-12)
    assert float(compute_sft_loss(sa, aug)) == pytest.approx(float(compute_sft_loss(s, batch)), rel=1e-12)


# --- alignment scope --------------------------------------------------------------

@pytest.mark.parametrize("v", [1, 2, 3, 4])
@pytest.mark.parametrize("L", [1, 2, 3])
def test_alignment_scope_enumeration(v, L):
    for method, expect in (("vanilla-kd", L * v), ("tpa-full", v + (L - 1) * v * v)):
        assert aligned_nodes_closed_form(v, L, method) == expect
        assert aligned_nodes_enumerated(v, L, method) == expect
        gt = [(i * 7 + 1) % v for i in range(L)]
        assert aligned_nodes_enumerated(v, L, method, ground_truth=gt) == expect


def test_importance_weights_mixed_instruction_lengths(teacher, records):
    recs = [with_instruction(records[0], records[0].instruction_tokens[:1]), records[1]]
    batch = to_batch(recs)
    _, trace = forward_pass(teacher, batch, capture={1})
    w = compute_importance_weights(trace, batch, 1)
    for b, r in enumerate(recs):
        _, one = forward_pass(teacher, to_batch([r]), capture={1})
        alone = compute_importance_weights(one, to_batch([r]), 1).weights[0]
        assert torch.allclose(w.weights[b], alone, atol=1e-12)
