import contextlib
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from pad_lreid.config import ExperimentConfig
from pad_lreid.encoders import VisualTriple
from pad_lreid.losses import (LossBreakdown, TextBank, featkd_loss, id_loss, kl_teacher_student,
                              logitkd_loss, supcon_loss, texkd_loss, total_loss, triplet_loss,
                              vt_distribution)


@contextlib.contextmanager
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


@pytest.fixture(autouse=True)
def _float64():
    with double_precision():
        yield


def unit(x):
    return F.normalize(x, dim=-1)


# --- brute-force oracles (plain Python loops, no vectorized torch) ---------------------

def supcon_oracle(v, t, labels, temp):
    v, t, labels = v.tolist(), t.tolist(), list(labels.tolist())

    def direction(a, b):
        terms = []
        for i in range(len(a)):
            logits = [sum(x * y for x, y in zip(a[i], b[j])) / temp for j in range(len(b))]
            log_den = math.log(sum(math.exp(z) for z in logits))
            pos = [j for j in range(len(b)) if labels[j] == labels[i]]
            if not pos:
                continue
            terms.append(-sum(logits[j] - log_den for j in pos) / len(pos))
        return sum(terms) / len(terms)

    return direction(v, t) + direction(t, v)


def triplet_oracle(x, labels, margin):
    x, labels = x.tolist(), labels.tolist()
    dist = lambda a, b: math.sqrt(sum((p - q) ** 2 for p, q in zip(a, b)))  # noqa: E731
    hinges = []
    for i in range(len(x)):
        pos = [dist(x[i], x[j]) for j in range(len(x)) if j != i and labels[j] == labels[i]]
        neg = [dist(x[i], x[j]) for j in range(len(x)) if labels[j] != labels[i]]
        if pos and neg:
            hinges.append(max(0.0, max(pos) - min(neg) + margin))
    return sum(hinges) / len(hinges)


def softmax_list(z):
    m = max(z)
    e = [math.exp(a - m) for a in z]
    s = sum(e)
    return [a / s for a in e]


def kl_oracle(v_tea, v_stu, bank_tea, bank_stu, tau, gamma):
    total = 0.0
    for a, b in zip(v_tea.tolist(), v_stu.tolist()):
        p = softmax_list([gamma * sum(x * y for x, y in zip(a, t)) / tau for t in bank_tea.tolist()])
        q = softmax_list([gamma * sum(x * y for x, y in zip(b, t)) / tau for t in bank_stu.tolist()])
        total += sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q))
    return total / len(v_tea)


# --- finite differences -------------------------------------------------------------------

def fd_check(fn, *inputs, eps=1e-5, tol=1e-4):
    """Central differences against autograd for every input; returns the worst relative error."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = torch.zeros_like(x) if grads[k] is None else grads[k]
        numeric = torch.zeros_like(x)
        flat = x.detach().view(-1)
        for i in range(flat.numel()):
            args_p = [y.detach().clone() for y in inputs]
            args_m = [y.detach().clone() for y in inputs]
            args_p[k].view(-1)[i] += eps
            args_m[k].view(-1)[i] -= eps
            numeric.view(-1)[i] = (fn(*args_p) - fn(*args_m)) / (2 * eps)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (analytic - numeric).norm().item() / denom)
    assert worst < tol, worst
    return worst


# --- supcon -------------------------------------------------------------------------------

def test_supcon_two_orthogonal_pairs():
    e = torch.eye(2)
    got = supcon_loss(e, e, torch.tensor([0, 1]), temperature=1.0).item()
    per_anchor = -math.log(math.e / (math.e + 1))
    assert per_anchor == pytest.approx(0.3132617, abs=1e-7)
    # each direction averages two identical anchors, then the directions add
    assert got == pytest.approx(2 * per_anchor, abs=1e-12)
    assert got == pytest.approx(0.6265234, abs=1e-7)


def test_supcon_identical_embeddings_matches_oracle():
    x = unit(torch.ones(4, 3))
    labels = torch.zeros(4, dtype=torch.long)
    got = supcon_loss(x, x, labels, 1.0).item()
    assert got == pytest.approx(supcon_oracle(x, x, labels, 1.0), abs=1e-10)
    # every anchor spreads its mass over four equal candidates, all of them positives
    assert got == pytest.approx(2 * math.log(4), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_supcon_matches_oracle(n, seed, temp):
    g = torch.Generator().manual_seed(seed)
    v, t = unit(torch.randn(n, 5, generator=g)), unit(torch.randn(n, 5, generator=g))
    labels = torch.randint(0, 2, (n,), generator=g)
    assert supcon_loss(v, t, labels, temp).item() == pytest.approx(supcon_oracle(v, t, labels, temp),
                                                                   abs=1e-10)


def test_supcon_symmetric_in_roles():
    g = torch.Generator().manual_seed(3)
    v, t = unit(torch.randn(6, 4, generator=g)), unit(torch.randn(6, 4, generator=g))
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    assert supcon_loss(v, t, labels, 0.1).item() == pytest.approx(supcon_loss(t, v, labels, 0.1).item(),
                                                                  abs=1e-12)


def test_supcon_length_mismatch():
    with pytest.raises(ValueError):
        supcon_loss(torch.zeros(2, 3), torch.zeros(3, 3), torch.zeros(2, dtype=torch.long))


# --- id -------------------------------------------------------------------------------------

def test_id_uniform_logits():
    assert id_loss(torch.zeros(3, 4), torch.tensor([0, 1, 3])).item() == pytest.approx(math.log(4), abs=1e-12)


def test_id_large_margin_goes_to_zero():
    logits = torch.full((2, 3), -50.0)
    logits[0, 1] = logits[1, 2] = 50.0
    assert id_loss(logits, torch.tensor([1, 2])).item() < 1e-30


def test_id_matches_oracle():
    g = torch.Generator().manual_seed(0)
    logits, labels = torch.randn(4, 5, generator=g), torch.tensor([0, 4, 2, 2])
    ref = 0.0
    for row, y in zip(logits.tolist(), labels.tolist()):
        ref -= math.log(softmax_list(row)[y])
    assert id_loss(logits, labels).item() == pytest.approx(ref / 4, abs=1e-10)


def test_id_label_out_of_range():
    with pytest.raises(ValueError):
        id_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


# --- triplet ----------------------------------------------------------------------------------

def test_triplet_hand_distances():
    # anchors 0 and 1 are positives at distance 1.0; the negative sits 0.5 from each
    x = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    labels = torch.tensor([0, 0, 1])
    # the negative anchor has no positive and is skipped
    assert triplet_loss(x, labels, 0.3).item() == pytest.approx(0.8, abs=1e-12)


def test_triplet_well_separated_is_zero():
    x = torch.tensor([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]])
    assert triplet_loss(x, torch.tensor([0, 0, 1, 1]), 0.3).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_triplet_matches_oracle_and_is_permutation_invariant(seed, margin):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 3, generator=g)
    labels = torch.tensor([0, 0, 1, 1])
    got = triplet_loss(x, labels, margin).item()
    assert got == pytest.approx(triplet_oracle(x, labels, margin), abs=1e-10)
    perm = torch.randperm(4, generator=g)
    assert triplet_loss(x[perm], labels[perm], margin).item() == pytest.approx(got, abs=1e-12)


def test_triplet_no_valid_anchor_is_zero():
    assert triplet_loss(torch.randn(3, 2), torch.tensor([0, 1, 2]), 0.3).item() == 0.0


# --- distributions and KL ----------------------------------------------------------------------

def test_vt_distribution_single_candidate():
    d = vt_distribution(unit(torch.randn(1, 4)), unit(torch.randn(1, 4)), 0.07, 7.0)
    assert d.probs.tolist() == [[1.0]]


def test_vt_distribution_equal_cosines():
    t = torch.eye(3)[1:]
    v = unit(torch.tensor([[1.0, 1.0, 1.0]]))
    assert torch.allclose(vt_distribution(v, t, 0.5).probs, torch.tensor([[0.5, 0.5]]), atol=1e-15)


def test_vt_distribution_extreme_logits():
    # cosines 0.9 and 0.1 at tau 0.07, gamma 7 give logits 90 and 10
    t = torch.eye(2)
    v = torch.tensor([[0.9, 0.1]])
    d = vt_distribution(v, t, 0.07, 7.0)
    tail = math.exp(-80.0) / (1 + math.exp(-80.0))
    assert d.probs[0, 1].item() == pytest.approx(tail, rel=1e-9)
    assert tail == pytest.approx(1.8048513878454153e-35, rel=1e-12)
    assert d.probs[0, 0].item() == 1.0
    assert torch.isfinite(d.log_probs).all()


def test_vt_distribution_rejects_bad_tau():
    with pytest.raises(ValueError):
        vt_distribution(torch.ones(1, 2), torch.ones(1, 2), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, shift):
    g = torch.Generator().manual_seed(seed)
    v, t = unit(torch.randn(3, 4, generator=g)), unit(torch.randn(5, 4, generator=g))
    base = vt_distribution(v, t, 0.1, 2.0)
    # adding c to every bank row's score equals a constant logit shift
    z = (2.0 * v @ t.T / 0.1) + shift
    shifted = torch.softmax(z, dim=-1)
    assert torch.allclose(base.probs, shifted, atol=1e-9)
    assert torch.allclose(base.probs.sum(-1), torch.ones(3), atol=1e-12)


def test_kl_hand_case():
    tea = vt_distribution(torch.tensor([[1.0]]), torch.tensor([[math.log(0.8)], [math.log(0.2)]]), 1.0)
    stu = vt_distribution(torch.tensor([[1.0]]), torch.tensor([[math.log(0.6)], [math.log(0.4)]]), 1.0)
    assert tea.probs[0].tolist() == pytest.approx([0.8, 0.2], abs=1e-12)
    expected = 0.8 * math.log(0.8 / 0.6) + 0.2 * math.log(0.2 / 0.4)
    assert expected == pytest.approx(0.09151, abs=1e-5)
    assert kl_teacher_student(tea, stu).item() == pytest.approx(expected, abs=1e-12)


def _banks(seed, n_ids=4, dim=3):
    g = torch.Generator().manual_seed(seed)
    ids = list(range(10, 10 + n_ids))
    tea = TextBank(ids, unit(torch.randn(n_ids, dim, generator=g)))
    stu = TextBank(ids, unit(torch.randn(n_ids, dim, generator=g)))
    v = unit(torch.randn(3, dim, generator=g))
    return v, tea, stu, ids


def test_texkd_identical_banks_is_zero():
    v, tea, _, ids = _banks(0)
    assert abs(texkd_loss(v, tea, tea, ids, 0.07, 7.0).item()) < 1e-10


def test_texkd_scaling_by_tau_squared():
    v, tea, stu, ids = _banks(1)
    kl = kl_oracle(v, v, tea.features, stu.features, 0.07, 7.0)
    assert texkd_loss(v, tea, stu, ids, 0.07, 7.0).item() == pytest.approx(0.0049 * kl, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0), st.floats(0.5, 10.0))
def test_texkd_matches_oracle(seed, tau, gamma):
    v, tea, stu, ids = _banks(seed)
    sub = ids[:3]
    ref = tau ** 2 * kl_oracle(v, v, tea.rows(sub), stu.rows(sub), tau, gamma)
    assert texkd_loss(v, tea, stu, sub, tau, gamma).item() == pytest.approx(ref, abs=1e-10)
    assert texkd_loss(v, tea, stu, sub, tau, gamma).item() >= -1e-12


def test_texkd_missing_identity():
    v, tea, stu, ids = _banks(2)
    with pytest.raises(KeyError):
        texkd_loss(v, tea, stu, ids + [999], 0.07, 7.0)


def test_logitkd_identical_is_zero_and_tau_squared():
    v, tea, stu, _ = _banks(3)
    assert abs(logitkd_loss(v, v, tea.features, 4.0).item()) < 1e-12
    v2 = unit(v + 0.3)
    ref = kl_oracle(v2, v, tea.features, tea.features, 4.0, 1.0)
    assert logitkd_loss(v, v2, tea.features, 4.0).item() == pytest.approx(16 * ref, abs=1e-10)


def _triple(seed, n=3):
    g = torch.Generator().manual_seed(seed)
    return VisualTriple(torch.randn(n, 4, generator=g), torch.randn(n, 4, generator=g),
                        torch.randn(n, 2, generator=g))


def test_featkd_cases():
    a = _triple(0)
    assert featkd_loss(a, a).item() == 0.0
    plus_one = VisualTriple(*(x + 1 for x in a))
    assert featkd_loss(plus_one, a).item() == pytest.approx(1.0, abs=1e-12)
    b = _triple(1)
    ref = sum(sum((p - q) ** 2 for p, q in zip(x.view(-1).tolist(), y.view(-1).tolist())) / x.numel()
              for x, y in zip(a, b)) / 3
    assert featkd_loss(a, b).item() == pytest.approx(ref, abs=1e-10)


def test_featkd_shape_mismatch():
    a = _triple(0)
    with pytest.raises(ValueError):
        featkd_loss(a, VisualTriple(a.v11, a.v12, torch.zeros(3, 5)))


# --- total --------------------------------------------------------------------------------------

def test_total_loss_arithmetic():
    cfg = ExperimentConfig()
    bd = total_loss({k: 1.0 for k in ("supcon", "id", "triplet", "texkd", "featkd", "logitkd")}, cfg)
    assert bd.kd_total == 1.5 and bd.overall == 4.5


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=6, max_size=6),
       st.lists(st.floats(0, 2), min_size=3, max_size=3))
def test_total_loss_identities_exact(values, lambdas):
    cfg = ExperimentConfig().replace(lambda_text=lambdas[0], lambda_feat=lambdas[1],
                                     lambda_logit=lambdas[2])
    parts = dict(zip(("supcon", "id", "triplet", "texkd", "featkd", "logitkd"), values))
    bd = total_loss(parts, cfg)
    assert bd.kd_total == lambdas[0] * parts["texkd"] + lambdas[1] * parts["featkd"] + lambdas[2] * parts["logitkd"]
    assert bd.overall == parts["supcon"] + parts["id"] + parts["triplet"] + bd.kd_total


def test_total_loss_missing_terms_and_unknown():
    bd = total_loss({"supcon": 2.0}, ExperimentConfig())
    assert isinstance(bd, LossBreakdown) and bd.overall == 2.0 and bd.kd_total == 0.0
    with pytest.raises(KeyError):
        total_loss({"center": 1.0}, ExperimentConfig())


# --- gradient suite -----------------------------------------------------------------------------

GRAD_CASES = {}


def grad_case(fn):
    GRAD_CASES[fn.__name__] = fn
    return fn


@grad_case
def grad_supcon():
    g = torch.Generator().manual_seed(11)
    v, t = unit(torch.randn(4, 3, generator=g)), unit(torch.randn(4, 3, generator=g))
    labels = torch.tensor([0, 0, 1, 1])
    return fd_check(lambda a, b: supcon_loss(unit(a), unit(b), labels, 0.5), v, t)


@grad_case
def grad_id():
    g = torch.Generator().manual_seed(12)
    return fd_check(lambda z: id_loss(z, torch.tensor([0, 2, 1])), torch.randn(3, 4, generator=g))


@grad_case
def grad_triplet():
    g = torch.Generator().manual_seed(13)
    x = torch.randn(4, 3, generator=g)
    # a large margin keeps every hinge active, away from the kink
    return fd_check(lambda a: triplet_loss(a, torch.tensor([0, 0, 1, 1]), 5.0), x)


@grad_case
def grad_texkd():
    v, tea, stu, ids = _banks(14)

    def fn(vv, s, gamma):
        return texkd_loss(unit(vv), tea, TextBank(ids, unit(s)), ids, 0.5, gamma)

    return fd_check(fn, v, stu.features, torch.tensor(2.0))


@grad_case
def grad_featkd():
    a, b = _triple(15), _triple(16)
    return fd_check(lambda x, y, z: featkd_loss(VisualTriple(x, y, z), b), *a)


@grad_case
def grad_logitkd():
    v, tea, _, _ = _banks(17)
    g = torch.Generator().manual_seed(18)
    v_t = unit(torch.randn(3, 3, generator=g))
    return fd_check(lambda x: logitkd_loss(unit(x), v_t, tea.features, 4.0), v)


@grad_case
def grad_total():
    cfg = ExperimentConfig()
    g = torch.Generator().manual_seed(19)
    x = torch.randn(4, 3, generator=g)
    labels = torch.tensor([0, 0, 1, 1])
    _, tea, _, _ = _banks(20)
    v_tea = unit(torch.randn(4, 3, generator=g))

    def fn(a):
        v = unit(a)
        parts = {"supcon": supcon_loss(v, v.flip(0), labels, 0.5), "triplet": triplet_loss(a, labels, 5.0),
                 "logitkd": logitkd_loss(v, v_tea, tea.features, 4.0)}
        return total_loss(parts, cfg).overall

    return fd_check(fn, x)


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    assert GRAD_CASES[name]() < 1e-4


def test_total_gradient_is_sum_of_component_gradients():
    cfg = ExperimentConfig()
    g = torch.Generator().manual_seed(21)
    x = torch.randn(4, 3, generator=g, requires_grad=True)
    labels = torch.tensor([0, 0, 1, 1])
    sup = supcon_loss(unit(x), unit(x).flip(0), labels, 0.5)
    tri = triplet_loss(x, labels, 5.0)
    g_total, = torch.autograd.grad(total_loss({"supcon": sup, "triplet": tri}, cfg).overall, x,
                                   retain_graph=True)
    g_sup, = torch.autograd.grad(sup, x, retain_graph=True)
    g_tri, = torch.autograd.grad(tri, x)
    assert torch.allclose(g_total, g_sup + g_tri, atol=1e-12)


def test_teacher_side_receives_no_gradient():
    v, tea, _, _ = _banks(22)
    v_t = v.clone().requires_grad_(True)
    b = _triple(23)
    b = VisualTriple(*(x.clone().requires_grad_(True) for x in b))
    v_s = (v + 0.1).requires_grad_(True)
    a = VisualTriple(*(x.clone().requires_grad_(True) for x in _triple(24)))
    loss = logitkd_loss(unit(v_s), v_t, tea.features, 4.0) + featkd_loss(a, b)
    loss.backward()
    assert v_t.grad is None and all(x.grad is None for x in b)
    assert v_s.grad is not None and all(x.grad is not None for x in a)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 3, generator=g)
    labels = torch.tensor([0, 0, 1, 1])
    v, tea, stu, ids = _banks(seed)
    assert supcon_loss(unit(x), unit(x.flip(0)), labels, 0.3).item() >= 0
    assert triplet_loss(x, labels, 0.3).item() >= 0
    assert texkd_loss(v, tea, stu, ids, 0.07, 7.0).item() >= -1e-12
    assert logitkd_loss(v, unit(v.flip(0)), tea.features, 4.0).item() >= -1e-12
    assert np.isfinite(featkd_loss(_triple(seed), _triple(seed + 1)).item())
