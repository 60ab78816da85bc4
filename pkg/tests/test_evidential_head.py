import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import numeric_grad, rel_err
from errors import ContractError
from schemas import SelectionConfig
from services.evidential_head import (
    ANOMALY,
    NORMAL,
    EvidenceOutput,
    SelectionThresholds,
    anomaly_score,
    default_ranks,
    evidence_alpha,
    evidence_forward,
    init_head,
    mil_loss,
    mil_loss_value,
    ramped_rank,
    select_clean,
    targets,
    thresholds_for_bag,
)
from utils.autodiff import Tensor, backward
from utils.optim import Adam


def _bag(p_pos, alpha_pos):
    """EvidenceOutputs with the given confidence and positive evidence."""
    return [EvidenceOutput(a, a * (1.0 - p) / p) for p, a in zip(p_pos, alpha_pos)]


# -----------------------------------
# Evidence
# -----------------------------------
def test_zero_logits_give_uniform_evidence(rng):
    head = init_head(3, 5, rng, evidence_bias=0.0)
    (ev,) = evidence_forward(rng.normal(size=(1, 3)), head)
    assert (ev.alpha_pos, ev.alpha_neg) == (1.0, 1.0)
    assert ev.p_pos == 0.5 and ev.u == 1.0


def test_logits_three_and_one(rng):
    head = init_head(3, 5, rng, evidence_bias=0.0)
    head.b2.values[:] = [[3.0, 1.0]]
    (ev,) = evidence_forward(np.zeros((1, 3)), head)
    assert (ev.alpha_pos, ev.alpha_neg) == (4.0, 2.0)
    assert ev.p_pos == pytest.approx(2 / 3)
    assert ev.u == pytest.approx(1 / 3)


@pytest.mark.parametrize("nonneg", ["relu", "softplus"])
def test_evidence_identities_on_random_params(rng, nonneg):
    head = init_head(4, 6, rng, nonneg=nonneg)
    head.w2.values[:] = rng.normal(scale=2.0, size=head.w2.shape)
    for ev in evidence_forward(rng.normal(size=(20, 4)), head):
        assert ev.alpha_pos >= 1.0 and ev.alpha_neg >= 1.0
        assert ev.p_pos + ev.p_neg == pytest.approx(1.0, abs=1e-15)
        assert ev.u == pytest.approx(2.0 / ev.alpha0, abs=1e-15)
        assert ev.u <= 1.0


@pytest.mark.parametrize("alpha, expected", [((1, 1), 0.5), ((4, 2), 2 / 3), ((1, 99), 0.01)])
def test_anomaly_score(alpha, expected):
    assert anomaly_score(EvidenceOutput(*alpha)) == pytest.approx(expected)


# -----------------------------------
# MIL loss
# -----------------------------------
@pytest.mark.parametrize(
    "alpha, label, expected",
    [((1, 1), ANOMALY, 0.6931), ((9, 1), ANOMALY, 0.1054), ((9, 1), NORMAL, 2.3026)],
)
def test_mil_loss_examples(alpha, label, expected):
    assert mil_loss_value(EvidenceOutput(*alpha), label) == pytest.approx(expected, abs=1e-4)


@given(st.floats(1.0, 50.0), st.floats(1.0, 50.0), st.floats(0.01, 10.0))
def test_mil_loss_monotone_in_each_alpha(a, b, delta):
    base = mil_loss_value(EvidenceOutput(a, b), ANOMALY)
    assert mil_loss_value(EvidenceOutput(a + delta, b), ANOMALY) < base
    assert mil_loss_value(EvidenceOutput(a, b + delta), ANOMALY) > base


def test_mil_loss_rows_and_targets():
    alpha = Tensor([[1.0, 1.0], [9.0, 1.0]])
    rows = mil_loss(alpha, targets(2, ANOMALY)).values[:, 0]
    assert rows == pytest.approx([math.log(2.0), math.log(10.0 / 9.0)])


def test_head_gradient_with_softplus(rng):
    head = init_head(3, 4, rng, nonneg="softplus")
    head.w2.values[:] = rng.normal(size=head.w2.shape)
    x = Tensor(rng.normal(size=(5, 3)))
    y = np.vstack([targets(3, ANOMALY), targets(2, NORMAL)])

    def loss():
        return mil_loss(evidence_alpha(x, head), y).mean()

    backward(loss())
    for param in head.named().values():
        assert rel_err(param.grad, numeric_grad(lambda: loss().item(), param.values)) < 1e-4


def test_fitting_one_anomaly_drives_confidence_up(rng):
    head = init_head(3, 8, rng)
    x = Tensor(rng.normal(size=(1, 3)))
    opt = Adam(head.named(), lr=0.05)
    history = []
    for _ in range(200):
        opt.zero_grad()
        backward(mil_loss(evidence_alpha(x, head), targets(1, ANOMALY)).mean())
        opt.step()
        history.append(evidence_forward(x, head)[0].p_pos)
    assert history[-1] > history[0]
    assert history[-1] > 0.8


# -----------------------------------
# Selection
# -----------------------------------
def test_six_instance_example():
    bag = _bag((0.9, 0.8, 0.7, 0.6, 0.5, 0.4), (10, 2, 9, 8, 1, 7))
    selected = select_clean(bag, SelectionThresholds(p_rank=4, u_rank=4))
    assert selected.omega == (0, 2, 3)


def test_identical_instances_break_ties_by_index():
    bag = [EvidenceOutput(3.0, 1.0)] * 5
    assert select_clean(bag, SelectionThresholds(p_rank=2, u_rank=3)).omega == (0, 1)


def test_full_ranks_select_whole_bag():
    bag = _bag((0.2, 0.9, 0.5), (4, 1, 2))
    assert select_clean(bag, SelectionThresholds(p_rank=3, u_rank=3)).omega == (0, 1, 2)


def test_selection_edge_cases():
    assert select_clean([], SelectionThresholds()).omega == ()
    bag = _bag((0.9, 0.3), (5, 1))
    assert select_clean(bag, SelectionThresholds(mode="all")).omega == (0, 1)
    assert select_clean(bag, SelectionThresholds(mode="topk", p_rank=1)).omega == (0,)
    absolute = SelectionThresholds(mode="absolute", p_value=0.5, u_value=2.0)
    assert select_clean(bag, absolute).omega == (0,)
    with pytest.raises(ContractError):
        select_clean(bag, SelectionThresholds(p_rank=0))


def test_absolute_mode_thresholds_positive_evidence():
    # alpha_pos 1.5 < 2.0 although alpha_0 = 1.5 + 1.5 passes
    bag = [EvidenceOutput(1.5, 1.5), EvidenceOutput(2.5, 1.0)]
    absolute = SelectionThresholds(mode="absolute", p_value=0.5, u_value=2.0)
    assert select_clean(bag, absolute).omega == (1,)


@settings(max_examples=1000)
@given(
    arrays(np.float64, 8, elements=st.floats(0.05, 0.95)),
    arrays(np.float64, 8, elements=st.floats(1.0, 20.0)),
    st.integers(1, 8),
    st.integers(1, 8),
    st.integers(0, 7),
)
def test_stricter_ranks_never_add_instances(p, a, p_rank, u_rank, shrink):
    bag = _bag(p, a)
    loose = set(select_clean(bag, SelectionThresholds(p_rank=p_rank, u_rank=u_rank)).omega)
    strict_p = SelectionThresholds(p_rank=max(1, p_rank - shrink), u_rank=u_rank)
    strict_u = SelectionThresholds(p_rank=p_rank, u_rank=max(1, u_rank - shrink))
    assert set(select_clean(bag, strict_p).omega) <= loose
    assert set(select_clean(bag, strict_u).omega) <= loose


@settings(max_examples=1000)
@given(arrays(np.float64, 10, elements=st.floats(1.0, 30.0)), st.integers(1, 10))
def test_selected_uncertainty_bounded_by_cutoff_evidence(a, u_rank):
    bag = _bag(np.full(10, 0.6), a)
    cutoff = sorted(a, reverse=True)[u_rank - 1]
    for i in select_clean(bag, SelectionThresholds(p_rank=10, u_rank=u_rank)).omega:
        assert bag[i].u <= 2.0 / cutoff + 1e-12


def test_default_ranks_scale_with_bag_size():
    assert default_ranks(200, SelectionConfig()) == (50, 150)
    assert default_ranks(3, SelectionConfig()) == (1, 3)
    assert default_ranks(32, SelectionConfig(p_rank=3, u_rank=24)) == (3, 24)


def test_rank_ramp():
    assert ramped_rank(50, 200, 0.0) == 200
    assert ramped_rank(50, 200, 1.0) == 50
    assert ramped_rank(50, 200, 0.5) == 125
    assert ramped_rank(50, 200, 3.0) == 50
    th = thresholds_for_bag(200, SelectionConfig(), progress=0.0)
    assert (th.p_rank, th.u_rank) == (200, 150)
