import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from djkd.errors import ConfigurationError, StructuralError, ValidationError
from djkd.losses import (
    EPS_CLAMP,
    PRESETS,
    LossWeights,
    PredictionBundle,
    cross_entropy,
    dice_loss,
    iou_loss,
    kl_divergence,
    preset,
    total_loss,
    total_loss_terms,
    weight_balance_loss,
    weight_balance_terms,
    weights_sum_to_one,
)


def t(values, dtype=torch.float64):
    return torch.tensor(values, dtype=dtype).reshape(1, 1, 1, -1)


# Worked scalar values ---------------------------------------------------------------

def test_bce_worked_value():
    got = cross_entropy(t([0.8, 0.2]), t([1.0, 0.0])).item()
    assert got == pytest.approx(-(math.log(0.8) + math.log(0.8)) / 2, abs=1e-12)
    assert got == pytest.approx(0.22314, abs=1e-5)
    assert got == pytest.approx(oracles.bce([0.8, 0.2], [1, 0]), abs=1e-12)


def test_bce_perfect_and_max_entropy():
    y = t([1.0, 0.0, 1.0, 1.0])
    assert cross_entropy(y.clone(), y).item() <= -math.log(1 - EPS_CLAMP) + 1e-12
    for target in ([0.0] * 4, [1.0, 0.0, 1.0, 0.0]):
        assert cross_entropy(torch.full((1, 1, 1, 4), 0.5, dtype=torch.float64), t(target)).item() == \
            pytest.approx(math.log(2), abs=1e-12)


def test_bce_rejects_non_binary_target():
    with pytest.raises(ValidationError):
        cross_entropy(t([0.5, 0.5]), t([0.3, 1.0]))


def test_dice_worked_values():
    got = dice_loss(t([1.0, 0.0, 1.0, 0.0]), t([1.0, 0.0, 0.0, 0.0]), smooth=0.0).item()
    assert got == pytest.approx(1 - 0.5 * 2 / 3 - 0.5 * 4 / 5, abs=1e-5)
    assert got == pytest.approx(0.26667, abs=1e-5)
    n = 16
    uniform = dice_loss(torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64),
                        torch.ones(1, 1, 4, 4, dtype=torch.float64), smooth=0.0).item()
    assert uniform == pytest.approx(1 - 0.5 * (2 * (n / 2) / (n / 4 + n)), abs=1e-12)
    assert uniform == pytest.approx(0.6, abs=1e-12)


def test_dice_perfect_overlap():
    y = t([1.0, 0.0, 0.0, 1.0])
    assert dice_loss(y.clone(), y).item() <= 1e-5


def test_iou_worked_values():
    assert iou_loss(t([1.0, 1.0, 0.0, 0.0]), t([1.0, 0.0, 0.0, 0.0])).item() == \
        pytest.approx(0.69315, abs=1e-5)
    disjoint = iou_loss(t([1.0, 0.0]), t([0.0, 1.0])).item()
    assert math.isfinite(disjoint)
    assert disjoint == pytest.approx(oracles.iou([1.0, 0.0], [0.0, 1.0]), rel=1e-9)
    assert disjoint == pytest.approx(-math.log(1e-6 / (2 + 1e-6)), rel=1e-5)
    y = t([1.0, 0.0, 1.0])
    assert iou_loss(y.clone(), y).item() == pytest.approx(0.0, abs=1e-6)


def test_weight_balance_composition():
    q, y = t([0.8, 0.2, 0.6, 0.1]), t([1.0, 0.0, 0.0, 0.0])
    terms = weight_balance_terms(q, y)
    assert terms["wb"].item() == pytest.approx(
        2 * terms["ce"].item() + terms["dice"].item() + terms["iou"].item(), abs=1e-12)
    assert 2 * 0.22314 + 0.26667 + 0.69315 == pytest.approx(1.40610, abs=1e-5)
    y = t([1.0, 0.0, 1.0, 0.0])
    assert weight_balance_loss(y.clone(), y).item() <= 3e-5


def test_weight_balance_is_linear_in_the_ce_component():
    # Moving every pixel's error changes all three terms; the total must equal their weighted sum.
    y = t([1.0, 0.0, 1.0, 0.0])
    a = weight_balance_terms(t([0.9, 0.1, 0.9, 0.1]), y)
    b = weight_balance_terms(t([0.8, 0.2, 0.8, 0.2]), y)
    delta = b["wb"] - a["wb"]
    expected = 2 * (b["ce"] - a["ce"]) + (b["dice"] - a["dice"]) + (b["iou"] - a["iou"])
    assert delta.item() == pytest.approx(expected.item(), abs=1e-12)


def test_kl_worked_value():
    got = kl_divergence(t([0.9]), t([0.5])).item()
    assert got == pytest.approx(0.9 * math.log(1.8) + 0.1 * math.log(0.2), abs=1e-12)
    assert got == pytest.approx(0.36806, abs=1e-5)


def test_kl_identity_and_temperature():
    p = t([0.1, 0.4, 0.7, 0.99])
    assert kl_divergence(p, p.clone()).item() == pytest.approx(0.0, abs=1e-15)
    q = t([0.3, 0.3, 0.5, 0.6])
    for temp in (0.5, 2.0, 4.0):
        assert kl_divergence(p, q, temp).item() == pytest.approx(
            oracles.kl(p.flatten().tolist(), q.flatten().tolist(), temp), rel=1e-9)
    for bad in (0.0, -1.0):
        with pytest.raises(ConfigurationError):
            kl_divergence(p, q, bad)


def test_kl_gibbs_on_random_pairs():
    rng = np.random.default_rng(0)
    p = torch.from_numpy(rng.uniform(0, 1, (1000, 1, 1, 1)))
    q = torch.from_numpy(rng.uniform(0, 1, (1000, 1, 1, 1)))
    per_pair = [kl_divergence(p[i:i + 1], q[i:i + 1]).item() for i in range(1000)]
    assert min(per_pair) > 0
    assert all(kl_divergence(p[i:i + 1], p[i:i + 1].clone()).item() == 0 for i in range(20))


def test_kl_teacher_side_receives_no_gradient():
    p = t([0.2, 0.8]).requires_grad_()
    q = t([0.5, 0.5]).requires_grad_()
    kl_divergence(p, q).backward()
    assert p.grad is None
    assert q.grad is not None and torch.any(q.grad != 0)


def test_shape_mismatch_is_structural():
    with pytest.raises(StructuralError):
        iou_loss(t([0.5, 0.5]), t([1.0, 0.0, 0.0]))
    with pytest.raises(StructuralError):
        PredictionBundle(t([0.5, 0.5]), t([1.0, 0.0]), benign=t([0.5]))


# Oracle agreement on random inputs ----------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
def test_losses_match_scalar_oracles(pairs):
    q = [a for a, _ in pairs]
    y = [float(b) for _, b in pairs]
    qt, yt = t(q), t(y)
    assert cross_entropy(qt, yt).item() == pytest.approx(oracles.bce(q, y), rel=1e-9, abs=1e-12)
    assert dice_loss(qt, yt).item() == pytest.approx(oracles.dice(q, y), rel=1e-9, abs=1e-12)
    assert iou_loss(qt, yt).item() == pytest.approx(oracles.iou(q, y), rel=1e-9, abs=1e-12)
    assert kl_divergence(qt, t(y)).item() == pytest.approx(oracles.kl(q, y), rel=1e-9, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1), st.floats(0, 1)), min_size=1, max_size=16))
def test_losses_finite_nonnegative_and_dice_bounded(triples):
    q = t([a for a, _, _ in triples])
    y = t([float(b) for _, b, _ in triples])
    p = t([c for _, _, c in triples])
    values = [cross_entropy(q, y), dice_loss(q, y), iou_loss(q, y), kl_divergence(p, q)]
    for v in values:
        assert math.isfinite(v.item()) and v.item() >= -1e-12
    assert values[1].item() <= 1 + 1e-12


def test_dice_and_iou_reduce_per_image():
    q = torch.rand(3, 1, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    y = (torch.rand(3, 1, 4, 4, generator=torch.Generator().manual_seed(2)) > 0.5).double()
    for fn in (dice_loss, iou_loss):
        per = [fn(q[i:i + 1], y[i:i + 1]).item() for i in range(3)]
        assert fn(q, y).item() == pytest.approx(sum(per) / 3, rel=1e-12)


# Total loss --------------------------------------------------------------------------

def test_total_loss_linear_combination_example():
    w = LossWeights(0.3, 0.5, 0.2)
    assert w.hard * 1.0 + w.benign * 0.2 + w.malignant * 0.4 == pytest.approx(0.48, abs=1e-12)


def _bundle(seed=0, shape=(2, 1, 3, 3)):
    g = torch.Generator().manual_seed(seed)
    s = torch.rand(shape, dtype=torch.float64, generator=g)
    b = torch.rand(shape, dtype=torch.float64, generator=g)
    m = torch.rand(shape, dtype=torch.float64, generator=g)
    y = (torch.rand(shape, generator=g) > 0.5).double()
    return PredictionBundle(s, y, b, m)


def test_total_loss_matches_components_and_is_linear_in_weights():
    bundle = _bundle()
    wb = weight_balance_loss(bundle.student, bundle.target).item()
    kb = kl_divergence(bundle.benign, bundle.student).item()
    km = kl_divergence(bundle.malignant, bundle.student).item()
    rng = np.random.default_rng(3)
    for _ in range(20):
        lam = rng.uniform(0.01, 1, 3)
        got = total_loss(bundle, LossWeights(*lam)).item()
        assert got == pytest.approx(lam[0] * wb + lam[1] * kb + lam[2] * km, rel=1e-12)


def test_supervised_weights_give_exactly_scaled_hard_loss():
    bundle = _bundle(1)
    hard = weight_balance_loss(bundle.student, bundle.target)
    no_teachers = PredictionBundle(bundle.student, bundle.target)
    assert torch.equal(total_loss(no_teachers, LossWeights(0.7, 0.0, 0.0)), 0.7 * hard)
    assert torch.equal(total_loss(no_teachers, PRESETS["supervised"]), hard)


def test_all_components_vanish_on_perfect_agreement():
    y = (torch.rand(1, 1, 4, 4, generator=torch.Generator().manual_seed(5)) > 0.5).double()
    bundle = PredictionBundle(y.clone(), y, y.clone(), y.clone())
    assert total_loss(bundle, PRESETS["double_teacher"]).item() <= 1e-4


def test_missing_teacher_is_a_configuration_error():
    s, y = t([0.4, 0.6]), t([0.0, 1.0])
    with pytest.raises(ConfigurationError):
        total_loss(PredictionBundle(s, y, benign=t([0.5, 0.5])), PRESETS["double_teacher"])
    with pytest.raises(ConfigurationError):
        total_loss(PredictionBundle(s, y), PRESETS["single_teacher"])
    terms = total_loss_terms(PredictionBundle(s, y, benign=t([0.5, 0.5])), PRESETS["single_teacher"])
    assert terms["kl_malignant"].item() == 0.0


def test_presets():
    assert PRESETS["double_teacher"].as_tuple() == (0.3, 0.5, 0.2)
    assert PRESETS["single_teacher"].as_tuple() == (0.3, 0.7, 0.0)
    assert all(weights_sum_to_one(w) for w in PRESETS.values())
    with pytest.raises(ConfigurationError):
        preset("triple_teacher")
    with pytest.raises(ConfigurationError):
        LossWeights(0.5, -0.1, 0.6)


# Finite-difference gradients -------------------------------------------------------------

def rel_close(analytic, numeric, rtol=1e-3, atol=1e-9):
    return bool(torch.all((analytic - numeric).abs() <= rtol * torch.maximum(analytic.abs(), numeric.abs()) + atol))


def fd_gradient(fn, x, h=1e-4):
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def loss_functions(y, p_b, p_m):
    bundle_w = LossWeights(0.3, 0.5, 0.2)
    return {
        "cross_entropy": lambda z: cross_entropy(torch.sigmoid(z), y),
        "dice_loss": lambda z: dice_loss(torch.sigmoid(z), y),
        "iou_loss": lambda z: iou_loss(torch.sigmoid(z), y),
        "kl_divergence": lambda z: kl_divergence(p_b, torch.sigmoid(z)),
        "total_loss": lambda z: total_loss(PredictionBundle(torch.sigmoid(z), y, p_b, p_m), bundle_w),
    }


def gradient_check_instances(n=50, seed=0):
    """Yield (name, analytic, numeric) over ``n`` random 3x3 single-image instances."""
    g = torch.Generator().manual_seed(seed)
    for _ in range(n):
        z0 = torch.randn(1, 1, 3, 3, dtype=torch.float64, generator=g) * 2
        y = (torch.rand(1, 1, 3, 3, generator=g) > 0.5).double()
        p_b = torch.rand(1, 1, 3, 3, dtype=torch.float64, generator=g)
        p_m = torch.rand(1, 1, 3, 3, dtype=torch.float64, generator=g)
        for name, fn in loss_functions(y, p_b, p_m).items():
            z = z0.clone().requires_grad_()
            fn(z).backward()
            yield name, z.grad, fd_gradient(fn, z0.clone())


def test_loss_gradients_match_finite_differences():
    failures = [name for name, a, n in gradient_check_instances(15, seed=11) if not rel_close(a, n)]
    assert not failures
