import math

import pytest
import torch

from fbanet.contrastive import ContrastiveTerms, ShapeError, contrastive_loss
from fbanet.model import DualOutput
from fbanet.objective import (
    LossTerms,
    consistency_loss,
    dice_loss,
    one_hot,
    ramp_weight,
    total_loss,
)


def hard(labels, k=2):
    return one_hot(torch.tensor(labels), k)


def dual(p1, p2):
    z = torch.zeros(p1.shape[0], 1, 1, 1)
    return DualOutput(p1, p2, z, z)


# ---------------------------------------------------------------- dice loss

def test_dice_perfect_prediction():
    lab = hard([[[0, 1], [1, 1]]])
    assert dice_loss(lab, lab).item() == pytest.approx(0.0, abs=1e-5)


def test_dice_disjoint_prediction():
    lab = hard([[[0, 1], [1, 0]]])
    assert dice_loss(1 - lab, lab).item() == pytest.approx(1.0, abs=1e-5)


def test_dice_uniform_hand_sum():
    lab = hard([[[0, 0, 1, 1]]])  # (1, 2, 1, 4)
    prob = torch.full_like(lab, 0.5)
    # each class: sum(pq) = 1, sum(p) = 2, sum(q) = 2
    per_class = 1 - (2 * 1 + 1e-5) / (4 + 1e-5)
    assert dice_loss(prob, lab).item() == pytest.approx(per_class, abs=1e-7)


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4))


def test_dice_monotone_along_interpolation():
    g = torch.Generator().manual_seed(0)
    lab = one_hot(torch.randint(0, 2, (2, 8, 8), generator=g), 2)
    uniform = torch.full_like(lab, 0.5)
    values = [dice_loss((1 - t) * uniform + t * lab, lab).item() for t in torch.linspace(0, 1, 10)]
    assert all(b < a for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------- consistency

def test_consistency_identical_hard_is_zero():
    p = hard([[[0, 1], [1, 0]]])
    assert consistency_loss(p, p.clone()).item() == 0.0


def test_consistency_uniform_vs_hard_hand_value():
    p1 = torch.full((1, 2, 1, 1), 0.5)
    p2 = torch.tensor([0.0, 1.0]).view(1, 2, 1, 1)
    # MSE(p1, onehot(p2)) = 0.25; sharpen(p1) = (1, 0) by the tie rule so MSE(p2, (1, 0)) = 1
    assert consistency_loss(p1, p2).item() == pytest.approx(1.25, abs=1e-7)
    p2 = torch.tensor([1.0, 0.0]).view(1, 2, 1, 1)
    assert consistency_loss(p1, p2).item() == pytest.approx(0.25, abs=1e-7)


def test_consistency_matches_naive_loop():
    g = torch.Generator().manual_seed(1)
    p1 = torch.softmax(torch.randn(2, 3, 4, 4, generator=g), 1)
    p2 = torch.softmax(torch.randn(2, 3, 4, 4, generator=g), 1)
    total, count = 0.0, 0
    for n in range(2):
        for i in range(4):
            for j in range(4):
                a, b = p1[n, :, i, j].tolist(), p2[n, :, i, j].tolist()
                ha, hb = a.index(max(a)), b.index(max(b))
                for k in range(3):
                    total += (a[k] - (k == hb)) ** 2 + (b[k] - (k == ha)) ** 2
                    count += 1
    assert consistency_loss(p1, p2).item() == pytest.approx(total / count, abs=1e-6)


def test_consistency_gradient_only_into_prob_argument():
    p1 = torch.softmax(torch.randn(1, 2, 3, 3), 1).requires_grad_(True)
    p2 = torch.softmax(torch.randn(1, 2, 3, 3), 1).requires_grad_(True)
    consistency_loss(p1, p2).backward()
    # d/dp1 of MSE(p1, t) + MSE(p2, sharpen(p1)) is only the first term
    target = torch.zeros_like(p2).scatter_(1, p2.argmax(1, keepdim=True), 1.0)
    assert torch.allclose(p1.grad, 2 * (p1.detach() - target) / p1.numel())


def test_consistency_zero_iff_identical_one_hot():
    p = hard([[[0, 1]]])
    q = hard([[[1, 1]]])
    assert consistency_loss(p, q).item() > 0
    soft = torch.full((1, 2, 1, 2), 0.5)
    assert consistency_loss(soft, soft).item() > 0


# ---------------------------------------------------------------- total loss

def test_ramp_shape():
    assert ramp_weight(0, 1000) == pytest.approx(math.exp(-5))
    assert ramp_weight(1000, 1000) == 1.0
    assert ramp_weight(5000, 1000) == 1.0
    assert ramp_weight(0, 1000, "none") == 1.0
    vals = [ramp_weight(t, 100) for t in range(0, 101, 10)]
    assert vals == sorted(vals)


def test_total_zero_lambdas_equals_dice():
    g = torch.Generator().manual_seed(0)
    p1 = torch.softmax(torch.randn(3, 2, 4, 4, generator=g), 1)
    p2 = torch.softmax(torch.randn(3, 2, 4, 4, generator=g), 1)
    lab = one_hot(torch.randint(0, 2, (3, 4, 4), generator=g), 2)
    terms = total_loss(dual(p1, p2), lab, torch.tensor([True, True, False]), None, 0.0, 0.0)
    assert terms.total.item() == terms.dice.item()


def test_total_perfect_all_labeled_single_sample():
    lab = hard([[[0, 1], [1, 0]]])
    z = torch.tensor([[1.0, 0.0]])
    contra = contrastive_loss(z, torch.tensor([[0.0, 1.0]]))
    terms = total_loss(dual(lab, lab.clone()), lab, torch.tensor([True]), contra)
    assert terms.dice.item() == pytest.approx(0.0, abs=1e-5)
    assert terms.consist.item() == 0.0
    assert terms.contra.item() == terms.neg.item()
    assert not terms.pos_defined


def test_total_matches_independent_parts():
    g = torch.Generator().manual_seed(5)
    p1 = torch.softmax(torch.randn(4, 2, 6, 6, generator=g), 1)
    p2 = torch.softmax(torch.randn(4, 2, 6, 6, generator=g), 1)
    lab = one_hot(torch.randint(0, 2, (4, 6, 6), generator=g), 2)
    labeled = torch.tensor([True, True, False, False])
    z_f = torch.nn.functional.normalize(torch.randn(4, 5, generator=g), dim=1)
    z_b = torch.nn.functional.normalize(torch.randn(4, 5, generator=g), dim=1)
    contra = contrastive_loss(z_f, z_b)
    terms = total_loss(dual(p1, p2), lab, labeled, contra, 0.3, 0.7)

    def naive_dice(p, q):
        vals = []
        for n in range(p.shape[0]):
            for k in range(2):
                inter = float((p[n, k] * q[n, k]).sum())
                vals.append(1 - (2 * inter + 1e-5) / (float(p[n, k].sum() + q[n, k].sum()) + 1e-5))
        return sum(vals) / len(vals)

    dice = 0.5 * (naive_dice(p1[:2], lab[:2]) + naive_dice(p2[:2], lab[:2]))
    consist = consistency_loss(p1, p2).item()
    expected = dice + 0.3 * contra.contra.item() + 0.7 * consist
    assert terms.dice.item() == pytest.approx(dice, abs=1e-6)
    assert terms.total.item() == pytest.approx(expected, abs=1e-6)
    assert terms.check_additivity()


def test_total_without_labeled_rows_flags_dice():
    p = torch.softmax(torch.randn(2, 2, 4, 4), 1)
    terms = total_loss(dual(p, p.clone()), torch.zeros_like(p), torch.tensor([False, False]))
    assert not terms.dice_defined and terms.dice.item() == 0.0


def test_lossterms_additivity_detects_violation():
    one = torch.tensor(1.0)
    bad = LossTerms(one, one, one, one, one, one, torch.tensor(5.0), 1.0, 1.0)
    assert not bad.check_additivity()
    good = LossTerms(one, one, one, one, one, one, torch.tensor(3.0), 1.0, 1.0)
    assert good.check_additivity() and good.is_finite()


def test_additivity_holds_for_large_float32_terms():
    # float32 terms near 20 differ from their float64 sum by more than 1e-6 unless composed in float64
    p = torch.softmax(torch.randn(2, 2, 4, 4), 1)
    big = torch.tensor(21.2658233, dtype=torch.float32)
    contra = ContrastiveTerms(big / 2, big / 2, torch.tensor(2.1437221), pos_defined=True)
    for lam in (0.9236888559810303, 1.0, 0.0017):
        terms = total_loss(dual(p, p.clone()), one_hot(p.argmax(1), 2), torch.tensor([True, False]),
                           contra, lam, lam)
        assert terms.additivity_error() <= 1e-6
