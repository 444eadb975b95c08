import math

import numpy as np
import pytest

import oracles
from classic import autodiff as ad
from classic.autodiff import RandomSource, Tensor
from classic.losses import (LossWeights, ced_loss, ced_pair_loss, ce_loss, cks_loss, csc_loss,
                            total_loss)
from classic.model import TaskView

# frozen from tests/oracles.py (plain-float evaluation)
CE_ONE_HOT = 0.5514447139320511              # -log(e / (e + 2))
CSC_HAND = 0.6265233750364456                # 2 log(1 + 1/e)
CED_IDENTICAL_N2 = 4.394449154672438         # 4 log 3


def instances(seed, count=50):
    """Random (h, labels, tau) triples with N <= 4 and d <= 5."""
    root = RandomSource(seed)
    for k in range(count):
        rng = root.spawn(k)
        n, d = int(rng.integers(2, 5)), int(rng.integers(1, 6))
        yield rng, rng.normal(1.0, (n, d)), rng.integers(0, 3, n), float(rng.uniform(0.3, 2.0, None))


class TestCrossEntropy:
    def test_hand_value(self):
        assert ce_loss(Tensor([[1.0, 0.0, 0.0]]), [0]).item() == pytest.approx(CE_ONE_HOT, abs=1e-12)

    def test_is_batch_mean(self):
        z = RandomSource(0).normal(1.0, (4, 3))
        y = [0, 2, 1, 1]
        expected = np.mean([oracles.cross_entropy(z[i].tolist(), y[i]) for i in range(4)])
        assert ce_loss(Tensor(z), y).item() == pytest.approx(expected, abs=1e-12)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            ce_loss(Tensor(np.zeros((1, 3))), [3])


class TestOracleEquivalence:
    def test_csc(self):
        for _, h, y, tau in instances(1):
            assert abs(csc_loss(Tensor(h), y, tau).item() - oracles.csc(h.tolist(), y.tolist(), tau)) <= 1e-10

    def test_cks(self):
        for rng, h, y, tau in instances(2):
            g = rng.normal(1.0, h.shape)
            ref = oracles.cks(h.tolist(), g.tolist(), y.tolist(), tau)
            assert abs(cks_loss(Tensor(h), Tensor(g), y, tau).item() - ref) <= 1e-10

    def test_ced_pair(self):
        for rng, h, _, tau in instances(3):
            t, s = rng.normal(1.0, (h.shape[0], 3)), rng.normal(1.0, (h.shape[0], 3))
            ref = oracles.ced_pair(t.tolist(), s.tolist(), tau)
            assert abs(ced_pair_loss(Tensor(t), Tensor(s), tau).item() - ref) <= 1e-10

    def test_mean_reduction_divides_by_anchor_count(self):
        for _, h, y, tau in instances(4, 10):
            total = csc_loss(Tensor(h), y, tau).item()
            assert csc_loss(Tensor(h), y, tau, "mean").item() == pytest.approx(total / len(y), abs=1e-12)


class TestIdentities:
    def test_csc_hand_case(self):
        h = Tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert csc_loss(h, [0, 0, 1]).item() == pytest.approx(CSC_HAND, abs=1e-12)
        assert cks_loss(h, h, [0, 0, 1]).item() == pytest.approx(CSC_HAND, abs=1e-12)

    def test_csc_trivial_pairs(self):
        # two samples of different classes: no positives at all
        assert csc_loss(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).item() == 0.0
        # two samples of one class: the only candidate is the positive
        assert csc_loss(Tensor([[1.0, 2.0], [-3.0, 1.0]]), [1, 1]).item() == pytest.approx(0.0, abs=1e-15)

    def test_ced_identical_logits(self):
        for n in (1, 2, 3, 4):
            z = Tensor(np.tile([0.3, -1.0, 2.0], (n, 1)))
            value = ced_pair_loss(z, z).item()
            assert abs(value - 2 * n * math.log(2 * n - 1)) <= 1e-9
        z = Tensor(np.ones((2, 3)))
        assert ced_pair_loss(z, z).item() == pytest.approx(CED_IDENTICAL_N2, abs=1e-9)

    def test_ced_first_task_is_zero(self):
        z = Tensor(RandomSource(0).normal(1.0, (3, 3)))
        assert ced_loss([TaskView(0, z, z)]).item() == 0.0

    def test_ced_sums_over_teachers(self):
        rng = RandomSource(5)
        z = [Tensor(rng.normal(1.0, (2, 3))) for _ in range(3)]
        views = [TaskView(i, zi, zi) for i, zi in enumerate(z)]
        expected = ced_pair_loss(z[0], z[2]).item() + ced_pair_loss(z[1], z[2]).item()
        assert ced_loss(views).item() == pytest.approx(expected, abs=1e-12)

    def test_ced_detached_teacher_gets_no_gradient(self):
        t, s = ad.parameter(np.ones((2, 3))), ad.parameter(np.zeros((2, 3)))
        with ad.Tape():
            ad.backward(ced_loss([TaskView(0, t, t), TaskView(1, s, s)]), [t, s])
        assert not t.grad.any() and s.grad.any()

    def test_cks_equals_csc_for_same_inputs(self):
        for _, h, y, tau in instances(6, 10):
            assert cks_loss(Tensor(h), Tensor(h), y, tau).item() == pytest.approx(
                csc_loss(Tensor(h), y, tau).item(), abs=1e-12)

    def test_single_sample_rejected(self):
        with pytest.raises(ValueError):
            csc_loss(Tensor([[1.0, 0.0]]), [0])

    def test_components_non_negative(self):
        for rng, h, y, tau in instances(7, 20):
            assert csc_loss(Tensor(h), y, tau).item() >= -1e-12
            assert ced_pair_loss(Tensor(h), Tensor(rng.normal(1.0, h.shape)), tau).item() >= 0


class TestTotal:
    def parts(self):
        return [Tensor(np.array(v)) for v in (1.0, 2.0, 3.0, 4.0)]

    def test_weighted_sum(self):
        total, br = total_loss(*self.parts(), LossWeights())
        assert total.item() == 10.0 and br.as_dict() == {"ce": 1.0, "csc": 2.0, "ced": 3.0, "cks": 4.0,
                                                         "total": 10.0}

    def test_zero_weights_give_ce_exactly(self):
        ce = ce_loss(Tensor(RandomSource(0).normal(1.0, (3, 3))), [0, 1, 2])
        parts = self.parts()[1:]
        total, _ = total_loss(ce, *parts, LossWeights(0.0, 0.0, 0.0))
        assert total.item() == ce.item()
        assert total is ce

    def test_ablated_parts_reported_as_none(self):
        ce = Tensor(np.array(0.7))
        total, br = total_loss(ce, None, None, None, LossWeights())
        assert total.item() == 0.7 and br.csc is None and br.ced is None

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            total_loss(Tensor(np.array(np.nan)), None, None, None, LossWeights())

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            LossWeights(tau=0.0)
