import math

import numpy as np
import pytest

from dfn import ops
from dfn.errors import DataError
from dfn.gradcheck import grad_check
from dfn.losses import LossConfig, combined_loss, focal_loss, softmax_ce
from dfn.model import DFN, DFNOutput
from dfn.tensor import WIDE, Tensor

from conftest import tiny_cfg, wide


def logits(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), dtype=WIDE)


class TestSoftmaxCE:
    def test_uniform_two_class(self):
        loss = softmax_ce(logits(np.zeros((1, 2, 3, 3))), np.zeros((1, 3, 3), int))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated(self):
        y = np.zeros((1, 3, 2, 2))
        y[:, 1] = 20.0
        assert softmax_ce(logits(y), np.ones((1, 2, 2), int)).item() < 1e-8

    def test_direct_formula(self, rng):
        y = rng.normal(size=(1, 3, 2, 2))
        lab = rng.integers(0, 3, size=(1, 2, 2))
        terms = []
        for i in range(2):
            for j in range(2):
                num = math.exp(y[0, lab[0, i, j], i, j])
                den = sum(math.exp(y[0, k, i, j]) for k in range(3))
                terms.append(-math.log(num / den))
        assert softmax_ce(logits(y), lab).item() == pytest.approx(sum(terms) / 4, abs=1e-10)

    def test_bad_label_names_pixel(self):
        lab = np.zeros((1, 2, 2), int)
        lab[0, 1, 0] = 5
        with pytest.raises(DataError, match=r"\(0, 1, 0\)"):
            softmax_ce(logits(np.zeros((1, 3, 2, 2))), lab)

    def test_ignore_label(self, rng):
        y = rng.normal(size=(1, 3, 2, 2))
        lab = np.array([[[0, 255], [1, 2]]])
        kept = softmax_ce(logits(y), lab, ignore_label=255).item()
        full = [softmax_ce(logits(y[:, :, i : i + 1, j : j + 1]), lab[:, i : i + 1, j : j + 1]).item() for i, j in [(0, 0), (1, 0), (1, 1)]]
        assert kept == pytest.approx(np.mean(full), abs=1e-12)

    def test_non_negative_and_gradient(self, rng):
        y = wide(rng, 2, 4, 3, 3)
        lab = rng.integers(0, 4, size=(2, 3, 3))
        assert softmax_ce(y, lab).item() >= 0
        assert grad_check(lambda: softmax_ce(y, lab), [y]) < 1e-6


def bce(z, t):
    p = 1 / (1 + np.exp(-z))
    return np.mean(np.where(t, -np.log(p), -np.log(1 - p)))


class TestFocal:
    def test_gamma_zero_is_half_bce(self, rng):
        z = rng.normal(scale=3, size=(1, 1, 25, 40))
        t = rng.integers(0, 2, size=(1, 25, 40))
        assert abs(focal_loss(logits(z), t, 0.0, 0.5).item() - 0.5 * bce(z, t)) < 1e-12

    def test_scalar_case(self):
        got = focal_loss(logits(np.zeros((1, 1, 1, 1))), np.ones((1, 1, 1)), 2.0, 1.0).item()
        assert got == pytest.approx(0.25 * math.log(2), abs=1e-12)
        assert got == pytest.approx(0.173287, abs=1e-6)

    def test_confident_correct(self):
        z = np.array([[[[30.0, -30.0]]]])
        assert focal_loss(logits(z), np.array([[[1, 0]]]), 2.0, 0.75).item() < 1e-6

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 1.0, 2.0, 5.0])
    def test_monotone_in_p_on_boundary(self, gamma):
        ps = np.linspace(0.01, 0.99, 99)
        z = np.log(ps / (1 - ps))
        vals = [focal_loss(logits(np.array([[[[v]]]])), np.ones((1, 1, 1)), gamma, 0.75).item() for v in z]
        assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))

    def test_extreme_logits_finite(self):
        z = np.array([[[[1000.0, -1000.0]]]])
        loss = focal_loss(logits(z), np.array([[[0, 1]]]), 2.0, 0.75)
        assert np.isfinite(loss.item())

    def test_gradient(self, rng):
        z = wide(rng, 1, 1, 5, 5)
        t = rng.integers(0, 2, size=(1, 5, 5))
        assert grad_check(lambda: focal_loss(z, t, 2.0, 0.75), [z]) < 1e-5


class TestCombined:
    def _output(self, rng, k=3, border=True):
        seg = [wide(rng, 2, k, 4, 4) for _ in range(5)]
        b = [wide(rng, 2, 1, 4, 4) for _ in range(3)] if border else []
        return DFNOutput(seg, b, [])

    def test_lambda_zero_is_ls(self, rng):
        out = self._output(rng)
        lab = rng.integers(0, 3, size=(2, 4, 4))
        total, l_s, l_b = combined_loss(out, lab, lab % 2, LossConfig(lam=0.0), tiny_cfg())
        assert total.item() == l_s.item() and l_b.item() > 0

    def test_no_border(self, rng):
        out = self._output(rng, border=False)
        lab = rng.integers(0, 3, size=(2, 4, 4))
        total, l_s, l_b = combined_loss(out, lab, lab % 2, LossConfig(), tiny_cfg(use_border=False))
        assert l_b.item() == 0.0 and total.item() == l_s.item()

    def test_arithmetic(self):
        l_s, l_b = Tensor(np.array(0.9), dtype=WIDE), Tensor(np.array(0.4), dtype=WIDE)
        assert ops.add(l_s, ops.scale(l_b, 0.1)).item() == pytest.approx(0.94, abs=1e-15)

    def test_ds_averages_all_maps(self, rng):
        out = self._output(rng)
        lab = rng.integers(0, 3, size=(2, 4, 4))
        _, l_s, _ = combined_loss(out, lab, lab % 2, LossConfig(), tiny_cfg())
        want = np.mean([softmax_ce(s, lab).item() for s in out.seg_scores])
        assert l_s.item() == pytest.approx(want, abs=1e-12)
        _, l_s1, _ = combined_loss(out, lab, lab % 2, LossConfig(), tiny_cfg(use_ds=False))
        assert l_s1.item() == pytest.approx(softmax_ce(out.seg_final, lab).item(), abs=1e-15)

    def test_dlambda_is_lb(self, rng):
        out = self._output(rng)
        lab = rng.integers(0, 3, size=(2, 4, 4))
        h = 1e-3
        lo, _, l_b = combined_loss(out, lab, lab % 2, LossConfig(lam=0.1), tiny_cfg())
        hi, _, _ = combined_loss(out, lab, lab % 2, LossConfig(lam=0.1 + h), tiny_cfg())
        assert (hi.item() - lo.item()) / h == pytest.approx(l_b.item(), rel=1e-9)

    def test_tiny_dfn_gradient(self, rng):
        cfg = tiny_cfg()
        model = DFN(cfg).to(WIDE)
        x = wide(rng, 2, 3, 32, 32)
        lab = rng.integers(0, 3, size=(2, 32, 32))
        bnd = rng.integers(0, 2, size=(2, 32, 32))
        f = lambda: combined_loss(model(x), lab, bnd, LossConfig(lam=0.5), cfg)[0]  # noqa: E731
        picks = [p.value for p in model.parameters()][::9]
        assert grad_check(f, [x] + picks, max_elements=5, seed=3) < 1e-4

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(lam=-1.0)
        with pytest.raises(ValueError):
            LossConfig(alpha_f=0.0)
