import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hsittt.losses import l1_loss, sstv_loss, total_loss


def oracle_l1(p, t):
    acc = 0.0
    for a, b in zip(p.ravel().tolist(), t.ravel().tolist()):
        acc += abs(a - b)
    return acc / p.size


def oracle_sstv(x):
    """Triple-loop forward differences, each direction averaged over its own count."""
    s, h, w = x.shape
    terms = []
    for ds, dh, dw in ((0, 1, 0), (0, 0, 1), (1, 0, 0)):
        acc, n = 0.0, 0
        for c in range(s - ds):
            for i in range(h - dh):
                for j in range(w - dw):
                    acc += abs(x[c + ds, i + dh, j + dw] - x[c, i, j])
                    n += 1
        terms.append(acc / n if n else 0.0)
    return sum(terms)


class TestL1:
    def test_zero(self):
        x = np.random.default_rng(0).random((2, 4, 4))
        assert float(l1_loss(x, x)) == 0.0

    def test_constant_gap(self):
        assert float(l1_loss(np.full((2, 3, 3), 0.25), np.full((2, 3, 3), 0.75))) == 0.5

    def test_oracle(self):
        rng = np.random.default_rng(1)
        p, t = rng.random((2, 4, 4)), rng.random((2, 4, 4))
        assert float(l1_loss(p, t)) == pytest.approx(oracle_l1(p, t), abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


class TestSSTV:
    def test_constant(self):
        assert float(sstv_loss(np.full((3, 5, 5), 0.3))) == 0.0

    def test_hand_example(self):
        x = np.array([[[0.0, 1.0], [0.0, 1.0]]])
        assert float(sstv_loss(x)) == 1.0

    def test_oracle(self):
        x = np.random.default_rng(2).random((3, 4, 4))
        assert float(sstv_loss(x)) == pytest.approx(oracle_sstv(x), abs=1e-10)

    def test_batch_is_mean_over_images(self):
        xs = np.random.default_rng(3).random((3, 2, 5, 5))
        expected = np.mean([oracle_sstv(x) for x in xs])
        assert float(sstv_loss(xs)) == pytest.approx(expected, abs=1e-12)

    def test_single_pixel(self):
        assert float(sstv_loss(np.ones((1, 1, 1)))) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-1, 1))
    def test_translation_invariant(self, seed, c):
        # 0.5-offset keeps values dyadic-friendly; check exact equality on a 1/64 grid
        x = np.round(np.random.default_rng(seed).random((3, 4, 4)) * 64) / 64
        c = round(c * 64) / 64
        assert float(sstv_loss(x + c)) == float(sstv_loss(x))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0, 10))
    def test_homogeneous(self, seed, a):
        x = np.random.default_rng(seed).random((3, 4, 4))
        assert float(sstv_loss(a * x)) == pytest.approx(a * float(sstv_loss(x)), abs=1e-9)


class TestTotal:
    def test_zero(self):
        x = np.full((2, 3, 3), 0.4)
        assert float(total_loss(x, x).total) == 0.0

    def test_constant_gap(self):
        v = total_loss(np.full((2, 3, 3), 0.25), np.full((2, 3, 3), 0.75))
        assert v.floats() == (0.5, 0.5, 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_decomposition(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.random((3, 5, 4)), rng.random((3, 5, 4))
        v = total_loss(p, t)
        assert float(v.total) == pytest.approx(float(l1_loss(p, t)) + float(sstv_loss(p)), abs=1e-12)
        assert float(v.total) == pytest.approx(float(v.l1) + float(v.sstv), abs=1e-9)

    def test_target_not_regularised(self):
        p = np.full((2, 3, 3), 0.5)
        t = np.random.default_rng(4).random((2, 3, 3))
        assert float(total_loss(p, t).sstv) == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        # a grid with spacing 0.1 plus small jitter keeps every pairwise
        # difference (and residual) well away from the |.| kink
        base = rng.permutation(np.arange(36)).reshape(2, 3, 6) * 0.1
        pred = base + rng.uniform(-0.01, 0.01, base.shape)
        target = pred + rng.choice([-1, 1], base.shape) * rng.uniform(0.05, 0.5, base.shape)
        p = torch.tensor(pred, requires_grad=True)
        total_loss(p, torch.tensor(target)).total.backward()
        analytic = p.grad.numpy()
        h = 1e-6
        numeric = np.zeros_like(pred)
        for idx in np.ndindex(pred.shape):
            up, dn = pred.copy(), pred.copy()
            up[idx] += h
            dn[idx] -= h
            numeric[idx] = (float(total_loss(up, target).total) - float(total_loss(dn, target).total)) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-12)
        assert rel.max() < 1e-4
