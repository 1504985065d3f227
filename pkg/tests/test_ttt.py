import copy

import numpy as np
import pytest
import torch

import hsittt.cube
import hsittt.pretrain
import hsittt.ttt as ttt
from hsittt.cube import HSICube, downsample_array
from hsittt.model import DESK, TINY, build_model
from hsittt.pretrain import SynthConfig, synth_dataset
from hsittt.ttt import DivergenceError, TTTConfig, adapt, ema_update, init_state, predict, ttt_step


def params(model):
    return [p.detach().clone() for p in model.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


@pytest.fixture
def tiny():
    return build_model(TINY, seed=1, dtype=torch.float64)


@pytest.fixture
def lr_cube():
    return HSICube(np.random.default_rng(0).random((3, 8, 8)).astype(np.float32))


class TestConfig:
    def test_defaults(self):
        c = TTTConfig()
        assert (c.steps, c.learning_rate, c.ema_alpha, c.mixup_lambda) == (20, 1e-5, 0.99, 0.5)
        assert c.betas == (0.9, 0.999) and c.adam_eps == 1e-8 and c.aug_enabled

    @pytest.mark.parametrize("kw", [{"steps": -1}, {"ema_alpha": 1.5}, {"mixup_lambda": -0.1}, {"learning_rate": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TTTConfig(**kw)


class TestInit:
    def test_copies(self, tiny):
        state = init_state(tiny, TTTConfig())
        src = params(tiny)
        assert same(params(state.student), src) and same(params(state.teacher), src)
        assert state.t == 0
        assert state.student is not tiny and state.teacher is not tiny

    def test_moments_zero(self, tiny):
        state = init_state(tiny, TTTConfig())
        assert all(float(m.abs().sum()) == 0 and float(v.abs().sum()) == 0 for m, v in state.moments())

    def test_non_finite_source(self, tiny):
        with torch.no_grad():
            next(tiny.parameters()).view(-1)[0] = float("nan")
        with pytest.raises(ValueError):
            init_state(tiny, TTTConfig())


class TestEMA:
    def test_alpha_one(self, tiny):
        other = build_model(TINY, seed=2, dtype=torch.float64)
        before = params(tiny)
        ema_update(tiny, other, 1.0)
        assert same(params(tiny), before)

    def test_fixed_point(self, tiny):
        twin = copy.deepcopy(tiny)
        before = params(tiny)
        ema_update(tiny, twin, 0.37)
        assert same(params(tiny), before)

    @pytest.mark.parametrize("dtype", [torch.float64, torch.float32])
    def test_scalar_arithmetic(self, dtype):
        t = torch.nn.Linear(1, 1, bias=False).to(dtype)
        s = torch.nn.Linear(1, 1, bias=False).to(dtype)
        with torch.no_grad():
            t.weight.fill_(1.0)
            s.weight.fill_(0.0)
        ema_update(t, s, 0.99)
        assert float(t.weight.detach()) == float(torch.tensor(0.99, dtype=dtype))

    def test_general_value(self):
        t = torch.nn.Linear(2, 1, bias=False).double()
        s = torch.nn.Linear(2, 1, bias=False).double()
        expect = 0.9 * t.weight.detach() + 0.1 * s.weight.detach()
        ema_update(t, s, 0.9)
        torch.testing.assert_close(t.weight.detach(), expect, atol=1e-15, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ema_update(torch.nn.Linear(2, 1), torch.nn.Linear(3, 1), 0.5)


class TestStep:
    def test_zero_lr(self, tiny, lr_cube):
        state = init_state(tiny, TTTConfig(learning_rate=0.0))
        src = params(tiny)
        ttt_step(state, lr_cube, TTTConfig(learning_rate=0.0))
        assert state.t == 1
        assert same(params(state.student), src) and same(params(state.teacher), src)

    def test_telescoping(self, tiny, lr_cube):
        config = TTTConfig(learning_rate=0.0)
        state = init_state(tiny, config)
        for _ in range(20):
            ttt_step(state, lr_cube, config)
        assert state.t == 20
        assert same(params(state.teacher), params(tiny))

    def test_log_rows(self, tiny, lr_cube):
        config = TTTConfig(steps=3)
        _, state = adapt(tiny, lr_cube, config)
        assert [(r[0], r[1]) for r in state.log] == [(1, "pseudo"), (1, "mixup"), (2, "pseudo"), (2, "mixup"), (3, "pseudo"), (3, "mixup")]
        for _, _, l1, tv, total in state.log:
            assert total == pytest.approx(l1 + tv, abs=1e-9)

    def test_no_aug_one_update_per_step(self, tiny, lr_cube):
        _, state = adapt(tiny, lr_cube, TTTConfig(steps=2, aug_enabled=False))
        assert [r[1] for r in state.log] == ["pseudo", "pseudo"]

    def test_phase_order(self, tiny, lr_cube, monkeypatch):
        trace = []
        state = init_state(tiny, TTTConfig())
        inside_update = [False]

        def wrap(name, fn, label=None):
            def inner(*args, **kwargs):
                if not inside_update[0]:
                    trace.append(label(*args) if label else name)
                return fn(*args, **kwargs)
            return inner

        def sr_label(data, factor, model):
            return "predict" if model is state.teacher else "student-forward"

        orig_update = ttt._student_update

        def update(*args, **kwargs):
            trace.append("student-update")
            inside_update[0] = True
            try:
                return orig_update(*args, **kwargs)
            finally:
                inside_update[0] = False

        monkeypatch.setattr(ttt, "super_resolve", wrap("sr", ttt.super_resolve, sr_label))
        monkeypatch.setattr(ttt, "downsample_array", wrap("downsample", ttt.downsample_array))
        monkeypatch.setattr(ttt, "ema_update", wrap("ema", ttt.ema_update))
        monkeypatch.setattr(ttt, "mix_bands", wrap("mixup", ttt.mix_bands))
        monkeypatch.setattr(ttt, "_student_update", update)
        ttt_step(state, lr_cube, TTTConfig())
        assert trace == ["predict", "downsample", "student-update", "ema", "mixup", "downsample", "student-update", "ema"]

    def test_fresh_mixing_matrix_per_step(self, tiny, lr_cube, monkeypatch):
        seen = []
        orig = ttt.sample_mixing_matrix
        monkeypatch.setattr(ttt, "sample_mixing_matrix", lambda s, rng: seen.append(orig(s, rng)) or seen[-1])
        adapt(tiny, lr_cube, TTTConfig(steps=3))
        assert len(seen) == 3
        assert not np.array_equal(seen[0], seen[1])


def reference_step(source, x, lr, alpha, scale, b1=0.9, b2=0.999, eps=1e-8):
    """Single no-augmentation iteration written out longhand: one Adam step from
    zero moments followed by the weighted average of teacher and student."""
    student = copy.deepcopy(source)
    teacher = [p.detach().clone() for p in source.parameters()]
    xin = torch.as_tensor(x, dtype=torch.float64)
    with torch.no_grad():
        target = torch.stack([source(xin[s][None, None], int(xin.shape[1] * scale), int(xin.shape[2] * scale))[0, 0] for s in range(xin.shape[0])])
    pseudo_lr = torch.from_numpy(downsample_array(target.numpy(), scale))
    pred = torch.stack([
        student(pseudo_lr[s][None, None], target.shape[1], target.shape[2])[0, 0] for s in range(pseudo_lr.shape[0])
    ])
    l1 = (pred - target).abs().mean()
    tv = (
        (pred[:, 1:, :] - pred[:, :-1, :]).abs().mean()
        + (pred[:, :, 1:] - pred[:, :, :-1]).abs().mean()
        + (pred[1:] - pred[:-1]).abs().mean()
    )
    grads = torch.autograd.grad(l1 + tv, list(student.parameters()))
    new_student, new_teacher = [], []
    for p, g, tp in zip(student.parameters(), grads, teacher):
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        m_hat = m / (1 - b1)
        v_hat = v / (1 - b2)
        s = p.detach() - lr * m_hat / (v_hat.sqrt() + eps)
        new_student.append(s)
        new_teacher.append(alpha * tp + (1 - alpha) * s)
    return new_student, new_teacher


def test_matches_reference(tiny, lr_cube):
    config = TTTConfig(learning_rate=1e-3, ema_alpha=0.9, aug_enabled=False)
    state = init_state(tiny, config)
    ttt_step(state, lr_cube, config)
    ref_s, ref_t = reference_step(tiny, lr_cube.data.astype(np.float64), 1e-3, 0.9, 2.0)
    moved = 0.0
    for ours, ref, src in zip(state.student.parameters(), ref_s, tiny.parameters()):
        assert float((ours.detach() - ref).abs().max()) < 1e-10
        moved = max(moved, float((ref - src.detach()).abs().max()))
    for ours, ref in zip(state.teacher.parameters(), ref_t):
        assert float((ours.detach() - ref).abs().max()) < 1e-10
    assert moved > 1e-4


class TestAdapt:
    def test_zero_steps_is_source(self, tiny, lr_cube):
        pred, state = adapt(tiny, lr_cube, TTTConfig(steps=0))
        assert pred.data.tobytes() == predict(tiny, lr_cube, 2.0).data.tobytes()
        assert state.t == 0 and state.log == []

    def test_deterministic(self, lr_cube):
        model = build_model(DESK, seed=0)
        a, _ = adapt(model, lr_cube, TTTConfig(steps=2, learning_rate=1e-4, seed=5))
        b, _ = adapt(model, lr_cube, TTTConfig(steps=2, learning_rate=1e-4, seed=5))
        assert a.data.tobytes() == b.data.tobytes()

    def test_source_untouched(self, tiny, lr_cube):
        before = params(tiny)
        adapt(tiny, lr_cube, TTTConfig(steps=2, learning_rate=1e-3))
        assert same(params(tiny), before)

    def test_prediction_shape_and_range(self, tiny, lr_cube):
        pred, _ = adapt(tiny, lr_cube, TTTConfig(steps=1))
        assert pred.shape == (3, 16, 16)
        assert pred.data.min() >= 0 and pred.data.max() <= 1

    @pytest.mark.parametrize("bands", [1, 3, 8, 31])
    def test_band_counts(self, tiny, bands):
        x = HSICube(np.random.default_rng(bands).random((bands, 6, 6)).astype(np.float32))
        pred, state = adapt(tiny, x, TTTConfig(steps=2))
        assert pred.shape == (bands, 12, 12) and state.t == 2

    def test_divergence_reports_step(self, tiny, lr_cube, monkeypatch):
        orig = ttt.total_loss

        def poisoned(pred, target):
            out = orig(pred, target)
            return out._replace(total=out.total * float("nan"))

        monkeypatch.setattr(ttt, "total_loss", poisoned)
        with pytest.raises(DivergenceError) as info:
            adapt(tiny, lr_cube, TTTConfig(steps=3))
        assert info.value.step == 1

    def test_non_explosion_desk(self):
        cube = synth_dataset(SynthConfig(num_images=1, height=32, width=32))[0]
        lr = hsittt.cube.downsample(cube, 2)
        _, state = adapt(build_model(DESK, seed=0), lr, TTTConfig())
        totals = [r[4] for r in state.log]
        assert totals[-1] <= 10 * totals[0]
        assert all(np.isfinite(totals))
        assert all(torch.isfinite(p).all() for p in state.teacher.parameters())


def test_shared_degradation_operator():
    assert ttt.downsample_array is hsittt.cube.downsample_array
    assert hsittt.pretrain.downsample_array is hsittt.cube.downsample_array
