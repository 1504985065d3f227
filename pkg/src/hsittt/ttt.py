"""Per-image test-time training with a weight-averaged teacher.

Each iteration:

1. the teacher predicts the HR cube ``Xb`` from the test input ``x``;
2. ``Xb`` is degraded with the shared operator to ``xb``;
3. one Adam step moves the student towards ``Xb`` given ``xb``;
4. the teacher takes an EMA step towards the student;
5-8. the same again on a Spectral Mixup of ``Xb`` (when enabled).

``(xb, Xb)`` is an exact LR/HR pair by construction, unlike ``(x, Xb)``.
The teacher's prediction and the degraded input are treated as constants:
gradients flow only through the student's forward pass.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .augment import DEFAULT_LAMBDA, mix_bands, sample_mixing_matrix
from .cube import HSICube, downsample_array
from .losses import total_loss
from .model import SRModel, super_resolve

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass
class TTTConfig:
    steps: int = 20
    learning_rate: float = 1e-5
    ema_alpha: float = 0.99
    mixup_lambda: float = DEFAULT_LAMBDA
    scale: float = 2.0
    aug_enabled: bool = True
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ValueError(f"steps must be a non-negative integer, got {self.steps!r}")
        if not self.learning_rate >= 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError(f"ema_alpha must lie in [0, 1], got {self.ema_alpha}")
        if not 0.0 <= self.mixup_lambda <= 1.0:
            raise ValueError(f"mixup_lambda must lie in [0, 1], got {self.mixup_lambda}")
        if not self.scale >= 1.0:
            raise ValueError(f"scale must be >= 1, got {self.scale}")


@dataclass
class TTTState:
    student: SRModel
    teacher: SRModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    t: int = 0
    log: list = field(default_factory=list)

    def moments(self):
        """Adam first/second moments per student parameter (zeros before any step)."""
        out = []
        for p in self.student.parameters():
            st = self.optimizer.state.get(p, {})
            out.append((st.get("exp_avg", torch.zeros_like(p)), st.get("exp_avg_sq", torch.zeros_like(p))))
        return out


def _all_finite(model) -> bool:
    return all(torch.isfinite(p).all() for p in model.parameters())


def init_state(source: SRModel, config: TTTConfig) -> TTTState:
    if not _all_finite(source):
        raise ValueError("source model has non-finite parameters")
    student = copy.deepcopy(source)
    teacher = copy.deepcopy(source)
    teacher.requires_grad_(False)
    optimizer = torch.optim.Adam(
        student.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.adam_eps
    )
    return TTTState(student, teacher, optimizer, np.random.default_rng(config.seed))


@torch.no_grad()
def ema_update(teacher: SRModel, student: SRModel, alpha: float) -> SRModel:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place.

    Written as ``teacher + (1 - alpha) * (student - teacher)`` so that equal
    weights are an exact fixed point.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params) or any(a.shape != b.shape for a, b in zip(t_params, s_params)):
        raise ValueError("teacher and student parameter shapes differ")
    for tp, sp in zip(t_params, s_params):
        tp.add_(sp - tp, alpha=1.0 - alpha)
    return teacher


def _student_update(state: TTTState, inp: torch.Tensor, target: torch.Tensor, config: TTTConfig, phase: str):
    state.optimizer.zero_grad(set_to_none=True)
    pred = super_resolve(inp, config.scale, state.student)
    loss = total_loss(pred, target)
    if not torch.isfinite(loss.total):
        raise DivergenceError(f"non-finite {phase} loss at step {state.t + 1}", state.t + 1)
    loss.total.backward()
    state.optimizer.step()
    total, l1, tv = loss.floats()
    state.log.append((state.t + 1, phase, l1, tv, total))
    return loss


def _degrade(hr: torch.Tensor, scale: float) -> torch.Tensor:
    return torch.from_numpy(downsample_array(hr.numpy(), scale))


def _lr_tensor(x, model: SRModel) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    data = x.data if isinstance(x, HSICube) else x
    return torch.as_tensor(np.asarray(data), dtype=dtype)


def ttt_step(state: TTTState, x, config: TTTConfig) -> TTTState:
    """One iteration of the adaptation loop; mutates and returns ``state``."""
    lr_in = _lr_tensor(x, state.student)
    with torch.no_grad():
        pseudo_hr = super_resolve(lr_in, config.scale, state.teacher)
    pseudo_lr = _degrade(pseudo_hr, config.scale)
    _student_update(state, pseudo_lr, pseudo_hr, config, "pseudo")
    ema_update(state.teacher, state.student, config.ema_alpha)

    if config.aug_enabled:
        mixing = sample_mixing_matrix(pseudo_hr.shape[0], state.rng)
        mixed_hr = mix_bands(pseudo_hr, mixing, config.mixup_lambda)
        mixed_lr = _degrade(mixed_hr, config.scale)
        _student_update(state, mixed_lr, mixed_hr, config, "mixup")
        ema_update(state.teacher, state.student, config.ema_alpha)

    state.t += 1
    if not (_all_finite(state.student) and _all_finite(state.teacher)):
        raise DivergenceError(f"non-finite parameters after step {state.t}", state.t)
    return state


def predict(model: SRModel, x, scale: float) -> HSICube:
    """Super-resolve and clamp into a valid cube."""
    with torch.no_grad():
        out = super_resolve(_lr_tensor(x, model), scale, model)
    wl = x.wavelengths_nm if isinstance(x, HSICube) else None
    return HSICube(out.clamp(0.0, 1.0).numpy(), wavelengths_nm=wl)


def adapt(source: SRModel, x, config: Optional[TTTConfig] = None):
    """Run ``config.steps`` iterations; return (teacher prediction, final state)."""
    config = config or TTTConfig()
    state = init_state(source, config)
    for _ in range(config.steps):
        try:
            ttt_step(state, x, config)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} (last finite step {state.t})", exc.step) from exc
        if log.isEnabledFor(logging.DEBUG):
            log.debug("step %d: %s", state.t, state.log[-1])
    return predict(state.teacher, x, config.scale), state


def write_log_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,phase,l1,sstv,total\n")
        for step, phase, l1, tv, total in rows:
            fh.write(f"{step},{phase},{l1:.6g},{tv:.6g},{total:.6g}\n")
