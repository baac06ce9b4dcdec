"""Decoupled-weight-decay adaptive-moment optimizer and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ParameterError

Params = dict[str, np.ndarray]


@dataclass
class AdamW:
    """AdamW over a named parameter dict.

    Weight decay is decoupled from the adaptive step and applied only to
    tensors of rank >= 2 (matrices and embedding tables), never to biases or
    layer-norm parameters.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def step(self, params: Params, grads: Params, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for tensor {name!r}")
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay > 0 and params[name].ndim >= 2:
                update = update + self.weight_decay * params[name]
            params[name] -= lr * update


def warmup_linear_decay(step: int, total_steps: int, peak_lr: float, warmup_fraction: float) -> float:
    """Linear warmup to ``peak_lr`` over the first ``warmup_fraction`` of the
    run, then linear decay to zero at ``total_steps``.
    """
    if total_steps <= 0:
        raise ParameterError("total_steps must be positive")
    if not (0.0 < warmup_fraction < 1.0):
        raise ParameterError("warmup_fraction must be in (0, 1)")
    warmup_steps = max(1, round(total_steps * warmup_fraction))
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


def warmup_epoch_anneal(
    step: int, steps_per_epoch: int, total_steps: int, lr_start: float, lr_end: float
) -> float:
    """Fine-tuning schedule: ramp 0 -> lr_start across the first (warmup)
    epoch, then anneal linearly, reaching lr_end on the final step.
    """
    if steps_per_epoch <= 0 or total_steps <= 0:
        raise ParameterError("step counts must be positive")
    warmup = min(steps_per_epoch, total_steps)
    if step < warmup:
        return lr_start * (step + 1) / warmup
    if total_steps == warmup:
        return lr_start
    frac = (step - warmup) / (total_steps - 1 - warmup) if total_steps - 1 > warmup else 1.0
    frac = min(max(frac, 0.0), 1.0)
    return lr_start + (lr_end - lr_start) * frac
