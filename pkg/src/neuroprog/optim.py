"""Parameter-update rules: SGD (optional momentum), Adam, and SAM wrapped
around either base rule.

SAM ascends `rho` along the normalized global gradient, re-differentiates
at the perturbed point, restores the original weights bitwise, and applies
the base update with the perturbed gradient. Exactly two forward-backward
executions per step.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import backward


class SGD:
    def __init__(self, named_params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data)
                         for name, t in self.params} if momentum else None
        self.step_count = 0

    def step(self):
        self.step_count += 1
        for name, t in self.params:
            if t.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            if self.velocity is not None:
                v = self.velocity[name]
                v *= self.momentum
                v += g
                g = v
            t.data -= self.lr * g


class Adam:
    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}
        self.step_count = 0

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, t in self.params:
            if t.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class MultiOptimizer:
    """Steps several optimizers over disjoint parameter groups as one.

    Used to give the domain head its own (faster) learning rate while the
    rest of the model trains at the base rate. Each group can carry a
    per-epoch decay factor; the faster adversarial group is annealed so
    the min-max game converges instead of hovering at the step-size
    noise floor.
    """

    def __init__(self, optimizers, decay=None):
        self.optimizers = list(optimizers)
        self.decay = list(decay) if decay else [1.0] * len(self.optimizers)
        if len(self.decay) != len(self.optimizers):
            raise ContractError("one decay factor per optimizer group")

    @property
    def params(self):
        return [p for o in self.optimizers for p in o.params]

    def step(self):
        for o in self.optimizers:
            o.step()

    def end_epoch(self):
        for o, d in zip(self.optimizers, self.decay):
            o.lr *= d


class SAM:
    """Sharpness-aware wrapper: perturbation uses the global L2 norm over
    all trainable parameters. A zero gradient skips the perturbation and
    falls through to the base step (flat point)."""

    def __init__(self, base, rho=0.05):
        if rho < 0:
            raise ContractError(f"sam rho must be >= 0, got {rho}")
        self.base = base
        self.rho = rho
        self.loss_evals = 0

    @property
    def params(self):
        return self.base.params

    def end_epoch(self):
        if hasattr(self.base, "end_epoch"):
            self.base.end_epoch()

    def _eval(self, loss_fn):
        for _, t in self.params:
            t.zero_grad()
        loss = loss_fn()
        backward(loss)
        self.loss_evals += 1
        return loss

    def step(self, loss_fn):
        loss = self._eval(loss_fn)
        grads = [t.grad for _, t in self.params]
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
        if norm == 0.0 or self.rho == 0.0:
            self.base.step()
            return loss
        saved = [t.data.copy() for _, t in self.params]
        scale = self.rho / norm
        for (_, t), g in zip(self.params, grads):
            t.data += scale * g
        self._eval(loss_fn)
        for (_, t), w in zip(self.params, saved):
            t.data = w  # bitwise restore
        self.base.step()
        return loss
