"""Adam optimizer and early-stopping utilities."""

from __future__ import annotations

import copy

import numpy as np

from .tensor import ShapeError, Tensor

ADAM_DEFAULT_LR = 1e-4


class AdamState:
    """First/second moments and step counter for a named parameter set."""

    def __init__(self, params, lr=ADAM_DEFAULT_LR, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params, grads, state):
    """One in-place Adam update with bias correction.

    ``params`` and ``grads`` are name-keyed; parameters missing a gradient
    are left untouched.  Non-finite gradients are an error state.
    """
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter {p.data.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"adam_step: non-finite gradient for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / correction1
        vhat = v / correction2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


class Adam:
    """Convenience wrapper driving ``adam_step`` from the tensors' own grads."""

    def __init__(self, params: dict[str, Tensor], lr=ADAM_DEFAULT_LR, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.state = AdamState(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class EarlyStopping:
    """Track validation loss; stop after ``patience`` epochs without improvement.

    Snapshots the best parameter values so a finished run can be restored to
    its best-validation checkpoint.
    """

    def __init__(self, params: dict[str, Tensor], patience=5, min_delta=0.0):
        self.params = params
        self.patience = int(patience)
        self.min_delta = float(min_delta)
        self.best_loss = float("inf")
        self.best_epoch = -1
        self.bad_epochs = 0
        self._best_values = None

    def update(self, val_loss, epoch):
        """Record this epoch's validation loss; return True when training should stop."""
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = float(val_loss)
            self.best_epoch = int(epoch)
            self.bad_epochs = 0
            self._best_values = {name: p.data.copy() for name, p in self.params.items()}
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore_best(self):
        if self._best_values is not None:
            for name, p in self.params.items():
                p.data = self._best_values[name].copy()


def snapshot_params(params):
    """Deep copy of parameter values, e.g. for freeze-contract checks."""
    return {name: copy.deepcopy(p.data) for name, p in params.items()}
