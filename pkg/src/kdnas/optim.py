"""Optimisers and learning-rate schedules for Tensor parameters."""
import math

import numpy as np


def linear_warmup_decay(peak_lr, warmup_steps, total_steps):
    """Linear ramp to ``peak_lr`` over ``warmup_steps`` then linear decay to 0."""
    def lr_at(step):
        if warmup_steps and step < warmup_steps:
            return peak_lr * (step + 1) / warmup_steps
        remaining = max(total_steps - warmup_steps, 1)
        return peak_lr * max(0.0, (total_steps - step) / remaining)
    return lr_at


def exponential(peak_lr, decay):
    return lambda step: peak_lr * decay ** step


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params, betas=(0.9, 0.98), eps=1e-6, weight_decay=0.01):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class RMSProp:
    def __init__(self, params, rho=0.95, eps=1e-7):
        self.params = list(params)
        self.rho = rho
        self.eps = eps
        self.sq = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        for p, sq in zip(self.params, self.sq):
            if p.grad is None:
                continue
            sq *= self.rho
            sq += (1.0 - self.rho) * p.grad * p.grad
            p.data -= lr * p.grad / (np.sqrt(sq) + self.eps)

    def state_arrays(self):
        return {f"opt.sq.{i}": sq for i, sq in enumerate(self.sq)}

    def load_state_arrays(self, arrays):
        for i in range(len(self.sq)):
            self.sq[i] = np.array(arrays[f"opt.sq.{i}"], dtype=np.float64)


def warmup_steps_for(total_steps, fraction):
    return int(math.ceil(total_steps * fraction))
