"""Adam with bias correction and per-group learning rates."""

from dataclasses import dataclass, field

import numpy as np

from handid.errors import StateError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **kw):
        shape = param.data.shape
        return cls(np.zeros(shape, dtype=param.data.dtype), np.zeros(shape, dtype=param.data.dtype), **kw)


def adam_step(param, state, lr):
    """Apply one Adam update to ``param`` in place and return it."""
    if param.grad is None:
        raise StateError(f"adam_step: {param.name or 'parameter'} has no gradient")
    g = param.grad
    dt = param.data.dtype
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * (g * g)
    m_hat = state.m / dt.type(1 - b1 ** state.step)
    v_hat = state.v / dt.type(1 - b2 ** state.step)
    param.data -= dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(state.eps))
    return param


@dataclass
class ParamGroup:
    name: str
    params: list
    lr: float


@dataclass
class Adam:
    """Optimizer over named parameter groups.

    Frozen parameters (``requires_grad`` false) are skipped and their state
    is left untouched.
    """

    groups: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def state_for(self, param):
        st = self.states.get(param.name)
        if st is None:
            st = AdamState.zeros_like(param, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            self.states[param.name] = st
        return st

    def group(self, name):
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def trainable(self):
        for g in self.groups:
            for p in g.params:
                if p.requires_grad:
                    yield g, p

    def step(self):
        for g, p in self.trainable():
            if p.grad is None:
                # unreached by this loss (e.g. a head whose type is absent from the loss)
                continue
            adam_step(p, self.state_for(p), g.lr)

    def zero_grad(self):
        for g in self.groups:
            for p in g.params:
                p.grad = None


def clip_global_norm(params, max_norm):
    """Scale gradients so their joint L2 norm is at most ``max_norm``.

    Returns (pre-clip norm, clipped flag).
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= g.dtype.type(scale)
        return total, True
    return total, False
