from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update of ``params`` (numpy arrays or Tensors).

    A ``None`` gradient is treated as zero. Moments are kept in float64 so the
    trajectory does not depend on the parameter width.
    """
    arrays = [p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p for p in params]
    if len(grads) != len(arrays):
        raise ValueError(f"adam_step: {len(arrays)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros(a.shape) for a in arrays]
        state.v = [np.zeros(a.shape) for a in arrays]
    for a, m in zip(arrays, state.m):
        if a.shape != m.shape:
            raise ValueError(f"adam_step: state shape {m.shape} != param shape {a.shape}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if g is None:
            g = 0.0
        elif np.shape(g) != a.shape:
            raise ValueError(f"adam_step: grad shape {np.shape(g)} != param shape {a.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        a -= update.astype(a.dtype)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, self.betas[0], self.betas[1], self.eps)
