"""
Optimizers and learning-rate schedules.
Momentum SGD drives the network weights and Adam drives the architecture alphas.
"""

import logging
import math
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ArgumentError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


def _check_lr(lr: float):
    # lr == 0 is a legal no-op update
    if lr < 0 or not math.isfinite(lr):
        raise ArgumentError(f"learning rate must be finite and non-negative, got {lr}")


def _check_pairs(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
    for name, grad in grads.items():
        if name not in params:
            raise ArgumentError(f"gradient for unknown parameter {name!r}")
        if grad is not None and grad.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} does not match parameter {params[name].shape}")


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, Optional[np.ndarray]],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 3e-4,
    state: Optional[Dict[str, np.ndarray]] = None,
) -> Dict[str, np.ndarray]:
    """
    One momentum-SGD update (heavy-ball, L2 decay folded into the gradient).

    Args:
        params: Parameter arrays by name
        grads: Gradient arrays by name; None or missing entries are skipped
        lr: Learning rate
        momentum: Momentum factor
        weight_decay: L2 coefficient
        state: Momentum buffers by name, updated in place

    Returns:
        Updated parameter arrays by name
    """
    _check_lr(lr)
    _check_pairs(params, grads)
    state = {} if state is None else state
    updated = dict(params)
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        d = grad + weight_decay * value if weight_decay else grad
        if momentum:
            buf = state.get(name)
            buf = d.copy() if buf is None else momentum * buf + d
            state[name] = buf
            d = buf
        updated[name] = (value - lr * d).astype(value.dtype, copy=False)
    return updated


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, Optional[np.ndarray]],
    lr: float,
    betas: Tuple[float, float] = (0.5, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    state: Optional[Dict[str, dict]] = None,
) -> Dict[str, np.ndarray]:
    """
    One bias-corrected Adam update.

    Args:
        params: Parameter arrays by name
        grads: Gradient arrays by name
        lr: Learning rate
        betas: First and second moment decay
        eps: Denominator stabilizer
        weight_decay: L2 coefficient added to the gradient
        state: Per-parameter moments and step counts, updated in place

    Returns:
        Updated parameter arrays by name
    """
    _check_lr(lr)
    _check_pairs(params, grads)
    state = {} if state is None else state
    beta1, beta2 = betas
    updated = dict(params)
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if weight_decay:
            grad = grad + weight_decay * value
        slot = state.setdefault(name, {"step": 0, "m": np.zeros_like(value), "v": np.zeros_like(value)})
        slot["step"] += 1
        slot["m"] = beta1 * slot["m"] + (1 - beta1) * grad
        slot["v"] = beta2 * slot["v"] + (1 - beta2) * grad * grad
        m_hat = slot["m"] / (1 - beta1 ** slot["step"])
        v_hat = slot["v"] / (1 - beta2 ** slot["step"])
        updated[name] = (value - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(value.dtype, copy=False)
    return updated


def cosine_lr(epoch: int, epochs: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine-annealed learning rate for a zero-based epoch."""
    if epochs <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * epoch / epochs))


def clip_grad_norm(grads: Dict[str, Optional[np.ndarray]], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * factor
    return total


class Optimizer:
    """Stateful wrapper that applies an update rule to named leaf tensors."""

    def __init__(self, params: Dict[str, Tensor], lr: float):
        _check_lr(lr)
        self.params = params
        self.lr = lr
        self.state: Dict[str, object] = {}

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def gradients(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: t.grad for name, t in self.params.items()}

    def _apply(self, updated: Dict[str, np.ndarray]):
        for name, value in updated.items():
            self.params[name].data = value

    def step(self):
        raise NotImplementedError

    def state_dict(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float = 0.025,
        momentum: float = 0.9,
        weight_decay: float = 3e-4,
        grad_clip: float = 5.0,
    ):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip

    def step(self):
        grads = self.gradients()
        if self.grad_clip:
            clip_grad_norm(grads, self.grad_clip)
        arrays = {name: t.data for name, t in self.params.items()}
        self._apply(sgd_step(arrays, grads, self.lr, self.momentum, self.weight_decay, self.state))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"momentum/{name}": buf for name, buf in self.state.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        self.state = {key.split("/", 1)[1]: value.copy() for key, value in arrays.items() if key.startswith("momentum/")}


class Adam(Optimizer):
    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float = 3e-4,
        betas: Tuple[float, float] = (0.5, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-3,
    ):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self):
        arrays = {name: t.data for name, t in self.params.items()}
        self._apply(adam_step(arrays, self.gradients(), self.lr, self.betas, self.eps, self.weight_decay, self.state))

    def state_dict(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for name, slot in self.state.items():
            arrays[f"m/{name}"] = slot["m"]
            arrays[f"v/{name}"] = slot["v"]
            arrays[f"step/{name}"] = np.asarray(slot["step"])
        return arrays

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        self.state = {}
        for key, value in arrays.items():
            kind, name = key.split("/", 1)
            slot = self.state.setdefault(name, {"step": 0})
            slot[kind] = int(value) if kind == "step" else value.copy()
