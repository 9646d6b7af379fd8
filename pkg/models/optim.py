"""AdamW over named Tensors plus the warmup + cosine learning-rate schedule."""
import math
from dataclasses import dataclass

import numpy as np

from models import AliTokError


class NonFiniteLossError(AliTokError, ArithmeticError):
    """Training diverged; carries the step and the loss parts at that step."""

    def __init__(self, step, parts):
        self.step = step
        self.parts = dict(parts)
        shown = ", ".join(f"{k}={float(v):.4g}" for k, v in self.parts.items())
        super().__init__(f"non-finite loss at step {step}: {shown}")


class MissingCheckpointError(AliTokError, FileNotFoundError):
    pass


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-4
    min_lr: float = 1e-5
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 8

    def __post_init__(self):
        if self.base_lr <= 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ValueError(f"OptimizerConfig: need 0 <= min_lr <= base_lr, got {self.min_lr}, {self.base_lr}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError(f"OptimizerConfig: warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.batch_size < 1:
            raise ValueError("OptimizerConfig: batch_size must be positive")


def learning_rate(step, total_steps, cfg):
    """Linear warmup over warmup_frac of the run, then cosine decay to min_lr."""
    warmup = int(cfg.warmup_frac * total_steps)
    if step < warmup:
        return cfg.base_lr * (step + 1) / warmup
    span = max(total_steps - warmup - 1, 1)
    progress = min(max((step - warmup) / span, 0.0), 1.0)
    coeff = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.min_lr + coeff * (cfg.base_lr - cfg.min_lr)


class AdamW:
    """Decoupled weight decay -> moment update -> bias correction -> step."""

    def __init__(self, named_params, cfg):
        self.params = dict(named_params)
        self.cfg = cfg
        self.step_count = 0
        self.exp_avg = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.exp_avg_sq = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def reset_rows(self, tensor, rows):
        """Zero both moments of ``rows`` of a registered parameter."""
        for name, param in self.params.items():
            if param is tensor:
                self.exp_avg[name][rows] = 0.0
                self.exp_avg_sq[name][rows] = 0.0
                return
        raise KeyError(f"parameter {tensor.name!r} is not managed by this optimizer")

    def step(self, lr):
        self.step_count += 1
        cfg = self.cfg
        bias1 = 1.0 - cfg.beta1 ** self.step_count
        bias2 = 1.0 - cfg.beta2 ** self.step_count
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            grad = tensor.grad
            dtype = tensor.data.dtype.type
            self.exp_avg[name] = cfg.beta1 * self.exp_avg[name] + (1.0 - cfg.beta1) * grad
            self.exp_avg_sq[name] = cfg.beta2 * self.exp_avg_sq[name] + (1.0 - cfg.beta2) * grad * grad
            denom = np.sqrt(self.exp_avg_sq[name] / bias2) + cfg.eps
            data = tensor.data
            if cfg.weight_decay:
                data = data * dtype(1.0 - lr * cfg.weight_decay)
            # parameters are rebound, never written in place
            tensor.data = (data - dtype(lr / bias1) * (self.exp_avg[name] / denom)).astype(data.dtype)
