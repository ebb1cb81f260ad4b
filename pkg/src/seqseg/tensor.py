"""Rank-4 tensor conventions, parameter containers, and init helpers.

Feature maps, images, logits and gradients are all plain numpy arrays of
shape (n, c, h, w), row-major. Tests and gradient checks run in float64;
training may run in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericError

Tensor4 = np.ndarray


def check_tensor4(x, channels=None, name="input", finite=True):
    """Validate an (n, c, h, w) array and return it.

    channels, if given, pins the expected channel count.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ContractViolation(f"{name}: expected rank-4 (n,c,h,w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ContractViolation(f"{name}: all dims must be >= 1, got {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise ContractViolation(f"{name}: expected {channels} channels, got {x.shape[1]}")
    if finite and not np.isfinite(x).all():
        raise NumericError(f"{name}: contains NaN or Inf")
    return x


def check_finite(x, name="value"):
    if not np.isfinite(x).all():
        raise NumericError(f"{name}: contains NaN or Inf")
    return x


@dataclass
class KernelBank:
    """Convolution weights (out_c, in_c, kh, kw) plus a per-output bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 4:
            raise ContractViolation(f"kernel weights must be rank-4, got {self.weights.shape}")
        out_c, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractViolation(f"kernel size must be odd, got {kh}x{kw}")
        if self.bias.shape != (out_c,):
            raise ContractViolation(
                f"bias shape {self.bias.shape} does not match out channels {out_c}"
            )
        check_finite(self.weights, "kernel weights")
        check_finite(self.bias, "kernel bias")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel_hw(self):
        return self.weights.shape[2], self.weights.shape[3]

    def astype(self, dtype):
        return KernelBank(self.weights.astype(dtype), self.bias.astype(dtype))


@dataclass
class BatchNormParams:
    """Per-channel affine batch normalization state.

    running_mean / running_var are updated in place during train-phase
    forward passes; momentum is the weight of the new batch statistic.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name)))
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ContractViolation(f"batchnorm {name} must have shape ({c},)")
        if not 0.0 < self.momentum < 1.0:
            raise ContractViolation(f"batchnorm momentum must be in (0,1), got {self.momentum}")
        if self.eps <= 0.0:
            raise ContractViolation(f"batchnorm eps must be > 0, got {self.eps}")
        if (self.running_var < 0).any():
            raise ContractViolation("batchnorm running variance must be >= 0")

    @property
    def channels(self):
        return self.gamma.shape[0]

    def astype(self, dtype):
        return BatchNormParams(
            self.gamma.astype(dtype),
            self.beta.astype(dtype),
            self.running_mean.astype(dtype),
            self.running_var.astype(dtype),
            self.momentum,
            self.eps,
        )

    @staticmethod
    def identity(channels, momentum=0.1, eps=1e-5, dtype=np.float64):
        return BatchNormParams(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def fan_in_normal(rng, shape, gain=2.0, dtype=np.float64):
    """Scaled-normal init: std = sqrt(gain / fan_in) with fan_in = in_c*kh*kw."""
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(gain / max(fan_in, 1))
    return (rng.standard_normal(shape) * std).astype(dtype)


def new_kernel_bank(rng, out_c, in_c, kh, kw, gain=2.0, dtype=np.float64):
    return KernelBank(
        weights=fan_in_normal(rng, (out_c, in_c, kh, kw), gain=gain, dtype=dtype),
        bias=np.zeros(out_c, dtype=dtype),
    )
