"""Central finite-difference verification of analytic gradients.

All checks run at 64-bit; 32-bit finite differences are too noisy to
distinguish a correct adjoint from a subtly wrong one.
"""

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(f, x, h=1e-5, sample=None, rng=None, eps=1e-12):
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor; x must be float64. Per element:
    |analytic - (f(x+h*e) - f(x-h*e)) / 2h| / (|analytic| + |numeric| + eps).

    sample, when given, checks only that many elements (deterministic choice
    via rng or a fixed default seed); large tensors are otherwise O(2*numel)
    forward passes.
    """
    if h <= 0:
        raise ValueError("grad_check requires h > 0")
    if x.dtype != np.float64:
        raise ValueError("grad_check requires a float64 input tensor")

    probe = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    out = f(probe)
    if out.size != 1:
        raise ValueError(f"grad_check target must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = probe.grad.data.reshape(-1)

    flat = x.data.reshape(-1).copy()
    n = flat.size
    if sample is not None and sample < n:
        if rng is None:
            rng = np.random.default_rng(0)
        indices = rng.choice(n, size=sample, replace=False)
        indices.sort()
    else:
        indices = np.arange(n)

    worst = 0.0
    work = flat.copy()
    with no_grad():
        for i in indices:
            orig = work[i]
            work[i] = orig + h
            hi = float(f(Tensor(work.reshape(x.shape), dtype=np.float64)).data)
            work[i] = orig - h
            lo = float(f(Tensor(work.reshape(x.shape), dtype=np.float64)).data)
            work[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
            worst = max(worst, err)
    return worst


def param_grad_check(build, param, h=1e-5, sample=None, rng=None, eps=1e-12):
    """Finite-difference check of the gradient landing on one parameter tensor.

    build() reruns the forward pass (reading param.data fresh) and returns a
    scalar Tensor. The analytic gradient is taken from param.grad after one
    backward; the numeric one perturbs param.data elementwise.
    """
    if param.dtype != np.float64:
        raise ValueError("param_grad_check requires a float64 parameter")
    param.grad = None
    out = build()
    if out.size != 1:
        raise ValueError(f"param_grad_check target must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = param.grad.data.reshape(-1)

    flat = param.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        if rng is None:
            rng = np.random.default_rng(0)
        indices = rng.choice(n, size=sample, replace=False)
        indices.sort()
    else:
        indices = np.arange(n)

    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            hi = float(build().data)
            flat[i] = orig - h
            lo = float(build().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
            worst = max(worst, err)
    param.grad = None
    return worst
