"""Parameter storage, Adam updates, LR schedule, and the gradient-check oracle."""

from __future__ import annotations

import math
import zlib
from typing import Callable, Iterator, Optional

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad


class MissingGradientError(RuntimeError):
    pass


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible stream per purpose ("init", "mask", ...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


class ParameterStore:
    """Ordered name -> Tensor map with per-parameter Adam moments.

    Iteration order is insertion order; names are unique. Moments are lazily
    created with the shape of their parameter on the first Adam step.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def adam_step(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        """Bias-corrected Adam update; clears gradients afterward."""
        missing = [n for n, t in self._params.items() if t.grad is None]
        if missing:
            raise MissingGradientError(f"no gradient for parameters: {missing[:5]}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - beta1**t
        bc2 = 1.0 - beta2**t
        for name, p in self._params.items():
            g = p.grad
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
            p.grad = None


def warmup_inverse_sqrt(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to `peak_lr`, then inverse-sqrt decay. `step` is 1-based."""
    if warmup_steps <= 0:
        return peak_lr
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * math.sqrt(warmup_steps / step)


def finite_diff_check(
    forward: Callable[[], Tensor],
    store: ParameterStore,
    h: float = 1e-3,
    samples_per_param: int = 4,
    seed: int = 0,
    grads: Optional[dict[str, np.ndarray]] = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    For each parameter, samples up to `samples_per_param` coordinates and
    compares the tape gradient against (f(x+h) - f(x-h)) / 2h, reporting
    max |analytic - fd| / (|fd| + 1e-8). The comparison runs in float64
    (parameters are upcast in place and restored afterward): at h=1e-3 the
    float32 rounding noise in a loss evaluation already exceeds the
    tolerances this check is used with, so double precision is required for
    the difference quotient to be a usable oracle.

    `forward` must be deterministic (re-seed any internal randomness per
    call). `grads` optionally injects precomputed gradients to check instead
    of running the tape (used to validate the checker itself).
    """
    originals = {name: t.data for name, t in store.items()}
    try:
        for _, t in store.items():
            t.data = t.data.astype(np.float64)
            t.grad = None
        loss = forward()
        if not np.isfinite(loss.data):
            raise NonFiniteError(f"gradient check aborted: loss = {float(loss.data)}")
        if grads is None:
            loss.backward()
            analytic = {
                name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in store.items()
            }
        else:
            analytic = {name: np.asarray(g, dtype=np.float64) for name, g in grads.items()}
        rng = np.random.default_rng(seed)
        worst = 0.0
        for name, t in store.items():
            flat = t.data.reshape(-1)
            size = flat.size
            k = min(samples_per_param, size)
            idxs = rng.choice(size, size=k, replace=False)
            aflat = analytic[name].reshape(-1)
            for i in idxs:
                keep = flat[i]
                flat[i] = keep + h
                with no_grad():
                    lp = float(forward().data)
                flat[i] = keep - h
                with no_grad():
                    lm = float(forward().data)
                flat[i] = keep
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise NonFiniteError(f"gradient check aborted at {name}[{i}]")
                fd = (lp - lm) / (2.0 * h)
                rel = abs(float(aflat[i]) - fd) / (abs(fd) + 1e-8)
                worst = max(worst, rel)
        return worst
    finally:
        for name, t in store.items():
            t.data = originals[name]
            t.grad = None
