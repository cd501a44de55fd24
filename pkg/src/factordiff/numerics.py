"""Seeded randomness, the AdamW optimizer, and finite-difference checking.

Everything here is float64.  The random stream is a counter-based Philox
generator keyed through numpy's ``SeedSequence``: the same seed and call
sequence produce bit-identical output, and child streams derived from
``Rng.child`` depend only on (seed, key path), never on draw order, so
per-sample parallelism cannot change results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Sequence

import numpy as np

__all__ = ["Rng", "gauss", "OptimState", "adamw_step", "central_diff", "grad_check"]


class Rng:
    """Deterministic random source (Philox, counter-based).

    ``seed`` is the 64-bit master seed; ``key`` is a tuple of non-negative
    integers identifying a derived stream.  Instances are single-owner:
    share the seed, not the object.
    """

    def __init__(self, seed: int, key: tuple = ()):
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *indices: int) -> "Rng":
        """Independent stream for (seed, key + indices); order-free derivation."""
        return Rng(self.seed, self.key + tuple(indices))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._gen.uniform(low, high, size=shape)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


def gauss(rng: Rng, shape) -> np.ndarray:
    """I.i.d. standard normal array of the given (nonempty) shape."""
    shape = tuple(shape)
    if len(shape) == 0:
        raise ValueError("shape must be nonempty")
    return rng.normal(shape)


@dataclass
class OptimState:
    """AdamW state: decoupled weight decay, bias-corrected moments.

    Defaults are desk-scale (lr=1e-3); large-scale runs conventionally use
    far smaller rates, which remain configurable.
    """

    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimState) -> None:
    """One AdamW update, in place, over parameters in sorted-name order.

    Weight decay is decoupled: with zero gradient the parameter shrinks by
    exactly lr * wd * p.  With weight_decay=0 this is plain Adam.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if state.weight_decay != 0.0:
            p -= state.lr * state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def central_diff(f: Callable[[Dict[str, np.ndarray]], float],
                 params: Mapping[str, np.ndarray], h: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central finite-difference gradient of a scalar function, elementwise."""
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name in sorted(work):
        arr = work[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(work))
            flat[i] = orig - h
            fm = float(f(work))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError(f"non-finite value while differencing {name!r}")
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def grad_check(f: Callable[[Dict[str, np.ndarray]], float],
               params: Mapping[str, np.ndarray],
               analytic: Mapping[str, np.ndarray],
               h: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central differences.

    The per-element denominator is max(|numeric|, |analytic|, floor); the
    floor keeps genuinely dead entries (both sides ~0) from dominating.
    """
    numeric = central_diff(f, params, h=h)
    worst = 0.0
    for name in sorted(analytic):
        a = np.asarray(analytic[name], dtype=np.float64)
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
