"""Dense float64 numerics: activations, adaptive-gradient optimizers, and a
central-difference gradient checker.

Parameters live in plain ``name -> np.ndarray`` dicts so optimizers,
checkpointing, and the gradient checker can walk them uniformly. Everything
here is a pure function of its inputs plus explicit state objects; no module
holds hidden global state.
"""

from __future__ import annotations

import numpy as np

COSINE_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes are inconsistent."""


class NumericsError(ArithmeticError):
    """A numeric result left the finite range."""


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x):
    """Numerically stable logistic function, scalar or array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    A small epsilon in the denominator keeps zero vectors (e.g. padding
    embeddings) well-defined: their similarity to anything is ~0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} vs {b.shape}")
    denom = np.linalg.norm(a) * np.linalg.norm(b) + COSINE_EPS
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Glorot/Xavier uniform init, U(-s, s) with s = sqrt(6/(fan_in+fan_out))."""
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in, fan_out = shape[-1], shape[-2]
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(np.float64)


def ensure_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in '{name}'")


def _as_dict(x) -> dict[str, np.ndarray]:
    if isinstance(x, dict):
        return x
    return {"_": np.asarray(x, dtype=np.float64)}


class Adam:
    """Adam with bias correction. Accumulators are created lazily per name
    and must keep matching the parameter shape afterwards.
    """

    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise DimensionError(f"grad/param shape mismatch for '{name}'")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            if m.shape != p.shape:
                raise DimensionError(f"optimizer state shape mismatch for '{name}'")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            ensure_finite(name, p)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v.")}


class Adagrad:
    """Adagrad: per-coordinate learning rate lr / sqrt(sum g^2 + eps)."""

    kind = "adagrad"

    def __init__(self, lr: float, eps: float = 1e-10):
        self.lr = lr
        self.eps = eps
        self.t = 0
        self.g2: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise DimensionError(f"grad/param shape mismatch for '{name}'")
            acc = self.g2.setdefault(name, np.zeros_like(p))
            if acc.shape != p.shape:
                raise DimensionError(f"optimizer state shape mismatch for '{name}'")
            acc += g * g
            p -= self.lr * g / np.sqrt(acc + self.eps)
            ensure_finite(name, p)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"g2.{k}": v for k, v in self.g2.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.g2 = {k[3:]: v for k, v in arrays.items() if k.startswith("g2.")}


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "adagrad":
        return Adagrad(lr)
    raise ValueError(f"unknown optimizer '{kind}'")


def finite_difference_check(loss_fn, params, analytic_grads, h: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn`` takes no arguments and must be a deterministic function of
    ``params``, which it reads by reference: coordinates are perturbed in
    place, the loss re-evaluated, and the original value restored.

    Returns the max over all coordinates of |a - n| / max(|a|, |n|, 1e-8).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    pdict = _as_dict(params)
    gdict = _as_dict(analytic_grads)
    worst = 0.0
    for name, p in pdict.items():
        g = gdict[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad/param shape mismatch for '{name}'")
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            lp = loss_fn()
            flat_p[i] = orig - h
            lm = loss_fn()
            flat_p[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericsError(f"non-finite loss while probing '{name}'")
            num = (lp - lm) / (2.0 * h)
            rel = abs(flat_g[i] - num) / max(abs(flat_g[i]), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst
