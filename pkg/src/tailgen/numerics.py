"""Optimizer, Lambert-W solver and finite-difference oracle."""
from dataclasses import dataclass, field
import math
import zlib

import numpy as np

from .errors import ConfigError, InputError, NumericError

_INV_E = math.exp(-1.0)


@dataclass
class OptimizerConfig:
    method: str = "adam"
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    # convergence rule for the tail loop: stop when the best loss has not
    # improved by more than `tol` (relative) over `patience` epochs
    patience: int = 10
    tol: float = 1e-4
    # "constant" or "cosine" (step size annealed to 0 over max_epochs)
    schedule: str = "constant"

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer method {self.method!r}")
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def step_size_at(self, epoch):
        """Step size used during 1-based ``epoch``."""
        if self.schedule == "constant" or self.max_epochs == 0:
            return self.step_size
        frac = (epoch - 1) / self.max_epochs
        return 0.5 * self.step_size * (1 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def step(params, grads, state, cfg):
    """One SGD or Adam update.

    ``params`` and ``grads`` are equal-length sequences of arrays (numpy arrays
    or torch tensors; only arithmetic is used). Returns ``(new_params,
    new_state)``; the inputs are not modified.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise InputError(f"got {len(params)} parameter arrays but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if tuple(p.shape) != tuple(g.shape):
            raise InputError(f"shape mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}")

    t = state.count + 1
    lr = cfg.step_size
    if cfg.method == "sgd":
        return [p - lr * g for p, g in zip(params, grads)], OptimizerState(t, state.m, state.v)

    m_prev = state.m or [0 * g for g in grads]
    v_prev = state.v or [0 * g for g in grads]
    b1, b2 = cfg.beta1, cfg.beta2
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(m_prev, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(v_prev, grads)]
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new = [p - lr * (mi / c1) / ((vi / c2) ** 0.5 + cfg.eps) for p, mi, vi in zip(params, m, v)]
    return new, OptimizerState(t, m, v)


def lambert_w(x, max_iter=50):
    """Principal branch W0 of the Lambert W function by Newton's method.

    Iterates in extended precision (``np.longdouble``) and returns that type,
    so ``w * exp(w)`` reproduces ``x`` to ~1e-10 absolute even for x ~ 1e6,
    where the nearest double to W(x) already misses by more than that.

    Initial guess: ``log1p(x)`` for x >= -0.25, otherwise the branch-point
    series ``-1 + sqrt(2 (1 + e x))``.
    """
    x = float(x)
    if not math.isfinite(x):
        raise InputError(f"lambert_w needs a finite argument, got {x}")
    if x < -_INV_E:
        raise InputError(f"lambert_w is undefined for x < -1/e (got {x})")
    if x == 0.0:
        return np.longdouble(0.0)

    X = np.longdouble(x)
    one = np.longdouble(1.0)
    if x >= -0.25:
        w = np.log1p(X)
    else:
        w = -one + np.sqrt(max(np.longdouble(2.0) * (one + np.exp(one) * X), np.longdouble(0.0)))
    if x == -_INV_E:
        return -one

    tiny = np.finfo(np.longdouble).eps
    for _ in range(max_iter):
        ew = np.exp(w)
        f = w * ew - X
        d = ew * (w + one)
        if d == 0:
            break
        dw = f / d
        w = w - dw
        if abs(dw) <= 4 * tiny * max(one, abs(w)):
            return w
    resid = float(abs(w * np.exp(w) - X))
    if resid > 1e-10 * max(1.0, abs(x)):
        raise NumericError(f"lambert_w({x}) did not converge; residual {resid:.3e}")
    return w


def density_from_entropy(entropy, dim):
    """Extension point: density level implied by an entropy estimate.

    Intended to turn a generator entropy estimate into a density via :func:`lambert_w`.
    The conversion rule is not fixed, so this is left for a concrete model.
    """
    raise NotImplementedError("no entropy-to-density rule is defined for this model family")


def finite_diff_grad(f, params, step=1e-5):
    """Central-difference gradient of scalar ``f`` at the flat vector ``params``."""
    if not step > 0:
        raise InputError("step must be > 0")
    p = np.array(params, dtype=np.float64).ravel()
    g = np.zeros_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + step
        fp = float(f(p.copy()))
        p[i] = orig - step
        fm = float(f(p.copy()))
        p[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def derive_seed(root, name):
    """Per-component seed from the root seed.

    Rule: ``SeedSequence(root, spawn_key=(crc32(name),))``, first 32-bit word.
    Components therefore draw from independent streams and adding a new
    component never perturbs the others.
    """
    ss = np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1)[0])
