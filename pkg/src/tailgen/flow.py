"""Affine-coupling flow with exact log-density.

The generative direction is ``forward: z -> x``; ``inverse`` maps data back to
the latent space and ``log_density`` applies the change of variables

    log p(x) = log N(G^-1(x); 0, I) - log|det J_G(G^-1(x))|.

All tensors are float64.
"""
import copy
import dataclasses
import math

import numpy as np
import torch
from torch import nn

from .errors import InputError, NumericError, TrainingAborted
from .numerics import OptimizerConfig, OptimizerState, step

DTYPE = torch.float64
LOG_2PI = math.log(2 * math.pi)


def alternating_masks(dim, n_layers):
    """Binary masks; layer ``l`` keeps coordinates with ``(i + l) % 2 == 0`` fixed."""
    return [np.array([(i + l) % 2 == 0 for i in range(dim)], dtype=np.float64) for l in range(n_layers)]


def _mlp(dim, hidden):
    return nn.Sequential(nn.Linear(dim, hidden), nn.Tanh(), nn.Linear(hidden, dim)).to(DTYPE)


class CouplingLayer(nn.Module):
    """``x = z`` on masked coordinates, ``x = z * exp(s) + t`` elsewhere.

    ``s`` and ``t`` only see the masked half. The raw scale output is squashed
    to ``max_log_scale * tanh(raw / max_log_scale)`` so ``exp(s)`` can't
    overflow; the squashing is part of the map, so the inverse stays exact.
    """

    def __init__(self, mask, hidden=64, max_log_scale=4.0):
        super().__init__()
        mask = torch.as_tensor(np.asarray(mask, dtype=np.float64), dtype=DTYPE)
        self.register_buffer("mask", mask)
        self.hidden = hidden
        self.max_log_scale = float(max_log_scale)
        dim = mask.numel()
        self.scale_net = _mlp(dim, hidden)
        self.shift_net = _mlp(dim, hidden)

    def scale_shift(self, cond):
        free = 1 - self.mask
        raw = self.scale_net(cond)
        s = self.max_log_scale * torch.tanh(raw / self.max_log_scale) * free
        t = self.shift_net(cond) * free
        return s, t

    def forward(self, z):
        cond = z * self.mask
        s, t = self.scale_shift(cond)
        x = cond + (1 - self.mask) * (z * torch.exp(s) + t)
        return x, s.sum(-1)

    def inverse(self, x):
        cond = x * self.mask
        s, t = self.scale_shift(cond)
        z = cond + (1 - self.mask) * (x - t) * torch.exp(-s)
        return z, -s.sum(-1)


class FlowModel(nn.Module):
    """Stack of coupling layers over a standard-normal latent."""

    def __init__(self, dim, n_layers=6, hidden=64, max_log_scale=4.0, init="identity", seed=0, init_scale=0.1):
        super().__init__()
        if dim < 2:
            raise InputError(f"coupling flows need dim >= 2, got {dim}")
        if n_layers < 1:
            raise InputError("need at least one coupling layer")
        self.dim = int(dim)
        self.layers = nn.ModuleList(
            CouplingLayer(m, hidden, max_log_scale) for m in alternating_masks(dim, n_layers)
        )
        initialize(self, init, seed, init_scale)

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def hidden(self):
        return self.layers[0].hidden

    @property
    def max_log_scale(self):
        return self.layers[0].max_log_scale

    def forward(self, z):
        """Return ``(G(z), log|det J_G(z)|)``."""
        logdet = torch.zeros(z.shape[:-1], dtype=z.dtype)
        x = z
        for layer in self.layers:
            x, ld = layer(x)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, x, check=True):
        """Return ``(G^-1(x), log|det J_{G^-1}(x)|)``."""
        logdet = torch.zeros(x.shape[:-1], dtype=x.dtype)
        z = x
        for idx in reversed(range(len(self.layers))):
            z, ld = self.layers[idx].inverse(z)
            if check and not bool(torch.isfinite(z).all()):
                raise NumericError(f"non-finite value in inverse at coupling layer {idx}")
            logdet = logdet + ld
        return z, logdet

    def log_prob(self, x):
        z, logdet = self.inverse(x)
        return -0.5 * (z * z).sum(-1) - 0.5 * self.dim * LOG_2PI + logdet

    def clone(self):
        return copy.deepcopy(self)


def initialize(model, mode="identity", seed=0, init_scale=0.1):
    """Seeded parameter init from a numpy stream (independent of torch's RNG).

    Hidden layers get uniform Glorot weights. In ``identity`` mode the output
    layers of every scale/shift net are zero, so the flow starts as the
    identity map; in ``random`` mode they get N(0, init_scale^2) entries.
    """
    if mode not in ("identity", "random"):
        raise InputError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for layer in model.layers if hasattr(model, "layers") else []:
            for net in (layer.scale_net, layer.shift_net):
                first, last = net[0], net[2]
                bound = math.sqrt(6.0 / (first.in_features + first.out_features))
                first.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, first.weight.shape)))
                first.bias.zero_()
                if mode == "identity":
                    last.weight.zero_()
                    last.bias.zero_()
                else:
                    last.weight.copy_(torch.from_numpy(rng.normal(0.0, init_scale, last.weight.shape)))
                    last.bias.copy_(torch.from_numpy(rng.normal(0.0, init_scale, last.bias.shape)))
    return model


def _as_batch(model, a):
    arr = np.asarray(a, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != model.dim:
        raise InputError(f"expected vectors of length {model.dim}, got shape {np.shape(a)}")
    if not np.isfinite(arr).all():
        raise InputError("input contains non-finite values")
    return torch.from_numpy(arr), single


def _out(t, single):
    arr = t.detach().numpy().copy()
    return arr[0] if single else arr


def forward(model, z):
    """G(z) for a vector or a batch of row vectors."""
    t, single = _as_batch(model, z)
    with torch.no_grad():
        x, _ = model(t)
    return _out(x, single)


def inverse(model, x):
    t, single = _as_batch(model, x)
    with torch.no_grad():
        z, _ = model.inverse(t)
    return _out(z, single)


def log_det_jacobian(model, z):
    """log|det J_G(z)| of the forward map."""
    t, single = _as_batch(model, z)
    with torch.no_grad():
        _, ld = model(t)
    return _out(ld, single)


def log_density(model, x):
    t, single = _as_batch(model, x)
    with torch.no_grad():
        lp = model.log_prob(t)
    out = lp.numpy().copy()
    return float(out[0]) if single else out


def sample(model, n, rng_seed=0):
    """``n`` rows of ``G(z)`` with ``z ~ N(0, I)`` drawn from ``default_rng(rng_seed)``."""
    if n < 0:
        raise InputError("n must be >= 0")
    z = np.random.default_rng(rng_seed).standard_normal((n, model.dim))
    if n == 0:
        return np.empty((0, model.dim))
    return forward(model, z)


def mean_nll(model, data):
    t = data if torch.is_tensor(data) else torch.as_tensor(np.asarray(data, dtype=np.float64))
    return -model.log_prob(t).mean()


def fit_mle(model, data, opt=None):
    """Maximum-likelihood training with minibatches.

    Returns ``(model, trace)`` where ``trace[e]`` is the full-data mean NLL
    after ``e`` epochs (``trace[0]`` is before training). The model is trained
    in place. A non-finite loss restores the last good epoch and raises
    :class:`TrainingAborted` carrying that model and the trace so far.
    """
    opt = opt or OptimizerConfig()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != model.dim:
        raise InputError(f"data must be a non-empty (n, {model.dim}) matrix, got {data.shape}")
    if not np.isfinite(data).all():
        raise InputError("data contains non-finite values")

    x_all = torch.from_numpy(data)
    params = [p for p in model.parameters()]
    state = OptimizerState()
    rng = np.random.default_rng(opt.seed)

    with torch.no_grad():
        trace = [float(mean_nll(model, x_all))]
    good = copy.deepcopy(model.state_dict())

    for epoch in range(opt.max_epochs):
        cfg = dataclasses.replace(opt, step_size=opt.step_size_at(epoch + 1), schedule="constant")
        order = rng.permutation(len(data))
        for start in range(0, len(data), opt.batch_size):
            batch = x_all[order[start:start + opt.batch_size]]
            try:
                loss = mean_nll(model, batch)
            except NumericError:
                loss = torch.tensor(math.nan)
            if not torch.isfinite(loss):
                model.load_state_dict(good)
                raise TrainingAborted(f"non-finite NLL in epoch {epoch + 1}", model, trace)
            grads = torch.autograd.grad(loss, params)
            with torch.no_grad():
                new, state = step([p.detach() for p in params], grads, state, cfg)
                for p, q in zip(params, new):
                    p.copy_(q)
        try:
            with torch.no_grad():
                nll = float(mean_nll(model, x_all))
        except NumericError:
            nll = math.nan
        if not math.isfinite(nll):
            model.load_state_dict(good)
            raise TrainingAborted(f"non-finite NLL after epoch {epoch + 1}", model, trace)
        trace.append(nll)
        good = copy.deepcopy(model.state_dict())
    return model, trace
