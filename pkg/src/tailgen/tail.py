"""Tail generator T(z; theta) and its four-term objective.

For a batch ``z_1..z_N`` and reference rows ``x_1..x_M``::

    L_pr = mean_i p(T(z_i))
    L_d  = mean_i min_j ||T(z_i) - x_j||_p
    L_e  = mean_i p(T(z_i)) log p(T(z_i))
    L_sc = mean_{i != j} ||z_i - z_j||_p^q / ||T(z_i) - T(z_j)||_p^q
    L_tot = w_pr L_pr + w_d L_d + w_e L_e + w_sc L_sc

where ``p`` is the frozen flow density. Per sample, ``p + w_e p log p`` is
minimised at ``p = exp(-1 - 1/w_e)``, so ``w_e`` sets the density level the
samples settle on; ``w_d`` keeps them near the data and ``w_sc`` spreads them.
"""
from dataclasses import asdict, dataclass
import copy
import dataclasses
import math

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InputError, ModeCollapseError, TrainingAborted
from .flow import DTYPE, FlowModel, initialize
from .numerics import OptimizerConfig, OptimizerState, step

TERMS = ("L_pr", "L_d", "L_e", "L_sc", "L_tot")


@dataclass
class LossWeights:
    w_pr: float = 1.0
    w_d: float = 0.01
    w_e: float = 0.25
    w_sc: float = 1e-4
    p: float = 2.0
    q: float = 2.0
    N: int = 512
    M: int | None = None
    log_domain: bool = False
    distance_target: str = "data"

    def __post_init__(self):
        if self.w_pr != 1.0:
            raise ConfigError(f"w_pr is fixed at 1, got {self.w_pr}")
        for name in ("w_d", "w_e", "w_sc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.p < 1 or self.q < 1:
            raise ConfigError("p and q must be >= 1")
        if self.N < 1:
            raise ConfigError("batch size N must be >= 1")
        if self.M is not None and self.M < self.N:
            raise ConfigError(f"need N <= M, got N={self.N}, M={self.M}")
        if self.distance_target not in ("data", "flow"):
            raise ConfigError("distance_target must be 'data' or 'flow'")

    def target_density(self):
        """Density level minimising ``p + w_e p log p`` (inf when w_e = 0)."""
        return math.exp(-1.0 - 1.0 / self.w_e) if self.w_e > 0 else 0.0


def entropy_weight_for_level(level):
    """``w_e`` whose per-sample optimum ``exp(-1 - 1/w_e)`` equals ``level``."""
    if not 0 < level < math.exp(-1.0):
        raise ConfigError(f"target density level must lie in (0, 1/e), got {level}")
    return 1.0 / (-1.0 - math.log(level))


@dataclass
class LossTerms:
    L_pr: float
    L_d: float
    L_e: float
    L_sc: float
    L_tot: float

    def as_dict(self):
        return asdict(self)


class _ResidualMLP(nn.Module):
    def __init__(self, dim, hidden, depth):
        super().__init__()
        self.inp = nn.Linear(dim, hidden)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Tanh(), nn.Linear(hidden, hidden)) for _ in range(max(depth - 2, 1))
        )
        self.out = nn.Linear(hidden, dim)

    def forward(self, z):
        h = self.inp(z)
        for b in self.blocks:
            h = h + b(h)
        return z + self.out(torch.tanh(h))


def _mlp(dim, hidden, depth):
    layers, width = [], dim
    for _ in range(depth - 1):
        layers += [nn.Linear(width, hidden), nn.Tanh()]
        width = hidden
    layers.append(nn.Linear(width, dim))
    return nn.Sequential(*layers)


class TailNet(nn.Module):
    """Generator ``T: R^d -> R^d``.

    Architectures:

    * ``coupling``: a copy of the density flow's shape.
    * ``flow_head``: the coupling stack followed by a feed-forward
      displacement, ``T(z) = b + H(b)`` with ``b = G(z)``. ``H`` starts at
      zero, so ``T == G`` at step 0, but unlike the bijective stack it can
      fold mass onto a thin level set.
    * ``mlp``: tanh feed-forward ``depth`` layers deep.
    * ``residual``: ``z + H(z)`` with a residual hidden stack.
    """

    ARCHS = ("coupling", "flow_head", "mlp", "residual")

    def __init__(self, dim, arch="mlp", hidden=64, depth=3, init_mode="random", n_layers=6,
                 flow_hidden=None, max_log_scale=4.0):
        super().__init__()
        if arch not in self.ARCHS:
            raise ConfigError(f"unknown tail architecture {arch!r}")
        if init_mode not in ("from_density", "random"):
            raise ConfigError(f"unknown init mode {init_mode!r}")
        self.dim, self.arch, self.hidden, self.depth = int(dim), arch, int(hidden), int(depth)
        self.init_mode = init_mode
        self.flow = None
        self.head = None
        if arch in ("coupling", "flow_head"):
            self.flow = FlowModel(dim, n_layers, flow_hidden or hidden, max_log_scale)
        if arch in ("flow_head", "mlp"):
            self.head = _mlp(dim, hidden, depth).to(DTYPE)
        elif arch == "residual":
            self.head = _ResidualMLP(dim, hidden, depth).to(DTYPE)

    def forward(self, z):
        if self.arch == "coupling":
            return self.flow(z)[0]
        if self.arch == "flow_head":
            b = self.flow(z)[0]
            return b + self.head(b)
        return self.head(z)

    def spec(self):
        d = {"dim": self.dim, "arch": self.arch, "hidden": self.hidden, "depth": self.depth,
             "init_mode": self.init_mode}
        if self.flow is not None:
            d.update(n_layers=self.flow.n_layers, flow_hidden=self.flow.hidden,
                     max_log_scale=self.flow.max_log_scale)
        return d


def _init_linear(module, rng, init_scale, zero_last=False):
    linears = [m for m in module.modules() if isinstance(m, nn.Linear)]
    with torch.no_grad():
        for k, lin in enumerate(linears):
            if zero_last and k == len(linears) - 1:
                lin.weight.zero_()
            else:
                std = init_scale * math.sqrt(2.0 / (lin.in_features + lin.out_features))
                lin.weight.copy_(torch.from_numpy(rng.normal(0.0, std, lin.weight.shape)))
            lin.bias.zero_()


def init_tail(density, mode="from_density", seed=0, arch=None, hidden=64, depth=3, init_scale=1.0):
    """Build a tail generator.

    ``from_density`` copies the flow's parameters (``coupling`` or
    ``flow_head``, default ``flow_head``), so ``T(z) == G(z)`` exactly at step
    0 and training starts inside the distribution. ``random`` draws weights
    from ``default_rng(seed)`` (default ``mlp``); the map then starts near a
    squashed copy of the latent, generally not on the data.
    """
    rng = np.random.default_rng(seed)
    if mode == "from_density":
        arch = arch or "flow_head"
        if arch not in ("coupling", "flow_head"):
            raise ConfigError(f"from_density init needs a coupling-based architecture, not {arch!r}")
        tail = TailNet(density.dim, arch, hidden, depth, init_mode=mode, n_layers=density.n_layers,
                       flow_hidden=density.hidden, max_log_scale=density.max_log_scale)
        try:
            tail.flow.load_state_dict(density.state_dict())
        except RuntimeError as exc:
            raise ConfigError(f"density model does not fit the tail architecture: {exc}") from exc
        if tail.head is not None:
            _init_linear(tail.head, rng, init_scale, zero_last=True)
        return tail
    if mode != "random":
        raise ConfigError(f"unknown init mode {mode!r}")
    arch = arch or "mlp"
    tail = TailNet(density.dim, arch, hidden, depth, init_mode=mode, n_layers=density.n_layers,
                   flow_hidden=density.hidden, max_log_scale=density.max_log_scale)
    if tail.flow is not None:
        initialize(tail.flow, "random", seed, 0.1)
    if tail.head is not None:
        _init_linear(tail.head, rng, init_scale)
    return tail


def _pow_norm(diff, p, q, pad=None):
    """||diff||_p ** q along the last axis; ``pad`` is added inside the norm."""
    if math.isinf(p):
        n = diff.abs().amax(-1)
        return (n if pad is None else n + pad) ** q
    base = (diff * diff).sum(-1) if p == 2 else (diff.abs() ** p).sum(-1)
    if pad is not None:
        base = base + pad
    return base if q == p else base ** (q / p)


def nearest_distance(y, x, p=2.0, candidates=4):
    """min_j ||y_i - x_j||_p, differentiable in ``y``.

    For p = 2 the candidate neighbours come from the fast (matrix-product)
    distance without grad; the exact distance is then taken over the
    ``candidates`` closest rows, so coincident points give exactly 0.
    """
    if p == 2 and x.shape[0] > candidates:
        with torch.no_grad():
            approx = torch.cdist(y, x, compute_mode="use_mm_for_euclid_dist")
            idx = approx.topk(candidates, dim=1, largest=False).indices
        diff = y[:, None, :] - x[idx]
        return torch.linalg.vector_norm(diff, dim=-1).min(dim=1).values
    if math.isinf(p):
        return (y[:, None, :] - x[None, :, :]).abs().amax(-1).min(dim=1).values
    return torch.cdist(y, x, p=p, compute_mode="donot_use_mm_for_euclid_dist").min(dim=1).values


def loss_tensors(tail, z, data, density, w):
    """Differentiable loss terms (dict of 0-d tensors)."""
    N = z.shape[0]
    if w.M is not None:
        if data.shape[0] < w.M:
            raise InputError(f"need at least M={w.M} reference rows, got {data.shape[0]}")
        data = data[: w.M]
    if data.shape[0] < 1:
        raise InputError("reference data is empty")
    tz = tail(z)

    logp = density.log_prob(tz)
    dens = torch.exp(logp)
    L_pr = logp.mean() if w.log_domain else dens.mean()
    L_e = (dens * logp).mean()

    L_d = nearest_distance(tz, data, w.p).mean()

    if N >= 2:
        eye = torch.eye(N, dtype=z.dtype)
        off = eye == 0
        # unit padding on the diagonal keeps the pow gradient finite there
        tx = _pow_norm(tz[:, None, :] - tz[None, :, :], w.p, w.q, pad=eye)
        zeros = (tx == 0) & off
        if bool(zeros.any()):
            i, j = (int(v) for v in torch.nonzero(zeros)[0])
            raise ModeCollapseError(i, j)
        zx = _pow_norm(z[:, None, :] - z[None, :, :], w.p, w.q)
        L_sc = (zx / tx.clamp_min(1e-12))[off].mean()
    elif w.w_sc == 0:
        L_sc = torch.zeros((), dtype=z.dtype)
    else:
        raise InputError("the scattering term needs a batch of at least two latents")

    L_tot = w.w_pr * L_pr + w.w_d * L_d + w.w_e * L_e + w.w_sc * L_sc
    return {"L_pr": L_pr, "L_d": L_d, "L_e": L_e, "L_sc": L_sc, "L_tot": L_tot}


def _tensor(a, dim, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise InputError(f"{name} must be an (n, {dim}) matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains non-finite values")
    return torch.from_numpy(arr)


def loss_terms(tail, z_batch, data, density, w):
    """Evaluate all five loss values as floats."""
    z = _tensor(z_batch, tail.dim, "z_batch")
    x = _tensor(data, tail.dim, "data")
    with torch.no_grad():
        t = loss_tensors(tail, z, x, density, w)
    terms = {k: float(v) for k, v in t.items()}
    # recombine in float so the decomposition is exact for the reported values
    terms["L_tot"] = w.w_pr * terms["L_pr"] + w.w_d * terms["L_d"] + w.w_e * terms["L_e"] + w.w_sc * terms["L_sc"]
    return LossTerms(**terms)


def _frozen(density):
    d = copy.deepcopy(density)
    for p in d.parameters():
        p.requires_grad_(False)
    return d


def train_tail(tail, density, data, w=None, opt=None, eval_size=512, max_collapse=5):
    """Minimise L_tot over the tail parameters; the density stays fixed.

    Every step draws a fresh latent batch of size ``N``; an epoch is
    ``ceil(M / N)`` steps. ``trace[e]`` holds the five terms on a fixed
    evaluation batch after ``e`` epochs (``trace[0]`` before training).
    Training stops early once the best L_tot has improved by less than
    ``opt.tol`` (relative) over ``opt.patience`` epochs.
    """
    w = w or LossWeights()
    opt = opt or OptimizerConfig()
    density = _frozen(density)
    x = _tensor(data, tail.dim, "data")
    if w.M is not None:
        x = x[: w.M]
    M = x.shape[0]
    if w.N > M:
        raise InputError(f"batch size N={w.N} exceeds sample size M={M}")

    rng = np.random.default_rng(opt.seed)
    z_eval = torch.from_numpy(rng.standard_normal((max(eval_size, w.N), tail.dim)))
    if w.distance_target == "flow":
        with torch.no_grad():
            x = density(torch.from_numpy(rng.standard_normal((M, tail.dim))))[0]

    def evaluate():
        try:
            with torch.no_grad():
                t = loss_tensors(tail, z_eval, x, density, w)
        except ModeCollapseError as exc:
            tail.load_state_dict(good)
            raise TrainingAborted(f"mode collapse on the evaluation batch: {exc}", tail, trace) from exc
        return {k: float(v) for k, v in t.items()}

    params = list(tail.parameters())
    state = OptimizerState()
    trace = []
    good = copy.deepcopy(tail.state_dict())
    trace.append(evaluate())
    steps = math.ceil(M / w.N)
    best, best_epoch = trace[0]["L_tot"], 0
    collapses = 0

    for epoch in range(1, opt.max_epochs + 1):
        cfg = dataclasses.replace(opt, step_size=opt.step_size_at(epoch), schedule="constant")
        for _ in range(steps):
            z = torch.from_numpy(rng.standard_normal((w.N, tail.dim)))
            try:
                loss = loss_tensors(tail, z, x, density, w)["L_tot"]
            except ModeCollapseError as exc:
                collapses += 1
                if collapses >= max_collapse:
                    tail.load_state_dict(good)
                    raise TrainingAborted(f"persistent mode collapse: {exc}", tail, trace) from exc
                continue
            collapses = 0
            if not torch.isfinite(loss):
                tail.load_state_dict(good)
                raise TrainingAborted(f"non-finite L_tot in epoch {epoch}", tail, trace)
            grads = torch.autograd.grad(loss, params)
            with torch.no_grad():
                new, state = step([p.detach() for p in params], grads, state, cfg)
                for p, q in zip(params, new):
                    p.copy_(q)
        row = evaluate()
        if not all(math.isfinite(v) for v in row.values()):
            tail.load_state_dict(good)
            raise TrainingAborted(f"non-finite loss after epoch {epoch}", tail, trace)
        trace.append(row)
        good = copy.deepcopy(tail.state_dict())
        if row["L_tot"] < best - opt.tol * max(abs(best), 1e-12):
            best, best_epoch = row["L_tot"], epoch
        elif epoch - best_epoch >= opt.patience:
            break
    return tail, trace


def generate_boundary(tail, n, seed=0):
    """``T`` applied to ``n`` standard-normal draws from ``default_rng(seed)``."""
    if n < 0:
        raise InputError("n must be >= 0")
    z = np.random.default_rng(seed).standard_normal((n, tail.dim))
    if n == 0:
        return np.empty((0, tail.dim))
    with torch.no_grad():
        return tail(torch.from_numpy(z)).numpy().copy()
