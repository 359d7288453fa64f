"""Synthetic multimodal data, leave-one-out splits, OoD sets and IDX/CSV I/O."""
from dataclasses import dataclass, field
import csv
import math
import struct

import numpy as np

from .errors import ConfigError, FormatError, InputError


@dataclass
class ClusteredDataset:
    """Samples with dense integer class labels ``1..K``."""

    x: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 2:
            raise InputError(f"samples must be a 2-D matrix, got shape {self.x.shape}")
        if self.labels.shape != (self.x.shape[0],):
            raise InputError("need exactly one label per sample")
        if not np.isfinite(self.x).all():
            raise InputError("samples contain non-finite values")
        present = np.unique(self.labels)
        if present.size and not np.array_equal(present, np.arange(1, present.size + 1)):
            raise InputError(f"class labels must be dense 1..K, got {present.tolist()}")

    @classmethod
    def from_groups(cls, groups):
        xs = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in groups]
        labels = np.concatenate([np.full(len(g), i + 1) for i, g in enumerate(xs)])
        return cls(np.vstack(xs), labels)

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def n_classes(self):
        return int(self.labels.max()) if self.labels.size else 0

    def __len__(self):
        return self.x.shape[0]

    def members(self, k):
        """Rows of class ``k`` (1-based)."""
        if not 1 <= k <= self.n_classes:
            raise InputError(f"class {k} does not exist (K = {self.n_classes})")
        return self.x[self.labels == k]

    def subset(self, idx):
        return ClusteredDataset(self.x[idx], self.labels[idx])


@dataclass
class Component:
    center: tuple
    scale: float
    weight: float


@dataclass
class DistributionSpec:
    """Mixture of ``gaussian_mixture`` blobs or thin ``rings`` (radius = 4 * scale)."""

    kind: str = "gaussian_mixture"
    components: list = field(default_factory=list)
    seed: int = 0
    disjoint: bool = False

    def __post_init__(self):
        self.components = [c if isinstance(c, Component) else Component(*c) for c in self.components]
        if self.kind not in ("gaussian_mixture", "rings"):
            raise ConfigError(f"unknown distribution kind {self.kind!r}")
        if not self.components:
            raise ConfigError("distribution needs at least one component")
        dims = {len(c.center) for c in self.components}
        if len(dims) != 1:
            raise ConfigError("all component centers must have the same length")
        if any(not c.scale > 0 for c in self.components):
            raise ConfigError("component scales must be positive")
        w = np.array([c.weight for c in self.components])
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"component weights must be non-negative and sum to 1, got {w.tolist()}")
        if self.disjoint:
            gap = 6 * max(c.scale for c in self.components)
            if self.kind == "rings":
                gap += 2 * 4 * max(c.scale for c in self.components)
            cs = np.array([c.center for c in self.components], dtype=float)
            for i in range(len(cs)):
                for j in range(i + 1, len(cs)):
                    if np.linalg.norm(cs[i] - cs[j]) < gap:
                        raise ConfigError(f"components {i + 1} and {j + 1} are closer than {gap}")

    @property
    def dim(self):
        return len(self.components[0].center)


def tri_gauss(seed=0):
    """Reference fixture: three disjoint blobs at (0,0), (8,0), (0,8), scale 0.7."""
    third = 1.0 / 3.0
    return DistributionSpec(
        "gaussian_mixture",
        [((0.0, 0.0), 0.7, third), ((8.0, 0.0), 0.7, third), ((0.0, 8.0), 0.7, third)],
        seed=seed,
        disjoint=True,
    )


PRESETS = {"tri-gauss": tri_gauss}


def generate(spec, n):
    """Draw ``n`` labelled samples. Counts per component are multinomial."""
    K = len(spec.components)
    if n < K:
        raise InputError(f"need n >= K = {K}, got {n}")
    rng = np.random.default_rng(spec.seed)
    w = np.array([c.weight for c in spec.components])
    labels = rng.choice(K, size=n, p=w)
    # make sure every component with positive weight shows up at least once
    for k in np.flatnonzero(w > 0):
        if not (labels == k).any():
            labels[rng.integers(n)] = k
    x = np.empty((n, spec.dim))
    for k, c in enumerate(spec.components):
        rows = labels == k
        m = int(rows.sum())
        center = np.asarray(c.center, dtype=np.float64)
        if spec.kind == "gaussian_mixture":
            x[rows] = center + c.scale * rng.standard_normal((m, spec.dim))
        else:
            u = rng.standard_normal((m, spec.dim))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            r = 4 * c.scale + 0.25 * c.scale * rng.standard_normal((m, 1))
            x[rows] = center + r * u
    # relabel densely in case some zero-weight component is absent
    present = np.unique(labels)
    dense = np.searchsorted(present, labels) + 1
    return ClusteredDataset(x, dense)


def train_test_split(ds, test_fraction=0.2, seed=0):
    if not 0 < test_fraction < 1:
        raise InputError("test_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    test, train = np.sort(order[:n_test]), np.sort(order[n_test:])
    return ds.subset(train), ds.subset(test)


def leave_one_out(ds, k):
    """Split off class ``k``; the rest is relabelled densely keeping label order."""
    K = ds.n_classes
    if K < 2:
        raise InputError("leave-one-out needs at least two classes")
    if not 1 <= k <= K:
        raise InputError(f"class {k} does not exist (K = {K})")
    out = ds.labels == k
    kept = ds.labels[~out]
    normal = ClusteredDataset(ds.x[~out], np.where(kept > k, kept - 1, kept))
    return normal, ds.x[out].copy()


def make_ood(x, mode="shift", magnitude=1.0, seed=0, n=None):
    """Out-of-distribution rows built from ``x``.

    ``shift``: every row moved by ``magnitude`` along one random unit
    direction. ``uniform_box``: ``n`` (default ``len(x)``) uniform draws over
    the bounding box of ``x`` grown by ``magnitude`` on every side.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if mode == "shift":
        if magnitude < 0:
            raise InputError("shift magnitude must be >= 0")
        u = rng.standard_normal(x.shape[1])
        u /= np.linalg.norm(u)
        return x + magnitude * u
    if mode == "uniform_box":
        lo = x.min(axis=0) - magnitude
        hi = x.max(axis=0) + magnitude
        return rng.uniform(lo, hi, size=(n or len(x), x.shape[1]))
    raise InputError(f"unknown OoD mode {mode!r}")


# ---- IDX ------------------------------------------------------------------

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_idx(path, expect_magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimension header", offset=len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(f"{path}: truncated IDX payload, need {size} bytes", offset=len(raw))
    if len(raw) > header + size:
        raise FormatError(f"{path}: trailing bytes after IDX payload", offset=header + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(image_path, label_path):
    """MNIST-style images + labels. Pixels scaled to [0, 1], rows flattened.

    Raw label values are mapped to dense classes 1..K in sorted order.
    """
    images = _read_idx(image_path, _IDX_IMAGES)
    labels = _read_idx(label_path, _IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    _, dense = np.unique(labels, return_inverse=True)
    return ClusteredDataset(x, dense.ravel() + 1)


# ---- CSV ------------------------------------------------------------------

def save_csv(path, ds, digits=17):
    """Header ``label,x1..xd``; coordinates as decimal floats."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{i + 1}" for i in range(ds.dim)])
        for lab, row in zip(ds.labels, ds.x):
            w.writerow([int(lab)] + [f"{v:.{digits}g}" for v in row])


def save_matrix_csv(path, x, digits=17):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(x.shape[1])])
        for row in x:
            w.writerow([f"{v:.{digits}g}" for v in row])


def load_csv(path):
    """Read a dataset or matrix CSV. A missing ``label`` column means class 1."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header, body = rows[0], [r for r in rows[1:] if r]
    has_label = bool(header) and header[0] == "label"
    try:
        vals = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    ncol = len(header)
    if vals.size and vals.shape[1] != ncol:
        raise FormatError(f"{path}: rows do not match the {ncol}-column header")
    if not body:
        vals = np.empty((0, ncol))
    if has_label:
        labels = vals[:, 0]
        if not np.all(labels == np.round(labels)):
            raise FormatError(f"{path}: non-integer labels")
        return ClusteredDataset(vals[:, 1:], labels.astype(np.int64))
    return ClusteredDataset(vals, np.ones(len(vals), dtype=np.int64))


def nearest_distance(y, x, p=2.0):
    """min_j ||y_i - x_j||_p for each row of ``y`` (brute force, chunked)."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(len(y))
    chunk = max(1, 2_000_000 // max(1, len(x)))
    for s in range(0, len(y), chunk):
        d = np.abs(y[s:s + chunk, None, :] - x[None, :, :])
        out[s:s + chunk] = lp_norm(d, p).min(axis=1)
    return out


def lp_norm(d, p):
    if p == 2:
        return np.sqrt((d * d).sum(-1))
    if p == 1:
        return np.abs(d).sum(-1)
    if math.isinf(p):
        return np.abs(d).max(-1)
    return (np.abs(d) ** p).sum(-1) ** (1.0 / p)
