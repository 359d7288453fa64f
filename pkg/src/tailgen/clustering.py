"""Nearest-class assignment and the proximity check for generated samples.

Classes are 1-based, matching :class:`~tailgen.data.ClusteredDataset`.
"""
from dataclasses import dataclass

import numpy as np

from .data import lp_norm
from .errors import InputError


def _dists(y, members, p):
    y = np.asarray(y, dtype=np.float64)
    return lp_norm(members - y, p)


def point_to_class_dist(y, ds, i, p=2.0):
    """min_j ||y - x_{i,j}||_p."""
    members = ds.members(i)
    if len(members) == 0:
        raise InputError(f"class {i} is empty")
    return float(_dists(y, members, p).min())


def class_distances(y, ds, p=2.0):
    """Distance from ``y`` to every class, index ``k - 1`` for class ``k``."""
    return np.array([point_to_class_dist(y, ds, i, p) for i in range(1, ds.n_classes + 1)])


def assign_cluster(y, ds, p=2.0):
    """Nearest class; ties go to the lowest index."""
    if ds.n_classes < 1:
        raise InputError("dataset has no classes")
    return int(np.argmin(class_distances(y, ds, p))) + 1


def boundary_radius(y, ds, k, p=2.0):
    """Distance from ``y`` to its class ``k`` (the radius of the boundary sample)."""
    return point_to_class_dist(y, ds, k, p)


def inter_class_floor(ds, k, p=2.0, paired=False):
    """Smallest distance between class ``k`` and any other class.

    By default every cross-class pair counts. ``paired=True`` pairs only the
    ``j``-th sample of each class with the ``j``-th sample of class ``k``
    (up to the shorter class), which depends on sample order.
    """
    K = ds.n_classes
    if K < 2:
        raise InputError("the inter-class floor needs at least two classes")
    xk = ds.members(k)
    best = np.inf
    for i in range(1, K + 1):
        if i == k:
            continue
        xi = ds.members(i)
        if paired:
            n = min(len(xi), len(xk))
            d = lp_norm(xi[:n] - xk[:n], p)
        else:
            d = np.concatenate([lp_norm(xi - row, p) for row in xk])
        if d.size:
            best = min(best, float(d.min()))
    return best


@dataclass
class Proximity:
    k: int
    R: float
    floor: float
    satisfied: bool
    margin: float


def check_proximity(y, ds, p=2.0, paired=False, floors=None):
    """Assign ``y``, then test ``R < floor`` for its class.

    ``floors`` may hold precomputed :func:`inter_class_floor` values indexed
    ``k - 1`` to avoid recomputing them per sample.
    """
    if ds.n_classes < 2:
        raise InputError("the proximity check needs at least two classes")
    dists = class_distances(y, ds, p)
    k = int(np.argmin(dists)) + 1
    R = float(dists[k - 1])
    floor = floors[k - 1] if floors is not None else inter_class_floor(ds, k, p, paired)
    return Proximity(k, R, float(floor), R < floor, abs(R - floor))


def proximity_batch(ys, ds, p=2.0, paired=False):
    """:func:`check_proximity` for every row of ``ys``."""
    floors = [inter_class_floor(ds, k, p, paired) for k in range(1, ds.n_classes + 1)]
    return [check_proximity(y, ds, p, paired, floors) for y in np.atleast_2d(ys)]


def proximity_summary(results):
    """Counts and margin statistics over a list of :class:`Proximity`."""
    if not results:
        return {"n": 0, "satisfied_fraction": float("nan"), "margin_mean": float("nan"),
                "margin_min": float("nan"), "margin_max": float("nan")}
    margins = np.array([r.margin for r in results])
    sat = np.array([r.satisfied for r in results])
    counts = np.bincount([r.k for r in results])
    out = {
        "n": len(results),
        "satisfied_fraction": float(sat.mean()),
        "margin_mean": float(margins.mean()),
        "margin_min": float(margins.min()),
        "margin_max": float(margins.max()),
    }
    for k in range(1, len(counts)):
        out[f"class_{k}_fraction"] = float(counts[k] / len(results))
    return out
