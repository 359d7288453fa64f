"""Anomaly scores, support membership, ranking metrics and loss reports."""
from dataclasses import dataclass, field
import csv
import json

import numpy as np
from scipy.stats import rankdata

from . import flow as flow_mod
from .data import nearest_distance
from .errors import ConfigError, InputError
from .tail import TERMS, loss_terms


@dataclass
class ScoreConfig:
    epsilon: float = 1e-3
    alpha_density: float = 1.0
    alpha_distance: float = 10.0
    p: float = 2.0

    def __post_init__(self):
        if self.alpha_density < 0 or self.alpha_distance < 0:
            raise ConfigError("score weights must be non-negative")
        if not self.alpha_density + self.alpha_distance > 0:
            raise ConfigError("at least one score weight must be positive")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")


def density_threshold(density, data, quantile=0.05):
    """epsilon as the ``quantile`` of model density over ``data``."""
    return float(np.quantile(np.exp(flow_mod.log_density(density, np.atleast_2d(data))), quantile))


def anomaly_scores(x, density, data, cfg):
    """``alpha_density * (-log p(x)) + alpha_distance * min_j ||x - x_j||_p`` per row."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    score = np.zeros(len(x))
    if cfg.alpha_density:
        score += cfg.alpha_density * -flow_mod.log_density(density, x)
    if cfg.alpha_distance:
        score += cfg.alpha_distance * nearest_distance(x, data, cfg.p)
    return score


def anomaly_score(x, density, data, cfg):
    return float(anomaly_scores(x, density, data, cfg)[0])


def support_membership(x, density, cfg):
    """True where the model density reaches ``epsilon`` (boundary counts as inside)."""
    x = np.asarray(x, dtype=np.float64)
    inside = np.exp(flow_mod.log_density(density, np.atleast_2d(x))) >= cfg.epsilon
    return bool(inside[0]) if x.ndim == 1 else inside


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InputError("scores and labels must have the same length")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    return s, y.astype(bool)


def auroc(scores, labels):
    """P(score of a random positive > score of a random negative), ties count 1/2."""
    s, y = _check_binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def auprc(scores, labels):
    """Average precision: mean over positives of the precision at their rank.

    Scores are sorted descending; tied scores are resolved as one threshold
    (all tied items enter together), so the value doesn't depend on input order.
    """
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise InputError("AUPRC needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # end index of each block of equal scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    seen = last + 1
    new_pos = np.diff(np.r_[0, tp])
    return float(np.sum(new_pos * tp / seen) / n_pos)


@dataclass
class ReportRow:
    name: str
    L_tot: float
    L_d: float
    L_sc: float
    L_pr: float
    L_e: float
    AUROC: float | None = None
    AUPRC: float | None = None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    proximity: dict | None = None

    COLUMNS = ("dataset", "L_tot", "L_d", "L_sc", "L_pr", "L_e", "AUROC", "AUPRC")

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                vals = [r.L_tot, r.L_d, r.L_sc, r.L_pr, r.L_e, r.AUROC, r.AUPRC]
                w.writerow([r.name] + ["" if v is None else f"{v:.9g}" for v in vals])

    def to_dict(self):
        return {
            "format": "tailgen-report",
            "version": 1,
            "rows": [dict(zip(self.COLUMNS, (r.name, r.L_tot, r.L_d, r.L_sc, r.L_pr, r.L_e, r.AUROC, r.AUPRC)))
                     for r in self.rows],
            "proximity": self.proximity,
        }

    def to_text(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                f = {k: (float(rec[k]) if rec[k] != "" else None) for k in cls.COLUMNS[1:]}
                rows.append(ReportRow(rec["dataset"], **f))
        return cls(rows)


def build_report(tail, density, datasets, w, cfg, reference=None, z_seed=0):
    """One row of loss terms per dataset, with that dataset as the reference.

    ``datasets`` is a sequence of ``(name, matrix)``; the first entry is the
    normal set. A single latent batch of size ``w.N`` (seeded by ``z_seed``)
    is shared by all rows, so L_pr, L_e and L_sc are identical across rows.
    For the other rows, AUROC/AUPRC rank anomaly scores of that set
    (positives) against the normal set; scores use ``reference`` for the
    distance term (defaults to the normal set).
    """
    datasets = [(name, np.asarray(x, dtype=np.float64)) for name, x in datasets]
    if not datasets:
        raise InputError("report needs at least one dataset")
    dims = {x.shape[1] for _, x in datasets}
    if dims != {tail.dim}:
        raise InputError(f"all datasets must have width {tail.dim}, got {sorted(dims)}")
    z = np.random.default_rng(z_seed).standard_normal((w.N, tail.dim))
    normal = datasets[0][1]
    ref = normal if reference is None else reference
    normal_scores = anomaly_scores(normal, density, ref, cfg)
    rows = []
    for idx, (name, x) in enumerate(datasets):
        terms = loss_terms(tail, z, x, density, w)
        row = ReportRow(name, **{k: getattr(terms, k) for k in TERMS})
        if idx > 0:
            s = anomaly_scores(x, density, ref, cfg)
            scores = np.r_[normal_scores, s]
            labels = np.r_[np.zeros(len(normal_scores)), np.ones(len(s))]
            row.AUROC, row.AUPRC = auroc(scores, labels), auprc(scores, labels)
        rows.append(row)
    return EvalReport(rows)


