"""Direct-definition metric oracles used by the tests."""
import numpy as np


def brute_auroc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_average_precision(s, y):
    """Mean precision over positives; a positive tied with others is ranked
    after every member of its tie group."""
    total = 0.0
    for i in np.flatnonzero(y == 1):
        at_or_above = s >= s[i]
        total += y[at_or_above].sum() / at_or_above.sum()
    return total / (y == 1).sum()
