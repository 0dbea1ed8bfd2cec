"""Reference implementations written independently of the package code.

They use plain Python integers and textbook formulas so that agreement
with the optimized paths is meaningful.
"""
from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


def schoolbook_negacyclic(a, b, q):
    """a*b mod (x^n + 1, q) by the O(n^2) definition."""
    n = len(a)
    out = [0] * n
    for i in range(n):
        for j in range(n):
            k = i + j
            term = int(a[i]) * int(b[j])
            if k >= n:
                out[k - n] -= term
            else:
                out[k] += term
    return [v % q for v in out]


def eval_poly(coeffs, x, q):
    acc = 0
    for c in reversed(list(coeffs)):
        acc = (acc * x + int(c)) % q
    return acc


def crt_pair(r0, r1, t0, t1):
    """Centered integer with the given residues, by direct search over r0 + k*t0."""
    for k in range(t1):
        v = r0 + k * t0
        if v % t1 == r1:
            P = t0 * t1
            return v - P if v > P // 2 else v
    raise AssertionError("no CRT solution")


def exact_matmul(X, W, b=None):
    """Python-int product, immune to int64 overflow."""
    X = [[int(v) for v in row] for row in np.asarray(X)]
    W = [[int(v) for v in row] for row in np.asarray(W)]
    out = []
    for row in X:
        r = []
        for j in range(len(W[0])):
            s = sum(row[k] * W[k][j] for k in range(len(row)))
            if b is not None:
                s += int(b[j])
            r.append(s)
        out.append(r)
    return out


def chi2_contingency_bruteforce(feature, labels):
    """Chi-squared from an explicit class x {feature mass} table, in exact fractions."""
    feature = [Fraction(int(v)) if float(v).is_integer() else Fraction(v) for v in feature]
    classes = sorted(set(labels))
    total = sum(feature)
    if total == 0:
        return 0.0
    n = len(labels)
    score = Fraction(0)
    for c in classes:
        members = [i for i in range(n) if labels[i] == c]
        observed = sum(feature[i] for i in members)
        expected = Fraction(len(members), n) * total
        score += (observed - expected) ** 2 / expected
    return float(score)


def all_small_instances(max_samples=8, values=(0, 1, 2)):
    """Every 2-class labelling and feature vector up to ``max_samples`` (both classes present)."""
    for m in range(2, max_samples + 1):
        for labels in itertools.product((0, 1), repeat=m):
            if len(set(labels)) < 2:
                continue
            yield m, labels


def softmax_xent(W, b, X, y):
    """Mean cross-entropy with explicit loops (float64)."""
    total = 0.0
    for xi, yi in zip(X, y):
        z = W @ xi + b
        m = z.max()
        total += m + np.log(np.exp(z - m).sum()) - z[yi]
    return total / len(y)


def auc_pairwise(truth, score):
    """Mann-Whitney AUC: fraction of (pos, neg) pairs ranked correctly, ties count half."""
    pos = [s for t, s in zip(truth, score) if t]
    neg = [s for t, s in zip(truth, score) if not t]
    good = 0.0
    for p in pos:
        for q in neg:
            good += 1.0 if p > q else 0.5 if p == q else 0.0
    return good / (len(pos) * len(neg))
