"""Brute-force reference implementations of the losses.

Plain Python loops over anchors and pairs with ``math`` scalars; nothing here
shares code with :mod:`anchor.losses`.
"""
import math


def _dot(u, v):
    return math.fsum(a * b for a, b in zip(u, v))


def _rows(z):
    return [[float(v) for v in row] for row in z]


def _reduce(terms, reduction):
    if not terms:
        return 0.0
    total = math.fsum(terms)
    return total / len(terms) if reduction == "mean" else total


def scl_oracle(z, labels, tau, reduction="mean"):
    z = _rows(z)
    labels = [int(v) for v in labels]
    n = len(z)
    terms = []
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        denom = math.fsum(math.exp(_dot(z[i], z[a]) / tau) for a in range(n) if a != i)
        acc = 0.0
        for p in positives:
            acc += math.log(math.exp(_dot(z[i], z[p]) / tau) / denom)
        terms.append(-acc / len(positives))
    return _reduce(terms, reduction)


def weight_oracle(z, labels, beta):
    """``{(i, p): w_ip}`` straight from the definition."""
    z = _rows(z)
    labels = [int(v) for v in labels]
    n = len(z)
    out = {}
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        raw = {p: math.exp(beta * (1.0 - _dot(z[i], z[p]))) for p in positives}
        total = math.fsum(raw.values())
        for p in positives:
            out[(i, p)] = raw[p] * len(positives) / total
    return out


def anchor_oracle(z, labels, beta, tau, margin=None, reduction="mean"):
    z = _rows(z)
    labels = [int(v) for v in labels]
    n = len(z)
    weights = weight_oracle(z, labels, beta)
    active = margin is not None and margin > -1.0
    terms = []
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        kept = []
        for a in range(n):
            if a == i:
                continue
            s = _dot(z[i], z[a])
            if labels[a] == labels[i] or not active or s >= margin:
                kept.append(s)
        denom = math.fsum(math.exp(s / tau) for s in kept)
        acc = 0.0
        for p in positives:
            acc += weights[(i, p)] * math.log(math.exp(_dot(z[i], z[p]) / tau) / denom)
        terms.append(-acc / len(positives))
    return _reduce(terms, reduction)


def ce_oracle(logits, labels):
    total = 0.0
    rows = _rows(logits)
    for row, y in zip(rows, labels):
        denom = math.fsum(math.exp(v) for v in row)
        for c, v in enumerate(row):
            onehot = 1.0 if c == int(y) else 0.0
            total += -onehot * math.log(max(math.exp(v) / denom, 1e-12))
    return total / len(rows)
