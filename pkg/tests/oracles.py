"""Brute-force reference implementations in plain Python floats.

Nothing here touches the package's autodiff code. Loops run over every
anchor and every candidate explicitly so the structure can be read off
directly against the loss definitions.
"""

from __future__ import annotations

import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def normalize(v):
    n = math.sqrt(dot(v, v))
    return [x / n for x in v]


def contrastive(anchors, candidates, labels, tau=1.0):
    """Sum over anchors of mean over positives of -log(exp(a.c_p/tau) / sum_{k != n} exp(a.c_k/tau))."""
    n = len(anchors)
    total = 0.0
    for i in range(n):
        positives = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not positives:
            continue
        denom = 0.0
        for k in range(n):
            if k != i:
                denom += math.exp(dot(anchors[i], candidates[k]) / tau)
        term = 0.0
        for j in positives:
            term += -math.log(math.exp(dot(anchors[i], candidates[j]) / tau) / denom)
        total += term / len(positives)
    return total


def csc(h, labels, tau=1.0):
    z = [normalize(r) for r in h]
    return contrastive(z, z, labels, tau)


def cks(h_cks, h_cur, labels, tau=1.0):
    return contrastive([normalize(r) for r in h_cks], [normalize(r) for r in h_cur], labels, tau)


def ced_pair(teacher, student, tau=1.0):
    seq = []
    for t_row, s_row in zip(teacher, student):
        seq += [t_row, s_row]
    m = len(seq)
    total = 0.0
    for a in range(m):
        partner = a + 1 if a % 2 == 0 else a - 1
        denom = sum(math.exp(dot(seq[a], seq[j]) / tau) for j in range(m) if j != a)
        total += -math.log(math.exp(dot(seq[a], seq[partner]) / tau) / denom)
    return total


def cross_entropy(logits, label):
    z = sum(math.exp(v) for v in logits)
    return -math.log(math.exp(logits[label]) / z)


def matvec(w, x):
    return [dot(row, x) for row in w]


def task_attention(views, w_f, w_g, w_v, w_q, gamma):
    """Per-sample knowledge-sharing vector for one sample; ``views`` is a list of t vectors."""
    t = len(views)
    d = len(views[0])
    f = [matvec(w_f, h) for h in views]
    g = [matvec(w_g, h) for h in views]
    out = [0.0] * d
    for j in range(t):
        scores = [dot(f[i], g[j]) for i in range(t)]
        z = sum(math.exp(s) for s in scores)
        alpha = [math.exp(s) / z for s in scores]
        mixed = [0.0] * d
        for i in range(t):
            q = matvec(w_q, views[i])
            for k in range(d):
                mixed[k] += alpha[i] * q[k]
        o = matvec(w_v, mixed)
        for k in range(d):
            out[k] += gamma * o[k] + views[j][k]
    return out


def anneal(b, B, s_max):
    if B == 1 or b == B:
        return float(s_max)
    return 1.0 / s_max + (s_max - 1.0 / s_max) * (b - 1) / (B - 1)


def logistic(x):
    return 1.0 / (1.0 + math.exp(-x))


def macro_f1(pred, gold):
    scores = []
    for c in sorted(set(gold)):
        tp = sum(1 for p, g in zip(pred, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gold) if p != c and g == c)
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores)
