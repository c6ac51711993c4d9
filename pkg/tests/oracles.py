"""Brute-force reference implementations used only by the tests.

Everything here is written straight from the defining formulas with plain
loops and the ``math`` module; none of it calls into the package.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


def cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def sims(z):
    z = [list(map(float, row)) for row in z]
    return [[cosine(a, b) for b in z] for a in z]


def prefix(label: str, level: int) -> str:
    return "/".join(label.split("/")[:level])


def split_pairs(labels, level):
    n = len(labels)
    pos = {i: [j for j in range(n) if j != i and prefix(labels[i], level) == prefix(labels[j], level)] for i in range(n)}
    neg = {i: [j for j in range(n) if prefix(labels[i], level) != prefix(labels[j], level)] for i in range(n)}
    return pos, neg


def mine(s, pos, neg, eps):
    kept_pos, kept_neg = {}, {}
    for i in pos:
        P, N = pos[i], neg[i]
        if not P:
            kept_pos[i], kept_neg[i] = [], []
        elif not N:
            kept_pos[i], kept_neg[i] = list(P), []
        else:
            hardest_pos = min(s[i][j] for j in P)
            hardest_neg = max(s[i][k] for k in N)
            kept_neg[i] = [k for k in N if s[i][k] > hardest_pos - eps]
            kept_pos[i] = [j for j in P if s[i][j] < hardest_neg + eps]
    return kept_pos, kept_neg


def ms_value(z, labels, alpha, beta, lam, eps, mined=True):
    s = sims(z)
    depth = len(labels[0].split("/"))
    pos, neg = split_pairs(labels, depth)
    if mined:
        pos, neg = mine(s, pos, neg, eps)
    total = 0.0
    for i in range(len(z)):
        sp = sum(math.exp(-alpha * (s[i][j] - lam)) for j in pos[i])
        sn = sum(math.exp(beta * (s[i][k] - lam)) for k in neg[i])
        total += math.log(1 + sp) / alpha + math.log(1 + sn) / beta
    return total / len(z)


def supcon_term(s, i, p, tau):
    denom = sum(math.exp(s[i][a] / tau) for a in range(len(s)) if a != i)
    return -math.log(math.exp(s[i][p] / tau) / denom)


def hier_value(z, labels, mode, alpha=2.0, beta=50.0, lam=1.0, eps=0.1, tau=0.1, weight=None, return_terms=False):
    """Hierarchical loss computed directly with every per-pair term and clamp materialised."""
    weight = weight or (lambda l: math.exp(1.0 / l))
    s = sims(z)
    n = len(z)
    depth = len(labels[0].split("/"))
    order = list(range(1, depth + 1))
    top_down = mode in ("hi-supcon", "hi-ms-max")
    if not top_down:
        order.reverse()
    running = -math.inf if top_down else math.inf
    total = 0.0
    all_terms = {}
    for level in order:
        pos, neg = split_pairs(labels, level)
        per_anchor = {}
        if mode == "hi-supcon":
            for i in range(n):
                per_anchor[i] = [supcon_term(s, i, p, tau) for p in pos[i]]
        else:
            mp, mn = mine(s, pos, neg, eps)
            for i in range(n):
                terms = [math.log(1 + math.exp(-alpha * (s[i][j] - lam))) / alpha for j in mp[i]]
                terms += [math.log(1 + math.exp(beta * (s[i][k] - lam))) / beta for k in mn[i]]
                per_anchor[i] = terms
        clamped_all = []
        for i in range(n):
            terms = per_anchor[i]
            if not terms:
                continue
            clamped = [max(t, running) if top_down else min(t, running) for t in terms]
            clamped_all.extend(clamped)
            total += (1.0 / depth) * weight(level) / len(terms) * sum(clamped)
        all_terms[level] = (running, clamped_all)
        if clamped_all:
            running = max(clamped_all) if top_down else min(clamped_all)
    if return_terms:
        return total, all_terms
    return total


def central_difference(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic, numeric):
    """Largest absolute deviation scaled by the largest gradient entry."""
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def edit_distance(a: str, b: str) -> int:
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        if a[i] == b[j]:
            return go(i + 1, j + 1)
        return 1 + min(go(i + 1, j + 1), go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def knn_sorted(db_vecs, db_ids, q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    rows = []
    for vid, v in zip(db_ids, db_vecs):
        v = np.asarray(v, dtype=float)
        v = v / np.linalg.norm(v)
        rows.append((math.sqrt(sum((a - b) ** 2 for a, b in zip(q, v))), vid))
    rows.sort()
    return rows


def precision_at_k(db_vecs, db_ids, db_keys, queries, q_keys, k):
    key_of = dict(zip(db_ids, db_keys))
    total = 0.0
    for q, qk in zip(queries, q_keys):
        top = knn_sorted(db_vecs, db_ids, q)[:k]
        total += sum(1 for _, vid in top if key_of[vid] == qk) / k
    return total / len(queries)


def map_at_r(db_vecs, db_ids, db_keys, queries, q_keys):
    key_of = dict(zip(db_ids, db_keys))
    scores = []
    for q, qk in zip(queries, q_keys):
        r = sum(1 for k in db_keys if k == qk)
        if r == 0:
            continue
        ranked = knn_sorted(db_vecs, db_ids, q)[:r]
        hits = 0
        ap = 0.0
        for rank, (_, vid) in enumerate(ranked, 1):
            if key_of[vid] == qk:
                hits += 1
                ap += hits / rank
        scores.append(ap / r)
    return sum(scores) / len(scores)


def auroc_pairwise(id_scores, ood_scores):
    total = 0.0
    for o in ood_scores:
        for i in id_scores:
            total += 1.0 if o > i else 0.5 if o == i else 0.0
    return total / (len(id_scores) * len(ood_scores))


def fpr_at_tpr(id_scores, ood_scores, tpr):
    ordered = sorted(id_scores)
    n = len(ordered)
    # smallest threshold whose ID recall reaches tpr
    for m in range(1, n + 1):
        if m / n >= tpr - 1e-12:
            thr = ordered[m - 1]
            break
    return sum(1 for o in ood_scores if o <= thr) / len(ood_scores)


def box_overlap(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    inter = 0
    for x in range(min(ax, bx), max(ax + aw, bx + bw)):
        for y in range(min(ay, by), max(ay + ah, by + bh)):
            in_a = ax <= x < ax + aw and ay <= y < ay + ah
            in_b = bx <= x < bx + bw and by <= y < by + bh
            inter += in_a and in_b
    union = aw * ah + bw * bh - inter
    return 2 * inter / (aw * ah + bw * bh), inter / union
