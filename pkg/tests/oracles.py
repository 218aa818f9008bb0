"""Brute-force reference implementations used as test oracles.

Nothing in here imports the package's computational code: these are
independent re-derivations with plain Python loops.
"""

import math
from fractions import Fraction

import torch


def gem_scalar(values, p):
    """Direct float64 evaluation of the generalized mean of a list of numbers."""
    n = len(values)
    return (sum(v ** p for v in values) / n) ** (1.0 / p)


def brute_force_mining(emb, labels):
    """Per anchor, enumerate every positive and negative; first index wins ties.

    Returns lists ``(d_ap, d_an, pos_idx, neg_idx)`` with Euclidean
    distances evaluated pair by pair.
    """
    rows = emb.tolist()
    labels = [int(y) for y in labels]
    n = len(rows)

    def dist(i, j):
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(rows[i], rows[j])))

    d_ap, d_an, pos, neg = [], [], [], []
    for a in range(n):
        best_p, best_p_idx = -math.inf, None
        best_n, best_n_idx = math.inf, None
        for j in range(n):
            if j == a:
                continue
            d = dist(a, j)
            if labels[j] == labels[a]:
                if d > best_p:
                    best_p, best_p_idx = d, j
            elif d < best_n:
                best_n, best_n_idx = d, j
        d_ap.append(best_p)
        d_an.append(best_n)
        pos.append(best_p_idx)
        neg.append(best_n_idx)
    return d_ap, d_an, pos, neg


def brute_force_triplet(emb, labels, mode="softplus", margin=0.3):
    d_ap, d_an, _, _ = brute_force_mining(emb, labels)
    terms = []
    for p, n in zip(d_ap, d_an):
        if mode == "softplus":
            terms.append(math.log1p(math.exp(p - n)))
        else:
            terms.append(max(margin + p - n, 0.0))
    return sum(terms) / len(terms)


def brute_force_retrieval(dist, q_pids, q_cams, g_pids, g_cams):
    """Explicit sort + explicit AP sum for every query.

    Returns ``(mAP, cmc, aps)`` where ``aps`` has None for queries without
    a valid positive. Sums of float precisions are done exactly with
    fractions and rounded once.
    """
    num_g = len(g_pids)
    aps = []
    cmc_counts = [0] * num_g
    for i in range(len(q_pids)):
        ranked = sorted(range(num_g), key=lambda j: (dist[i][j], j))
        filtered = []
        for j in ranked:
            if g_pids[j] == -1:
                continue
            if g_pids[j] == q_pids[i] and g_cams[j] == q_cams[i]:
                continue
            filtered.append(j)
        hits = 0
        precisions = []
        first_hit = None
        for rank, j in enumerate(filtered):
            if g_pids[j] == q_pids[i]:
                hits += 1
                precisions.append(hits / (rank + 1))
                if first_hit is None:
                    first_hit = rank
        if first_hit is None:
            aps.append(None)
            continue
        total = sum(Fraction(x) for x in precisions)
        aps.append(float(total) / len(precisions))
        for k in range(first_hit, num_g):
            cmc_counts[k] += 1
    valid = [a for a in aps if a is not None]
    if not valid:
        return 0.0, [0.0] * num_g, aps
    mAP = float(sum(Fraction(a) for a in valid)) / len(valid)
    cmc = [c / len(valid) for c in cmc_counts]
    return mAP, cmc, aps


def finite_difference_grad(fn, tensors, h=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. every element of ``tensors`` (modified in place)."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = float(fn())
                flat[k] = orig - h
                down = float(fn())
                flat[k] = orig
                gflat[k] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(a, b):
    a = torch.cat([x.reshape(-1) for x in a])
    b = torch.cat([x.reshape(-1) for x in b])
    scale = max(a.norm().item(), b.norm().item(), 1e-30)
    return (a - b).norm().item() / scale


def gradient_check(fn, tensors, h=1e-6):
    """Relative error (norm-wise) between autograd and central-difference gradients."""
    for t in tensors:
        t.grad = None
    out = fn()
    analytic = torch.autograd.grad(out, tensors)
    numeric = finite_difference_grad(fn, tensors, h)
    return relative_error(analytic, numeric)
