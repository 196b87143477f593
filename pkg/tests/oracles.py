"""Independent brute-force reference implementations used as test oracles.

These deliberately avoid the package's vectorized helpers: plain Python
loops over scalars (math module) so that a shared bug cannot hide in both.
"""

import math

import numpy as np


def norm(v):
    return math.sqrt(sum(float(x) * float(x) for x in v))


def unit(v):
    n = norm(v)
    return [float(x) / n for x in v]


def dot(a, b):
    return sum(float(x) * float(y) for x, y in zip(a, b))


def quantize_soft(z, weights, alpha):
    """Returns (p as flat list of length M*K, z_hat as list of length D)."""
    M, K, d = weights.shape
    p_all, zhat = [], []
    for m in range(M):
        seg = unit(z[m * d:(m + 1) * d])
        cws = [unit(weights[m, i]) for i in range(K)]
        scores = [alpha * dot(seg, c) for c in cws]
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        tot = sum(ex)
        p = [e / tot for e in ex]
        p_all.extend(p)
        for j in range(d):
            zhat.append(sum(p[i] * cws[i][j] for i in range(K)))
    return p_all, zhat


def quantize_hard(z, weights):
    M, K, d = weights.shape
    out = []
    for m in range(M):
        seg = unit(z[m * d:(m + 1) * d])
        best, best_s = 0, -math.inf
        for i in range(K):
            s = dot(seg, unit(weights[m, i]))
            if s > best_s:
                best, best_s = i, s
        out.append(best)
    return out


def reconstruct_hard(code, weights):
    out = []
    for m, i in enumerate(code):
        out.extend(unit(weights[m, i]))
    return out


def omega_c(weights):
    M, K, _ = weights.shape
    total = 0.0
    for m in range(M):
        cws = [unit(weights[m, i]) for i in range(K)]
        for i in range(K):
            for j in range(K):
                total += dot(cws[i], cws[j])
    return total / (M * K * K)


def contrastive_loss(emb, tau, rho=0.0, memory=()):
    """Summed per-query loss with the negative-mass floor (only when rho > 0)."""
    n = len(emb)
    losses = []
    for q in range(n):
        kp = q + 1 if q % 2 == 0 else q - 1
        sp = dot(emb[q], emb[kp]) / tau
        negs = [dot(emb[q], emb[k]) / tau for k in range(n) if k not in (q, kp)]
        negs += [dot(emb[q], m) / tau for m in memory]
        neg_mass = sum(math.exp(s) for s in negs)
        if rho > 0:
            mass = (neg_mass - len(negs) * rho * math.exp(sp)) / (1 - rho)
            mass = max(mass, len(negs) * math.exp(-1.0 / tau))
        else:
            mass = neg_mass
        losses.append(-sp + math.log(math.exp(sp) + mass))
    return sum(losses), losses


def average_precision(ranked, relevant, n, convention="paper"):
    """Truncated AP by explicit counting; ``relevant`` is a set of ids."""
    hits = 0
    acc = 0.0
    for k, item in enumerate(ranked[:n], start=1):
        if item in relevant:
            hits += 1
            acc += hits / k
    denom = len(relevant) if convention == "paper" else min(n, len(relevant))
    return acc / denom


def adam(grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, x0=0.0):
    """Scalar Adam trajectory for a sequence of gradients; returns the iterates."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(x)
    return out


def central_difference(f, x, h=1e-4):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g
