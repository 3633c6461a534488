"""Independent loop-based reference implementations used as test oracles.

Nothing here touches the autodiff tape: every function works on plain numpy
arrays (or Python floats) and is written element by element where practical,
so it shares no code path with the package under test.
"""

import math

import numpy as np


def gelu(x):
    return np.vectorize(lambda v: v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def linear(x, w, b):
    out = np.zeros(x.shape[:-1] + (w.shape[0],))
    for idx in np.ndindex(x.shape[:-1]):
        for o in range(w.shape[0]):
            out[idx + (o,)] = sum(w[o, i] * x[idx + (i,)] for i in range(w.shape[1])) + b[o]
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        mu = sum(row) / row.size
        var = sum((v - mu) ** 2 for v in row) / row.size
        out[idx] = [(v - mu) / math.sqrt(var + eps) * g + c for v, g, c in zip(row, gain, bias)]
    return out


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def mhsa(x, wqkv, bqkv, wproj, bproj, heads, q_delta=None):
    """x: (N, D). Brute-force per-head attention."""
    n, d = x.shape
    hd = d // heads
    qkv = linear(x, wqkv, bqkv)
    q, k, v = qkv[:, :d].copy(), qkv[:, d:2 * d], qkv[:, 2 * d:]
    if q_delta is not None:
        q = q + q_delta
    ctx = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(n):
            scores = [sum(q[i, sl] * k[j, sl]) / math.sqrt(hd) for j in range(n)]
            w = softmax_row(scores)
            for j in range(n):
                ctx[i, sl] += w[j] * v[j, sl]
    return linear(ctx, wproj, bproj)


def ffn(x, w1, b1, w2, b2):
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def pool_windows(n, length):
    return [((l * n) // length, -((-(l + 1) * n) // length)) for l in range(length)]


def hist_forward(x, proj, centers, widths, eps=1e-6):
    """x: (N, D) -> (N, D), scalar loops for every stage."""
    n, d = x.shape
    bins = proj.shape[0]
    length = d // bins
    r = np.zeros((n, bins))
    for i in range(n):
        y = []
        for b in range(bins):
            v = sum(proj[b, j] * x[i, j] for j in range(d))
            y.append(math.exp(-(widths[b] ** 2) * (v - centers[b]) ** 2))
        s = sum(y)
        for b in range(bins):
            r[i, b] = y[b] / (s + eps)
    summary = []
    for b in range(bins):
        for lo, hi in pool_windows(n, length):
            summary.append(sum(r[lo:hi, b]) / (hi - lo))
    return np.tile(np.array(summary), (n, 1))


def block(x, p, heads, placement="parallel_mhsa", hist=None, adapter=None):
    """Pre-norm block from raw parameter dicts; x is (N, D)."""
    x_ln = layer_norm(x, p["ln1.gain"], p["ln1.bias"])
    z = x + mhsa(x_ln, p["mhsa.qkv.weight"], p["mhsa.qkv.bias"],
                 p["mhsa.proj.weight"], p["mhsa.proj.bias"], heads)
    if adapter is not None:
        z = z + linear(gelu(linear(x_ln, *adapter[0])), *adapter[1])
    if hist is not None and placement in ("parallel_mhsa", "both"):
        z = z + hist_forward(x_ln, *hist)
    z_ln = layer_norm(z, p["ln2.gain"], p["ln2.bias"])
    out = z + ffn(z_ln, p["ffn.fc1.weight"], p["ffn.fc1.bias"], p["ffn.fc2.weight"], p["ffn.fc2.bias"])
    if hist is not None and placement in ("parallel_ffn", "both"):
        out = out + hist_forward(z_ln, *hist)
    return out


def block_params(block):
    return {name: p.data.copy() for name, p in block.named_parameters()}


def cka_hsic(a, b):
    """Linear CKA through Gram matrices: HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))."""
    m = a.shape[0]
    h = np.eye(m) - np.ones((m, m)) / m
    k = a @ a.T
    l = b @ b.T

    def hsic(k1, k2):
        return np.trace(k1 @ h @ k2 @ h)

    return hsic(k, l) / math.sqrt(hsic(k, k) * hsic(l, l))


def adamw_scalar(theta, grads, lr=1e-3, wd=0.01, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar AdamW trace over a list of gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * wd * theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta


def early_stop_trace(losses, patience):
    """Reference stopping rule: returns (stop_epoch, best_epoch), 1-based."""
    best = float("inf")
    best_epoch = 0
    since = 0
    for epoch, loss in enumerate(losses, 1):
        if loss < best:
            best, best_epoch, since = loss, epoch, 0
        else:
            since += 1
            if since == patience:
                return epoch, best_epoch
    return len(losses), best_epoch
