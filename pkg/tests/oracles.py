"""Slow, loop-based reference computations used as independent oracles.

Nothing here imports the package's kernels; it only reads raw parameter
arrays by name.
"""

import math

import numpy as np


def coord_map(i, low_w):
    """Low-res cell (r, c) -> its 2x2 block in the high-res row-major grid."""
    r, c = divmod(i, low_w)
    hw = 2 * low_w
    return ((2 * r) * hw + 2 * c, (2 * r) * hw + 2 * c + 1, (2 * r + 1) * hw + 2 * c, (2 * r + 1) * hw + 2 * c + 1)


def square_formula(i, H, P):
    """Closed-form square-grid mapping with H1 = floor(H / 2P) as modulus and stride."""
    h1 = H // (2 * P)
    id1 = 4 * i - 2 * (i % h1)
    return (id1, id1 + 1, id1 + 2 * h1, id1 + 2 * h1 + 1)


def ln(x, g, b, eps=1e-6):
    out = np.empty_like(x)
    for r in range(x.shape[0]):
        mu = sum(x[r]) / len(x[r])
        var = sum((v - mu) ** 2 for v in x[r]) / len(x[r])
        out[r] = (x[r] - mu) / math.sqrt(var + eps) * g + b
    return out


def gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def attention(x, w, prefix, heads):
    """Single-sequence MHSA with explicit per-head loops; x is (n, D), already normalised."""
    n, d = x.shape
    hd = d // heads
    q = x @ w[prefix + "wq"] + w[prefix + "bq"]
    k = x @ w[prefix + "wk"] + w[prefix + "bk"]
    v = x @ w[prefix + "wv"] + w[prefix + "bv"]
    out = np.zeros_like(x)
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(n):
            logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(hd) for j in range(n)])
            p = np.exp(logits - logits.max())
            p /= p.sum()
            out[i, sl] = sum(p[j] * v[j, sl] for j in range(n))
    return out @ w[prefix + "wo"] + w[prefix + "bo"]


def ffn_block(x, w, p):
    h = ln(x, w[p + "ln2.gain"], w[p + "ln2.bias"])
    return x + gelu(h @ w[p + "ffn.w1"] + w[p + "ffn.b1"]) @ w[p + "ffn.w2"] + w[p + "ffn.b2"]


def layer(x, w, idx, heads):
    """Unmasked pre-LN block on one (n+1, D) sequence."""
    p = f"blocks.{idx}."
    x = x + attention(ln(x, w[p + "ln1.gain"], w[p + "ln1.bias"]), w, p + "attn.", heads)
    return ffn_block(x, w, p)


def clustered_layer(x, w, idx, heads, mask, merge="mean"):
    """Each cluster runs independently with its own class-token copy; copies averaged."""
    p = f"blocks.{idx}."
    ids = sorted(set(int(m) for m in mask))
    attn_out = np.zeros_like(x)
    cls_copies, sizes = [], []
    for c in ids:
        members = [j for j in range(len(mask)) if mask[j] == c]
        sub = x[[0] + [j + 1 for j in members]]
        a = attention(ln(sub, w[p + "ln1.gain"], w[p + "ln1.bias"]), w, p + "attn.", heads)
        cls_copies.append(a[0])
        sizes.append(len(members))
        for row, j in enumerate(members, start=1):
            attn_out[j + 1] = a[row]
    if merge == "size":
        attn_out[0] = sum(s * c for s, c in zip(sizes, cls_copies)) / sum(sizes)
    else:
        attn_out[0] = sum(cls_copies) / len(cls_copies)
    return ffn_block(x + attn_out, w, p)


def deit_param_count(d, depth, patch, in_chans, n_pos, classes, ffn_ratio=4):
    """Closed-form parameter count of the model layout, fusion map included."""
    per_layer = 4 * (d * d + d) + 2 * (d * ffn_ratio * d) + ffn_ratio * d + d + 4 * d
    return (in_chans * patch * patch * d + d) + d + n_pos * d + depth * per_layer + 2 * d + d * classes + classes + (d * 4 * d + 4 * d)
