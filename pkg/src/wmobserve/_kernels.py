"""Numba kernels for the hot loops (PRF sweeps, sampling, SGD).

Everything here mirrors a pure-Python or numpy reference elsewhere in the
package. Keep all integer arithmetic in uint64: numba promotes mixed
int64/uint64 expressions to float64.
"""

import math

import numba as nb
import numpy as np

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)
GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
LOW32 = np.uint64(0xFFFFFFFF)
BYTE = np.uint64(0xFF)
INV53 = 2.0**-53


@nb.njit(cache=True, nogil=True)
def fnv_word(h, v):
    w = np.uint64(v) & LOW32
    for i in range(4):
        h = h ^ ((w >> np.uint64(8 * i)) & BYTE)
        h = h * FNV_PRIME
    return h


@nb.njit(cache=True, nogil=True)
def splitmix(x):
    z = x + GOLDEN
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True, nogil=True)
def to_unit(x):
    return np.float64(x >> np.uint64(11)) * INV53


@nb.njit(cache=True, nogil=True)
def stream_u(seed, counter):
    return to_unit(splitmix(seed + np.uint64(counter) * GOLDEN))


@nb.njit(cache=True, nogil=True)
def ctx_hash(buf, start, end):
    h = FNV_OFFSET
    for j in range(start, end):
        h = fnv_word(h, buf[j])
    return h


@nb.njit(cache=True, nogil=True)
def prf(key, hctx, salt):
    return to_unit(splitmix(key ^ fnv_word(hctx, salt)))


@nb.njit(cache=True, nogil=True)
def prf_many(key, context, salts):
    hctx = ctx_hash(context, 0, context.shape[0])
    out = np.empty(salts.shape[0])
    for i in range(salts.shape[0]):
        out[i] = prf(key, hctx, salts[i])
    return out


@nb.njit(cache=True, nogil=True)
def green_table(key, vocab, h, n_green):
    """Rank-selection green masks for every context of length h, base-V indexed."""
    n_ctx = 1
    for _ in range(h):
        n_ctx *= vocab
    mask = np.zeros((n_ctx, vocab), dtype=np.bool_)
    ctx = np.empty(h, dtype=np.int64)
    u = np.empty(vocab)
    for c in range(n_ctx):
        rem = c
        for j in range(h - 1, -1, -1):
            ctx[j] = rem % vocab
            rem //= vocab
        hctx = ctx_hash(ctx, 0, h)
        for i in range(vocab):
            u[i] = prf(key, hctx, i)
        order = np.argsort(u, kind="mergesort")
        for r in range(n_green):
            mask[c, order[r]] = True
    return mask


@nb.njit(cache=True, nogil=True)
def green_indicators_onfly(key, tokens, h, vocab, n_green):
    n, t_len = tokens.shape
    out = np.zeros((n, t_len - h), dtype=np.bool_)
    u = np.empty(vocab)
    for s in range(n):
        row = tokens[s]
        for t in range(h, t_len):
            hctx = ctx_hash(row, t - h, t)
            for i in range(vocab):
                u[i] = prf(key, hctx, i)
            x = row[t]
            ux = u[x]
            rank = 0
            for i in range(vocab):
                if u[i] < ux or (u[i] == ux and i < x):
                    rank += 1
            out[s, t - h] = rank < n_green
    return out


@nb.njit(cache=True, nogil=True)
def exp_terms(key, tokens, h):
    n, t_len = tokens.shape
    out = np.empty((n, t_len - h))
    for s in range(n):
        row = tokens[s]
        for t in range(h, t_len):
            u = prf(key, ctx_hash(row, t - h, t), row[t])
            out[s, t - h] = -math.log1p(-u)
    return out


@nb.njit(cache=True, nogil=True)
def search_cum(cum, thr):
    """First index with cum[i] > thr; falls back to the last positive-weight slot."""
    v = cum.shape[0]
    lo = 0
    hi = v
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] > thr:
            hi = mid
        else:
            lo = mid + 1
    if lo < v:
        return lo
    for i in range(v - 1, 0, -1):
        if cum[i] > cum[i - 1]:
            return i
    return 0


@nb.njit(cache=True, nogil=True)
def sample_chain(cum, slots, ctx_len, vocab, init_ctx, seeds, length):
    """Sample from stacked cumulative tables indexed by (slot, last ctx_len tokens)."""
    n = init_ctx.shape[0]
    out = np.empty((n, length), dtype=np.int64)
    n_ctx = 1
    for _ in range(ctx_len):
        n_ctx *= vocab
    for s in range(n):
        c = 0
        for j in range(ctx_len):
            c = c * vocab + init_ctx[s, j]
        seed = seeds[s]
        for t in range(length):
            u = stream_u(seed, t)
            row = cum[slots[t], c]
            tok = search_cum(row, u * row[vocab - 1])
            out[s, t] = tok
            if ctx_len > 0:
                c = (c * vocab + tok) % n_ctx
    return out


@nb.njit(cache=True, nogil=True)
def exp_choose(row, key, hctx):
    """argmax_i log(u_i) / p_i, i.e. argmin of r_i = -log(u_i) / p_i.

    Since -log(u) >= 1 - u, a candidate with (1 - u_i) / p_i >= best r
    cannot win and its log is skipped.
    """
    best = -1
    best_r = np.inf
    for i in range(row.shape[0]):
        p = row[i]
        if p <= 0.0:
            continue
        u = prf(key, hctx, i)
        if best >= 0 and (1.0 - u) >= best_r * p:
            continue
        r = -math.log(u) / p if u > 0.0 else np.inf
        if best < 0 or r < best_r:
            best = i
            best_r = r
    return best


@nb.njit(cache=True, nogil=True)
def exp_generate(probs, order, vocab, key, h, init_ctx, length):
    n, p_len = init_ctx.shape
    out = np.empty((n, length), dtype=np.int64)
    buf = np.empty(p_len + length, dtype=np.int64)
    for s in range(n):
        for j in range(p_len):
            buf[j] = init_ctx[s, j]
        for t in range(length):
            pos = p_len + t
            c = 0
            for j in range(pos - order, pos):
                c = c * vocab + buf[j]
            tok = exp_choose(probs[c], key, ctx_hash(buf, pos - h, pos))
            if tok < 0:
                return out, False
            buf[pos] = tok
            out[s, t] = tok
    return out, True


# --- multinomial logistic regression -------------------------------------


@nb.njit(cache=True, nogil=True)
def residuals(indptr, indices, data, labels, rows, w, bias, scale, res):
    """Fill res[r] = softmax(x W + b) - onehot(y) for each listed row; return summed CE."""
    n_classes = bias.shape[0]
    logits = np.empty(n_classes)
    loss = 0.0
    for r in range(rows.shape[0]):
        i = rows[r]
        for c in range(n_classes):
            logits[c] = bias[c]
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            x = data[p] * scale
            for c in range(n_classes):
                logits[c] += w[j, c] * x
        m = logits[0]
        for c in range(1, n_classes):
            if logits[c] > m:
                m = logits[c]
        z = 0.0
        for c in range(n_classes):
            res[r, c] = math.exp(logits[c] - m)
            z += res[r, c]
        for c in range(n_classes):
            res[r, c] /= z
        y = labels[i]
        loss += m + math.log(z) - logits[y]
        res[r, y] -= 1.0
    return loss


@nb.njit(cache=True, nogil=True)
def train_epochs(indptr, indices, data, labels, perms, w, bias, lr, l2, batch_size):
    """Mini-batch gradient descent in place; W is stored as scale * w.

    The L2 decay multiplies the scalar scale instead of touching every
    weight, so each step only writes the columns present in the batch.
    Returns (status, last_batch_loss); status 1 means a non-finite loss.
    """
    n_classes = bias.shape[0]
    n = perms.shape[1]
    res = np.empty((batch_size, n_classes))
    scale = 1.0
    decay = 1.0 - lr * l2
    last = 0.0
    for e in range(perms.shape[0]):
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            rows = perms[e, start:stop]
            b = stop - start
            loss = residuals(indptr, indices, data, labels, rows, w, bias, scale, res)
            last = loss / b
            if not math.isfinite(last):
                w *= scale
                return 1, last
            scale *= decay
            step = lr / (b * scale)
            for r in range(b):
                i = rows[r]
                for p in range(indptr[i], indptr[i + 1]):
                    j = indices[p]
                    x = data[p] * step
                    for c in range(n_classes):
                        w[j, c] -= x * res[r, c]
            for c in range(n_classes):
                g = 0.0
                for r in range(b):
                    g += res[r, c]
                bias[c] -= lr * g / b
            if scale < 1e-8:
                w *= scale
                scale = 1.0
    w *= scale
    for c in range(n_classes):
        if not math.isfinite(bias[c]):
            return 1, last
    return 0, last


@nb.njit(cache=True, nogil=True)
def sparse_logits(indptr, indices, data, w, bias):
    n = indptr.shape[0] - 1
    n_classes = bias.shape[0]
    out = np.empty((n, n_classes))
    for i in range(n):
        for c in range(n_classes):
            out[i, c] = bias[c]
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            x = data[p]
            for c in range(n_classes):
                out[i, c] += w[j, c] * x
    return out
