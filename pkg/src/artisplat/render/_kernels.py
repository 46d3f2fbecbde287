"""Numba tile rasteriser: forward compositing and its exact reverse pass.

All Gaussians arrive already projected (2D mean, conic, opacity, feature
vector) and sorted front to back.  Per pixel the forward pass composites

    w_i = opacity_i * exp(-q_i / 2),  q_i = d^T conic_i d
    out = sum_i f_i w_i T_i,          T_i = prod_{j<i} (1 - w_j)

stopping once T drops below ``t_min``.  Far tails are faded out with a C1
smoothstep between ``q_fade`` and ``q_max`` (where exp(-q/2) is already
below 1e-6), so the footprint is finite without introducing jumps.  Both
passes skip exactly the Gaussians with ``q_i > q_max``.
"""
import numba as nb
import numpy as np

TILE = 8


@nb.njit(cache=True, inline="always")
def _fade(q, q_fade, q_max):
    """Return (factor, d factor / dq)."""
    if q <= q_fade:
        return 1.0, 0.0
    span = q_max - q_fade
    u = (q - q_fade) / span
    return 1.0 - u * u * (3.0 - 2.0 * u), -6.0 * u * (1.0 - u) / span


@nb.njit(cache=True)
def bin_tiles(mean2d, radius, order, width, height):
    """CSR lists of Gaussian ids per tile, each list in depth order."""
    tx = (width + TILE - 1) // TILE
    ty = (height + TILE - 1) // TILE
    counts = np.zeros(tx * ty + 1, dtype=np.int64)
    rect = np.empty((order.shape[0], 4), dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        r = radius[g]
        x0 = max(int(np.floor((mean2d[g, 0] - r) / TILE)), 0)
        x1 = min(int(np.floor((mean2d[g, 0] + r) / TILE)), tx - 1)
        y0 = max(int(np.floor((mean2d[g, 1] - r) / TILE)), 0)
        y1 = min(int(np.floor((mean2d[g, 1] + r) / TILE)), ty - 1)
        rect[k, 0] = x0
        rect[k, 1] = x1
        rect[k, 2] = y0
        rect[k, 3] = y1
        for yy in range(y0, y1 + 1):
            for xx in range(x0, x1 + 1):
                counts[yy * tx + xx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        for yy in range(rect[k, 2], rect[k, 3] + 1):
            for xx in range(rect[k, 0], rect[k, 1] + 1):
                t = yy * tx + xx
                ids[fill[t]] = order[k]
                fill[t] += 1
    return offsets, ids


@nb.njit(cache=True)
def forward(mean2d, conic, opacity, feat, offsets, ids, width, height, t_min, q_fade, q_max):
    nf = feat.shape[1]
    tx = (width + TILE - 1) // TILE
    out = np.zeros((height, width, nf), dtype=feat.dtype)
    acc = np.zeros((height, width), dtype=feat.dtype)
    n_seen = np.zeros((height, width), dtype=np.int64)
    for y in range(height):
        py = y + 0.5
        for x in range(width):
            px = x + 0.5
            t = (y // TILE) * tx + x // TILE
            trans = 1.0
            last = offsets[t]
            for k in range(offsets[t], offsets[t + 1]):
                g = ids[k]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                last = k + 1
                if q > q_max:
                    continue
                fade, _ = _fade(q, q_fade, q_max)
                w = opacity[g] * np.exp(-0.5 * q) * fade
                wt = w * trans
                for f in range(nf):
                    out[y, x, f] += feat[g, f] * wt
                acc[y, x] += wt
                trans *= 1.0 - w
                if trans < t_min:
                    break
            n_seen[y, x] = last - offsets[t]
    return out, acc, n_seen


@nb.njit(cache=True)
def backward(mean2d, conic, opacity, feat, offsets, ids, n_seen, width, height, q_fade, q_max, g_out, g_acc):
    n = mean2d.shape[0]
    nf = feat.shape[1]
    tx = (width + TILE - 1) // TILE
    d_mean2d = np.zeros((n, 2), dtype=feat.dtype)
    d_conic = np.zeros((n, 3), dtype=feat.dtype)
    d_opacity = np.zeros(n, dtype=feat.dtype)
    d_feat = np.zeros((n, nf), dtype=feat.dtype)
    longest = 0
    for t in range(offsets.shape[0] - 1):
        longest = max(longest, offsets[t + 1] - offsets[t])
    gid = np.empty(longest, dtype=np.int64)
    ws = np.empty(longest, dtype=feat.dtype)
    ts = np.empty(longest, dtype=feat.dtype)
    es = np.empty(longest, dtype=feat.dtype)
    dlog = np.empty(longest, dtype=feat.dtype)
    for y in range(height):
        py = y + 0.5
        for x in range(width):
            px = x + 0.5
            t = (y // TILE) * tx + x // TILE
            # replay the forward pass to recover per-contributor w and T
            m = 0
            trans = 1.0
            for k in range(offsets[t], offsets[t] + n_seen[y, x]):
                g = ids[k]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                if q > q_max:
                    continue
                fade, dfade = _fade(q, q_fade, q_max)
                e = np.exp(-0.5 * q) * fade
                w = opacity[g] * e
                gid[m] = g
                ws[m] = w
                ts[m] = trans
                es[m] = e
                # d w / d q = w * dlog, guarded for the fade endpoint where fade == 0
                dlog[m] = -0.5 + (dfade / fade if fade > 0.0 else 0.0)
                m += 1
                trans *= 1.0 - w
            # back to front; behind = value of everything after i, relative to T_i+1
            behind = 0.0
            ga = g_acc[y, x]
            for i in range(m - 1, -1, -1):
                g = gid[i]
                w = ws[i]
                ti = ts[i]
                s = ga
                for f in range(nf):
                    s += g_out[y, x, f] * feat[g, f]
                    d_feat[g, f] += g_out[y, x, f] * w * ti
                dw = ti * (s - behind)
                behind = s * w + (1.0 - w) * behind
                d_opacity[g] += dw * es[i]
                dq = dw * w * dlog[i]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                a = conic[g, 0]
                b = conic[g, 1]
                c = conic[g, 2]
                d_mean2d[g, 0] += dq * (-2.0) * (a * dx + b * dy)
                d_mean2d[g, 1] += dq * (-2.0) * (b * dx + c * dy)
                d_conic[g, 0] += dq * dx * dx
                d_conic[g, 1] += dq * 2.0 * dx * dy
                d_conic[g, 2] += dq * dy * dy
    return d_mean2d, d_conic, d_opacity, d_feat
