"""Per-pixel compositing kernels.

Rows are processed in fixed-size chunks; each chunk owns a private gradient
buffer and buffers are summed in chunk order afterwards, so results do not
depend on how many threads numba uses.
"""
import numba as nb
import numpy as np

# the bundled TBB is often too old; prefer OpenMP and fall back to the builtin pool
nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

ROWS_PER_CHUNK = 4
COLS_PER_BLOCK = 8
# contributors remembered for the backward pass, as an average per pixel of a
# chunk; pixels that do not fit are replayed instead
RECORD_SLOTS_PER_PIXEL = 160
RECORD_BUDGET = 1 << 22  # total slots per render, keeps large images cheap


@nb.njit(cache=True)
def _row_candidates(order, ry_lo, ry_hi, y, out):
    k = 0
    for idx in order:
        if ry_lo[idx] <= y <= ry_hi[idx]:
            out[k] = idx
            k += 1
    return k


@nb.njit(cache=True)
def _block_candidates(cand, nc, rx_lo, rx_hi, x0, x1, out):
    """Row candidates whose x extent overlaps pixel centres x0+0.5 .. x1-0.5, depth order kept."""
    k = 0
    lo = x0 + 0.5
    hi = x1 - 0.5
    for j in range(nc):
        idx = cand[j]
        if rx_hi[idx] >= lo and rx_lo[idx] <= hi:
            out[k] = idx
            k += 1
    return k


@nb.njit(cache=True)
def _gather(blk, nb_, means, conics, opac, bbox, colors, feats, tab):
    """Copy the block's candidates into one contiguous row each:
    [mx, my, conic_a, conic_b, conic_c, opacity, x_lo, x_hi, r, g, b, feat...]."""
    n_feat = feats.shape[1]
    for k in range(nb_):
        i = blk[k]
        for c in range(3):
            tab[k, 8 + c] = colors[i, c]
        for c in range(n_feat):
            tab[k, 11 + c] = feats[i, c]
        tab[k, 0] = means[i, 0]
        tab[k, 1] = means[i, 1]
        tab[k, 2] = conics[i, 0]
        tab[k, 3] = conics[i, 1]
        tab[k, 4] = conics[i, 2]
        tab[k, 5] = opac[i]
        tab[k, 6] = bbox[i, 0]
        tab[k, 7] = bbox[i, 1]


@nb.njit(parallel=True, cache=True)
def forward_kernel(means, conics, opac, colors, feats, order, bbox, bg, height, width, t_stop,
                   out_color, out_feat, out_alpha, out_T, out_count, rec_off, rec_n, rec_k, rec_G):
    n_feat = feats.shape[1]
    slots = rec_k.shape[1]
    n_chunks = (height + ROWS_PER_CHUNK - 1) // ROWS_PER_CHUNK
    for chunk in nb.prange(n_chunks):
        cand = np.empty(order.shape[0], dtype=np.int64)
        blk = np.empty(order.shape[0], dtype=np.int64)
        tab = np.empty((order.shape[0], 11 + n_feat))
        acc_col = np.empty(3)
        acc_feat = np.empty(n_feat)
        ck = rec_k[chunk]
        cG = rec_G[chunk]
        fill = 0
        for y in range(chunk * ROWS_PER_CHUNK, min(height, (chunk + 1) * ROWS_PER_CHUNK)):
            py = y + 0.5
            nc = _row_candidates(order, bbox[:, 2], bbox[:, 3], py, cand)
            nb_ = 0
            for x in range(width):
                if x % COLS_PER_BLOCK == 0:
                    x1 = min(x + COLS_PER_BLOCK, width)
                    nb_ = _block_candidates(cand, nc, bbox[:, 0], bbox[:, 1], x, x1, blk)
                    _gather(blk, nb_, means, conics, opac, bbox, colors, feats, tab)
                px = x + 0.5
                T = 1.0
                acc_a = 0.0
                acc_col[:] = 0.0
                acc_feat[:] = 0.0
                used = 0
                m = 0
                for k in range(nb_):
                    if px < tab[k, 6] or px > tab[k, 7]:
                        continue
                    dx = px - tab[k, 0]
                    dy = py - tab[k, 1]
                    power = 0.5 * (tab[k, 2] * dx * dx + tab[k, 4] * dy * dy) + tab[k, 3] * dx * dy
                    G = np.exp(-power)
                    a = tab[k, 5] * G
                    if fill + m < slots:
                        ck[fill + m] = k
                        cG[fill + m] = G
                    m += 1
                    w = a * T
                    for c in range(3):
                        acc_col[c] += w * tab[k, 8 + c]
                    for c in range(n_feat):
                        acc_feat[c] += w * tab[k, 11 + c]
                    acc_a += w
                    T = T * (1.0 - a)
                    used = k + 1
                    if T < t_stop:
                        break
                for c in range(3):
                    out_color[y, x, c] = acc_col[c] + T * bg[c]
                for c in range(n_feat):
                    out_feat[y, x, c] = acc_feat[c]
                out_alpha[y, x] = acc_a
                out_T[y, x] = T
                out_count[y, x] = used
                rec_n[y, x] = m
                if fill + m <= slots:
                    rec_off[y, x] = fill
                    fill += m
                else:
                    rec_off[y, x] = -1


@nb.njit(cache=True)
def _replay(tab, limit, px, py, rows, alphas, falloff, trans):
    """Redo the forward walk for one pixel; returns the number of contributors."""
    T = 1.0
    m = 0
    for k in range(limit):
        if px < tab[k, 6] or px > tab[k, 7]:
            continue
        dx = px - tab[k, 0]
        dy = py - tab[k, 1]
        power = 0.5 * (tab[k, 2] * dx * dx + tab[k, 4] * dy * dy) + tab[k, 3] * dx * dy
        G = np.exp(-power)
        a = tab[k, 5] * G
        rows[m] = k
        alphas[m] = a
        falloff[m] = G
        trans[m] = T
        m += 1
        T = T * (1.0 - a)
    return m


@nb.njit(parallel=True, cache=True)
def backward_kernel(means, conics, opac, colors, feats, order, bbox, bg, height, width,
                    count, rec_off, rec_n, rec_k, rec_G, g_color, g_feat, g_alpha, grads):
    """Accumulate dL/d(mean2d, conic, opacity, color, feature) per chunk.

    ``grads`` has shape (n_chunks, N, 9 + n_feat) with columns
    [mx, my, conic_a, conic_b, conic_c, opacity, r, g, b, feat...].
    """
    n_feat = feats.shape[1]
    n_chunks = grads.shape[0]
    for chunk in nb.prange(n_chunks):
        cand = np.empty(order.shape[0], dtype=np.int64)
        blk = np.empty(order.shape[0], dtype=np.int64)
        tab = np.empty((order.shape[0], 11 + n_feat))
        rows = np.empty(order.shape[0], dtype=np.int64)
        alphas = np.empty(order.shape[0])
        falloff = np.empty(order.shape[0])
        trans = np.empty(order.shape[0])
        S_col = np.zeros(3)
        S_feat = np.zeros(n_feat)
        gc = np.empty(3)
        gf = np.empty(n_feat)
        buf = grads[chunk]
        for y in range(chunk * ROWS_PER_CHUNK, min(height, (chunk + 1) * ROWS_PER_CHUNK)):
            py = y + 0.5
            nc = _row_candidates(order, bbox[:, 2], bbox[:, 3], py, cand)
            for x in range(width):
                if x % COLS_PER_BLOCK == 0:
                    # same lists and rows as the forward pass
                    x1 = min(x + COLS_PER_BLOCK, width)
                    nb_ = _block_candidates(cand, nc, bbox[:, 0], bbox[:, 1], x, x1, blk)
                    _gather(blk, nb_, means, conics, opac, bbox, colors, feats, tab)
                px = x + 0.5
                off = rec_off[y, x]
                if off >= 0:
                    m = rec_n[y, x]
                    T = 1.0
                    for mm in range(m):
                        k = rec_k[chunk, off + mm]
                        G = rec_G[chunk, off + mm]
                        a = tab[k, 5] * G
                        rows[mm] = k
                        falloff[mm] = G
                        alphas[mm] = a
                        trans[mm] = T
                        T = T * (1.0 - a)
                else:
                    m = _replay(tab, count[y, x], px, py, rows, alphas, falloff, trans)
                # back to front: S = sum of later contributions, R = later transmittance
                S_col[:] = 0.0
                S_feat[:] = 0.0
                R = 1.0
                ga = g_alpha[y, x]
                for c in range(3):
                    gc[c] = g_color[y, x, c]
                for c in range(n_feat):
                    gf[c] = g_feat[y, x, c]
                for mm in range(m - 1, -1, -1):
                    k = rows[mm]
                    i = blk[k]
                    a = alphas[mm]
                    Ti = trans[mm]
                    w = a * Ti
                    dL_da = ga * Ti * R
                    for c in range(3):
                        buf[i, 6 + c] += gc[c] * w
                        col = tab[k, 8 + c]
                        dL_da += gc[c] * Ti * (col - S_col[c] - R * bg[c])
                        S_col[c] = col * a + (1.0 - a) * S_col[c]
                    for c in range(n_feat):
                        buf[i, 9 + c] += gf[c] * w
                        fv = tab[k, 11 + c]
                        dL_da += gf[c] * Ti * (fv - S_feat[c])
                        S_feat[c] = fv * a + (1.0 - a) * S_feat[c]
                    R = R * (1.0 - a)
                    dx = px - tab[k, 0]
                    dy = py - tab[k, 1]
                    G = falloff[mm]
                    buf[i, 5] += dL_da * G
                    dL_dpower = -dL_da * a
                    buf[i, 0] += -dL_dpower * (tab[k, 2] * dx + tab[k, 3] * dy)
                    buf[i, 1] += -dL_dpower * (tab[k, 3] * dx + tab[k, 4] * dy)
                    buf[i, 2] += dL_dpower * 0.5 * dx * dx
                    buf[i, 3] += dL_dpower * dx * dy
                    buf[i, 4] += dL_dpower * 0.5 * dy * dy


@nb.njit(cache=True)
def merge_chunks(grads, out):
    for chunk in range(grads.shape[0]):
        out += grads[chunk]
