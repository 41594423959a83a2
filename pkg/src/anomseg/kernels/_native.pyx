# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels; semantics identical to kernels/pure.py.

Float kernels replicate the pure backend's operation order (and the
extension builds with -ffp-contract=off), so results are bit-identical
across backends.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef cnp.uint64_t u64
ctypedef cnp.float64_t f64
ctypedef cnp.int32_t i32


def splitmix64_fill(seed, Py_ssize_t n):
    cdef u64 state = <u64> (int(seed) & 0xFFFFFFFFFFFFFFFF)
    out = np.empty(n, dtype=np.uint64)
    cdef u64[::1] o = out
    cdef u64 z
    cdef Py_ssize_t i
    for i in range(n):
        state += <u64> 0x9E3779B97F4A7C15
        z = state
        z = (z ^ (z >> 30)) * <u64> 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * <u64> 0x94D049BB133111EB
        o[i] = z ^ (z >> 31)
    return out


def patch_matrix(image, int k):
    img_arr = np.ascontiguousarray(image, dtype=np.float64)
    cdef f64[:, :, ::1] img = img_arr
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], c = img.shape[2]
    cdef int pad = k // 2
    out = np.zeros((h * w, k * k * c), dtype=np.float64)
    cdef f64[:, ::1] o = out
    cdef Py_ssize_t y, x, dy, dx, ch, yy, xx, row, col
    for y in range(h):
        for x in range(w):
            row = y * w + x
            for dy in range(k):
                yy = y + dy - pad
                if yy < 0 or yy >= h:
                    continue
                for dx in range(k):
                    xx = x + dx - pad
                    if xx < 0 or xx >= w:
                        continue
                    col = (dy * k + dx) * c
                    for ch in range(c):
                        o[row, col + ch] = img[yy, xx, ch]
    return out


def patch_scatter(dpatches, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c, int k):
    dp_arr = np.ascontiguousarray(dpatches, dtype=np.float64)
    cdef f64[:, ::1] dp = dp_arr
    cdef int pad = k // 2
    out = np.zeros((h, w, c), dtype=np.float64)
    cdef f64[:, :, ::1] o = out
    cdef Py_ssize_t dy, dx, y, x, ch, r, cc, col
    # accumulate in (dy, dx) order to match the pure backend bit-exactly
    for dy in range(k):
        for dx in range(k):
            col = (dy * k + dx) * c
            for y in range(h):
                r = y + dy - pad
                if r < 0 or r >= h:
                    continue
                for x in range(w):
                    cc = x + dx - pad
                    if cc < 0 or cc >= w:
                        continue
                    for ch in range(c):
                        o[r, cc, ch] += dp[y * w + x, col + ch]
    return out


def label_components(labels, ignore_value, int connectivity=8):
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    lab_arr = np.ascontiguousarray(labels, dtype=np.int32)
    cdef i32[:, ::1] lab = lab_arr
    cdef Py_ssize_t h = lab.shape[0], w = lab.shape[1]
    comp_arr = np.full((h, w), -1, dtype=np.int32)
    cdef i32[:, ::1] comp = comp_arr
    stack_arr = np.empty(h * w, dtype=np.int64)
    cdef cnp.int64_t[::1] stack = stack_arr
    min_r_list = []
    min_c_list = []
    cdef i32 ign = <i32> int(ignore_value)
    cdef int conn = connectivity
    cdef Py_ssize_t r0, c0, r, cc, rr, ccc, top, n_id = 0
    cdef Py_ssize_t min_r, min_c, idx
    cdef i32 val
    cdef int[8] drs = [-1, -1, -1, 0, 0, 1, 1, 1]
    cdef int[8] dcs = [-1, 0, 1, -1, 1, -1, 0, 1]
    cdef int[4] drs4 = [-1, 0, 0, 1]
    cdef int[4] dcs4 = [0, -1, 1, 0]
    cdef int nn, j
    nn = 8 if conn == 8 else 4
    for r0 in range(h):
        for c0 in range(w):
            if comp[r0, c0] != -1 or lab[r0, c0] == ign:
                continue
            val = lab[r0, c0]
            comp[r0, c0] = <i32> n_id
            stack[0] = r0 * w + c0
            top = 1
            min_r = r0
            min_c = c0
            while top > 0:
                top -= 1
                idx = stack[top]
                r = idx // w
                cc = idx % w
                for j in range(nn):
                    if conn == 8:
                        rr = r + drs[j]
                        ccc = cc + dcs[j]
                    else:
                        rr = r + drs4[j]
                        ccc = cc + dcs4[j]
                    if rr < 0 or rr >= h or ccc < 0 or ccc >= w:
                        continue
                    if comp[rr, ccc] == -1 and lab[rr, ccc] == val:
                        comp[rr, ccc] = <i32> n_id
                        stack[top] = rr * w + ccc
                        top += 1
                        if rr < min_r:
                            min_r = rr
                        if ccc < min_c:
                            min_c = ccc
            min_r_list.append(min_r)
            min_c_list.append(min_c)
            n_id += 1
    if n_id == 0:
        return comp_arr, 0
    order = np.lexsort(
        (np.arange(n_id), np.asarray(min_c_list), np.asarray(min_r_list))
    )
    remap = np.empty(n_id, dtype=np.int32)
    remap[order] = np.arange(n_id, dtype=np.int32)
    mask = comp_arr >= 0
    comp_arr[mask] = remap[comp_arr[mask]]
    return comp_arr, int(n_id)


def bilinear_resize(a, Py_ssize_t out_h, Py_ssize_t out_w):
    src_arr = np.ascontiguousarray(a, dtype=np.float64)
    cdef f64[:, ::1] src = src_arr
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    cdef double sy = (<double> (h - 1)) / (out_h - 1) if out_h > 1 else 0.0
    cdef double sx = (<double> (w - 1)) / (out_w - 1) if out_w > 1 else 0.0
    out = np.empty((out_h, out_w), dtype=np.float64)
    cdef f64[:, ::1] o = out
    cdef Py_ssize_t i, j, y0, x0, y1, x1
    cdef double ys, xs, fy, fx, top, bot
    for i in range(out_h):
        ys = i * sy
        y0 = <Py_ssize_t> ys
        if y0 > h - 1:
            y0 = h - 1
        y1 = y0 + 1
        if y1 > h - 1:
            y1 = h - 1
        fy = ys - y0
        for j in range(out_w):
            xs = j * sx
            x0 = <Py_ssize_t> xs
            if x0 > w - 1:
                x0 = w - 1
            x1 = x0 + 1
            if x1 > w - 1:
                x1 = w - 1
            fx = xs - x0
            top = (1.0 - fx) * src[y0, x0] + fx * src[y0, x1]
            bot = (1.0 - fx) * src[y1, x0] + fx * src[y1, x1]
            o[i, j] = (1.0 - fy) * top + fy * bot
    return out
