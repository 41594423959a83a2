"""Pure NumPy implementations of the hot kernels.

These are the reference semantics; the compiled backend in ``_native.pyx``
must reproduce them bit-exactly (integer kernels) or operation-for-operation
(float kernels, no reassociation).
"""

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64_fill(seed, n):
    """Return the next ``n`` raw splitmix64 outputs for a generator at ``seed``.

    State k of the recurrence is ``seed + (k+1)*gamma`` (mod 2**64), so the
    whole stream vectorizes over a counter.
    """
    with np.errstate(over="ignore"):
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = (np.uint64(seed) + idx * _GAMMA) & _MASK
        z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _MASK
        z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _MASK
        z = z ^ (z >> np.uint64(31))
    return z


def patch_matrix(image, k):
    """im2col: per-pixel flattened k x k zero-padded patch.

    image: (H, W, C) float64.  Returns (H*W, k*k*C), row-major over pixels,
    patch flattened as (dy, dx, channel).
    """
    h, w, c = image.shape
    pad = k // 2
    padded = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=image.dtype)
    padded[pad : pad + h, pad : pad + w, :] = image
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    # win: (H, W, C, k, k) -> (H, W, k, k, C)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, k * k * c)


def patch_scatter(dpatches, h, w, c, k):
    """Adjoint of patch_matrix: accumulate patch gradients back onto the image."""
    pad = k // 2
    acc = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=dpatches.dtype)
    dp = dpatches.reshape(h, w, k, k, c)
    for dy in range(k):
        for dx in range(k):
            acc[dy : dy + h, dx : dx + w, :] += dp[:, :, dy, dx, :]
    return acc[pad : pad + h, pad : pad + w, :].copy()


_NEIGH8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
_NEIGH4 = ((-1, 0), (0, -1), (0, 1), (1, 0))


def label_components(labels, ignore_value, connectivity=8):
    """Connected components of same-valued pixels (8- or 4-connectivity).

    labels: (H, W) integer map.  Pixels equal to ``ignore_value`` get
    component id -1.  Components are numbered 0..n-1 ordered by
    (min row, min col, scan order of first pixel).
    Returns (component map int32, component count).
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    offsets = _NEIGH8 if connectivity == 8 else _NEIGH4
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int32)
    order_keys = []
    next_id = 0
    stack = []
    for r0 in range(h):
        for c0 in range(w):
            if comp[r0, c0] != -1 or labels[r0, c0] == ignore_value:
                continue
            val = labels[r0, c0]
            comp[r0, c0] = next_id
            stack.append((r0, c0))
            min_r, min_c = r0, c0
            while stack:
                r, c = stack.pop()
                for dr, dc in offsets:
                    rr = r + dr
                    cc = c + dc
                    if rr < 0 or rr >= h or cc < 0 or cc >= w:
                        continue
                    if comp[rr, cc] == -1 and labels[rr, cc] == val:
                        comp[rr, cc] = next_id
                        stack.append((rr, cc))
                        if rr < min_r:
                            min_r = rr
                        if cc < min_c:
                            min_c = cc
            order_keys.append((min_r, min_c, next_id))
            next_id += 1
    # renumber by (min row, min col, discovery order)
    remap = np.empty(next_id, dtype=np.int32)
    for new_id, (_, _, old_id) in enumerate(sorted(order_keys)):
        remap[old_id] = new_id
    mask = comp >= 0
    comp[mask] = remap[comp[mask]]
    return comp, next_id


def bilinear_resize(a, out_h, out_w):
    """Align-corners bilinear resampling of a 2-D float64 map."""
    h, w = a.shape
    sy = (h - 1) / (out_h - 1) if out_h > 1 else 0.0
    sx = (w - 1) / (out_w - 1) if out_w > 1 else 0.0
    ys = np.arange(out_h, dtype=np.float64) * sy
    xs = np.arange(out_w, dtype=np.float64) * sx
    y0 = np.minimum(ys.astype(np.int64), h - 1)
    x0 = np.minimum(xs.astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    v00 = a[y0[:, None], x0[None, :]]
    v01 = a[y0[:, None], x1[None, :]]
    v10 = a[y1[:, None], x0[None, :]]
    v11 = a[y1[:, None], x1[None, :]]
    top = (1.0 - fx) * v00 + fx * v01
    bot = (1.0 - fx) * v10 + fx * v11
    return (1.0 - fy) * top + fy * bot
