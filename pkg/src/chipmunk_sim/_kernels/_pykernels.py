"""Pure numpy fallback for the compiled kernels. Same contracts, slower."""

import numpy as np


def block_mac(acc, w, v, lo=-32768, hi=32767):
    """acc[u] += sum_j w[u, j] * v[j], saturating to [lo, hi] after every term."""
    n, m = w.shape
    if acc.shape[0] != n or v.shape[0] != m:
        raise ValueError("block_mac shape mismatch")
    a = acc.astype(np.int32)
    w32 = w.astype(np.int32)
    for j in np.flatnonzero(v):
        # zero terms leave an in-range accumulator unchanged
        a += w32[:, j] * int(v[j])
        np.clip(a, lo, hi, out=a)
    acc[:] = a


def sat_add(acc, incoming, lo=-32768, hi=32767):
    """acc[u] = sat(incoming[u] + acc[u]) in place."""
    if incoming.shape[0] != acc.shape[0]:
        raise ValueError("sat_add shape mismatch")
    acc[:] = np.clip(incoming.astype(np.int64) + acc, lo, hi)
