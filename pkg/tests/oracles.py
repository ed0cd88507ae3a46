"""Straight-line reference implementations used as test oracles."""

import numpy as np

from hmi import plot


def ref_get(tree, vid, key):
    table = tree.table(vid)
    if vid != plot.ROOT_VERSION and key in table.entries:
        return table.entries[key].rep
    if key in tree.root.entries:
        return tree.root.entries[key].rep
    return None


def ref_window(tree, vid, window):
    """Rows for each window position: whole window if stored, else longest leftmost covering sub-gram."""
    m = len(window)
    whole = ref_get(tree, vid, window)
    if whole is not None:
        return [whole[i] for i in range(m)]
    rows = []
    for i in range(m):
        row = None
        for k in range(m - 1, 0, -1):
            for start in range(max(0, i - k + 1), min(i, m - k) + 1):
                rep = ref_get(tree, vid, window[start:start + k])
                if rep is not None:
                    row = rep[i - start]
                    break
            if row is not None:
                break
        rows.append(row)
    return rows


def ref_aggregate(tree, vid, tokens):
    """Normalized sum of every window representation that covers each token."""
    L, n = len(tokens), tree.root.n
    left = (n - 1) // 2
    windows = [(max(0, c - left), min(L, c - left + n)) for c in range(L)]
    out = []
    for t in range(L):
        acc, cnt = np.zeros(tree.root.d), 0
        for lo, hi in windows:
            if lo <= t < hi:
                acc = acc + ref_window(tree, vid, tuple(tokens[lo:hi]))[t - lo]
                cnt += 1
        out.append(acc / cnt)
    return np.array(out)
