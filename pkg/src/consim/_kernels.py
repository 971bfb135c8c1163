"""Compiled inner loops.  Grids are flat arrays indexed ``iy * W + ix``."""

from __future__ import annotations

import numpy as np
from numba import njit

# heading codes for axis-aligned motion: +x, +y, -x, -y
AXIS_DX = np.array([1, 0, -1, 0], dtype=np.int64)
AXIS_DY = np.array([0, 1, 0, -1], dtype=np.int64)


@njit(cache=True)
def raycast(occ, W, H, cx, cy, offx, offy, lens, insec):
    """Walk every ray of a table from cell ``(cx, cy)``.

    A ray stops at the first out-of-bounds or ``occ`` cell.  Returns
    ``(visible, hits)`` as sorted flat ids: in-sector cells passed before the
    stop, and the in-bounds cells that stopped a ray.
    """
    n_rays = lens.shape[0]
    mark = np.zeros(W * H, dtype=np.uint8)
    touched = np.empty(offx.size, dtype=np.int64)
    nt = 0
    for r in range(n_rays):
        for k in range(lens[r]):
            x = cx + offx[r, k]
            y = cy + offy[r, k]
            if x < 0 or y < 0 or x >= W or y >= H:
                break
            i = y * W + x
            if occ[i]:
                if mark[i] == 0:
                    touched[nt] = i
                    nt += 1
                mark[i] |= 2
                break
            if insec[r, k]:
                if mark[i] == 0:
                    touched[nt] = i
                    nt += 1
                mark[i] |= 1
    nv = 0
    nh = 0
    for j in range(nt):
        m = mark[touched[j]]
        if m & 1:
            nv += 1
        if m & 2:
            nh += 1
    vis = np.empty(nv, dtype=np.int64)
    hits = np.empty(nh, dtype=np.int64)
    nv = 0
    nh = 0
    for j in range(nt):
        i = touched[j]
        if mark[i] & 1:
            vis[nv] = i
            nv += 1
        if mark[i] & 2:
            hits[nh] = i
            nh += 1
    vis.sort()
    hits.sort()
    return vis, hits


@njit(cache=True)
def _lex_less(a, b, W):
    ax = a % W
    bx = b % W
    if ax != bx:
        return ax < bx
    return a // W < b // W


@njit(cache=True)
def bfs_tree(passable, W, H, sources):
    """Unit-cost 4-connected shortest-path tree from one or more sources.

    ``parent[c]`` is the lexicographically smallest ``(ix, iy)`` neighbour one
    step closer to the sources, which is the tree a Dijkstra search builds
    when equal-distance pops are ordered by ``(ix, iy)``.
    """
    n = W * H
    dist = np.full(n, -1, dtype=np.int32)
    parent = np.full(n, -1, dtype=np.int32)
    queue = np.empty(n, dtype=np.int64)
    head = 0
    tail = 0
    for s in sources:
        if dist[s] == -1 and passable[s]:
            dist[s] = 0
            queue[tail] = s
            tail += 1
    while head < tail:
        u = queue[head]
        head += 1
        ux = u % W
        uy = u // W
        du = dist[u]
        for d in range(4):
            if d == 0:
                if ux + 1 >= W:
                    continue
                v = u + 1
            elif d == 1:
                if ux == 0:
                    continue
                v = u - 1
            elif d == 2:
                if uy + 1 >= H:
                    continue
                v = u + W
            else:
                if uy == 0:
                    continue
                v = u - W
            if not passable[v]:
                continue
            if dist[v] == -1:
                dist[v] = du + 1
                parent[v] = u
                queue[tail] = v
                tail += 1
            elif dist[v] == du + 1 and _lex_less(u, parent[v], W):
                parent[v] = u
    return dist, parent


@njit(cache=True)
def _view_max(occ, W, H, node, offx, offy, lens, insec, P, S):
    cx = node % W
    cy = node // W
    bp = 0.0
    bs = 0.0
    for r in range(lens.shape[0]):
        for k in range(lens[r]):
            x = cx + offx[r, k]
            y = cy + offy[r, k]
            if x < 0 or y < 0 or x >= W or y >= H:
                break
            i = y * W + x
            if occ[i]:
                break
            if insec[r, k]:
                if P[i] > bp:
                    bp = P[i]
                if S[i] > bs:
                    bs = S[i]
    return bp, bs


@njit(cache=True)
def heading_code(parent_id, node, W):
    d = node - parent_id
    if d == 1:
        return 0
    if d == W:
        return 1
    if d == -1:
        return 2
    return 3


@njit(cache=True)
def score_candidates(dist, parent, W, H, cands, spacing, occ, P, S, offx, offy, lens, insec):
    """Max-pooled (primary, secondary) over the simulated views along each
    candidate's tree path: every ``spacing``-th cell plus the endpoint, each
    viewed with the heading of arrival.  Tables are stacked per heading code.
    """
    n = W * H
    memo_p = np.full(n, -1.0)
    memo_s = np.zeros(n)
    out_p = np.zeros(cands.size)
    out_s = np.zeros(cands.size)
    for j in range(cands.size):
        c = cands[j]
        if dist[c] <= 0:
            continue
        bp = 0.0
        bs = 0.0
        node = c
        first = True
        while dist[node] > 0:
            if first or dist[node] % spacing == 0:
                if memo_p[node] < 0.0:
                    h = heading_code(parent[node], node, W)
                    vp, vs = _view_max(occ, W, H, node, offx[h], offy[h], lens[h], insec[h], P, S)
                    memo_p[node] = vp
                    memo_s[node] = vs
                if memo_p[node] > bp:
                    bp = memo_p[node]
                if memo_s[node] > bs:
                    bs = memo_s[node]
            first = False
            node = parent[node]
        out_p[j] = bp
        out_s[j] = bs
    return out_p, out_s


@njit(cache=True)
def frontier_mask(state, W, H):
    """Known-free cells (state 1) with a 4-neighbour that is unknown (state 0)."""
    out = np.zeros(W * H, dtype=np.bool_)
    for i in range(W * H):
        if state[i] != 1:
            continue
        x = i % W
        y = i // W
        if (x + 1 < W and state[i + 1] == 0) or (x > 0 and state[i - 1] == 0) or \
           (y + 1 < H and state[i + W] == 0) or (y > 0 and state[i - W] == 0):
            out[i] = True
    return out


@njit(cache=True)
def pool_groups(keys, p, s):
    """Collapse runs of equal ``keys`` (already sorted): max of ``p`` and
    the sum of ``s`` taken in ascending value order, so the result does not
    depend on the input order within a run."""
    n = keys.size
    out_k = np.empty(n, dtype=np.int64)
    out_p = np.empty(n)
    out_s = np.empty(n)
    buf = np.empty(n)
    m = 0
    i = 0
    while i < n:
        j = i
        while j < n and keys[j] == keys[i]:
            j += 1
        bp = p[i]
        for k in range(i, j):
            if p[k] > bp:
                bp = p[k]
        # insertion sort of the run's secondaries, then a left-to-right sum
        g = j - i
        for k in range(g):
            v = s[i + k]
            q = k - 1
            while q >= 0 and buf[q] > v:
                buf[q + 1] = buf[q]
                q -= 1
            buf[q + 1] = v
        acc = 0.0
        for k in range(g):
            acc += buf[k]
        out_k[m] = keys[i]
        out_p[m] = bp
        out_s[m] = acc
        m += 1
        i = j
    return out_k[:m], out_p[:m], out_s[:m]


@njit(cache=True)
def stamp_disk(mask, W, H, cx, cy, px, py, ox, oy, res, ox0, oy0, radius):
    """Set ``mask`` for cells (offsets ``ox, oy`` around cell ``cx, cy``)
    whose centers lie within ``radius`` of point ``(px, py)``."""
    r2 = (radius + 1e-9) * (radius + 1e-9)
    for k in range(ox.size):
        x = cx + ox[k]
        y = cy + oy[k]
        if x < 0 or y < 0 or x >= W or y >= H:
            continue
        dx = ox0 + (x + 0.5) * res - px
        dy = oy0 + (y + 0.5) * res - py
        if dx * dx + dy * dy <= r2:
            mask[y * W + x] = True
