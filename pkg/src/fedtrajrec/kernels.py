"""Hot inner loops, each in a numba flavour and a plain numpy/python flavour.

The public names at the bottom of the module point at whichever flavour
``_accel.USE_NUMBA`` selects. Both flavours are always importable so the
benchmark and the equivalence tests can compare them directly.
"""
import heapq

import numpy as np

from ._accel import USE_NUMBA, njit


# --------------------------------------------------------------------------
# point-to-segment distances
# --------------------------------------------------------------------------

def segment_distances_numpy(px, py, ax, ay, bx, by):
    """Distance and clamped projection ratio of every point to every segment.

    ``px, py`` have shape (M,); segment endpoint arrays have shape (L,).
    Returns two (M, L) arrays.
    """
    px = np.asarray(px, dtype=np.float64)[:, None]
    py = np.asarray(py, dtype=np.float64)[:, None]
    dx = (bx - ax)[None, :]
    dy = (by - ay)[None, :]
    seg2 = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = ((px - ax[None, :]) * dx + (py - ay[None, :]) * dy) / seg2
    t = np.where(seg2 > 0.0, t, 0.0)
    t = np.clip(t, 0.0, 1.0)
    qx = ax[None, :] + t * dx
    qy = ay[None, :] + t * dy
    return np.hypot(px - qx, py - qy), t


def _segment_distances_loop(px, py, ax, ay, bx, by):
    m = px.shape[0]
    n = ax.shape[0]
    dist = np.empty((m, n))
    ratio = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            dx = bx[j] - ax[j]
            dy = by[j] - ay[j]
            seg2 = dx * dx + dy * dy
            t = 0.0
            if seg2 > 0.0:
                t = ((px[i] - ax[j]) * dx + (py[i] - ay[j]) * dy) / seg2
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            ex = px[i] - (ax[j] + t * dx)
            ey = py[i] - (ay[j] + t * dy)
            dist[i, j] = np.sqrt(ex * ex + ey * ey)
            ratio[i, j] = t
    return dist, ratio


segment_distances_numba = njit(_segment_distances_loop)


# --------------------------------------------------------------------------
# single-source shortest paths
# --------------------------------------------------------------------------

def dijkstra_python(indptr, heads, weights, edge_ids, source):
    """Heap Dijkstra over a CSR adjacency.

    Returns (dist, pred_edge); unreachable nodes have dist = inf and
    pred_edge = -1.
    """
    n = indptr.shape[0] - 1
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    dist[source] = 0.0
    heap = [(0.0, int(source))]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for k in range(indptr[u], indptr[u + 1]):
            v = heads[k]
            nd = d + weights[k]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = edge_ids[k]
                heapq.heappush(heap, (nd, int(v)))
    return dist, pred


def _dijkstra_arrays(indptr, heads, weights, edge_ids, source):
    n = indptr.shape[0] - 1
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    cap = heads.shape[0] + 1
    hkey = np.empty(cap)
    hval = np.empty(cap, dtype=np.int64)
    size = 0
    dist[source] = 0.0
    hkey[0] = 0.0
    hval[0] = source
    size = 1
    while size > 0:
        d = hkey[0]
        u = hval[0]
        size -= 1
        # sift the last element down from the root
        if size > 0:
            key = hkey[size]
            val = hval[size]
            i = 0
            while True:
                c = 2 * i + 1
                if c >= size:
                    break
                if c + 1 < size and (hkey[c + 1] < hkey[c]
                                     or (hkey[c + 1] == hkey[c] and hval[c + 1] < hval[c])):
                    c += 1
                if hkey[c] < key or (hkey[c] == key and hval[c] < val):
                    hkey[i] = hkey[c]
                    hval[i] = hval[c]
                    i = c
                else:
                    break
            hkey[i] = key
            hval[i] = val
        if done[u]:
            continue
        done[u] = True
        for k in range(indptr[u], indptr[u + 1]):
            v = heads[k]
            nd = d + weights[k]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = edge_ids[k]
                # sift up
                i = size
                size += 1
                while i > 0:
                    p = (i - 1) // 2
                    if hkey[p] > nd or (hkey[p] == nd and hval[p] > v):
                        hkey[i] = hkey[p]
                        hval[i] = hval[p]
                        i = p
                    else:
                        break
                hkey[i] = nd
                hval[i] = v
    return dist, pred


dijkstra_numba = njit(_dijkstra_arrays)


# --------------------------------------------------------------------------
# Viterbi over padded candidate lattices
# --------------------------------------------------------------------------

def viterbi_numpy(emission, transition):
    """Most probable state path.

    ``emission`` is (T, S) log-probabilities with -inf padding, ``transition``
    is (T-1, S, S) log-probabilities (from, to). Ties resolve to the lowest
    state index. Returns (path, score); score is -inf when no path exists.
    """
    n_steps, n_states = emission.shape
    score = emission[0].copy()
    back = np.zeros((n_steps, n_states), dtype=np.int64)
    for t in range(1, n_steps):
        cand = score[:, None] + transition[t - 1]
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(n_states)] + emission[t]
    path = np.empty(n_steps, dtype=np.int64)
    path[-1] = int(np.argmax(score))
    best = score[path[-1]]
    for t in range(n_steps - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(best)


def _viterbi_loop(emission, transition):
    n_steps, n_states = emission.shape
    score = emission[0].copy()
    nxt = np.empty(n_states)
    back = np.zeros((n_steps, n_states), dtype=np.int64)
    for t in range(1, n_steps):
        for j in range(n_states):
            bi = 0
            bv = score[0] + transition[t - 1, 0, j]
            for i in range(1, n_states):
                v = score[i] + transition[t - 1, i, j]
                if v > bv:
                    bv = v
                    bi = i
            back[t, j] = bi
            nxt[j] = bv + emission[t, j]
        score[:] = nxt
    path = np.empty(n_steps, dtype=np.int64)
    bj = 0
    for j in range(1, n_states):
        if score[j] > score[bj]:
            bj = j
    path[n_steps - 1] = bj
    best = score[bj]
    for t in range(n_steps - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, best


viterbi_numba = njit(_viterbi_loop)


if USE_NUMBA:
    segment_distances = segment_distances_numba
    dijkstra = dijkstra_numba
    viterbi = viterbi_numba
else:
    segment_distances = segment_distances_numpy
    dijkstra = dijkstra_python
    viterbi = viterbi_numpy
