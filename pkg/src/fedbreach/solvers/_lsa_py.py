"""Pure numpy fallback for the shortest augmenting path LSA kernel.

Same algorithm and tie-breaking as the compiled ``_lsa`` module; the inner
column scan is vectorised instead of looped.
"""

import numpy as np


def solve(cost):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    nr, nc = cost.shape
    if nr > nc:
        raise ValueError("kernel expects rows <= cols")
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.intp)
    row4col = np.full(nc, -1, dtype=np.intp)
    for cur in range(nr):
        spc = np.full(nc, np.inf)
        path = np.full(nc, -1, dtype=np.intp)
        SR = np.zeros(nr, dtype=bool)
        SC = np.zeros(nc, dtype=bool)
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            SR[i] = True
            r = min_val + cost[i] - u[i] - v
            upd = ~SC & (r < spc)
            path[upd] = i
            spc[upd] = r[upd]
            cand = np.where(SC, np.inf, spc)
            lowest = cand.min()
            if lowest == np.inf:
                raise ValueError("cost matrix is infeasible")
            ties = np.flatnonzero((cand == lowest) & ~SC)
            free = ties[row4col[ties] == -1]
            best = int(free[0]) if free.size else int(ties[0])
            min_val = lowest
            SC[best] = True
            if row4col[best] == -1:
                sink = best
            else:
                i = int(row4col[best])

        u[cur] += min_val
        others = np.flatnonzero(SR)
        others = others[others != cur]
        u[others] += min_val - spc[col4row[others]]
        v[SC] -= min_val - spc[SC]

        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur:
                break
    return col4row, u, v
