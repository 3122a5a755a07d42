# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Shortest augmenting path LSA (Jonker-Volgenant with Crouse's rectangular extension).

Expects ``nr <= nc``. Tie-breaking matches ``_lsa_py.solve`` exactly: among
columns with equal reduced path cost, an unassigned column wins, then the
lowest column index.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def solve(double[:, ::1] cost):
    cdef Py_ssize_t nr = cost.shape[0]
    cdef Py_ssize_t nc = cost.shape[1]
    if nr > nc:
        raise ValueError("kernel expects rows <= cols")

    u_arr = np.zeros(nr, dtype=np.float64)
    v_arr = np.zeros(nc, dtype=np.float64)
    spc_arr = np.empty(nc, dtype=np.float64)
    col4row_arr = np.full(nr, -1, dtype=np.intp)
    row4col_arr = np.full(nc, -1, dtype=np.intp)
    path_arr = np.full(nc, -1, dtype=np.intp)
    sr_arr = np.zeros(nr, dtype=np.uint8)
    sc_arr = np.zeros(nc, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef double[::1] spc = spc_arr
    cdef Py_ssize_t[::1] col4row = col4row_arr
    cdef Py_ssize_t[::1] row4col = row4col_arr
    cdef Py_ssize_t[::1] path = path_arr
    cdef unsigned char[::1] SR = sr_arr
    cdef unsigned char[::1] SC = sc_arr

    cdef Py_ssize_t cur, i, j, sink, best, tmp
    cdef double min_val, lowest, r

    for cur in range(nr):
        for j in range(nc):
            spc[j] = INFINITY
            path[j] = -1
            SC[j] = 0
        for i in range(nr):
            SR[i] = 0
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            SR[i] = 1
            lowest = INFINITY
            best = -1
            for j in range(nc):
                if SC[j]:
                    continue
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < spc[j]:
                    path[j] = i
                    spc[j] = r
                if best == -1 or spc[j] < lowest or (spc[j] == lowest and row4col[j] == -1 and row4col[best] != -1):
                    lowest = spc[j]
                    best = j
            if lowest == INFINITY:
                raise ValueError("cost matrix is infeasible")
            min_val = lowest
            SC[best] = 1
            if row4col[best] == -1:
                sink = best
            else:
                i = row4col[best]

        u[cur] += min_val
        for i in range(nr):
            if SR[i] and i != cur:
                u[i] += min_val - spc[col4row[i]]
        for j in range(nc):
            if SC[j]:
                v[j] -= min_val - spc[j]

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            tmp = col4row[i]
            col4row[i] = j
            j = tmp
            if i == cur:
                break

    return col4row_arr, u_arr, v_arr
