"""Compiled inner loops shared by the kinetic and microscopic engines.

Kernels and feedbacks are passed packed (integer code plus float parameters)
so one compiled function serves every variant.  The scalar formulas are the
same ufuncs the public numpy API uses.
"""

from __future__ import annotations

import numba
import numpy as np

from .kernels import confidence_weight, power_law_weight, radial_weight
from .sparse_feedback import pair_control

FB_NONE = 0
FB_INSTANT = 1
FB_TABLE = 2

_EMPTY_TABLE = np.zeros((1, 1))


@numba.njit(cache=True, inline="always")
def _table_index(v, lo, h, n):
    k = int(np.floor((v - lo) / h + 0.5))
    if k < 0:
        return 0
    if k > n - 1:
        return n - 1
    return k


@numba.njit(cache=True, inline="always")
def _control(x, y, p, fcode, fpar, table, tlo, th):
    # u*(x, y) of the agent at x paired with y; p = P(x, y)
    if fcode == FB_INSTANT:
        return pair_control(x, y, p, fpar[0], fpar[1], fpar[2], fpar[3],
                            fpar[4], np.int64(fpar[5]))
    if fcode == FB_TABLE:
        n = table.shape[0]
        return table[_table_index(x, tlo, th, n), _table_index(y, tlo, th, n)]
    return 0.0


@numba.njit(cache=True)
def bci_pairs(pos, left, right, alpha, kcode, kpar, fcode, fpar, table, tlo, th):
    """In-place binary interactions for the disjoint pairs (left[k], right[k])."""
    for k in range(left.size):
        a = left[k]
        b = right[k]
        x = pos[a]
        y = pos[b]
        d = y - x
        r = abs(d)
        p_xy = radial_weight(kcode, r, kpar[0], kpar[1], kpar[2])
        p_yx = radial_weight(kcode, r, kpar[0], kpar[1], kpar[2])
        x_star = x + alpha * p_xy * d
        y_star = y - alpha * p_yx * d
        if fcode != FB_NONE:
            x_star += alpha * 2.0 * _control(x, y, p_xy, fcode, fpar, table, tlo, th)
            y_star += alpha * 2.0 * _control(y, x, p_yx, fcode, fpar, table, tlo, th)
        pos[a] = x_star
        pos[b] = y_star


@numba.njit(inline="always")
def _w_zero(r, k0, k1, k2):
    return 0.0


@numba.njit(inline="always")
def _w_one(r, k0, k1, k2):
    return 1.0


@numba.njit(inline="always")
def _w_confidence(r, k0, k1, k2):
    return confidence_weight(r, k0, k1)


@numba.njit(inline="always")
def _w_power(r, k0, k1, k2):
    return power_law_weight(r, k0, k1, k2)


@numba.njit(inline="always")
def _c_none(x, y, p, f0, f1, f2, f3, f4, pen, table, tlo, th):
    return 0.0


@numba.njit(inline="always")
def _c_instant(x, y, p, f0, f1, f2, f3, f4, pen, table, tlo, th):
    return pair_control(x, y, p, f0, f1, f2, f3, f4, pen)


@numba.njit(inline="always")
def _c_table(x, y, p, f0, f1, f2, f3, f4, pen, table, tlo, th):
    n = table.shape[0]
    return table[_table_index(x, tlo, th, n), _table_index(y, tlo, th, n)]


_WEIGHTS = {0: _w_zero, 1: _w_one, 2: _w_confidence, 3: _w_power}
_CONTROLS = {FB_NONE: _c_none, FB_INSTANT: _c_instant, FB_TABLE: _c_table}
_DRIFTS = {}


def _make_micro_drift(weight, control):
    @numba.njit(parallel=True, fastmath=True)
    def drift(states, k0, k1, k2, f0, f1, f2, f3, f4, pen, table, tlo, th):
        n = states.size
        inter = np.empty(n)
        ctrl = np.empty(n)
        for i in numba.prange(n):
            xi = states[i]
            acc_p = 0.0
            acc_u = 0.0
            for j in range(n):
                d = states[j] - xi
                p = weight(abs(d), k0, k1, k2)
                acc_p += p * d
                acc_u += control(xi, states[j], p, f0, f1, f2, f3, f4, pen,
                                 table, tlo, th)
            inter[i] = acc_p / n
            ctrl[i] = acc_u / n
        return inter, ctrl

    return drift


def micro_drift(states, kcode, kpar, fcode, fpar, table, tlo, th):
    """Per-agent mean interaction and mean control over all partners j.

    A loop specialized to the (kernel, feedback) pair is compiled on first
    use; each agent's sums run over j in index order, so results do not
    depend on the thread count.
    """
    key = (int(kcode), int(fcode))
    if key not in _DRIFTS:
        _DRIFTS[key] = _make_micro_drift(_WEIGHTS[key[0]], _CONTROLS[key[1]])
    # scalars rather than arrays so LLVM can hoist them out of the pair loop
    return _DRIFTS[key](states, kpar[0], kpar[1], kpar[2], fpar[0], fpar[1], fpar[2],
                        fpar[3], fpar[4], int(fpar[5]), table, tlo, th)
