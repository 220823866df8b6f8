"""Pure-Python tape interpreter and RK4 loop.

Mirrors ``_ckernels.pyx`` operation for operation and is used when the
compiled extension is unavailable. Every function returns a status code
(0 ok, 1 division by zero, 2 log domain, 3 singular power, 4 non-finite)
instead of raising, so both backends share the error handling in
:mod:`varlab.kernels`.
"""

from __future__ import annotations

import math

import numpy as np

OK, DIV0, LOGDOM, POWSING, NONFINITE = 0, 1, 2, 3, 4
_isfinite = math.isfinite


def _value(tape, x):
    st = []
    push, pop = st.append, st.pop
    for op, ia, fa in tape:
        if op == 0:
            push(fa)
        elif op == 1:
            push(x[ia])
        elif op == 7:
            st[-1] = -st[-1]
        elif op <= 5:
            b = pop()
            a = st[-1]
            if op == 2:
                st[-1] = a + b
            elif op == 3:
                st[-1] = a - b
            elif op == 4:
                st[-1] = a * b
            else:
                if b == 0.0:
                    return DIV0, 0.0
                st[-1] = a / b
        elif op == 6:
            a = st[-1]
            if ia == 0:
                st[-1] = 1.0
            elif ia < 0 and a == 0.0:
                return POWSING, 0.0
            else:
                try:
                    st[-1] = a**ia
                except OverflowError:
                    return NONFINITE, 0.0
        elif op == 8:
            st[-1] = math.sin(st[-1])
        elif op == 9:
            st[-1] = math.cos(st[-1])
        elif op == 10:
            try:
                st[-1] = math.exp(st[-1])
            except OverflowError:
                return NONFINITE, 0.0
        else:
            a = st[-1]
            if a <= 0.0:
                return LOGDOM, 0.0
            st[-1] = math.log(a)
    r = st[-1]
    return (OK, r) if _isfinite(r) else (NONFINITE, r)


def _dual(tape, x, v, second):
    """Forward pass carrying (value, d1, d2); d2 is skipped when ``second`` is false."""
    s0, s1, s2 = [], [], []
    for op, ia, fa in tape:
        if op == 0:
            s0.append(fa), s1.append(0.0), s2.append(0.0)
            continue
        if op == 1:
            s0.append(x[ia]), s1.append(v[ia]), s2.append(0.0)
            continue
        if 2 <= op <= 5:
            b, b1, b2 = s0.pop(), s1.pop(), s2.pop()
            a, a1, a2 = s0[-1], s1[-1], s2[-1]
            if op == 2:
                r, r1, r2 = a + b, a1 + b1, a2 + b2
            elif op == 3:
                r, r1, r2 = a - b, a1 - b1, a2 - b2
            elif op == 4:
                r, r1 = a * b, a1 * b + a * b1
                r2 = a2 * b + 2.0 * a1 * b1 + a * b2 if second else 0.0
            else:
                if b == 0.0:
                    return DIV0, 0.0, 0.0, 0.0
                r = a / b
                r1 = (a1 - r * b1) / b
                r2 = (a2 - 2.0 * r1 * b1 - r * b2) / b if second else 0.0
        else:
            a, a1, a2 = s0[-1], s1[-1], s2[-1]
            if op == 7:
                r, r1, r2 = -a, -a1, -a2
            elif op == 6:
                k = ia
                if k == 0:
                    r, r1, r2 = 1.0, 0.0, 0.0
                elif k < 0 and a == 0.0:
                    return POWSING, 0.0, 0.0, 0.0
                else:
                    try:
                        r = a**k
                        p1 = k * a ** (k - 1)
                        p2 = 0.0 if k == 1 else k * (k - 1) * a ** (k - 2)
                    except OverflowError:
                        return NONFINITE, 0.0, 0.0, 0.0
                    r1 = p1 * a1
                    r2 = p1 * a2 + p2 * a1 * a1
            elif op == 8:
                r, c = math.sin(a), math.cos(a)
                r1, r2 = c * a1, c * a2 - r * a1 * a1
            elif op == 9:
                r, s = math.cos(a), math.sin(a)
                r1, r2 = -s * a1, -s * a2 - r * a1 * a1
            elif op == 10:
                try:
                    r = math.exp(a)
                except OverflowError:
                    return NONFINITE, 0.0, 0.0, 0.0
                r1, r2 = r * a1, r * (a2 + a1 * a1)
            else:
                if a <= 0.0:
                    return LOGDOM, 0.0, 0.0, 0.0
                r = math.log(a)
                q = a1 / a
                r1, r2 = q, a2 / a - q * q
        s0[-1], s1[-1], s2[-1] = r, r1, r2
    r, r1, r2 = s0[-1], s1[-1], s2[-1]
    if not (_isfinite(r) and _isfinite(r1) and _isfinite(r2)):
        return NONFINITE, r, r1, r2
    return OK, r, r1, r2


def values(prog, x, out):
    xs = x.tolist()
    for k, tape in enumerate(prog.py_tape):
        status, r = _value(tape, xs)
        if status:
            return status
        out[k] = r
    return OK


def dual2(prog, x, v, val, d1, d2):
    xs, vs = x.tolist(), v.tolist()
    for k, tape in enumerate(prog.py_tape):
        status, r, r1, r2 = _dual(tape, xs, vs, True)
        if status:
            return status
        val[k], d1[k], d2[k] = r, r1, r2
    return OK


def _jac_list(tapes, xs, n):
    jac = []
    for tape in tapes:
        row = []
        for j in range(n):
            e = [0.0] * n
            e[j] = 1.0
            status, _, r1, _ = _dual(tape, xs, e, False)
            if status:
                return status, None
            row.append(r1)
        jac.append(row)
    return OK, jac


def jacobian(prog, x, out):
    status, jac = _jac_list(prog.py_tape, x.tolist(), prog.n)
    if status:
        return status
    out[:, :] = jac
    return OK


def _rhs(tapes, x, n, c):
    """Return (status, f0*c0 + sum_i gi*ci) for an affine system packed drift-first."""
    out = [0.0] * n
    for blk, ck in enumerate(c):
        if ck == 0.0:
            continue
        base = blk * n
        for i in range(n):
            status, r = _value(tapes[base + i], x)
            if status:
                return status, out
            out[i] += ck * r
    return OK, out


def _rhs_jac(tapes, x, n, c):
    jac = np.zeros((n, n))
    for blk, ck in enumerate(c):
        if ck == 0.0:
            continue
        status, j = _jac_list(tapes[blk * n : (blk + 1) * n], x, n)
        if status:
            return status, jac
        jac += ck * np.asarray(j)
    return OK, jac


def rk4_affine(prog, n, m, x0, node_times, step_cell, coef, states, dstart, dend, stepjac):
    """Classical RK4 on ``x' = sum_k coef[cell, k] * F_k(x)`` with F_0 the drift.

    Fills ``states`` (N+1, n), one-sided derivatives ``dstart``/``dend`` (N, n)
    and, when ``stepjac`` has N rows, the Jacobian of each step map. Returns
    ``(status, failed_step)``.
    """
    tapes = prog.py_tape
    nsteps = len(node_times) - 1
    want_jac = stepjac.shape[0] == nsteps and nsteps > 0
    x = x0.tolist()
    states[0, :] = x
    t = node_times.tolist()
    cells = step_cell.tolist()
    co = coef.tolist()
    eye = np.eye(n)
    for s in range(nsteps):
        h = t[s + 1] - t[s]
        c = co[cells[s]]
        st, k1 = _rhs(tapes, x, n, c)
        if st:
            return st, s
        y2 = [x[i] + 0.5 * h * k1[i] for i in range(n)]
        st, k2 = _rhs(tapes, y2, n, c)
        if st:
            return st, s
        y3 = [x[i] + 0.5 * h * k2[i] for i in range(n)]
        st, k3 = _rhs(tapes, y3, n, c)
        if st:
            return st, s
        y4 = [x[i] + h * k3[i] for i in range(n)]
        st, k4 = _rhs(tapes, y4, n, c)
        if st:
            return st, s
        if want_jac:
            jacs = []
            for y in (x, y2, y3, y4):
                st, j = _rhs_jac(tapes, y, n, c)
                if st:
                    return st, s
                jacs.append(j)
            dk1 = jacs[0]
            dk2 = jacs[1] @ (eye + 0.5 * h * dk1)
            dk3 = jacs[2] @ (eye + 0.5 * h * dk2)
            dk4 = jacs[3] @ (eye + h * dk3)
            stepjac[s] = eye + (h / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)
        xn = [x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(n)]
        if not all(_isfinite(v) for v in xn):
            return NONFINITE, s
        st, kend = _rhs(tapes, xn, n, c)
        if st:
            return st, s
        dstart[s, :] = k1
        dend[s, :] = kend
        states[s + 1, :] = xn
        x = xn
    return OK, -1
