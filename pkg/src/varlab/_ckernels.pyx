# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tape interpreter and RK4 loop.

Same contract as ``_pykernels``: functions return status codes
(0 ok, 1 division by zero, 2 log domain, 3 singular power, 4 non-finite).
"""

from libc.math cimport sin, cos, exp, log, pow, isfinite
from libc.stdlib cimport malloc, free

import numpy as np

cdef enum:
    OK = 0
    DIV0 = 1
    LOGDOM = 2
    POWSING = 3
    NONFINITE = 4


cdef int eval_value(const int* ops, const int* iarg, const double* farg,
                    int start, int end, const double* x, double* st,
                    double* out) noexcept nogil:
    cdef int top = -1
    cdef int p, op, k
    cdef double a, b
    for p in range(start, end):
        op = ops[p]
        if op == 0:
            top += 1
            st[top] = farg[p]
        elif op == 1:
            top += 1
            st[top] = x[iarg[p]]
        elif op == 7:
            st[top] = -st[top]
        elif op <= 5:
            b = st[top]
            top -= 1
            a = st[top]
            if op == 2:
                st[top] = a + b
            elif op == 3:
                st[top] = a - b
            elif op == 4:
                st[top] = a * b
            else:
                if b == 0.0:
                    return DIV0
                st[top] = a / b
        elif op == 6:
            k = iarg[p]
            a = st[top]
            if k == 0:
                st[top] = 1.0
            elif k < 0 and a == 0.0:
                return POWSING
            else:
                st[top] = pow(a, <double>k)
        elif op == 8:
            st[top] = sin(st[top])
        elif op == 9:
            st[top] = cos(st[top])
        elif op == 10:
            st[top] = exp(st[top])
        else:
            a = st[top]
            if a <= 0.0:
                return LOGDOM
            st[top] = log(a)
    out[0] = st[top]
    if not isfinite(out[0]):
        return NONFINITE
    return OK


cdef int eval_dual(const int* ops, const int* iarg, const double* farg,
                   int start, int end, const double* x, const double* v,
                   double* s0, double* s1, double* s2, int second,
                   double* out) noexcept nogil:
    cdef int top = -1
    cdef int p, op, k
    cdef double a, a1, a2, b, b1, b2, r, r1, r2, c, s, q, p1, p2
    for p in range(start, end):
        op = ops[p]
        if op == 0:
            top += 1
            s0[top] = farg[p]
            s1[top] = 0.0
            s2[top] = 0.0
            continue
        if op == 1:
            top += 1
            s0[top] = x[iarg[p]]
            s1[top] = v[iarg[p]]
            s2[top] = 0.0
            continue
        if op >= 2 and op <= 5:
            b = s0[top]
            b1 = s1[top]
            b2 = s2[top]
            top -= 1
            a = s0[top]
            a1 = s1[top]
            a2 = s2[top]
            if op == 2:
                r = a + b
                r1 = a1 + b1
                r2 = a2 + b2
            elif op == 3:
                r = a - b
                r1 = a1 - b1
                r2 = a2 - b2
            elif op == 4:
                r = a * b
                r1 = a1 * b + a * b1
                r2 = a2 * b + 2.0 * a1 * b1 + a * b2 if second else 0.0
            else:
                if b == 0.0:
                    return DIV0
                r = a / b
                r1 = (a1 - r * b1) / b
                r2 = (a2 - 2.0 * r1 * b1 - r * b2) / b if second else 0.0
        else:
            a = s0[top]
            a1 = s1[top]
            a2 = s2[top]
            if op == 7:
                r = -a
                r1 = -a1
                r2 = -a2
            elif op == 6:
                k = iarg[p]
                if k == 0:
                    r = 1.0
                    r1 = 0.0
                    r2 = 0.0
                elif k < 0 and a == 0.0:
                    return POWSING
                else:
                    r = pow(a, <double>k)
                    p1 = k * pow(a, <double>(k - 1))
                    p2 = 0.0 if k == 1 else k * (k - 1) * pow(a, <double>(k - 2))
                    r1 = p1 * a1
                    r2 = p1 * a2 + p2 * a1 * a1
            elif op == 8:
                r = sin(a)
                c = cos(a)
                r1 = c * a1
                r2 = c * a2 - r * a1 * a1
            elif op == 9:
                r = cos(a)
                s = sin(a)
                r1 = -s * a1
                r2 = -s * a2 - r * a1 * a1
            elif op == 10:
                r = exp(a)
                r1 = r * a1
                r2 = r * (a2 + a1 * a1)
            else:
                if a <= 0.0:
                    return LOGDOM
                r = log(a)
                q = a1 / a
                r1 = q
                r2 = a2 / a - q * q
        s0[top] = r
        s1[top] = r1
        s2[top] = r2
    out[0] = s0[top]
    out[1] = s1[top]
    out[2] = s2[top]
    if not (isfinite(out[0]) and isfinite(out[1]) and isfinite(out[2])):
        return NONFINITE
    return OK


cdef class _Tape:
    """Raw pointers into a Program's arrays plus scratch stacks."""
    cdef const int[::1] ops
    cdef const int[::1] iarg
    cdef const double[::1] farg
    cdef const int[::1] starts
    cdef int k
    cdef int n
    cdef double* s0
    cdef double* s1
    cdef double* s2

    def __cinit__(self, prog):
        self.ops = prog.ops
        self.iarg = prog.iarg
        self.farg = prog.farg
        self.starts = prog.starts
        self.k = self.starts.shape[0] - 1
        self.n = prog.n
        cdef int size = max(1, self.ops.shape[0])
        self.s0 = <double*> malloc(3 * size * sizeof(double))
        if self.s0 == NULL:
            raise MemoryError()
        self.s1 = self.s0 + size
        self.s2 = self.s1 + size

    def __dealloc__(self):
        free(self.s0)

    cdef int value(self, int e, const double* x, double* out) noexcept nogil:
        return eval_value(&self.ops[0], &self.iarg[0], &self.farg[0],
                          self.starts[e], self.starts[e + 1], x, self.s0, out)

    cdef int dual(self, int e, const double* x, const double* v, int second,
                  double* out) noexcept nogil:
        return eval_dual(&self.ops[0], &self.iarg[0], &self.farg[0],
                         self.starts[e], self.starts[e + 1], x, v,
                         self.s0, self.s1, self.s2, second, out)


def values(prog, const double[::1] x, double[::1] out):
    cdef _Tape tp = _Tape(prog)
    cdef int e, status = OK
    cdef double r
    with nogil:
        for e in range(tp.k):
            status = tp.value(e, &x[0], &r)
            if status:
                break
            out[e] = r
    return status


def dual2(prog, const double[::1] x, const double[::1] v,
          double[::1] val, double[::1] d1, double[::1] d2):
    cdef _Tape tp = _Tape(prog)
    cdef int e, status = OK
    cdef double r[3]
    with nogil:
        for e in range(tp.k):
            status = tp.dual(e, &x[0], &v[0], 1, r)
            if status:
                break
            val[e] = r[0]
            d1[e] = r[1]
            d2[e] = r[2]
    return status


cdef int _jac_rows(_Tape tp, int first, int count, const double* x, double* unit,
                   double scale, double* out, int n) noexcept nogil:
    """Accumulate ``scale * D(expr first..first+count-1)(x)`` into ``out`` (count x n)."""
    cdef int e, j, status
    cdef double r[3]
    for j in range(n):
        unit[j] = 0.0
    for j in range(n):
        unit[j] = 1.0
        for e in range(count):
            status = tp.dual(first + e, x, unit, 0, r)
            if status:
                unit[j] = 0.0
                return status
            out[e * n + j] += scale * r[1]
        unit[j] = 0.0
    return OK


def jacobian(prog, const double[::1] x, double[:, ::1] out):
    cdef _Tape tp = _Tape(prog)
    cdef int n = tp.n
    cdef int status, i, j
    cdef double* unit = <double*> malloc(n * sizeof(double))
    if unit == NULL:
        raise MemoryError()
    try:
        for i in range(tp.k):
            for j in range(n):
                out[i, j] = 0.0
        with nogil:
            status = _jac_rows(tp, 0, tp.k, &x[0], unit, 1.0, &out[0, 0], n)
    finally:
        free(unit)
    return status


cdef int _rhs(_Tape tp, int n, int nblk, const double* c, const double* x,
              double* out) noexcept nogil:
    cdef int blk, i, status
    cdef double r
    for i in range(n):
        out[i] = 0.0
    for blk in range(nblk):
        if c[blk] == 0.0:
            continue
        for i in range(n):
            status = tp.value(blk * n + i, x, &r)
            if status:
                return status
            out[i] += c[blk] * r
    return OK


cdef int _rhs_jac(_Tape tp, int n, int nblk, const double* c, const double* x,
                  double* unit, double* out) noexcept nogil:
    cdef int blk, i, status
    for i in range(n * n):
        out[i] = 0.0
    for blk in range(nblk):
        if c[blk] == 0.0:
            continue
        status = _jac_rows(tp, blk * n, n, x, unit, c[blk], out, n)
        if status:
            return status
    return OK


cdef void _matmul(int n, const double* a, const double* b, double* out) noexcept nogil:
    cdef int i, j, l
    cdef double acc
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for l in range(n):
                acc += a[i * n + l] * b[l * n + j]
            out[i * n + j] = acc


cdef void _eye_plus(int n, double s, const double* a, double* out) noexcept nogil:
    cdef int i
    for i in range(n * n):
        out[i] = s * a[i]
    for i in range(n):
        out[i * n + i] += 1.0


def rk4_affine(prog, int n, int m, const double[::1] x0,
               const double[::1] node_times, const int[::1] step_cell,
               const double[:, ::1] coef, double[:, ::1] states,
               double[:, ::1] dstart, double[:, ::1] dend,
               double[:, :, ::1] stepjac):
    """Classical RK4 on ``x' = sum_k coef[cell, k] * F_k(x)`` with F_0 the drift."""
    cdef _Tape tp = _Tape(prog)
    cdef int nsteps = node_times.shape[0] - 1
    cdef int nblk = m + 1
    cdef int want_jac = stepjac.shape[0] == nsteps and nsteps > 0
    cdef int s, i, status = OK, failed = -1
    cdef double h
    cdef const double* c
    cdef double* buf = <double*> malloc((8 * n + 9 * n * n) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef double* x = buf
    cdef double* y = buf + n
    cdef double* k1 = buf + 2 * n
    cdef double* k2 = buf + 3 * n
    cdef double* k3 = buf + 4 * n
    cdef double* k4 = buf + 5 * n
    cdef double* kend = buf + 6 * n
    cdef double* unit = buf + 7 * n
    cdef double* j = buf + 8 * n
    cdef double* dk1 = j + n * n
    cdef double* dk2 = j + 2 * n * n
    cdef double* dk3 = j + 3 * n * n
    cdef double* dk4 = j + 4 * n * n
    cdef double* tmp = j + 5 * n * n
    cdef double* y2 = j + 6 * n * n
    cdef double* y3 = y2 + n
    cdef double* y4 = y3 + n
    try:
        with nogil:
            for i in range(n):
                x[i] = x0[i]
                states[0, i] = x0[i]
            for s in range(nsteps):
                h = node_times[s + 1] - node_times[s]
                c = &coef[step_cell[s], 0]
                status = _rhs(tp, n, nblk, c, x, k1)
                if status:
                    failed = s
                    break
                for i in range(n):
                    y2[i] = x[i] + 0.5 * h * k1[i]
                status = _rhs(tp, n, nblk, c, y2, k2)
                if status:
                    failed = s
                    break
                for i in range(n):
                    y3[i] = x[i] + 0.5 * h * k2[i]
                status = _rhs(tp, n, nblk, c, y3, k3)
                if status:
                    failed = s
                    break
                for i in range(n):
                    y4[i] = x[i] + h * k3[i]
                status = _rhs(tp, n, nblk, c, y4, k4)
                if status:
                    failed = s
                    break
                if want_jac:
                    status = _rhs_jac(tp, n, nblk, c, x, unit, dk1)
                    if not status:
                        status = _rhs_jac(tp, n, nblk, c, y2, unit, j)
                    if status:
                        failed = s
                        break
                    _eye_plus(n, 0.5 * h, dk1, tmp)
                    _matmul(n, j, tmp, dk2)
                    status = _rhs_jac(tp, n, nblk, c, y3, unit, j)
                    if status:
                        failed = s
                        break
                    _eye_plus(n, 0.5 * h, dk2, tmp)
                    _matmul(n, j, tmp, dk3)
                    status = _rhs_jac(tp, n, nblk, c, y4, unit, j)
                    if status:
                        failed = s
                        break
                    _eye_plus(n, h, dk3, tmp)
                    _matmul(n, j, tmp, dk4)
                    for i in range(n * n):
                        stepjac[s, i // n, i % n] = (h / 6.0) * (
                            dk1[i] + 2.0 * dk2[i] + 2.0 * dk3[i] + dk4[i])
                    for i in range(n):
                        stepjac[s, i, i] += 1.0
                for i in range(n):
                    y[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                    if not isfinite(y[i]):
                        status = NONFINITE
                if status:
                    failed = s
                    break
                status = _rhs(tp, n, nblk, c, y, kend)
                if status:
                    failed = s
                    break
                for i in range(n):
                    dstart[s, i] = k1[i]
                    dend[s, i] = kend[i]
                    states[s + 1, i] = y[i]
                    x[i] = y[i]
    finally:
        free(buf)
    return status, failed
