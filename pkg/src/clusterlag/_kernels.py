"""Compiled RK4 loop for flows of the form ``ds = M s + c - scale * grad(x)``."""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

QUAD, DEADZONE = 0, 1


def _rhs(ptr, idx, val, c, x0, scale, kind, p1, p2, lo, hi, eps, gamma, use_pen, s, out):
    n = s.shape[0]
    for i in range(n):
        acc = c[i]
        for q in range(ptr[i], ptr[i + 1]):
            acc += val[q] * s[idx[q]]
        out[i] = acc
    m = n - x0
    for j in range(m):
        x = s[x0 + j]
        if kind[j] == QUAD:
            g = 2.0 * p1[j] * x + p2[j]
        else:
            r = (abs(x) - p1[j]) / p2[j]
            r = min(max(r, 0.0), 1.0)
            g = r if x > 0 else (-r if x < 0 else 0.0)
        if use_pen:
            up = (x - hi[j]) / eps
            dn = (lo[j] - x) / eps
            g += gamma * (min(max(up, 0.0), 1.0) - min(max(dn, 0.0), 1.0))
        out[x0 + j] -= scale[j] * g


def _advance(ptr, idx, val, c, x0, scale, kind, p1, p2, lo, hi, eps, gamma, use_pen, s, h, n_steps):
    """Take up to ``n_steps`` RK4 steps in place; returns the number taken before a non-finite state."""
    n = s.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    for step in range(n_steps):
        _rhs(ptr, idx, val, c, x0, scale, kind, p1, p2, lo, hi, eps, gamma, use_pen, s, k1)
        for i in range(n):
            tmp[i] = s[i] + (0.5 * h) * k1[i]
        _rhs(ptr, idx, val, c, x0, scale, kind, p1, p2, lo, hi, eps, gamma, use_pen, tmp, k2)
        for i in range(n):
            tmp[i] = s[i] + (0.5 * h) * k2[i]
        _rhs(ptr, idx, val, c, x0, scale, kind, p1, p2, lo, hi, eps, gamma, use_pen, tmp, k3)
        for i in range(n):
            tmp[i] = s[i] + h * k3[i]
        _rhs(ptr, idx, val, c, x0, scale, kind, p1, p2, lo, hi, eps, gamma, use_pen, tmp, k4)
        total = 0.0
        for i in range(n):
            s[i] = s[i] + (h / 6.0) * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i])
            total += s[i]
        if not np.isfinite(total):
            return step + 1
    return n_steps


if njit is not None:
    _rhs = njit(cache=True)(_rhs)
    _advance = njit(cache=True)(_advance)

AVAILABLE = njit is not None


class LinearForm:
    """Flattened description of an affine-plus-separable-gradient flow."""

    def __init__(self, M, c, x0, scale, costs, penalty=None, lo=None, hi=None):
        self.M = np.ascontiguousarray(M, dtype=float)
        # the coupling matrices are sparse; store rows compressed
        rows, cols = np.nonzero(self.M)
        self.ptr = np.searchsorted(rows, np.arange(self.M.shape[0] + 1)).astype(np.int64)
        self.idx = cols.astype(np.int64)
        self.val = self.M[rows, cols].copy()
        self.c = np.ascontiguousarray(c, dtype=float)
        self.x0 = int(x0)
        m = self.M.shape[0] - self.x0
        self.scale = np.ascontiguousarray(np.broadcast_to(scale, (m,)), dtype=float)
        self.kind = np.zeros(m, dtype=np.int64)
        self.p1 = np.zeros(m)
        self.p2 = np.zeros(m)
        self.kind[costs.dz] = DEADZONE
        self.p1[costs.quad], self.p2[costs.quad] = costs.q_a, costs.q_b
        self.p1[costs.dz], self.p2[costs.dz] = costs.d_c, costs.d_a
        self.use_pen = penalty is not None
        self.lo = np.ascontiguousarray(lo if lo is not None else np.full(m, -np.inf), dtype=float)
        self.hi = np.ascontiguousarray(hi if hi is not None else np.full(m, np.inf), dtype=float)
        self.eps = float(penalty.epsilon) if penalty is not None else 1.0
        self.gamma = float(penalty.gamma_value()) if penalty is not None else 0.0

    def advance(self, s: np.ndarray, h: float, n_steps: int) -> int:
        return int(_advance(self.ptr, self.idx, self.val, self.c, self.x0, self.scale, self.kind, self.p1, self.p2, self.lo,
                            self.hi, self.eps, self.gamma, self.use_pen, s, float(h), int(n_steps)))
