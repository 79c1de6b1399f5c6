"""Backward equations for multitype generating functions.

Everything here is driven by one integrator for truncated Taylor jets: the
state is an array ``c[m, j]`` holding the coefficients of
``eps -> F_{t,m}(s + eps * v)`` (or of ``y -> F_{t,m}(y e^{-theta})`` around
y = 1), and the offspring generating functions are applied to these series
exactly.  Order 0 is the generating function itself, order 1 a directional
derivative and order k, times k!, a discounted falling-factorial moment.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .model import OffspringModel, SpectralData

ODE_RTOL = 1e-10
ODE_ATOL = 1e-10
# absolute tolerance for jet orders >= 1, which start at 0 and must be
# resolved relative to their own (possibly tiny) size
JET_ATOL = 1e-300


class SolverError(RuntimeError):
    pass


class LowConfidenceWarning(UserWarning):
    pass


@njit(cache=True)
def _series_mul(a, b, out):
    n = a.shape[0]
    for j in range(n):
        acc = 0.0
        for q in range(j + 1):
            acc += a[q] * b[j - q]
        out[j] = acc


@njit(cache=True)
def _jet_rhs(c, alpha, ell, p, nout, emax, clamp, out, powbuf, term, tmp):
    d, n1 = c.shape
    for m in range(d):
        powbuf[m, 0, :] = 0.0
        powbuf[m, 0, 0] = 1.0
        for e in range(1, emax + 1):
            _series_mul(powbuf[m, e - 1], c[m], powbuf[m, e])
        if clamp:
            # keep the evaluation point inside the unit cube
            x0 = min(max(c[m, 0], 0.0), 1.0)
            if x0 != c[m, 0]:
                powbuf[m, 1, 0] = x0
                for e in range(2, emax + 1):
                    _series_mul(powbuf[m, e - 1], powbuf[m, 1], powbuf[m, e])
    for i in range(d):
        for j in range(n1):
            out[i, j] = 0.0
        for n in range(nout[i]):
            term[:] = 0.0
            term[0] = 1.0
            for m in range(d):
                e = ell[i, n, m]
                if e > 0:
                    _series_mul(term, powbuf[m, e], tmp)
                    term[:] = tmp
            for j in range(n1):
                out[i, j] += p[i, n] * term[j]
        for j in range(n1):
            out[i, j] = alpha[i] * (out[i, j] - c[i, j])


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
])
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_E = np.array([71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


@njit(cache=True)
def _integrate(c0, nodes, alpha, ell, p, nout, rtol, atol0, atolj, clamp, max_steps):
    """Adaptive Dormand-Prince integration of the jet system, reporting at ``nodes``.

    Returns (values, derivatives, status, time reached); status 0 on success.
    """
    d, n1 = c0.shape
    emax = 0
    for i in range(d):
        for n in range(nout[i]):
            for m in range(d):
                emax = max(emax, ell[i, n, m])
    powbuf = np.zeros((d, emax + 1, n1))
    term = np.zeros(n1)
    tmp = np.zeros(n1)
    nn = nodes.shape[0]
    vals = np.zeros((nn, d, n1))
    ders = np.zeros((nn, d, n1))
    k = np.zeros((7, d, n1))
    y = c0.copy()
    ynew = np.zeros((d, n1))
    stage = np.zeros((d, n1))
    scale = np.zeros((d, n1))
    for j in range(n1):
        scale[:, j] = atol0 if j == 0 else atolj
    t = 0.0
    _jet_rhs(y, alpha, ell, p, nout, emax, clamp, k[0], powbuf, term, tmp)
    h = 1e-3
    steps = 0
    for ni in range(nn):
        target = nodes[ni]
        while t < target:
            if steps >= max_steps:
                return vals, ders, 1, t
            hstep = min(h, target - t)
            last = hstep == target - t
            for s in range(1, 7):
                for i in range(d):
                    for j in range(n1):
                        acc = y[i, j]
                        for q in range(s):
                            acc += hstep * _A[s, q] * k[q, i, j]
                        stage[i, j] = acc
                _jet_rhs(stage, alpha, ell, p, nout, emax, clamp, k[s], powbuf, term, tmp)
            err = 0.0
            for i in range(d):
                for j in range(n1):
                    acc = y[i, j]
                    e = 0.0
                    for q in range(7):
                        acc += hstep * _B[q] * k[q, i, j]
                        e += hstep * _E[q] * k[q, i, j]
                    ynew[i, j] = acc
                    sc = scale[i, j] + rtol * max(abs(y[i, j]), abs(acc))
                    err = max(err, abs(e) / sc)
            steps += 1
            if err <= 1.0:
                t = target if last else t + hstep
                for i in range(d):
                    for j in range(n1):
                        y[i, j] = ynew[i, j]
                if clamp:
                    for i in range(d):
                        y[i, 0] = min(max(y[i, 0], 0.0), 1.0)
                _jet_rhs(y, alpha, ell, p, nout, emax, clamp, k[0], powbuf, term, tmp)
                fac = 10.0 if err == 0.0 else min(10.0, 0.9 * err ** -0.2)
                if not last or fac < 1.0:
                    h = hstep * fac
            else:
                h = hstep * max(0.2, 0.9 * err ** -0.2)
            if h < 1e-14 * max(1.0, t):
                return vals, ders, 2, t
        vals[ni] = y
        ders[ni] = k[0]
    return vals, ders, 0, t


def integrate_jet(model: OffspringModel, c0, nodes, rtol=ODE_RTOL, atol=ODE_ATOL,
                  clamp=True, max_steps=10_000_000):
    """Integrate the jet system from time 0 and return (values, time derivatives) at ``nodes``."""
    nodes = np.atleast_1d(np.asarray(nodes, dtype=float))
    if np.any(nodes < 0) or np.any(np.diff(nodes) < 0):
        raise ValueError("nodes must be non-negative and non-decreasing")
    c0 = np.ascontiguousarray(np.asarray(c0, dtype=float).reshape(model.d, -1))
    ell, p, nout = model.padded()
    alpha = np.asarray(model.alpha, dtype=float)
    vals, ders, status, reached = _integrate(c0, nodes, alpha, ell, p, nout, rtol, atol,
                                             JET_ATOL, clamp, max_steps)
    if status:
        why = "step budget exhausted" if status == 1 else "step size underflow"
        raise SolverError(f"ODE solver failed ({why}) at t={reached:.6g}")
    return vals, ders


def _jet_start(point, direction=None, order=0):
    point = np.asarray(point, dtype=float)
    c0 = np.zeros((point.size, order + 1))
    c0[:, 0] = point
    if order >= 1:
        c0[:, 1] = point if direction is None else direction
    return c0


@dataclass
class GenFunSolution:
    """F_t(s) for a set of starting points on a time grid."""

    model: OffspringModel
    grid: np.ndarray
    points: np.ndarray
    values: np.ndarray  # (len(grid), len(points), d)
    tolerance: float


def solve(model: OffspringModel, points, grid) -> GenFunSolution:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    grid = np.asarray(grid, dtype=float)
    out = np.empty((grid.size, points.shape[0], model.d))
    for n, s in enumerate(points):
        _check_unit(s)
        vals, _ = integrate_jet(model, _jet_start(s), grid)
        out[:, n, :] = vals[:, :, 0]
    return GenFunSolution(model, grid, points, out, ODE_ATOL)


def _check_unit(s):
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("generating function argument must lie in [0, 1]^d")


def _times(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    order = np.argsort(t.ravel(), kind="stable")
    return t, order


def generating_function(model: OffspringModel, t, s) -> np.ndarray:
    """F_t(s); ``t`` may be an array, giving one row per time."""
    s = np.asarray(s, dtype=float).reshape(model.d)
    _check_unit(s)
    t, order = _times(t)
    vals, _ = integrate_jet(model, _jet_start(s), t.ravel()[order])
    out = np.empty((t.size, model.d))
    out[order] = vals[:, :, 0]
    return out.reshape(t.shape + (model.d,))


def extinction_prob(model: OffspringModel, t) -> np.ndarray:
    return generating_function(model, t, np.zeros(model.d))


def laplace(model: OffspringModel, t, theta) -> np.ndarray:
    """E_m[exp(-theta . Z_t)] for every root type m."""
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    if np.any(theta < 0):
        raise ValueError("theta must be non-negative")
    return generating_function(model, t, np.exp(-theta))


def moment_jets(model: OffspringModel, t, theta, k: int, **kw):
    """All discounted falling-factorial moments of orders 0..k.

    Returns (values, time derivatives), each of shape (len(t), k+1, d) with
    entry [n, a, m] = E_m[N_t^(a) exp(-theta . Z_t)] at t[n], where N^(a) is the
    falling factorial.  Times must be non-decreasing.
    """
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    c0 = _jet_start(np.exp(-theta), order=k)
    vals, ders = integrate_jet(model, c0, t, **kw)
    fact = np.array([math.factorial(a) for a in range(k + 1)])
    return (np.transpose(vals, (0, 2, 1)) * fact[None, :, None],
            np.transpose(ders, (0, 2, 1)) * fact[None, :, None])


def factorial_moment_discounted(model: OffspringModel, t, theta, k: int, method="jet",
                                h=None) -> np.ndarray:
    """E_m[N_t^(k) exp(-theta . Z_t)] for every root type m.

    ``method="jet"`` propagates the Taylor coefficients in y exactly;
    ``method="fd"`` differentiates y -> F_t(y e^{-theta}) numerically with
    central differences and one Richardson step, warning when the two
    step sizes disagree by more than 1e-4.
    """
    if k < 1:
        raise ValueError("k must be a positive integer")
    if k > 6 and method == "fd":
        raise ValueError("finite differences are limited to k <= 6")
    t = float(t)
    if method == "jet":
        vals, _ = moment_jets(model, [t], theta, k)
        return vals[0, k]
    if method != "fd":
        raise ValueError(f"unknown method {method!r}")
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    base = np.exp(-theta)
    h = 1e-3 * max(1, k) if h is None else h

    def central(step):
        # k-th central difference on the points 1 + (j - k/2) step
        acc = np.zeros(model.d)
        for j in range(k + 1):
            y = 1.0 + (j - k / 2) * step
            vals, _ = integrate_jet(model, _jet_start(y * base), [t], clamp=False)
            acc += (-1) ** (k - j) * math.comb(k, j) * vals[0, :, 0]
        return acc / step ** k

    coarse, fine = central(h), central(h / 2)
    value = (4 * fine - coarse) / 3
    scale = np.maximum(np.abs(value), 1e-300)
    if np.max(np.abs(value - fine) / scale) > 1e-4:
        warnings.warn("finite-difference factorial moment is low-confidence", LowConfidenceWarning,
                      stacklevel=2)
    return value


def jacobian(model: OffspringModel, t, s) -> np.ndarray:
    """Matrix of partial derivatives dF_{t,r}/ds_i at ``s`` (rows r, columns i).

    ``t`` may be an array of non-decreasing times; the result then has a
    leading time axis.
    """
    s = np.asarray(s, dtype=float).reshape(model.d)
    times = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty((times.size, model.d, model.d))
    for i in range(model.d):
        direction = np.zeros(model.d)
        direction[i] = 1.0
        vals, _ = integrate_jet(model, _jet_start(s, direction, 1), times)
        out[:, :, i] = vals[:, :, 1]
    return out if np.ndim(t) else out[0]


def asymptotic_laplace(spec: SpectralData, rho_frac, theta, T) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    et = spec.eta @ theta
    return 1.0 - (2.0 * spec.xi / spec.zeta) * (et / (1.0 + (1.0 - rho_frac) * et)) / T


def asymptotic_factorial_moment(spec: SpectralData, rho_frac, theta, T, k: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    et = spec.eta @ theta
    scale = ((1.0 - rho_frac) * T * spec.zeta / 2.0) ** (k - 1)
    return scale * math.factorial(k) * spec.xi * spec.eta.sum() ** k / (1.0 + (1.0 - rho_frac) * et) ** (k + 1)


def _laplace_path(model, tau, theta_path, u):
    theta = np.asarray(theta_path(u), dtype=float).reshape(model.d)
    return laplace(model, tau, theta)


def _forward_diff(f, h):
    return (-3 * np.asarray(f[0]) + 4 * np.asarray(f[1]) - np.asarray(f[2])) / (2 * h)


def derivative_identity_residual(model: OffspringModel, t: float, T: float, theta_path, i: int,
                                 root_type: int = 0, method: str = "mc", replicates: int = 200_000,
                                 seed: int = 0, h: float = 1e-4):
    """Residual of the chain rule for u -> F_{t,r}(v(u)), v(u) = (E_m[exp(-theta(u).Z_{T-t})])_m,
    with the type-i term isolated on the left, at u = 0.

    Left: E_r[Z_t^(i) v^(Z_t - e_i)] dv_i/du.  Right: d/du F_{t,r}(v(u)) minus the
    same terms for every other type.  u-derivatives are second-order one-sided
    differences with step ``h`` (theta(u) < 0 is outside the domain).  The expectations E_r[Z_t^(j) v^(Z_t - e_j)] come from
    Monte Carlo (``method="mc"``) or from the Jacobian of F_t (``method="ode"``).
    Returns (residual, standard error); the error is 0 for the ODE route.
    """
    if not 0 <= t <= T:
        raise ValueError("need 0 <= t <= T")
    inner = [_laplace_path(model, T - t, theta_path, n * h) for n in range(3)]
    outer = [generating_function(model, t, v)[root_type] for v in inner]
    v0 = inner[0]
    dv = _forward_diff(inner, h)
    d_outer = _forward_diff(outer, h)
    if method == "ode":
        weights = jacobian(model, t, v0)[root_type]
        per_type = weights * dv
        return float(per_type[i] - (d_outer - (per_type.sum() - per_type[i]))), 0.0
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    from .forest import final_populations

    Z = final_populations(model, t, replicates, root_type, seed)
    Z = Z[Z[:, 0] >= 0].astype(float)
    vz = np.prod(v0[None, :] ** Z, axis=1)
    samples = (Z / v0[None, :]) * vz[:, None] * dv[None, :]
    # residual = sum_j E[Z_j v^(Z - e_j)] dv_j - d/du F_{t,r}(v(u))
    x = samples.sum(axis=1)
    return float(x.mean() - d_outer), float(x.std(ddof=1) / math.sqrt(x.size))
