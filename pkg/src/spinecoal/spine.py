"""Simulation of the tree with k distinguished lines of descent.

Under the size-biased, discounted measure a particle of type i carrying h
marks at time t has a branching hazard whose integral is available in
closed form,

    int_{t0}^{t} rate = alpha_i (t - t0) + log D_h(i, T - t0) - log D_h(i, T - t),

with D_h(i, u) = E_i[N_u^(h) exp(-theta . Z_u)] and D_0 = F.  Lifetimes are
therefore drawn by inverting this function on a cached table of log D,
after which the event (offspring vector, block sizes) is picked with
probability proportional to its rate at that instant.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import genfun
from .forest import GenealogyTree, _grow, kernel_tables
from .genealogy import ColouredPartition, SplitEvent, falling, partition_count, partitions_from_slots
from .model import OffspringModel
from .rng import exponential, new_state, randbelow, stream_key, uniform

MAX_K = 8
MAX_OUTCOMES = 64
INTERP_TOL = 1e-6


# ---------------------------------------------------------------------------
# cached discounted moments


@njit(cache=True)
def _locate(nodes, u):
    j = np.searchsorted(nodes, u) - 1
    if j < 0:
        j = 0
    if j > nodes.shape[0] - 2:
        j = nodes.shape[0] - 2
    return j


@njit(cache=True)
def _hermite_row(nodes, vals, ders, j, u, out):
    """Cubic Hermite interpolation of every column of vals on cell j."""
    h = nodes[j + 1] - nodes[j]
    s = (u - nodes[j]) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    for c in range(vals.shape[1]):
        out[c] = (h00 * vals[j, c] + h10 * h * ders[j, c]
                  + h01 * vals[j + 1, c] + h11 * h * ders[j + 1, c])


@njit(cache=True)
def _log_moments(nodes, vals, ders, at_zero, u, out):
    """log D at remaining time u (flattened over (order, type))."""
    umin = nodes[0]
    if u >= umin:
        _hermite_row(nodes, vals, ders, _locate(nodes, u), u, out)
        return
    for c in range(vals.shape[1]):
        if np.isfinite(at_zero[c]):
            # bounded orders: linear blend towards the exact value at u = 0
            out[c] = at_zero[c] + (vals[0, c] - at_zero[c]) * (u / umin)
        elif u <= 0.0:
            out[c] = -np.inf
        else:
            # vanishing orders behave like a power of u near 0
            slope = umin * ders[0, c]
            out[c] = vals[0, c] + slope * np.log(u / umin)


@dataclass
class MomentTable:
    """log E_m[N_u^(a) exp(-theta . Z_u)] for a = 0..k on a grid of remaining times u.

    The grid is uniform with ``cells`` cells on [0, T] except near u = 0,
    where it becomes geometric (ratio ``ratio``) down to ``T * 1e-13``.
    Values and exact u-derivatives from the backward equations feed a cubic
    Hermite interpolant; the grid is refined until interpolation at cell
    midpoints is within ``tol`` (in log scale).
    """

    model: OffspringModel
    T: float
    theta: np.ndarray
    k: int
    cells: int = 2048
    ratio: float = 1.05
    tol: float = INTERP_TOL
    nodes: np.ndarray = field(init=False, repr=False)
    logd: np.ndarray = field(init=False, repr=False)
    dlogd: np.ndarray = field(init=False, repr=False)
    at_zero: np.ndarray = field(init=False, repr=False)
    interp_error: float = field(init=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(self.model.d)
        if np.any(self.theta < 0):
            raise ValueError("theta must be non-negative")
        if not 1 <= self.k <= MAX_K:
            raise ValueError(f"k must be in 1..{MAX_K}")
        if self.model.max_outcomes > MAX_OUTCOMES:
            raise ValueError(f"offspring tables are limited to {MAX_OUTCOMES} outcomes")
        for _ in range(6):
            if self._build():
                break
            self.cells *= 2
            self.ratio = 1.0 + (self.ratio - 1.0) / 2.0
        else:
            raise genfun.SolverError(
                f"interpolation error {self.interp_error:.2e} above {self.tol:.0e} after refinement")

    def _grid(self):
        T = float(self.T)
        delta = T / self.cells
        j0 = max(1, math.ceil(1.0 / (self.ratio - 1.0)))
        uniform_part = np.arange(j0, self.cells + 1) * delta
        geo = []
        u = uniform_part[0] if uniform_part.size else T
        while u > T * 1e-13:
            u /= self.ratio
            geo.append(u)
        nodes = np.concatenate((np.array(geo[::-1]), uniform_part))
        if nodes[-1] < T:
            nodes = np.append(nodes, T)
        nodes[-1] = T
        return nodes

    def _build(self) -> bool:
        nodes = self._grid()
        fine = np.empty(2 * nodes.size - 1)
        fine[0::2] = nodes
        fine[1::2] = 0.5 * (nodes[:-1] + nodes[1:])
        vals, ders = genfun.moment_jets(self.model, fine, self.theta, self.k)
        with np.errstate(divide="ignore"):
            logd = np.log(vals)
        dlogd = ders / vals
        d, k1 = self.model.d, self.k + 1
        self.nodes = nodes
        self.logd = np.ascontiguousarray(logd[0::2].reshape(nodes.size, k1 * d))
        self.dlogd = np.ascontiguousarray(dlogd[0::2].reshape(nodes.size, k1 * d))
        at_zero = np.full((k1, d), -np.inf)
        at_zero[0] = -self.theta
        if self.k >= 1:
            at_zero[1] = -self.theta
        self.at_zero = at_zero.ravel()
        if not np.all(np.isfinite(self.logd)):
            raise genfun.SolverError("moment table contains non-positive values")
        mids = fine[1::2]
        approx = np.array([self._eval(u) for u in mids])
        exact = logd[1::2].reshape(mids.size, k1 * d)
        self.interp_error = float(np.max(np.abs(approx - exact)))
        return self.interp_error <= self.tol

    def _eval(self, u):
        out = np.empty(self.logd.shape[1])
        _log_moments(self.nodes, self.logd, self.dlogd, self.at_zero, float(u), out)
        return out

    def log_moments(self, u) -> np.ndarray:
        """(k+1, d) array of log D_a(m) at remaining time u."""
        if u < 0 or u > self.T * (1 + 1e-12):
            raise ValueError("remaining time outside [0, T]")
        return self._eval(u).reshape(self.k + 1, self.model.d)

    def moments(self, u) -> np.ndarray:
        return np.exp(self.log_moments(u))


# ---------------------------------------------------------------------------
# rates of the marked dynamics


def _int_partitions(n, max_parts, largest=None):
    """Non-increasing tuples of positive integers summing to n with at most max_parts parts."""
    largest = n if largest is None else largest
    if n == 0:
        yield ()
        return
    if max_parts == 0:
        return
    for first in range(min(n, largest), 0, -1):
        for rest in _int_partitions(n - first, max_parts - 1, first):
            yield (first,) + rest


def size_families(h: int, ell) -> list:
    """Every assignment of block sizes per child type compatible with ``ell`` (h marks)."""
    d = len(ell)
    out = []
    for comp in itertools.product(range(h + 1), repeat=d):
        if sum(comp) != h:
            continue
        per_type = [list(_int_partitions(comp[m], int(ell[m]))) if comp[m] else [()] for m in range(d)]
        if any(not opts for opts in per_type):
            continue
        out.extend(tuple(fam) for fam in itertools.product(*per_type))
    return out


def _moments_at(moments, u):
    if isinstance(moments, MomentTable):
        return moments.moments(u)
    return moments(u)


def spine_split_rate(model: OffspringModel, moments, i: int, sizes, ell, t: float, T: float) -> float:
    """Rate at which a type-i particle carrying sum(sizes) marks branches into ``ell``
    with one particular coloured partition having these block sizes per type.

    ``moments`` is a MomentTable or a callable u -> (k+1, d) array of D_a(m, u)
    (the discount theta is carried by it).
    """
    ell = np.asarray(ell, dtype=np.int64)
    sizes = [tuple(s) for s in sizes]
    g = np.array([len(s) for s in sizes])
    if np.any(g > ell):
        return 0.0
    h = sum(sum(s) for s in sizes)
    if h < 1:
        raise ValueError("a marked particle carries at least one mark")
    rows = {tuple(r): n for n, r in enumerate(np.asarray(model.outcomes[i]))}
    n = rows.get(tuple(int(x) for x in ell))
    if n is None:
        return 0.0
    p = float(model.probs[i][n])
    D = _moments_at(moments, T - t)
    rate = model.alpha[i] * p * math.prod(falling(int(ell[m]), int(g[m])) for m in range(model.d))
    rate *= np.prod(D[0] ** (ell - g))
    for m, s in enumerate(sizes):
        for a in s:
            rate *= D[a, m]
    return float(rate / D[h, i])


def no_mark_dynamics(model: OffspringModel, moments, i: int, t: float, T: float):
    """Branching rate and offspring law of an unmarked type-i particle at time t.

    Returns (rate, probs) with ``probs`` aligned with ``model.outcomes[i]``.
    """
    F = _moments_at(moments, T - t)[0]
    ell = np.asarray(model.outcomes[i])
    weights = np.asarray(model.probs[i]) * np.prod(F[None, :] ** ell, axis=1)
    tilt = weights.sum()
    return float(model.alpha[i] * tilt / F[i]), weights / tilt


def allocate_spines(ell, block_sizes, marks, rng: np.random.Generator):
    """Random placement of the carried marks onto children.

    Children of each type are chosen uniformly, sizes are arranged uniformly
    over them and the labelled marks are split uniformly.  Returns the
    coloured partition and, per type, the 1-based child ranks (within that
    type) receiving each block in canonical block order.
    """
    ell = [int(x) for x in ell]
    sizes = [list(s) for s in block_sizes]
    d = len(ell)
    marks = list(marks)
    if sum(map(sum, sizes)) != len(marks):
        raise ValueError("block sizes must add up to the number of marks")
    if any(len(sizes[m]) > ell[m] for m in range(d)):
        raise ValueError("more blocks than children of that type")
    shuffled = list(rng.permutation(marks))
    blocks = [[] for _ in range(d)]
    slots = [[] for _ in range(d)]
    chosen = [list(rng.permutation(ell[m])[:len(sizes[m])] + 1) for m in range(d)]
    pos = 0
    perm_sizes = [list(rng.permutation(sizes[m])) for m in range(d)]
    for m in range(d):
        for q, a in enumerate(perm_sizes[m]):
            blocks[m].append(tuple(sorted(int(x) for x in shuffled[pos:pos + a])))
            slots[m].append(int(chosen[m][q]))
            pos += a
    part = ColouredPartition.from_blocks(d, blocks)
    assignment = []
    for m in range(d):
        by_block = dict(zip(blocks[m], slots[m]))
        assignment.append(tuple(by_block[b] for b in part.blocks[m]))
    return part, tuple(assignment)


@dataclass
class EventTable:
    """Flattened list of possible branching events for each (type, marks carried)."""

    start: np.ndarray   # (d, k+1)
    stop: np.ndarray    # (d, k+1)
    outcome: np.ndarray
    logconst: np.ndarray
    nblocks: np.ndarray
    btype: np.ndarray   # (E, k)
    bsize: np.ndarray   # (E, k)
    free: np.ndarray    # (E, d) children of each type receiving no mark
    families: list


def event_table(model: OffspringModel, k: int) -> EventTable:
    d = model.d
    start = np.zeros((d, k + 1), dtype=np.int64)
    stop = np.zeros((d, k + 1), dtype=np.int64)
    outs, consts, nbs, bts, bss, frees, fams = [], [], [], [], [], [], []
    for i in range(d):
        for h in range(k + 1):
            start[i, h] = len(outs)
            for n, (ell, p) in enumerate(zip(np.asarray(model.outcomes[i]), model.probs[i])):
                if p <= 0:
                    continue
                fams_h = [tuple(() for _ in range(d))] if h == 0 else size_families(h, ell)
                for fam in fams_h:
                    g = np.array([len(s) for s in fam])
                    mult = math.prod(falling(int(ell[m]), int(g[m])) for m in range(d))
                    if h:
                        mult *= partition_count([s for s in fam if s])
                    bt = np.full(max(k, 1), -1, dtype=np.int64)
                    bs = np.zeros(max(k, 1), dtype=np.int64)
                    q = 0
                    for m in range(d):
                        for a in fam[m]:
                            bt[q], bs[q] = m, a
                            q += 1
                    outs.append(n)
                    consts.append(math.log(model.alpha[i] * p * mult))
                    nbs.append(q)
                    bts.append(bt)
                    bss.append(bs)
                    frees.append(ell - g)
                    fams.append((i, h, n, fam))
            stop[i, h] = len(outs)
    return EventTable(start, stop, np.array(outs, dtype=np.int64), np.array(consts),
                      np.array(nbs, dtype=np.int64), np.array(bts).reshape(-1, max(k, 1)),
                      np.array(bss).reshape(-1, max(k, 1)), np.array(frees, dtype=np.int64).reshape(-1, d),
                      fams)


# ---------------------------------------------------------------------------
# compiled simulation


@njit(cache=True)
def _log_moment_col(nodes, vals, ders, at_zero, u, c):
    """Single column of ``_log_moments``."""
    umin = nodes[0]
    if u >= umin:
        j = _locate(nodes, u)
        h = nodes[j + 1] - nodes[j]
        s = (u - nodes[j]) / h
        return ((1 + 2 * s) * (1 - s) ** 2 * vals[j, c] + s * (1 - s) ** 2 * h * ders[j, c]
                + s * s * (3 - 2 * s) * vals[j + 1, c] + s * s * (s - 1) * h * ders[j + 1, c])
    if np.isfinite(at_zero[c]):
        return at_zero[c] + (vals[0, c] - at_zero[c]) * (u / umin)
    if u <= 0.0:
        return -np.inf
    return vals[0, c] + umin * ders[0, c] * np.log(u / umin)


@njit(cache=True)
def _lifetime(i, h, u0, E, T, alpha, nodes, logd, dlogd, at_zero, d):
    """Remaining time at the next branching of a (type i, h marks) particle born
    with u0 remaining, or -1.0 if it survives to the horizon.

    Solves alpha_i (T - u) - log D_h(i, u) = target, the left side being
    decreasing in u.
    """
    col = h * d + i
    a = alpha[i]
    target = a * (T - u0) - _log_moment_col(nodes, logd, dlogd, at_zero, u0, col) + E
    if np.isfinite(at_zero[col]):
        if target >= a * T - at_zero[col]:
            return -1.0
    if a * (T - nodes[0]) - logd[0, col] < target:
        lo, hi = 0.0, min(nodes[0], u0)
    else:
        lo_idx = 0
        hi_idx = nodes.shape[0] - 1
        while hi_idx - lo_idx > 1:
            mid = (lo_idx + hi_idx) // 2
            if a * (T - nodes[mid]) - logd[mid, col] >= target:
                lo_idx = mid
            else:
                hi_idx = mid
        lo, hi = nodes[lo_idx], min(nodes[hi_idx], u0)
    if lo == 0.0 and not np.isfinite(at_zero[col]):
        # the left side diverges at u = 0: bisect in log u
        llo = np.log(nodes[0]) - 60.0
        lhi = np.log(hi)
        while lhi - llo > 1e-13:
            lm = 0.5 * (llo + lhi)
            um = np.exp(lm)
            if a * (T - um) - _log_moment_col(nodes, logd, dlogd, at_zero, um, col) >= target:
                llo = lm
            else:
                lhi = lm
        return np.exp(0.5 * (llo + lhi))
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if a * (T - mid) - _log_moment_col(nodes, logd, dlogd, at_zero, mid, col) >= target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * hi:
            break
    return 0.5 * (lo + hi)


@njit(cache=True)
def _popcount(x):
    c = 0
    while x:
        x &= x - 1
        c += 1
    return c


@njit(cache=True)
def _event_log_rates(i, h, d, buf, out, e_start, e_stop, e_const, e_nb, e_bt, e_bs, e_free):
    """log rate of every event of a (type i, h marks) particle given log D in ``buf``."""
    a0 = e_start[i, h]
    for e in range(a0, e_stop[i, h]):
        lw = e_const[e] - buf[h * d + i]
        for m in range(d):
            if e_free[e, m] > 0:
                lw += e_free[e, m] * buf[m]
        for q in range(e_nb[e]):
            lw += buf[e_bs[e, q] * d + e_bt[e, q]]
        out[e - a0] = lw


@njit(cache=True)
def _choose_event(i, h, d, buf, logw, state, e_start, e_stop, e_const, e_nb, e_bt, e_bs, e_free):
    a0 = e_start[i, h]
    a1 = e_stop[i, h]
    _event_log_rates(i, h, d, buf, logw, e_start, e_stop, e_const, e_nb, e_bt, e_bs, e_free)
    best = -np.inf
    for e in range(a1 - a0):
        if logw[e] > best:
            best = logw[e]
    tot = 0.0
    for e in range(a1 - a0):
        logw[e] = np.exp(logw[e] - best)
        tot += logw[e]
    u = uniform(state) * tot
    e = 0
    acc = logw[0]
    while u >= acc and e < a1 - a0 - 1:
        e += 1
        acc += logw[e]
    return a0 + e


@njit(cache=True)
def _unmarked(alpha, ell, cump, nout, theta, u, i, state, cap):
    """Subtree of an unmarked particle over remaining time u: the original law
    reweighted by exp(-theta . Z), sampled by rejection."""
    d = alpha.shape[0]
    while True:
        res = _grow(alpha, ell, cump, nout, u, i, state, cap, True)
        if res[0] != 0:
            return res
        disc = 0.0
        for m in range(d):
            disc += theta[m] * res[1][m]
        if disc == 0.0 or uniform(state) < np.exp(-disc):
            return res


@njit(cache=True)
def _q_tree(T, root, k, state, cap, record, alpha, ell, cump, nout, theta, xi, nodes, logd, dlogd,
            at_zero, e_start, e_stop, e_out, e_const, e_nb, e_bt, e_bs, e_free):
    """One realisation under the marked measure.

    Marked particles are stored as nodes together with their children;
    unmarked subtrees are grafted in full only when ``record`` is set.
    Returns (status, n_nodes, node arrays, marks per node as bit masks,
    events of marked particles (node, nblocks), log spine weight, Z_T);
    status 1 means the population cap was hit.
    """
    d = alpha.shape[0]
    size = 256
    parent = np.full(size, -1, dtype=np.int64)
    ntype = np.zeros(size, dtype=np.int64)
    birth = np.zeros(size)
    death = np.full(size, np.inf)
    first_child = np.full(size, -1, dtype=np.int64)
    n_children = np.zeros(size, dtype=np.int64)
    mask = np.zeros(size, dtype=np.int64)
    ev_node = np.zeros(64, dtype=np.int64)
    ev_nb = np.zeros(64, dtype=np.int64)
    n_ev = 0
    Z = np.zeros(d, dtype=np.int64)
    stack = np.zeros(size, dtype=np.int64)
    ntype[0] = root
    mask[0] = (1 << k) - 1
    n_nodes = 1
    stack[0] = 0
    top = 1
    buf = np.empty(logd.shape[1])
    logw = np.empty(e_const.shape[0])
    marks = np.empty(k, dtype=np.int64)
    slots = np.empty(64, dtype=np.int64)
    kid_type = np.empty(64, dtype=np.int64)
    log_g = 0.0
    status = 0
    while top > 0:
        top -= 1
        v = stack[top]
        i = ntype[v]
        h = _popcount(mask[v])
        if h == 0:
            sub = _unmarked(alpha, ell, cump, nout, theta, T - birth[v], i, state, cap)
            if sub[0] != 0:
                status = 1
                break
            for m in range(d):
                Z[m] += sub[1][m]
            if not record:
                continue
            extra = sub[2] - 1
            if n_nodes + extra > cap:
                status = 1
                break
            if n_nodes + extra > parent.shape[0]:
                new = max(2 * parent.shape[0], n_nodes + extra)
                parent = np.concatenate((parent, np.full(new - parent.shape[0], -1, dtype=np.int64)))
                ntype = np.concatenate((ntype, np.zeros(new - ntype.shape[0], dtype=np.int64)))
                birth = np.concatenate((birth, np.zeros(new - birth.shape[0])))
                death = np.concatenate((death, np.full(new - death.shape[0], np.inf)))
                first_child = np.concatenate((first_child, np.full(new - first_child.shape[0], -1, dtype=np.int64)))
                n_children = np.concatenate((n_children, np.zeros(new - n_children.shape[0], dtype=np.int64)))
                mask = np.concatenate((mask, np.zeros(new - mask.shape[0], dtype=np.int64)))
                stack = np.concatenate((stack, np.zeros(new - stack.shape[0], dtype=np.int64)))
            b0 = birth[v]
            s_parent, s_birth, s_death, s_fc, s_nc = sub[3], sub[5], sub[6], sub[7], sub[8]
            for j in range(sub[2]):
                w = v if j == 0 else n_nodes + j - 1
                if j > 0:
                    pj = s_parent[j]
                    parent[w] = v if pj == 0 else n_nodes + pj - 1
                    ntype[w] = sub[4][j]
                    birth[w] = b0 + s_birth[j]
                    mask[w] = 0
                death[w] = b0 + s_death[j]
                if s_nc[j] > 0:
                    first_child[w] = n_nodes + s_fc[j] - 1
                    n_children[w] = s_nc[j]
            n_nodes += extra
            continue
        u0 = T - birth[v]
        ustar = _lifetime(i, h, u0, exponential(state), T, alpha, nodes, logd, dlogd, at_zero, d)
        if ustar < 0.0:
            Z[i] += 1
            continue
        t = T - ustar
        if t <= birth[v]:
            t = np.nextafter(birth[v], np.inf)
            ustar = T - t
        death[v] = t
        _log_moments(nodes, logd, dlogd, at_zero, ustar, buf)
        e = _choose_event(i, h, d, buf, logw, state, e_start, e_stop, e_const, e_nb, e_bt, e_bs, e_free)
        n = e_out[e]
        nkids = 0
        for m in range(d):
            nkids += ell[i, n, m]
        if n_nodes + nkids > cap:
            status = 1
            break
        if n_nodes + nkids > parent.shape[0]:
            new = max(2 * parent.shape[0], n_nodes + nkids)
            parent = np.concatenate((parent, np.full(new - parent.shape[0], -1, dtype=np.int64)))
            ntype = np.concatenate((ntype, np.zeros(new - ntype.shape[0], dtype=np.int64)))
            birth = np.concatenate((birth, np.zeros(new - birth.shape[0])))
            death = np.concatenate((death, np.full(new - death.shape[0], np.inf)))
            first_child = np.concatenate((first_child, np.full(new - first_child.shape[0], -1, dtype=np.int64)))
            n_children = np.concatenate((n_children, np.zeros(new - n_children.shape[0], dtype=np.int64)))
            mask = np.concatenate((mask, np.zeros(new - mask.shape[0], dtype=np.int64)))
            stack = np.concatenate((stack, np.zeros(new - stack.shape[0], dtype=np.int64)))
        first_child[v] = n_nodes
        n_children[v] = nkids
        c = 0
        for m in range(d):
            for _ in range(ell[i, n, m]):
                w = n_nodes + c
                parent[w] = v
                ntype[w] = m
                birth[w] = t
                death[w] = np.inf
                mask[w] = 0
                kid_type[c] = m
                c += 1
        # marks in random order
        nm = 0
        for b in range(k):
            if (mask[v] >> b) & 1:
                marks[nm] = b
                nm += 1
        for a in range(nm - 1, 0, -1):
            r = randbelow(state, a + 1)
            marks[a], marks[r] = marks[r], marks[a]
        # per type, an ordered random choice of distinct children
        pos = 0
        offset = 0
        for m in range(d):
            lm = ell[i, n, m]
            for a in range(lm):
                slots[a] = offset + a
            used = 0
            for q in range(e_nb[e]):
                if e_bt[e, q] != m:
                    continue
                r = used + randbelow(state, lm - used)
                slots[used], slots[r] = slots[r], slots[used]
                child = n_nodes + slots[used]
                used += 1
                for _ in range(e_bs[e, q]):
                    mask[child] |= 1 << marks[pos]
                    pos += 1
            offset += lm
        lx = 0.0
        for m in range(d):
            lx += ell[i, n, m] * xi[m]
        for c2 in range(nkids):
            cm = mask[n_nodes + c2]
            if cm:
                log_g += _popcount(cm) * (np.log(lx) - np.log(xi[kid_type[c2]]))
        if n_ev >= ev_node.shape[0]:
            ev_node = np.concatenate((ev_node, np.zeros(ev_node.shape[0], dtype=np.int64)))
            ev_nb = np.concatenate((ev_nb, np.zeros(ev_nb.shape[0], dtype=np.int64)))
        ev_node[n_ev] = v
        ev_nb[n_ev] = e_nb[e]
        n_ev += 1
        for c2 in range(nkids - 1, -1, -1):
            stack[top] = n_nodes + c2
            top += 1
        n_nodes += nkids
    return (status, n_nodes, parent[:n_nodes], ntype[:n_nodes], birth[:n_nodes], death[:n_nodes],
            first_child[:n_nodes], n_children[:n_nodes], mask[:n_nodes], ev_node[:n_ev], ev_nb[:n_ev],
            log_g, Z)


@njit(cache=True)
def _q_batch(T, root, k, master, start, count, cap, alpha, ell, cump, nout, theta, xi, nodes, logd,
             dlogd, at_zero, e_start, e_stop, e_out, e_const, e_nb, e_bt, e_bs, e_free):
    d = alpha.shape[0]
    K1 = max(k - 1, 1)
    status = np.zeros(count, dtype=np.int64)
    Z = np.zeros((count, d), dtype=np.int64)
    log_g = np.zeros(count)
    n_off = np.zeros(count, dtype=np.int64)
    M = np.zeros(count, dtype=np.int64)
    ev_time = np.full((count, K1), np.nan)
    ev_type = np.full((count, K1), -1, dtype=np.int64)
    ev_off = np.zeros((count, K1, d), dtype=np.int64)
    ev_ctype = np.full((count, K1, k), -1, dtype=np.int64)
    ev_cslot = np.full((count, K1, k), -1, dtype=np.int64)
    root_time = np.full(count, np.inf)
    root_off = np.zeros((count, d), dtype=np.int64)
    root_nb = np.zeros(count, dtype=np.int64)
    root_ctype = np.full(count, -1, dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    for r in range(count):
        state[0] = stream_key(np.uint64(master), np.uint64(start + r))
        res = _q_tree(T, root, k, state, cap, False, alpha, ell, cump, nout, theta, xi, nodes, logd,
                      dlogd, at_zero, e_start, e_stop, e_out, e_const, e_nb, e_bt, e_bs, e_free)
        status[r] = res[0]
        if res[0] != 0:
            continue
        ntype, death, fc, nc, mask = res[3], res[5], res[6], res[7], res[8]
        evn, evb = res[9], res[10]
        log_g[r] = res[11]
        Z[r] = res[12]
        root_time[r] = death[0]
        for c in range(nc[0]):
            root_off[r, ntype[fc[0] + c]] += 1
            if mask[fc[0] + c]:
                root_nb[r] += 1
                if mask[fc[0] + c] & 1:
                    root_ctype[r] = ntype[fc[0] + c]
        split_nodes = np.empty(evn.shape[0], dtype=np.int64)
        nsplit = 0
        for q in range(evn.shape[0]):
            if evb[q] < 2:
                n_off[r] += 1
            else:
                split_nodes[nsplit] = evn[q]
                nsplit += 1
        split_nodes = split_nodes[:nsplit]
        split_nodes = split_nodes[np.argsort(death[split_nodes])]
        for h in range(min(nsplit, K1)):
            v = split_nodes[h]
            ev_time[r, h] = death[v]
            ev_type[r, h] = ntype[v]
            for c in range(nc[v]):
                ev_off[r, h, ntype[fc[v] + c]] += 1
                cm = mask[fc[v] + c]
                for b in range(k):
                    if (cm >> b) & 1:
                        ev_ctype[r, h, b] = ntype[fc[v] + c]
                        ev_cslot[r, h, b] = c
        M[r] = nsplit
    return (status, Z, log_g, n_off, M, ev_time, ev_type, ev_off, ev_ctype, ev_cslot,
            root_time, root_off, root_nb, root_ctype)


# ---------------------------------------------------------------------------
# Python-facing API


@dataclass
class SpineSampler:
    """Everything the compiled sampler needs for one (model, k, theta, T, root)."""

    model: OffspringModel
    k: int
    theta: np.ndarray
    T: float
    root_type: int = 0
    table: MomentTable = None
    events: EventTable = None
    xi: np.ndarray = None

    def __post_init__(self):
        from .model import spectral

        self.theta = np.asarray(self.theta, dtype=float).reshape(self.model.d)
        if self.table is None:
            self.table = MomentTable(self.model, self.T, self.theta, self.k)
        if self.events is None:
            self.events = event_table(self.model, self.k)
        if self.xi is None:
            self.xi = spectral(self.model).xi

    def _args(self):
        alpha, ell, cump, nout = kernel_tables(self.model)
        tb, ev = self.table, self.events
        return (alpha, ell, cump, nout, self.theta, self.xi, tb.nodes, tb.logd, tb.dlogd, tb.at_zero,
                ev.start, ev.stop, ev.outcome, ev.logconst, ev.nblocks, ev.btype,
                ev.bsize, ev.free)

    def normaliser(self) -> float:
        """E_r[N_T^(k) exp(-theta . Z_T)] from the moment table."""
        return float(np.exp(self.table.log_moments(self.T)[self.k, self.root_type]))

    def event_rates(self, t: float, i: int, h: int) -> np.ndarray:
        """Rates of the events of a (type i, h marks) particle at time t, aligned with the event table."""
        ev = self.events
        lw = np.empty(ev.stop[i, h] - ev.start[i, h])
        _event_log_rates(i, h, self.model.d, self.table.log_moments(self.T - t).ravel(), lw, ev.start,
                         ev.stop, ev.logconst, ev.nblocks, ev.btype, ev.bsize, ev.free)
        return np.exp(lw)

    def root_first_events(self, replicates, seed=0, start=0):
        """(time, event-table index) of the root's first branching, inf / -1 if none before T."""
        alpha = np.asarray(self.model.alpha, float)
        tb, ev = self.table, self.events
        return _root_events(float(self.T), self.root_type, self.k, seed, start, replicates, alpha,
                            tb.nodes, tb.logd, tb.dlogd, tb.at_zero, ev.start, ev.stop, ev.logconst,
                            ev.nblocks, ev.btype, ev.bsize, ev.free)

    def simulate(self, seed=0, replicate=0, cap=10_000_000):
        state = new_state(seed, replicate)
        res = _q_tree(float(self.T), self.root_type, self.k, state, cap, True, *self._args())
        if res[0] != 0:
            raise RuntimeError(f"population cap {cap} exceeded")
        tree = GenealogyTree(self.model.d, self.root_type, float(self.T), res[2], res[3], res[4],
                             res[5], res[6], res[7])
        return SpineRecord.from_kernel(self, tree, res[8], res[9], res[10], res[11]), tree

    def batch(self, replicates, seed=0, start=0, cap=10_000_000) -> "SpineBatch":
        out = _q_batch(float(self.T), self.root_type, self.k, seed, start, replicates, cap, *self._args())
        return SpineBatch(self, *out)


@dataclass
class SpineRecord:
    splits: list
    offspine: list          # (time, type_before, offspring vector)
    final_marks: dict       # mark (1-based) -> node index alive at T
    log_g_kernel: float
    N_T: int
    Z_T: np.ndarray
    node_marks: np.ndarray  # bit mask of carried marks per node

    @property
    def M(self) -> int:
        return len(self.splits)

    @property
    def n_offspine(self) -> int:
        return len(self.offspine)

    @classmethod
    def from_kernel(cls, sampler, tree, mask, ev_node, ev_nb, log_g):
        splits, off = [], []
        for v, nb in zip(ev_node, ev_nb):
            v = int(v)
            offv = tuple(int(x) for x in tree.offspring_vector(v))
            if nb >= 2:
                blocks = [[] for _ in range(tree.d)]
                for c in tree.children(v):
                    cm = int(mask[c])
                    if cm:
                        blocks[int(tree.ntype[c])].append(tuple(b + 1 for b in range(sampler.k) if cm >> b & 1))
                splits.append(SplitEvent(float(tree.death[v]), int(tree.ntype[v]), offv,
                                         ColouredPartition.from_blocks(tree.d, blocks), v))
            else:
                off.append((float(tree.death[v]), int(tree.ntype[v]), offv))
        splits.sort(key=lambda e: e.time)
        off.sort()
        final = {}
        for v in np.nonzero(np.isinf(tree.death))[0]:
            cm = int(mask[v])
            for b in range(sampler.k):
                if cm >> b & 1:
                    final[b + 1] = int(v)
        Z = tree.population_at(tree.T)
        return cls(splits, off, final, float(log_g), int(Z.sum()), Z, mask)


def g_statistic(record: SpineRecord, tree: GenealogyTree, xi, k: int) -> float:
    """Product over marks of (L_w . xi)/xi_{child type} along each mark's ancestral line.

    Zero unless the k marks sit on distinct individuals alive at the horizon.
    """
    if k == 0:
        return 1.0
    xi = np.asarray(xi, dtype=float)
    leaves = [record.final_marks.get(j) for j in range(1, k + 1)]
    if any(v is None for v in leaves) or len(set(leaves)) != k:
        return 0.0
    g = 1.0
    for v in leaves:
        while v > 0:
            p = int(tree.parent[v])
            g *= (tree.offspring_vector(p) @ xi) / xi[tree.ntype[v]]
            v = p
    return float(g)


def importance_weight(record: SpineRecord, sampler: SpineSampler) -> float:
    """E_r[N_T^(k) e^{-theta.Z_T}] / (N_T^(k) e^{-theta.Z_T}) for one marked realisation."""
    n = record.N_T
    if n < sampler.k:
        raise AssertionError("fewer individuals than marks under the marked measure")
    return sampler.normaliser() / (math.perm(n, sampler.k) * math.exp(-sampler.theta @ record.Z_T))


@dataclass
class SpineBatch:
    sampler: SpineSampler
    status: np.ndarray
    Z: np.ndarray
    log_g: np.ndarray
    n_offspine: np.ndarray
    M: np.ndarray
    split_time: np.ndarray
    split_type: np.ndarray
    split_offspring: np.ndarray
    split_ctype: np.ndarray
    split_cslot: np.ndarray
    root_time: np.ndarray
    root_offspring: np.ndarray
    root_nblocks: np.ndarray
    root_ctype: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.status == 0

    @property
    def N(self) -> np.ndarray:
        return self.Z.sum(axis=1)

    def log_weights(self) -> np.ndarray:
        """log of the importance weight transferring expectations back to the original measure."""
        k = self.sampler.k
        N = self.N.astype(float)
        from scipy.special import gammaln

        log_fall = gammaln(N + 1) - gammaln(np.maximum(N - k + 1, 1.0))
        return (np.log(self.sampler.normaliser()) - log_fall + self.Z @ self.sampler.theta)

    def partitions(self, r: int) -> list:
        """Coloured partitions of the recorded splits of replicate r."""
        n = int(min(self.M[r], self.split_time.shape[1]))
        return partitions_from_slots(self.sampler.model.d, self.sampler.k, n, self.split_ctype[r],
                                     self.split_cslot[r])


@njit(cache=True)
def _root_events(T, root, k, master, start, count, alpha, nodes, logd, dlogd, at_zero,
                 e_start, e_stop, e_const, e_nb, e_bt, e_bs, e_free):
    """First branching time and event of the root, drawn exactly as in ``_q_tree``."""
    d = alpha.shape[0]
    times = np.full(count, np.inf)
    events = np.full(count, -1, dtype=np.int64)
    buf = np.empty(logd.shape[1])
    logw = np.empty(e_const.shape[0])
    state = np.zeros(1, dtype=np.uint64)
    for r in range(count):
        state[0] = stream_key(np.uint64(master), np.uint64(start + r))
        ustar = _lifetime(root, k, T, exponential(state), T, alpha, nodes, logd, dlogd, at_zero, d)
        if ustar < 0.0:
            continue
        times[r] = T - ustar
        _log_moments(nodes, logd, dlogd, at_zero, ustar, buf)
        events[r] = _choose_event(root, k, d, buf, logw, state, e_start, e_stop, e_const, e_nb,
                                  e_bt, e_bs, e_free)
    return times, events


def exact_moments(model: OffspringModel, theta, k: int):
    """Callable u -> (k+1, d) array of D_a(m, u) straight from the ODE (no interpolation)."""
    def at(u):
        return genfun.moment_jets(model, [float(u)], theta, k)[0][0]
    return at


def offspine_limit_rate(model: OffspringModel, xi, r: int) -> dict:
    """alpha_r p_r(ell) (ell . xi) / xi_r for every offspring vector of type r."""
    xi = np.asarray(xi, dtype=float)
    return {tuple(int(x) for x in ell): float(model.alpha[r] * p * (ell @ xi) / xi[r])
            for ell, p in zip(np.asarray(model.outcomes[r]), model.probs[r]) if p > 0}


def offspine_rates(model: OffspringModel, moments, i: int, h: int, t: float, T: float) -> dict:
    """Rate of births off the spine (all h marks to one child) per offspring vector."""
    out = {}
    for ell, p in zip(np.asarray(model.outcomes[i]), model.probs[i]):
        if p <= 0:
            continue
        total = 0.0
        for m in range(model.d):
            if ell[m] > 0:
                sizes = [(h,) if q == m else () for q in range(model.d)]
                total += spine_split_rate(model, moments, i, sizes, ell, t, T)
        out[tuple(int(x) for x in ell)] = total
    return out


def split_keys(model: OffspringModel, k: int) -> list:
    """(type, outcome index, size family) of every event splitting k marks into >= 2 blocks."""
    keys = []
    for i in range(model.d):
        for n, (ell, p) in enumerate(zip(np.asarray(model.outcomes[i]), model.probs[i])):
            if p <= 0:
                continue
            for fam in size_families(k, ell):
                if sum(len(s) for s in fam) >= 2:
                    keys.append((i, n, fam))
    return keys


def _split_numerators(model, keys, D):
    """alpha_i p ell^(g) count prod F^(ell-g) prod D_a for each key, D of shape (n, k+1, d)."""
    out = np.empty((D.shape[0], len(keys)))
    for c, (i, n, fam) in enumerate(keys):
        ell = np.asarray(model.outcomes[i][n])
        g = np.array([len(s) for s in fam])
        const = model.alpha[i] * model.probs[i][n] * partition_count([s for s in fam if s])
        const *= math.prod(falling(int(ell[m]), int(g[m])) for m in range(model.d))
        val = const * np.prod(D[:, 0, :] ** (ell - g)[None, :], axis=1)
        for m, sz in enumerate(fam):
            for a in sz:
                val = val * D[:, a, m]
        out[:, c] = val
    return out


def first_split_law(model: OffspringModel, k: int, theta, T: float, root_type: int, times):
    """Density in time of the first split of the k marks, per (type, offspring, size family).

    Uses E_r[Z_t^(i) v^(Z_t - e_i)] = dF_{t,r}/ds_i at v = F_{T-t}(exp(-theta)) for
    the law of the unsplit lineage.  Returns (keys, density) with density of
    shape (len(times), len(keys)).
    """
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0) or np.any(times >= T):
        raise ValueError("times must lie in (0, T)")
    keys = split_keys(model, k)
    u = T - times
    order = np.argsort(u)
    s0 = np.exp(-theta)
    D, _ = genfun.moment_jets(model, u[order], theta, k)
    DT = genfun.moment_jets(model, [T], theta, k)[0][0, k, root_type]
    num = _split_numerators(model, keys, D)
    lineage = np.empty((u.size, model.d))
    V = genfun.generating_function(model, u[order], s0)
    for n in range(u.size):
        lineage[n] = genfun.jacobian(model, times[order][n], V[n])[root_type]
    dens = np.empty_like(num)
    for c, (i, _, _) in enumerate(keys):
        dens[:, c] = lineage[:, i] * num[:, c] / DT
    out = np.empty_like(dens)
    out[order] = dens
    return keys, out


def first_split_law_forward(sampler: "SpineSampler", times):
    """The same density from the forward equation of the unsplit lineage's type,
    with every rate read from the sampler's moment table."""
    from scipy.integrate import solve_ivp

    model, k, T = sampler.model, sampler.k, sampler.T
    d = model.d
    keys = split_keys(model, k)
    ev = sampler.events

    def rates(t):
        logd = sampler.table.log_moments(T - t)
        buf = logd.ravel()
        move = np.zeros((d, d))
        total = np.zeros(d)
        split = np.zeros(len(keys))
        for i in range(d):
            a0, a1 = ev.start[i, k], ev.stop[i, k]
            lw = np.empty(a1 - a0)
            _event_log_rates(i, k, d, buf, lw, ev.start, ev.stop, ev.logconst, ev.nblocks, ev.btype,
                             ev.bsize, ev.free)
            r = np.exp(lw)
            total[i] = r.sum()
            for e in range(a0, a1):
                if ev.nblocks[e] == 1:
                    move[i, ev.btype[e, 0]] += r[e - a0]
        return move, total

    def rhs(t, pi):
        move, total = rates(t)
        return pi @ move - pi * total

    times = np.asarray(times, dtype=float)
    pi0 = np.zeros(d)
    pi0[sampler.root_type] = 1.0
    sol = solve_ivp(rhs, (0.0, float(times.max())), pi0, method="DOP853", rtol=1e-10, atol=1e-12,
                    dense_output=True)
    out = np.empty((times.size, len(keys)))
    D_all = np.exp(np.array([sampler.table.log_moments(T - t) for t in times]))
    num = _split_numerators(model, keys, D_all)
    for n, t in enumerate(times):
        pi = sol.sol(t)
        for c, (i, _, _) in enumerate(keys):
            out[n, c] = pi[i] * num[n, c] / D_all[n, k, i]
    return keys, out


# ---------------------------------------------------------------------------
# the unbiased k-spine measure (forward tree, marks choosing children)


@njit(cache=True)
def _pk_batch(alpha, ell, cump, nout, xi, theta, T, root, k, master, start, count, cap):
    """g_{k,T} exp(-theta . Z_T) for trees drawn from the original law with k marks
    following children of type m with probability proportional to ell_m xi_m."""
    d = alpha.shape[0]
    out = np.zeros(count)
    ends = np.empty(k, dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    for r in range(count):
        state[0] = stream_key(np.uint64(master), np.uint64(start + r))
        res = _grow(alpha, ell, cump, nout, T, root, state, cap, True)
        if res[0] != 0:
            out[r] = np.nan
            continue
        counts, ntype, death, fc, nc = res[1], res[4], res[6], res[7], res[8]
        g = 1.0
        ok = True
        for h in range(k):
            v = 0
            while np.isfinite(death[v]):
                if nc[v] == 0:
                    ok = False
                    break
                lx = 0.0
                for c in range(nc[v]):
                    lx += xi[ntype[fc[v] + c]]
                u = uniform(state) * lx
                c = 0
                acc = xi[ntype[fc[v]]]
                while u >= acc and c < nc[v] - 1:
                    c += 1
                    acc += xi[ntype[fc[v] + c]]
                w = fc[v] + c
                g *= lx / xi[ntype[w]]
                v = w
            ends[h] = v
        if ok:
            for a in range(k):
                for b in range(a):
                    if ends[a] == ends[b]:
                        ok = False
        if ok:
            disc = 0.0
            for m in range(d):
                disc += theta[m] * counts[m]
            out[r] = g * np.exp(-disc)
    return out


def pk_weights(model: OffspringModel, xi, theta, T: float, k: int, replicates: int, root_type=0,
               seed=0, start=0, cap=10_000_000) -> np.ndarray:
    """Per-replicate g_{k,T} exp(-theta.Z_T) under the unbiased k-spine measure."""
    alpha, ell, cump, nout = kernel_tables(model)
    return _pk_batch(alpha, ell, cump, nout, np.asarray(xi, float), np.asarray(theta, float),
                     float(T), root_type, k, seed, start, replicates, cap)
