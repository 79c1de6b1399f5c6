"""Exact forward simulation of the branching process with full genealogy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .model import OffspringModel
from .rng import exponential, new_state, randbelow, stream_key, uniform

DEFAULT_CAP = 10_000_000

OK, TRUNCATED = 0, 1


class PopulationCapError(RuntimeError):
    pass


def kernel_tables(model: OffspringModel):
    """(alpha, ell, cumulative p, nout) arrays consumed by the kernels."""
    ell, p, nout = model.padded()
    cump = np.cumsum(p, axis=1)
    for i in range(model.d):
        cump[i, nout[i] - 1:] = 1.0
    return np.asarray(model.alpha, float), ell, cump, nout


@njit(cache=True)
def _draw_outcome(cump_i, nout_i, u):
    for n in range(nout_i - 1):
        if u < cump_i[n]:
            return n
    return nout_i - 1


@njit(cache=True)
def _grow(alpha, ell, cump, nout, T, root, state, cap, record):
    """Direct-method simulation up to time T.

    Returns (status, Z_T, n_nodes, parent, ntype, birth, death, first_child,
    n_children).  With ``record`` false only the counts are tracked, but the
    random stream is consumed identically so a replicate can be replayed
    with recording switched on.
    """
    d = alpha.shape[0]
    counts = np.zeros(d, dtype=np.int64)
    counts[root] = 1
    size = 1024 if record else 1
    parent = np.full(size, -1, dtype=np.int64)
    ntype = np.zeros(size, dtype=np.int64)
    birth = np.zeros(size)
    death = np.full(size, np.inf)
    first_child = np.full(size, -1, dtype=np.int64)
    n_children = np.zeros(size, dtype=np.int64)
    pos = np.zeros(size, dtype=np.int64)
    alive = np.zeros((d, size), dtype=np.int64)
    ntype[0] = root
    n_nodes = 1
    t = 0.0
    status = 0
    v = -1
    while True:
        total = 0.0
        for i in range(d):
            total += alpha[i] * counts[i]
        if total == 0.0:
            break
        t += exponential(state) / total
        if t >= T:
            break
        u = uniform(state) * total
        i = 0
        acc = alpha[0] * counts[0]
        while u >= acc and i < d - 1:
            i += 1
            acc += alpha[i] * counts[i]
        while counts[i] == 0:
            i -= 1
        j = randbelow(state, counts[i])
        n = _draw_outcome(cump[i], nout[i], uniform(state))
        nkids = 0
        for m in range(d):
            nkids += ell[i, n, m]
        if n_nodes + nkids > cap:
            status = 1
            break
        if record:
            v = alive[i, j]
            last = alive[i, counts[i] - 1]
            alive[i, j] = last
            pos[last] = j
            death[v] = t
            if n_nodes + nkids > parent.shape[0]:
                new = max(2 * parent.shape[0], n_nodes + nkids)
                parent = np.concatenate((parent, np.full(new - parent.shape[0], -1, dtype=np.int64)))
                ntype = np.concatenate((ntype, np.zeros(new - ntype.shape[0], dtype=np.int64)))
                birth = np.concatenate((birth, np.zeros(new - birth.shape[0])))
                death = np.concatenate((death, np.full(new - death.shape[0], np.inf)))
                first_child = np.concatenate((first_child, np.full(new - first_child.shape[0], -1, dtype=np.int64)))
                n_children = np.concatenate((n_children, np.zeros(new - n_children.shape[0], dtype=np.int64)))
                pos = np.concatenate((pos, np.zeros(new - pos.shape[0], dtype=np.int64)))
            first_child[v] = n_nodes
            n_children[v] = nkids
        counts[i] -= 1
        for m in range(d):
            for _ in range(ell[i, n, m]):
                if record:
                    w = n_nodes
                    parent[w] = v
                    ntype[w] = m
                    birth[w] = t
                    if counts[m] >= alive.shape[1]:
                        grown = np.zeros((d, 2 * alive.shape[1]), dtype=np.int64)
                        grown[:, :alive.shape[1]] = alive
                        alive = grown
                    alive[m, counts[m]] = w
                    pos[w] = counts[m]
                counts[m] += 1
                n_nodes += 1
    return (status, counts, n_nodes, parent[:n_nodes], ntype[:n_nodes], birth[:n_nodes],
            death[:n_nodes], first_child[:n_nodes], n_children[:n_nodes])


@njit(cache=True)
def survivor_scan(alpha, ell, cump, nout, T, root, master, start, count, k, cap):
    """Replicate ids in [start, start+count) whose population at T is at least k.

    Also returns their N_T, the number of truncated replicates and a
    histogram-free tally of survivors (N_T > 0).
    """
    ids = np.empty(count, dtype=np.int64)
    sizes = np.empty(count, dtype=np.int64)
    n_acc = 0
    n_trunc = 0
    n_surv = 0
    state = np.zeros(1, dtype=np.uint64)
    for r in range(start, start + count):
        state[0] = stream_key(np.uint64(master), np.uint64(r))
        res = _grow(alpha, ell, cump, nout, T, root, state, cap, False)
        if res[0] != 0:
            n_trunc += 1
            continue
        n = res[1].sum()
        if n > 0:
            n_surv += 1
        if n >= k:
            ids[n_acc] = r
            sizes[n_acc] = n
            n_acc += 1
    return ids[:n_acc], sizes[:n_acc], n_trunc, n_surv


@njit(cache=True)
def population_scan(alpha, ell, cump, nout, T, root, master, start, count, cap):
    """Z_T for each replicate in [start, start+count); rows of -1 mark truncation."""
    d = alpha.shape[0]
    out = np.empty((count, d), dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    for r in range(start, start + count):
        state[0] = stream_key(np.uint64(master), np.uint64(r))
        res = _grow(alpha, ell, cump, nout, T, root, state, cap, False)
        if res[0] != 0:
            out[r - start, :] = -1
        else:
            out[r - start, :] = res[1]
    return out


@njit(cache=True)
def _preorder(first_child, n_children):
    n = first_child.shape[0]
    rank = np.empty(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    top = 0
    stack[0] = 0
    top = 1
    r = 0
    while top > 0:
        top -= 1
        v = stack[top]
        rank[v] = r
        r += 1
        for c in range(n_children[v] - 1, -1, -1):
            stack[top] = first_child[v] + c
            top += 1
    return rank


@dataclass(frozen=True, eq=False)
class GenealogyTree:
    """Append-only individual table; children of a node are stored contiguously.

    Types are 0-based.  ``death`` is +inf for individuals alive at the horizon.
    """

    d: int
    root_type: int
    T: float
    parent: np.ndarray
    ntype: np.ndarray
    birth: np.ndarray
    death: np.ndarray
    first_child: np.ndarray
    n_children: np.ndarray

    @property
    def size(self) -> int:
        return self.parent.shape[0]

    def label(self, v: int) -> tuple:
        """Ulam-Harris label: child ranks (1-based) along the path from the root."""
        path = []
        while v > 0:
            p = self.parent[v]
            path.append(int(v - self.first_child[p] + 1))
            v = p
        return tuple(reversed(path))

    def index_of(self, label) -> int:
        v = 0
        for c in label:
            if c < 1 or c > self.n_children[v]:
                raise KeyError(f"no individual with label {label}")
            v = int(self.first_child[v] + c - 1)
        return v

    def children(self, v: int) -> np.ndarray:
        return np.arange(self.first_child[v], self.first_child[v] + self.n_children[v])

    def offspring_vector(self, v: int):
        if np.isinf(self.death[v]):
            return None
        return np.bincount(self.ntype[self.children(v)], minlength=self.d)

    def preorder_rank(self) -> np.ndarray:
        return _preorder(self.first_child, self.n_children)

    def _check_time(self, t):
        if t < 0 or t > self.T:
            raise ValueError(f"time {t} outside [0, {self.T}]")

    def alive_indices(self, t=None) -> np.ndarray:
        """Individuals alive at ``t`` (default: the horizon), in label order."""
        t = self.T if t is None else t
        self._check_time(t)
        idx = np.nonzero((self.birth <= t) & (t < self.death))[0]
        rank = self.preorder_rank()
        return idx[np.argsort(rank[idx], kind="stable")]

    def alive_at(self, t=None) -> list:
        return [self.label(v) for v in self.alive_indices(t)]

    def population_at(self, t=None) -> np.ndarray:
        return np.bincount(self.ntype[self.alive_indices(t)], minlength=self.d)

    def to_csv_rows(self):
        """Rows (label, type, birth, death, offspring_vector) with 1-based types."""
        rows = []
        for v in np.argsort(self.preorder_rank(), kind="stable"):
            off = self.offspring_vector(v)
            rows.append((".".join(map(str, self.label(v))) or "root", int(self.ntype[v]) + 1,
                         float(self.birth[v]), "" if np.isinf(self.death[v]) else float(self.death[v]),
                         "" if off is None else ";".join(map(str, off))))
        return rows


def simulate_tree(model: OffspringModel, T: float, root_type: int = 0, seed: int = 0,
                  replicate: int = 0, cap: int = DEFAULT_CAP) -> GenealogyTree:
    """One exact realisation up to time T from a single type-``root_type`` ancestor."""
    if T < 0:
        raise ValueError("T must be non-negative")
    if not 0 <= root_type < model.d:
        raise ValueError("root type out of range")
    alpha, ell, cump, nout = kernel_tables(model)
    state = new_state(seed, replicate)
    status, _, _, parent, ntype, birth, death, fc, nc = _grow(alpha, ell, cump, nout, float(T),
                                                             root_type, state, cap, True)
    if status == TRUNCATED:
        raise PopulationCapError(f"population cap {cap} exceeded (replicate {replicate})")
    return GenealogyTree(model.d, root_type, float(T), parent, ntype, birth, death, fc, nc)


def population_at(tree: GenealogyTree, t: float) -> np.ndarray:
    return tree.population_at(t)


def alive_at(tree: GenealogyTree, t: float) -> list:
    return tree.alive_at(t)


def final_populations(model: OffspringModel, T: float, replicates: int, root_type: int = 0,
                      seed: int = 0, start: int = 0, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Z_T for many independent replicates (rows of -1 mark truncated ones)."""
    alpha, ell, cump, nout = kernel_tables(model)
    return population_scan(alpha, ell, cump, nout, float(T), root_type, seed, start, replicates, cap)
