"""Uniform k-samples of the population at the horizon and their coalescent records."""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
from numba import njit

from .forest import GenealogyTree, _grow, kernel_tables
from .model import OffspringModel
from .rng import new_state, randbelow, stream_key


class InsufficientPopulation(ValueError):
    pass


@dataclass(frozen=True)
class ColouredPartition:
    """Blocks of mark indices grouped by the type of the child they follow.

    ``blocks[m]`` is a tuple of sorted tuples, ordered by their smallest mark.
    """

    d: int
    blocks: tuple

    @classmethod
    def from_blocks(cls, d: int, blocks) -> "ColouredPartition":
        canon = []
        for m in range(d):
            bs = [tuple(sorted(b)) for b in (blocks[m] if m < len(blocks) else ())]
            if any(len(b) == 0 for b in bs):
                raise ValueError("blocks must be non-empty")
            canon.append(tuple(sorted(bs, key=lambda b: b[0])))
        marks = [x for bs in canon for b in bs for x in b]
        if len(marks) != len(set(marks)):
            raise ValueError("blocks must be pairwise disjoint")
        return cls(d, tuple(canon))

    @property
    def g(self) -> np.ndarray:
        return np.array([len(b) for b in self.blocks], dtype=np.int64)

    @property
    def sizes(self) -> tuple:
        """Block sizes per type, in canonical block order."""
        return tuple(tuple(len(b) for b in bs) for bs in self.blocks)

    @property
    def abar(self) -> np.ndarray:
        return np.array([sum(len(b) for b in bs) for bs in self.blocks], dtype=np.int64)

    @property
    def k(self) -> int:
        return int(self.abar.sum())

    @property
    def n_blocks(self) -> int:
        return int(self.g.sum())

    def marks(self) -> frozenset:
        return frozenset(x for bs in self.blocks for b in bs for x in b)

    def to_string(self) -> str:
        """``type:block|block;...`` with 1-based types and comma-joined marks."""
        parts = []
        for m, bs in enumerate(self.blocks):
            if bs:
                parts.append(f"{m + 1}:" + "|".join(",".join(map(str, b)) for b in bs))
        return ";".join(parts)

    @classmethod
    def from_string(cls, d: int, text: str) -> "ColouredPartition":
        blocks = [[] for _ in range(d)]
        for part in filter(None, text.split(";")):
            m, rest = part.split(":")
            blocks[int(m) - 1] = [tuple(int(x) for x in b.split(",")) for b in rest.split("|")]
        return cls.from_blocks(d, blocks)


@dataclass(frozen=True)
class SplitEvent:
    time: float
    type_before: int
    offspring: tuple
    partition: ColouredPartition
    splitting_vertex: int

    def csv_row(self, replicate: int, h: int, M: int) -> list:
        return [replicate, h, repr(float(self.time)), self.type_before + 1,
                ";".join(map(str, self.offspring)), self.partition.to_string(), M]


SPLIT_CSV_HEADER = ["replicate_id", "h", "time", "type_before", "offspring_vector", "partition", "M"]


def uniform_sample_indices(tree: GenealogyTree, k: int, rng: np.random.Generator) -> np.ndarray:
    alive = tree.alive_indices()
    if alive.size < k:
        raise InsufficientPopulation(f"insufficient population: N_T={alive.size} < k={k}")
    return alive[rng.choice(alive.size, size=k, replace=False)]


def uniform_sample(tree: GenealogyTree, k: int, rng: np.random.Generator) -> list:
    """Ordered k labels drawn uniformly without replacement from the population at T."""
    return [tree.label(v) for v in uniform_sample_indices(tree, k, rng)]


def _as_indices(tree: GenealogyTree, sample) -> list:
    out = []
    for s in sample:
        v = tree.index_of(s) if isinstance(s, tuple) else int(s)
        if not np.isinf(tree.death[v]):
            raise ValueError("sampled individual is not alive at the horizon")
        out.append(v)
    if len(set(out)) != len(out):
        raise ValueError("sample must consist of distinct individuals")
    return out


def _carried_marks(tree: GenealogyTree, leaves) -> dict:
    """Map individual -> set of marks (1-based) whose ancestral line passes through it."""
    carried = {}
    for mark, v in enumerate(leaves, start=1):
        while True:
            carried.setdefault(v, set()).add(mark)
            if v == 0:
                break
            v = int(tree.parent[v])
    return carried


def partition_process(tree: GenealogyTree, sample, t: float) -> list:
    """Partition of marks by common ancestor alive at time t, as sorted tuples."""
    tree._check_time(t)
    leaves = _as_indices(tree, sample)
    groups = {}
    for mark, v in enumerate(leaves, start=1):
        while tree.birth[v] > t:
            v = int(tree.parent[v])
        groups.setdefault(v, []).append(mark)
    return sorted((tuple(b) for b in groups.values()), key=lambda b: b[0])


def split_records(tree: GenealogyTree, sample) -> tuple:
    """Split events of the sample's ancestral partition, in time order, and their count M."""
    leaves = _as_indices(tree, sample)
    carried = _carried_marks(tree, leaves)
    events = []
    for v, marks in carried.items():
        if len(marks) < 2 or np.isinf(tree.death[v]):
            continue
        kids = [c for c in tree.children(v) if int(c) in carried]
        if len(kids) < 2:
            continue
        blocks = [[] for _ in range(tree.d)]
        for c in kids:
            blocks[int(tree.ntype[c])].append(tuple(sorted(carried[int(c)])))
        off = tuple(int(x) for x in tree.offspring_vector(v))
        events.append(SplitEvent(float(tree.death[v]), int(tree.ntype[v]), off,
                                 ColouredPartition.from_blocks(tree.d, blocks), int(v)))
    events.sort(key=lambda e: e.time)
    for a, b in zip(events, events[1:]):
        if not a.time < b.time:
            raise AssertionError("simultaneous split events")
    return events, len(events)


def falling(n: int, j: int) -> int:
    return math.perm(n, j) if 0 <= j <= n else 0


def coloured_partition_probability(partition: ColouredPartition, ell, xi) -> float:
    """Probability that marks following independent type-weighted choices produce ``partition``."""
    ell = np.asarray(ell)
    xi = np.asarray(xi, dtype=float)
    g = partition.g
    if np.any(g > ell):
        return 0.0
    total = float(ell @ xi)
    prob = 1.0
    for m in range(partition.d):
        if g[m]:
            prob *= (xi[m] / total) ** partition.abar[m] * falling(int(ell[m]), int(g[m]))
    return prob


def partition_count(block_sizes) -> int:
    """Number of coloured partitions of sum(sizes) labelled marks with the given block sizes per type."""
    sizes = [list(s) for s in block_sizes]
    flat = [a for s in sizes for a in s]
    if any(a <= 0 for a in flat):
        raise ValueError("block sizes must be positive")
    k = sum(flat)
    abar = [sum(s) for s in sizes]
    count = math.factorial(k)
    for ab in abar:
        count //= math.factorial(ab)
    for s in sizes:
        inner = math.factorial(sum(s))
        for a in s:
            inner //= math.factorial(a)
        for mult in Counter(s).values():
            inner //= math.factorial(mult)
        count *= inner
    return count


def set_partitions(items):
    """All set partitions of ``items`` as lists of tuples."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [(first,)] + part
        for n in range(len(part)):
            yield part[:n] + [(first,) + part[n]] + part[n + 1:]


def coloured_partitions(k: int, d: int):
    """Every coloured partition of marks 1..k with d colours."""
    for part in set_partitions(range(1, k + 1)):
        for colours in itertools.product(range(d), repeat=len(part)):
            blocks = [[] for _ in range(d)]
            for b, c in zip(part, colours):
                blocks[c].append(b)
            yield ColouredPartition.from_blocks(d, blocks)


# ---------------------------------------------------------------------------
# compiled rejection scan: grow, keep trees with N_T >= k, sample, record splits


@njit(cache=True)
def _sample_alive(death, k, state):
    """k distinct alive nodes in draw order (partial Fisher-Yates over alive node ids)."""
    alive = np.nonzero(np.isinf(death))[0]
    n = alive.shape[0]
    for j in range(k):
        s = j + randbelow(state, n - j)
        tmp = alive[j]
        alive[j] = alive[s]
        alive[s] = tmp
    return alive[:k].copy()


@njit(cache=True)
def _record_splits(leaves, parent, ntype, death, fc, nc, d, k, K1, r, ev_time, ev_type, ev_off,
                   ev_ctype, ev_cslot):
    """Fill row r of the split arrays; returns the number of splits M."""
    n_nodes = parent.shape[0]
    mask = np.zeros(n_nodes, dtype=np.int64)
    for b in range(k):
        v = leaves[b]
        while True:
            mask[v] |= 1 << b
            if v == 0:
                break
            v = parent[v]
    nodes = np.nonzero(mask)[0]
    times = np.empty(nodes.shape[0])
    split = np.zeros(nodes.shape[0], dtype=np.bool_)
    for q in range(nodes.shape[0]):
        v = nodes[q]
        times[q] = death[v]
        if np.isfinite(death[v]):
            carrying = 0
            for c in range(nc[v]):
                if mask[fc[v] + c] != 0:
                    carrying += 1
            split[q] = carrying >= 2
    order = np.argsort(times)
    M = 0
    for q in order:
        if not split[q]:
            continue
        v = nodes[q]
        ev_time[r, M] = death[v]
        ev_type[r, M] = ntype[v]
        for c in range(nc[v]):
            w = fc[v] + c
            ev_off[r, M, ntype[w]] += 1
            for b in range(k):
                if mask[w] >> b & 1:
                    ev_ctype[r, M, b] = ntype[w]
                    ev_cslot[r, M, b] = c
        M += 1
    return M


@njit(cache=True)
def _unif_scan(alpha, ell, cump, nout, T, root, k, master, start, count, cap, limit):
    """Scan replicates [start, start+count) until ``limit`` acceptances (N_T >= k).

    Rejected trees are grown counts-only; accepted ones are regrown with
    recording from the same stream, which then continues into the sample draw.
    """
    d = alpha.shape[0]
    K1 = max(k - 1, 1)
    ids = np.empty(limit, dtype=np.int64)
    Z = np.zeros((limit, d), dtype=np.int64)
    M = np.zeros(limit, dtype=np.int64)
    ev_time = np.full((limit, K1), np.nan)
    ev_type = np.full((limit, K1), -1, dtype=np.int64)
    ev_off = np.zeros((limit, K1, d), dtype=np.int64)
    ev_ctype = np.full((limit, K1, k), -1, dtype=np.int64)
    ev_cslot = np.full((limit, K1, k), -1, dtype=np.int64)
    n_acc = 0
    n_trunc = 0
    n_surv = 0
    scanned = 0
    state = np.zeros(1, dtype=np.uint64)
    for r in range(start, start + count):
        if n_acc == limit:
            break
        scanned += 1
        state[0] = stream_key(np.uint64(master), np.uint64(r))
        res = _grow(alpha, ell, cump, nout, T, root, state, cap, False)
        if res[0] != 0:
            n_trunc += 1
            continue
        n = res[1].sum()
        if n > 0:
            n_surv += 1
        if n < k:
            continue
        state[0] = stream_key(np.uint64(master), np.uint64(r))
        res = _grow(alpha, ell, cump, nout, T, root, state, cap, True)
        ids[n_acc] = r
        Z[n_acc] = res[1]
        if k > 0:
            leaves = _sample_alive(res[6], k, state)
            M[n_acc] = _record_splits(leaves, res[3], res[4], res[6], res[7], res[8], d, k, K1, n_acc,
                                      ev_time, ev_type, ev_off, ev_ctype, ev_cslot)
        n_acc += 1
    return (scanned, n_trunc, n_surv, ids[:n_acc], Z[:n_acc], M[:n_acc], ev_time[:n_acc],
            ev_type[:n_acc], ev_off[:n_acc], ev_ctype[:n_acc], ev_cslot[:n_acc])


def partitions_from_slots(d: int, k: int, n_splits: int, ctype, cslot) -> list:
    """Coloured partitions from per-mark (child type, child slot) arrays of shape (splits, k)."""
    out = []
    for h in range(n_splits):
        groups = {}
        for b in range(k):
            if cslot[h, b] >= 0:
                groups.setdefault((int(ctype[h, b]), int(cslot[h, b])), []).append(b + 1)
        blocks = [[] for _ in range(d)]
        for (m, _), marks in groups.items():
            blocks[m].append(tuple(marks))
        out.append(ColouredPartition.from_blocks(d, blocks))
    return out


@dataclass
class UnifBatch:
    """Accepted replicates of a rejection scan with their sample split records.

    Split arrays have one row per accepted replicate and ``max(k-1, 1)``
    columns in time order; unused entries hold nan / -1.
    """

    model: OffspringModel
    k: int
    T: float
    scanned: int
    truncated: int
    survived: int
    ids: np.ndarray
    Z: np.ndarray
    M: np.ndarray
    split_time: np.ndarray
    split_type: np.ndarray
    split_offspring: np.ndarray
    split_ctype: np.ndarray
    split_cslot: np.ndarray

    @property
    def accepted(self) -> int:
        return int(self.ids.size)

    @property
    def N(self) -> np.ndarray:
        return self.Z.sum(axis=1)

    def partitions(self, r: int) -> list:
        return partitions_from_slots(self.model.d, self.k, int(self.M[r]), self.split_ctype[r],
                                     self.split_cslot[r])

    def events(self, r: int) -> list:
        """SplitEvent records of accepted row r (splitting_vertex unknown, set to -1)."""
        return [SplitEvent(float(self.split_time[r, h]), int(self.split_type[r, h]),
                           tuple(int(x) for x in self.split_offspring[r, h]), part, -1)
                for h, part in enumerate(self.partitions(r))]


def unif_scan(model: OffspringModel, k: int, T: float, seed: int = 0, start: int = 0,
              count: int = 100_000, root_type: int = 0, cap: int = 10_000_000,
              limit: int = None) -> UnifBatch:
    """Rejection scan conditioning on N_T >= k, with a uniform k-sample of each accepted tree.

    Stops after ``limit`` acceptances (default: no limit within ``count``).
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    alpha, ell, cump, nout = kernel_tables(model)
    limit = count if limit is None else int(limit)
    out = _unif_scan(alpha, ell, cump, nout, float(T), root_type, k, seed, start, count, cap, limit)
    return UnifBatch(model, k, float(T), int(out[0]), int(out[1]), int(out[2]), *out[3:])


def unif_replay(model: OffspringModel, k: int, T: float, seed: int, replicate: int,
                root_type: int = 0, cap: int = 10_000_000):
    """(tree, sampled node indices) of one accepted replicate of ``unif_scan``."""
    alpha, ell, cump, nout = kernel_tables(model)
    state = new_state(seed, replicate)
    res = _grow(alpha, ell, cump, nout, float(T), root_type, state, cap, True)
    if res[0] != 0:
        raise RuntimeError(f"population cap {cap} exceeded")
    tree = GenealogyTree(model.d, root_type, float(T), *res[3:])
    if res[1].sum() < k:
        raise InsufficientPopulation(f"insufficient population: N_T={res[1].sum()} < k={k}")
    return tree, _sample_alive(res[6], k, state)
