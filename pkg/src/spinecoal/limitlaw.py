"""Large-horizon laws of the sample genealogy and the quadratures behind them.

Times are rescaled by the horizon (rho = t / T).  Every improper integral is
computed in log scale, y = e^s, with adaptive quadrature.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from . import genfun
from .genealogy import ColouredPartition
from .model import OffspringModel, SpectralData, spectral, w_weight

QUAD_TOL = 1e-10


class QuadratureError(RuntimeError):
    pass


def _half_line(f, tol=QUAD_TOL, rates=()):
    """int_0^inf f(y) dy, computed in s = log y.

    Factors like (1 + c y)^-2 bend at y = 1/c; each c in ``rates`` adds a
    breakpoint there, so tiny c (times close to the horizon) stay accurate.
    """
    def g(s):
        if s > 300.0:  # every integrand here decays at least like y^-2
            return 0.0
        y = math.exp(s)
        return f(y) * y

    cuts = sorted({0.0} | {-math.log(c) for c in np.ravel(rates) if c > 0.0})
    edges = [-math.inf] + cuts + [math.inf]
    val = err = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        v, e = quad(g, lo, hi, epsabs=tol, epsrel=tol, limit=500)
        val += v
        err += e
    if not np.isfinite(val) or err > 100 * max(tol, tol * abs(val)):
        raise QuadratureError(f"quadrature did not converge (estimate {val}, error {err})")
    return val


@dataclass
class LimitParams:
    """Critical model, number of sampled individuals and an unscaled discount direction."""

    model: OffspringModel
    k: int
    theta: np.ndarray = None
    spec: SpectralData = field(default=None, repr=False)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        self.theta = np.zeros(self.model.d) if self.theta is None else np.asarray(self.theta, float)
        if np.any(self.theta < 0):
            raise ValueError("theta must be non-negative")
        if self.spec is None:
            self.spec = spectral(self.model)
        self.spec.require_critical()

    @property
    def eta_theta(self) -> float:
        return float(self.spec.eta @ self.theta)

    def scaled_theta(self, T: float) -> np.ndarray:
        """Discount used at horizon T: 2 theta / (zeta T)."""
        return 2.0 * self.theta / (self.spec.zeta * T)


def _check_rho(rho):
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")


def _discount_profile(k, rho, et):
    return (1 - rho) ** (k - 2) * (1 + et) ** (k - 1) / (1 + (1 - rho) * et) ** k


def first_split_density(params: LimitParams, rho: float) -> float:
    """2 (1-rho)^(k-2) (1 + eta.theta)^(k-1) / (1 + (1-rho) eta.theta)^k, as displayed.

    Its integral over (0, 1) is 2/(k-1); ``first_split_marginal`` is the
    normalised version.
    """
    _check_rho(rho)
    return 2.0 * _discount_profile(params.k, rho, params.eta_theta)


def first_split_marginal(params: LimitParams, rho: float) -> float:
    """Probability density of the rescaled first split time under the limiting tilted measure."""
    _check_rho(rho)
    return (params.k - 1) * _discount_profile(params.k, rho, params.eta_theta)


def first_split_marginal_cdf(params: LimitParams, x: float) -> float:
    """Closed form of the integral of ``first_split_marginal`` over (0, x)."""
    _check_rho(x)
    a, k = params.eta_theta, params.k
    tail = ((1 - x) * (1 + a) / (1 + (1 - x) * a)) ** (k - 1)
    return 1.0 - tail


def binary_case(block_sizes) -> bool:
    """Two blocks in total: both in one type, or one in each of two types."""
    blocks = [a for s in block_sizes for a in s]
    return len(blocks) == 2 and all(a > 0 for a in blocks)


def equal_pair_in_one_type(block_sizes) -> bool:
    return any(len(s) == 2 and s[0] == s[1] for s in block_sizes)


def first_split_full_law(params: LimitParams, rho: float, block_sizes, ell, i: int) -> float:
    """Joint density of (first split time, block sizes per type, offspring, type) in the limit."""
    _check_rho(rho)
    sizes = [tuple(s) for s in block_sizes]
    if not binary_case(sizes) or sum(map(sum, sizes)) != params.k:
        return 0.0
    m = params.model
    ell = np.asarray(ell, dtype=np.int64)
    g = np.array([len(s) for s in sizes])
    if np.any(g > ell):
        return 0.0
    rows = {tuple(r): n for n, r in enumerate(np.asarray(m.outcomes[i]))}
    n = rows.get(tuple(int(x) for x in ell))
    if n is None:
        return 0.0
    xi = params.spec.xi
    weight = math.prod(math.perm(int(ell[q]), int(g[q])) for q in range(m.d)) * float(np.prod(xi ** g))
    weight /= 1 + equal_pair_in_one_type(sizes)
    return (m.alpha[i] * params.spec.eta[i] * m.probs[i][n] * weight
            * (2.0 / params.spec.zeta) * _discount_profile(params.k, rho, params.eta_theta))


def binary_size_families(k: int, d: int) -> list:
    """Every two-block size family (per type) of k marks."""
    out = []
    for m in range(d):
        for a in range(k - 1, (k - 1) // 2, -1):
            fam = [() for _ in range(d)]
            fam[m] = (a, k - a)
            out.append(tuple(fam))
    for m, n in itertools.combinations(range(d), 2):
        for a in range(1, k):
            fam = [() for _ in range(d)]
            fam[m], fam[n] = (a,), (k - a,)
            out.append(tuple(fam))
    return out


def first_split_full_law_total(params: LimitParams, rho: float) -> float:
    """Sum of ``first_split_full_law`` over all sizes, offspring vectors and types."""
    total = 0.0
    fams = binary_size_families(params.k, params.model.d)
    for i in range(params.model.d):
        for ell in np.asarray(params.model.outcomes[i]):
            for fam in fams:
                total += first_split_full_law(params, rho, fam, ell, i)
    return total


def split_size_law(k: int, h: int) -> float:
    """Probability that the first split separates the marks into groups of sizes {h, k-h}."""
    if not 1 <= h <= k - 1:
        raise ValueError("need 1 <= h <= k-1")
    return (1 + (h != k - h)) / (k - 1)


@dataclass
class SplitTables:
    """Type, offspring and child-type laws at a split, in both factorisations.

    ``type_law[i]``; ``offspring_law[i][n]`` over ``model.outcomes[i]``;
    ``pair_given_offspring[i][n]`` a (d, d) matrix over ordered child-type pairs;
    ``pair_law[i]`` (d, d); ``offspring_given_pair[i]`` (d, d, n_outcomes).
    """

    type_law: np.ndarray
    offspring_law: list
    pair_given_offspring: list
    pair_law: list
    offspring_given_pair: list

    def joint(self, i: int, via: str = "offspring") -> np.ndarray:
        """(n_outcomes, d, d) joint law of offspring vector and child-type pair given type i."""
        if via == "offspring":
            return self.offspring_law[i][:, None, None] * np.stack(self.pair_given_offspring[i])
        return np.moveaxis(self.pair_law[i][:, :, None] * self.offspring_given_pair[i], 2, 0)


def _ordered_pair_weights(ell, xi):
    ell = np.asarray(ell, dtype=float)
    W = np.outer(ell * xi, ell * xi)
    W[np.diag_indices_from(W)] = ell * (ell - 1) * xi ** 2
    return W


def split_type_and_offspring_law(spec: SpectralData, model: OffspringModel) -> SplitTables:
    spec.require_critical()
    xi = spec.xi
    type_law = spec.zeta_i / spec.zeta
    off, pgo, pl, ogp = [], [], [], []
    for i in range(model.d):
        outs = np.asarray(model.outcomes[i])
        p = np.asarray(model.probs[i])
        w = np.array([w_weight(l, xi) for l in outs])
        Ew = float(p @ w)
        off.append(p * w / Ew)
        mats = [_ordered_pair_weights(l, xi) / wl if wl > 0 else np.zeros((model.d, model.d))
                for l, wl in zip(outs, w)]
        pgo.append(mats)
        # factorial second moments E_i[L_m L_n] (m != n) and E_i[L_m (L_m - 1)]
        Q = sum(pn * _ordered_pair_weights(l, np.ones(model.d)) for pn, l in zip(p, outs))
        pl.append(np.outer(xi, xi) * Q / Ew)
        cond = np.zeros((model.d, model.d, outs.shape[0]))
        for n, l in enumerate(outs):
            fm = _ordered_pair_weights(l, np.ones(model.d))
            with np.errstate(invalid="ignore", divide="ignore"):
                cond[:, :, n] = np.where(Q > 0, p[n] * fm / Q, 0.0)
        ogp.append(cond)
    return SplitTables(type_law, off, pgo, pl, ogp)


def mixture_integral(k: int, rhos) -> float:
    """int_0^inf y^(k-1)/(1+y)^2 prod_h (1 + (1-rho_h) y)^(-2) dy."""
    rhos = np.asarray(rhos, dtype=float)
    if rhos.size != k - 1:
        raise ValueError("need k-1 split times")
    if np.any(rhos < 0) or np.any(rhos > 1) or np.any(np.diff(rhos) < 0):
        raise ValueError("split times must be ordered in [0, 1]")
    one_minus = 1.0 - rhos

    def f(y):
        return np.prod(y / (1 + one_minus * y) ** 2) / (1 + y) ** 2

    return _half_line(f, rates=one_minus)


def fk_density(k: int, times) -> float:
    """Joint density of the k-1 ordered rescaled split times of a uniform k-sample."""
    times = np.asarray(times, dtype=float)
    if times.size != k - 1:
        raise ValueError("need k-1 split times")
    if np.any(times < 0) or np.any(times > 1) or np.any(np.diff(times) < 0):
        raise ValueError("split times must be ordered in [0, 1]")
    rest = 1.0 - times

    def f(phi):
        return np.prod(phi / (1 + phi * rest) ** 2) / (1 + phi) ** 2

    return math.factorial(k) * _half_line(f, rates=rest)


def first_split_time_cdf(k: int, x: float) -> float:
    """P(rescaled first split time <= x) for a uniform k-sample in the limit."""
    _check_rho(x)
    if x >= 1.0:
        return 1.0
    c = 1.0 - x

    def f(phi):
        return (c * phi / (1 + c * phi)) ** (k - 1) / (1 + phi) ** 2

    return 1.0 - k * _half_line(f, rates=(c,))


def unif_limit_density(params: LimitParams, rhos, types, offsprings, partitions) -> float:
    """Limit density of one complete binary history of the uniform k-sample.

    ``partitions[h]`` is the coloured partition of the marks of the block
    splitting at event h; ``offsprings[h]`` the offspring vector there.
    """
    k, m = params.k, params.model
    if not (len(rhos) == len(types) == len(offsprings) == len(partitions) == k - 1):
        raise ValueError("a complete history has k-1 events")
    out = 1.0
    for i, ell, part in zip(types, offsprings, partitions):
        if part.n_blocks != 2 or tuple(int(x) for x in ell) not in _outcome_rows(m, i):
            return 0.0
        out *= _event_factor(params, i, ell, part)
    return out * 2 ** (k - 1) / math.factorial(k - 1) * mixture_integral(k, rhos)


# ---------------------------------------------------------------------------
# binary histories


def _splits_of(block):
    """Unordered splits of a block into two non-empty parts (first part holds the smallest mark)."""
    block = tuple(sorted(block))
    first, rest = block[0], block[1:]
    for r in range(len(rest) + 1):
        for chosen in itertools.combinations(rest, r):
            a = (first,) + chosen
            b = tuple(x for x in rest if x not in chosen)
            if b:
                yield a, b


def binary_histories(k: int):
    """Every ranked sequence of binary splits taking {1..k} to singletons.

    Each history is a list of (block, part_a, part_b).
    """
    def rec(blocks):
        if all(len(b) == 1 for b in blocks):
            yield []
            return
        for j, b in enumerate(blocks):
            if len(b) < 2:
                continue
            for a, c in _splits_of(b):
                rest = blocks[:j] + [a, c] + blocks[j + 1:]
                for tail in rec(rest):
                    yield [(b, a, c)] + tail

    yield from rec([tuple(range(1, k + 1))])


def coloured_binary_splits(part_a, part_b, d: int):
    """Coloured partitions assigning child types to the two parts."""
    for m, n in itertools.product(range(d), repeat=2):
        blocks = [[] for _ in range(d)]
        blocks[m].append(part_a)
        blocks[n].append(part_b)
        yield ColouredPartition.from_blocks(d, blocks)


def history_mass(params: LimitParams, history) -> float:
    """Sum of the per-event discrete factors over types, offspring and colourings for one history."""
    m = params.model
    total = 1.0
    for _, a, b in history:
        ev = 0.0
        for i in range(m.d):
            for ell in np.asarray(m.outcomes[i]):
                for cp in coloured_binary_splits(a, b, m.d):
                    ev += _event_factor(params, i, ell, cp)
        total *= ev
    return total


def _outcome_rows(model, i):
    return {tuple(int(x) for x in r): n for n, r in enumerate(np.asarray(model.outcomes[i]))}


def _event_factor(params, i, ell, part):
    """Limit weight of one binary split: type, offspring and coloured partition."""
    m, spec = params.model, params.spec
    xi = spec.xi
    ell = np.asarray(ell, dtype=np.int64)
    g = part.g
    if np.any(g > ell):
        return 0.0
    n = _outcome_rows(m, i)[tuple(int(x) for x in ell)]
    p = np.asarray(m.probs[i])
    Ew = float(sum(pn * w_weight(l, xi) for pn, l in zip(p, np.asarray(m.outcomes[i]))))
    lg = math.prod(math.perm(int(ell[q]), int(g[q])) for q in range(m.d)) * float(np.prod(xi ** g))
    return spec.zeta_i[i] / spec.zeta * p[n] * lg / Ew


def unif_time_marginal(params: LimitParams, rhos) -> float:
    """Density of the ordered rescaled split times after summing out every discrete label."""
    k = params.k
    mass = sum(history_mass(params, hist) for hist in binary_histories(k))
    return mass * 2 ** (k - 1) / math.factorial(k - 1) * mixture_integral(k, rhos)


def n_binary_histories(k: int) -> int:
    return math.factorial(k) * math.factorial(k - 1) // 2 ** (k - 1)


# ---------------------------------------------------------------------------
# single-type identity


@dataclass(frozen=True)
class SplitConfig:
    """Tree of split events for one type: ``times[h]``, ``parents[h]`` (0 = the root
    line, h' >= 1 an earlier event) and ``blocks[h]`` (number of marked children)."""

    times: tuple
    parents: tuple
    blocks: tuple

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.parents) == len(self.blocks) == n):
            raise ValueError("times, parents and blocks must have the same length")
        for h in range(n):
            if not 0 <= self.parents[h] <= h:
                raise ValueError("each event must descend from the root line or an earlier event")
            if self.blocks[h] < 2:
                raise ValueError("a split has at least two marked children")
        if n and any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("split times must be increasing")
        if sum(1 for p in self.parents if p == 0) > 1:
            raise ValueError("only one event can sit on the root line")
        for h in range(1, n + 1):
            if sum(1 for p in self.parents if p == h) > self.blocks[h - 1]:
                raise ValueError("more descendant splits than marked children")

    def singletons(self, h: int) -> int:
        """Marked children of event h (1-based) carrying a single mark."""
        return self.blocks[h - 1] - sum(1 for p in self.parents if p == h)


def single_type_reduction_residual(model: OffspringModel, theta: float, T: float,
                                   config: SplitConfig, literal_singleton: bool = False) -> float:
    """|product of intermediate factors - F'_T(s) prod_h F'_{T-t_h}(s)^(g_h - 1)| with s = exp(-theta).

    The left side composes E[Z_a F_b(s)^(Z_a - 1)] = F'_a(F_b(s)) along the
    split tree and uses F'_{T-t_h}(s) for each singleton block.  With
    ``literal_singleton`` the singleton factor is E[Z exp(-theta Z)] instead,
    which differs by exp(-theta) per singleton.
    """
    if model.d != 1:
        raise ValueError("single-type model required")
    s = np.array([math.exp(-theta)])
    times = [0.0] + list(config.times)
    n = len(config.times)

    def dF(t, point):
        return float(genfun.jacobian(model, t, point)[0, 0])

    rhs = dF(T, s)
    for h in range(1, n + 1):
        rhs *= dF(T - times[h], s) ** (config.blocks[h - 1] - 1)
    if n == 0:
        return 0.0
    lhs = 1.0
    for h in range(1, n + 1):
        a = times[h] - times[config.parents[h - 1]]
        inner = genfun.generating_function(model, T - times[h], s)
        lhs *= dF(a, inner)
        single = dF(T - times[h], s)
        if literal_singleton:
            single *= math.exp(-theta)
        lhs *= single ** config.singletons(h)
    return abs(lhs - rhs)


def first_split_time_density(k: int, x: float) -> float:
    """Density of the rescaled first split time of a uniform k-sample in the limit."""
    _check_rho(x)
    c = 1.0 - x

    def f(phi):
        q = c * phi / (1 + c * phi)
        return q ** (k - 2) * phi / (1 + c * phi) ** 2 / (1 + phi) ** 2

    return k * (k - 1) * _half_line(f, rates=(c,))
