"""Experiment orchestration: rejection and spine Monte Carlo against the limit laws.

Every experiment returns a :class:`Report` whose ``tests`` list holds one
entry per statistical check with its statistic, threshold and verdict.
Runtimes are kept out of ``report.json`` so identical configurations give
bit-identical files; they go to ``timing.json`` instead.
"""
from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import genfun
from .genealogy import UnifBatch, unif_scan
from .limitlaw import (LimitParams, first_split_marginal, first_split_marginal_cdf,
                       first_split_time_cdf, first_split_time_density, split_size_law,
                       split_type_and_offspring_law)
from .model import OffspringModel, load_model, spectral
from .spine import (SpineBatch, SpineSampler, exact_moments, first_split_law, offspine_limit_rate,
                    offspine_rates, pk_weights)

MODES = ("forward-rejection", "spine")
N_BINS = 50
KS_MAX = 0.02
P_MIN = 0.01
Z_MAX = 3.0
MIN_ACCEPTANCE = 1e-4
ESS_MIN_FRACTION = 0.01
SCAN_CHUNK = 1 << 20
MIN_SCAN_FOR_ABORT = 1_000_000


class LowAcceptanceError(RuntimeError):
    pass


class LowESSWarning(UserWarning):
    pass


@dataclass
class ExperimentConfig:
    """One experiment: a model, a sample size k and a list of horizons.

    ``theta`` is the unscaled discount direction; spine runs use
    2 theta / (zeta T) at horizon T, martingale checks use it as given.
    ``replicates`` counts accepted trees under rejection and marked trees
    under the spine sampler.
    """

    model: OffspringModel
    mode: str = "forward-rejection"
    k: int = 2
    T: tuple = (100.0,)
    theta: tuple = None
    replicates: int = 10_000
    seed: int = 0
    root_type: int = 0
    cap: int = 10_000_000
    out: str = None
    model_path: str = None
    ks_max: float = KS_MAX
    p_min: float = P_MIN
    z_max: float = Z_MAX

    def __post_init__(self):
        if isinstance(self.model, (str, Path)):
            self.model_path = str(self.model)
            self.model = load_model(Path(self.model).read_text())
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        self.T = tuple(float(t) for t in np.atleast_1d(self.T))
        if not self.T or min(self.T) <= 0:
            raise ValueError("every T must be positive")
        d = self.model.d
        theta = np.zeros(d) if self.theta is None else np.broadcast_to(
            np.asarray(self.theta, dtype=float), (d,))
        if np.any(theta < 0):
            raise ValueError("theta must be non-negative")
        self.theta = tuple(float(x) for x in theta)
        if not 0 <= self.root_type < d:
            raise ValueError("root type out of range")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        if "root_type" in doc:
            doc["root_type"] = int(doc["root_type"]) - 1
        return cls(**doc)

    def describe(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "model"}
        out["model"] = self.model.to_document()
        out["model_name"] = self.model.name
        out["root_type"] = self.root_type + 1
        return out


@dataclass
class Report:
    kind: str
    config: dict
    results: list = field(default_factory=list)
    references: dict = field(default_factory=dict)
    tests: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    def add_test(self, name: str, statistic: float, threshold: float, passed: bool, **extra):
        self.tests.append({"name": name, "statistic": statistic, "threshold": threshold,
                           "passed": bool(passed), **extra})

    @property
    def passed(self) -> bool:
        return all(t["passed"] for t in self.tests)

    def failures(self) -> list:
        return [t for t in self.tests if not t["passed"]]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "config": self.config, "results": self.results,
                "references": self.references, "tests": self.tests, "passed": self.passed,
                "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), indent=2, sort_keys=True, allow_nan=True)


def _plain(x):
    """numpy scalars and arrays to JSON-ready Python objects."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------------------
# statistics


def _cdf_table(cdf, n=4001):
    grid = np.linspace(0.0, 1.0, n)
    vals = np.array([cdf(x) for x in grid])
    return lambda x: np.interp(x, grid, vals)


def ks_one_sample(x, cdf) -> tuple:
    """(KS distance, p-value) of a sample on [0, 1] against a tabulated CDF."""
    res = stats.kstest(np.asarray(x, dtype=float), cdf)
    return float(res.statistic), float(res.pvalue)


def weighted_ks_two_sample(x, w, y) -> tuple:
    """KS distance between a weighted and an unweighted sample.

    The p-value uses the asymptotic law with the weighted sample replaced by
    its effective size (sum w)^2 / sum w^2.
    """
    x, w, y = np.asarray(x, float), np.asarray(w, float), np.sort(np.asarray(y, float))
    order = np.argsort(x)
    x, w = x[order], w[order]
    grid = np.union1d(x, y)
    Fx = np.concatenate(([0.0], np.cumsum(w) / w.sum()))[np.searchsorted(x, grid, side="right")]
    Fy = np.searchsorted(y, grid, side="right") / y.size
    D = float(np.max(np.abs(Fx - Fy)))
    n_eff = w.sum() ** 2 / np.sum(w ** 2)
    scale = math.sqrt(n_eff * y.size / (n_eff + y.size))
    return D, float(stats.kstwobign.sf(D * scale)), float(n_eff)


def weighted_mean(f, w) -> tuple:
    """Self-normalised mean of f under weights w with its delta-method standard error."""
    f, w = np.asarray(f, float), np.asarray(w, float)
    W = w.sum()
    mu = float(w @ f / W)
    se = float(math.sqrt(np.sum(w ** 2 * (f - mu) ** 2)) / W)
    return mu, se


def plain_mean(f) -> tuple:
    f = np.asarray(f, float)
    return float(f.mean()), float(f.std(ddof=1) / math.sqrt(f.size)) if f.size > 1 else float("nan")


def histogram(x, w=None) -> list:
    h, _ = np.histogram(x, bins=N_BINS, range=(0.0, 1.0), weights=w)
    total = h.sum()
    return (h / total).tolist() if total > 0 else h.tolist()


def _z(a, se_a, b, se_b=0.0) -> float:
    se = math.hypot(se_a, se_b)
    return (a - b) / se if se > 0 else (0.0 if a == b else math.inf)


def _chi_square(observed, expected, min_expected=5.0) -> tuple:
    """Pearson chi-square after lumping cells with small expectation; (stat, df, p)."""
    observed, expected = np.asarray(observed, float), np.asarray(expected, float)
    big = expected >= min_expected
    obs = np.append(observed[big], observed[~big].sum())
    exp = np.append(expected[big], expected[~big].sum())
    if exp[-1] < min_expected:
        obs[-2 if obs.size > 1 else -1] += obs[-1]
        exp[-2 if exp.size > 1 else -1] += exp[-1]
        obs, exp = obs[:-1], exp[:-1]
    if obs.size < 2:
        return 0.0, 0, 1.0
    stat = float(np.sum((obs - exp) ** 2 / exp))
    df = obs.size - 1
    return stat, df, float(stats.chi2.sf(stat, df))


def _outcome_index(model: OffspringModel):
    return [{tuple(int(x) for x in l): n for n, l in enumerate(np.asarray(model.outcomes[i]))}
            for i in range(model.d)]


def _family(partition) -> tuple:
    return tuple(tuple(sorted(s, reverse=True)) for s in partition.sizes)


def _off_label(i: int, off) -> str:
    return f"{i + 1}:" + ";".join(str(int(x)) for x in off)


# ---------------------------------------------------------------------------
# reference laws shared by both modes


def split_references(model: OffspringModel, k: int) -> dict:
    spec = spectral(model)
    tables = split_type_and_offspring_law(spec, model)
    offspring = {}
    for i in range(model.d):
        for n, l in enumerate(np.asarray(model.outcomes[i])):
            p = tables.type_law[i] * tables.offspring_law[i][n]
            if p > 0:
                offspring[_off_label(i, l)] = float(p)
    ref = {"type_law": tables.type_law.tolist(), "offspring_law": offspring,
           "survival_times_T": (2 * spec.xi / spec.zeta).tolist(),
           "yaglom_mean_over_T": (spec.zeta / 2 * spec.eta).tolist()}
    if k >= 2:
        ref["split_size_law"] = {str(h): split_size_law(k, h) for h in range(1, k // 2 + 1)}
        ref["first_split_time_mean"] = _first_split_mean(k)
    return ref


def _first_split_mean(k: int) -> float:
    from scipy.integrate import quad

    return float(quad(lambda x: 1.0 - first_split_time_cdf(k, x), 0.0, 1.0, epsabs=1e-10)[0])


def _type_test(report, label, T, counts, ref, z_max, se_from=None):
    """Per-type frequency z-scores against a reference law."""
    n = counts.sum()
    freq = counts / n
    se = np.sqrt(ref * (1 - ref) / n) if se_from is None else se_from
    z = np.array([_z(f, s, r) for f, s, r in zip(freq, se, ref)])
    report.add_test(label, float(np.max(np.abs(z))), z_max, bool(np.all(np.abs(z) < z_max)), T=T,
                    z=z.tolist())
    return freq, se


# ---------------------------------------------------------------------------
# forward rejection


def rejection_batch(config: ExperimentConfig, T: float) -> UnifBatch:
    """Accepted replicates with N_T >= k, scanning replicate ids in order."""
    parts = []
    start = accepted = truncated = survived = 0
    while accepted < config.replicates:
        b = unif_scan(config.model, config.k, T, config.seed, start, SCAN_CHUNK, config.root_type,
                      config.cap, limit=config.replicates - accepted)
        parts.append(b)
        start += b.scanned
        accepted += b.accepted
        truncated += b.truncated
        survived += b.survived
        if start >= MIN_SCAN_FOR_ABORT and accepted / start < MIN_ACCEPTANCE:
            raise LowAcceptanceError(
                f"acceptance rate {accepted / start:.2e} below {MIN_ACCEPTANCE:g} at T={T}: "
                "lower T or k, or raise the population cap")
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return UnifBatch(config.model, config.k, float(T), start, truncated, survived, cat("ids"),
                     cat("Z"), cat("M"), cat("split_time"), cat("split_type"),
                     cat("split_offspring"), cat("split_ctype"), cat("split_cslot"))


def _split_statistics(model, k, T, M, times, types, offs, partitions_of, w=None):
    """Statistics of the recorded splits, optionally importance weighted.

    Frequencies come with standard errors (binomial, or delta-method when
    weighted).
    """
    n = M.size
    mean = plain_mean if w is None else (lambda f: weighted_mean(f, w))
    tau = times / T
    tau1 = tau[:, 0]
    res = {"n": int(n)}
    res["tau1_mean"], res["tau1_se"] = mean(tau1)
    res["tau_histograms"] = {str(h + 1): histogram(tau[:, h][M > h], None if w is None else w[M > h])
                             for h in range(tau.shape[1]) if np.any(M > h)}
    res["M_distribution"] = {str(m): mean(M == m)[0] for m in range(k)}
    res["p_binary"], res["p_binary_se"] = mean(M == k - 1)
    tf, tse = [], []
    for i in range(model.d):
        f, s = mean(types[:, 0] == i)
        tf.append(f)
        tse.append(s)
    res["type_freq"], res["type_se"] = tf, tse
    labels = {}
    for r in range(n):
        labels.setdefault(_off_label(int(types[r, 0]), offs[r, 0]), []).append(r)
    res["offspring_freq"] = {}
    for lab in sorted(labels):
        ind = np.zeros(n)
        ind[labels[lab]] = 1.0
        f, s = mean(ind)
        res["offspring_freq"][lab] = {"freq": f, "se": s}
    if k >= 2:
        small = np.empty(n, dtype=np.int64)
        blocks = np.empty(n, dtype=np.int64)
        for r in range(n):
            part = partitions_of(r)[0]
            sizes = [a for s in part.sizes for a in s]
            blocks[r] = len(sizes)
            small[r] = min(sizes) if len(sizes) == 2 else 0
        res["first_split_blocks_binary"] = mean(blocks == 2)[0]
        res["split_size_freq"] = {str(h): dict(zip(("freq", "se"), mean(small == h)))
                                  for h in range(1, k // 2 + 1)}
    return res


def _unif_result(config, T, b: UnifBatch, refs, report):
    model, k = config.model, config.k
    n_valid = b.scanned - b.truncated
    res = {"T": T, "scanned": b.scanned, "truncated": b.truncated, "accepted": b.accepted,
           "acceptance_rate": b.accepted / n_valid,
           "acceptance_se": math.sqrt(b.accepted * (1 - b.accepted / n_valid)) / n_valid,
           "survival_rate": b.survived / n_valid,
           "survival_times_T": T * b.survived / n_valid,
           "mean_N_over_T": float(b.N.mean() / T)}
    if k < 2:
        return res
    res.update(_split_statistics(model, k, T, b.M, b.split_time, b.split_type, b.split_offspring,
                                 b.partitions, w=None))
    cdf = _cdf_table(lambda x: first_split_time_cdf(k, x))
    D, p = ks_one_sample(b.split_time[:, 0] / T, cdf)
    res["ks_tau1"], res["ks_p"] = D, p
    report.add_test("ks_first_split_time", D, config.ks_max, D < config.ks_max, T=T, p_value=p)
    ref = np.asarray(refs["type_law"])
    counts = np.bincount(b.split_type[:, 0], minlength=model.d).astype(float)
    _type_test(report, "split_type_frequencies", T, counts, ref, config.z_max)
    return res


def run_unif_experiment(config: ExperimentConfig) -> Report:
    if config.mode != "forward-rejection":
        raise ValueError("run_unif_experiment needs mode forward-rejection")
    report = Report("unif", config.describe())
    report.references = split_references(config.model, config.k)
    rows = []
    for T in config.T:
        t0 = time.perf_counter()
        b = rejection_batch(config, T)
        report.results.append(_unif_result(config, T, b, report.references, report))
        report.runtime[str(T)] = time.perf_counter() - t0
        rows.extend(unif_split_rows(b))
    if config.out:
        write_outputs(report, config.out, rows, config.k, config.model, config.theta)
    return report


def unif_split_rows(b: UnifBatch) -> list:
    rows = []
    for r in range(b.accepted):
        for h, ev in enumerate(b.events(r), start=1):
            rows.append([b.T] + ev.csv_row(int(b.ids[r]), h, int(b.M[r])))
    return rows


# ---------------------------------------------------------------------------
# spine sampler with importance reweighting


def scaled_theta(model: OffspringModel, theta, T: float) -> np.ndarray:
    """2 theta / (zeta T)."""
    return 2.0 * np.asarray(theta, dtype=float) / (spectral(model).zeta * T)


def spine_batch(config: ExperimentConfig, T: float) -> SpineBatch:
    sampler = SpineSampler(config.model, config.k, scaled_theta(config.model, config.theta, T), T,
                           config.root_type)
    return sampler.batch(config.replicates, config.seed, 0, config.cap)


def self_normalised_weights(b: SpineBatch) -> tuple:
    """(weights with mean one over accepted replicates, ESS, mean raw weight, its s.e.)."""
    lw = b.log_weights()[b.ok]
    raw = np.exp(lw)
    w = np.exp(lw - lw.max())
    w /= w.mean()
    ess = w.sum() ** 2 / np.sum(w ** 2)
    return w, float(ess), float(raw.mean()), float(raw.std(ddof=1) / math.sqrt(raw.size))


def _q_chi_square(b: SpineBatch, T: float, n_bins: int = 20, nodes: int = 8) -> tuple:
    """Chi-square of (time bin, type, offspring, size family) at the first split against
    the exact finite-horizon law."""
    s = b.sampler
    model = s.model
    edges = np.linspace(0.0, T, n_bins + 1)
    x, wq = np.polynomial.legendre.leggauss(nodes)
    mids = (edges[:-1, None] + edges[1:, None]) / 2 + np.outer(np.diff(edges) / 2, x)
    keys, dens = first_split_law(model, s.k, s.theta, T, s.root_type, mids.ravel())
    mass = (dens.reshape(n_bins, nodes, -1) * wq[None, :, None]).sum(axis=1) * (np.diff(edges)[:, None] / 2)
    index = {key: c for c, key in enumerate(keys)}
    outcome = _outcome_index(model)
    ok = np.nonzero(b.ok)[0]
    obs = np.zeros_like(mass)
    for r in ok:
        i = int(b.split_type[r, 0])
        n = outcome[i][tuple(int(v) for v in b.split_offspring[r, 0])]
        fam = _family(b.partitions(r)[0])
        t_bin = min(int(np.searchsorted(edges, b.split_time[r, 0], side="right")) - 1, n_bins - 1)
        obs[t_bin, index[(i, n, fam)]] += 1
    stat, df, p = _chi_square(obs.ravel(), mass.ravel() * ok.size)
    return stat, df, p, float(mass.sum())


def _spine_result(config, T, b: SpineBatch, refs, report):
    model, k = config.model, config.k
    s = b.sampler
    ok = b.ok
    w, ess, mean_w, mean_w_se = self_normalised_weights(b)
    if ess < ESS_MIN_FRACTION * ok.sum():
        warnings.warn(f"effective sample size {ess:.0f} is below {ESS_MIN_FRACTION:.0%} of "
                      f"{ok.sum()} replicates at T={T}", LowESSWarning, stacklevel=3)
    res = {"T": T, "theta_T": s.theta.tolist(), "replicates": int(b.status.size),
           "truncated": int((~ok).sum()), "ess": ess, "normaliser": s.normaliser(),
           "mean_weight": mean_w, "mean_weight_se": mean_w_se,
           "mean_offspine_births": float(b.n_offspine[ok].mean())}
    if k < 2:
        res["reweighted_N_mean"] = weighted_mean(b.N[ok], w)
        return res
    sub = np.nonzero(ok)[0]
    parts = lambda r: b.partitions(int(sub[r]))
    args = (model, k, T, b.M[ok], b.split_time[ok], b.split_type[ok], b.split_offspring[ok], parts)
    res["raw"] = _split_statistics(*args, w=None)
    res["reweighted"] = _split_statistics(*args, w=w)
    params = LimitParams(model, k, np.asarray(config.theta))
    D, p = ks_one_sample(b.split_time[ok, 0] / T,
                         _cdf_table(lambda x: first_split_marginal_cdf(params, x)))
    res["raw"]["ks_tau1_limit"], res["raw"]["ks_p"] = D, p
    report.add_test("q_ks_first_split_time_limit", D, config.ks_max, D < config.ks_max, T=T,
                    p_value=p)
    stat, df, p, total = _q_chi_square(b, T)
    res["raw"]["chi2_first_split"] = {"statistic": stat, "df": df, "p_value": p,
                                      "exact_mass": total}
    report.add_test("q_chi2_first_split_exact", p, config.p_min, p > config.p_min, T=T)
    return res


def run_spine_experiment(config: ExperimentConfig) -> Report:
    if config.mode != "spine":
        raise ValueError("run_spine_experiment needs mode spine")
    report = Report("spine", config.describe())
    report.references = split_references(config.model, config.k)
    rows = []
    for T in config.T:
        t0 = time.perf_counter()
        b = spine_batch(config, T)
        report.results.append(_spine_result(config, T, b, report.references, report))
        report.runtime[str(T)] = time.perf_counter() - t0
        rows.extend(spine_split_rows(b))
    if config.out:
        write_outputs(report, config.out, rows, config.k, config.model, config.theta,
                      header_extra=("weight", "g_statistic", "n_offspine_births"))
    return report


def spine_split_rows(b: SpineBatch) -> list:
    from .genealogy import SplitEvent

    lw = b.log_weights()
    ok = b.ok
    shift = lw[ok].max() if ok.any() else 0.0
    norm = np.exp(lw[ok] - shift).mean() if ok.any() else 1.0
    T = b.sampler.T
    rows = []
    for r in np.nonzero(ok)[0]:
        weight = repr(float(np.exp(lw[r] - shift) / norm))
        g = repr(float(np.exp(b.log_g[r])))
        for h, part in enumerate(b.partitions(r), start=1):
            ev = SplitEvent(float(b.split_time[r, h - 1]), int(b.split_type[r, h - 1]),
                            tuple(int(x) for x in b.split_offspring[r, h - 1]), part, -1)
            rows.append([T] + ev.csv_row(int(r), h, int(b.M[r])) + [weight, g, int(b.n_offspine[r])])
    return rows


# ---------------------------------------------------------------------------
# both estimators side by side


def compare(config: ExperimentConfig) -> Report:
    """Rejection and reweighted spine estimates of the same statistics, with z-scores."""
    k = config.k
    if k < 2:
        raise ValueError("compare needs k >= 2")
    unif_cfg = ExperimentConfig(**{**_fields(config), "mode": "forward-rejection", "out": None})
    spine_cfg = ExperimentConfig(**{**_fields(config), "mode": "spine", "out": None})
    report = Report("compare", config.describe())
    report.references = split_references(config.model, k)
    rows = []
    for T in config.T:
        t0 = time.perf_counter()
        ub = rejection_batch(unif_cfg, T)
        sb = spine_batch(spine_cfg, T)
        u = _unif_result(unif_cfg, T, ub, report.references, report)
        s = _spine_result(spine_cfg, T, sb, report.references, report)
        rw = s["reweighted"]
        z = {"tau1_mean": _z(rw["tau1_mean"], rw["tau1_se"], u["tau1_mean"], u["tau1_se"]),
             "p_binary": _z(rw["p_binary"], rw["p_binary_se"], u["p_binary"], u["p_binary_se"]),
             "acceptance_vs_mean_weight": _z(s["mean_weight"], s["mean_weight_se"],
                                             u["acceptance_rate"], u["acceptance_se"])}
        for i in range(config.model.d):
            z[f"type_{i + 1}"] = _z(rw["type_freq"][i], rw["type_se"][i], u["type_freq"][i],
                                    u["type_se"][i])
        for name, val in z.items():
            report.add_test(f"agreement_{name}", abs(val), config.z_max, abs(val) < config.z_max, T=T)
        lw_ok = sb.ok
        w, _, _, _ = self_normalised_weights(sb)
        D, p, n_eff = weighted_ks_two_sample(sb.split_time[lw_ok, 0] / T, w, ub.split_time[:, 0] / T)
        report.add_test("two_sample_ks_first_split_time", p, config.p_min, p > config.p_min, T=T,
                        distance=D, effective_size=n_eff)
        report.results.append({"T": T, "unif": u, "spine": s, "z_scores": z,
                               "two_sample_ks": {"distance": D, "p_value": p, "effective_size": n_eff}})
        report.runtime[str(T)] = time.perf_counter() - t0
        rows.extend(unif_split_rows(ub))
    if config.out:
        write_outputs(report, config.out, rows, k, config.model, config.theta)
    return report


def _fields(config: ExperimentConfig) -> dict:
    return {f: getattr(config, f) for f in config.__dataclass_fields__}


# ---------------------------------------------------------------------------
# identities of the marked measures


def martingale_checks(config: ExperimentConfig, fractions=(0.25, 0.5, 0.75)) -> Report:
    """Monte Carlo checks of the marked-measure identities at each horizon.

    (1) mean of g e^{-theta.Z} under the unbiased k-spine measure against the
    discounted factorial moment; (2) the tail of the root's first branching
    time under the tilted measure; (3) the offspring law at the root's first
    birth off the spine, given the child type that keeps the marks.
    """
    model, k, r = config.model, config.k, config.root_type
    theta = np.asarray(config.theta)
    xi = spectral(model).xi
    report = Report("martingale", config.describe())
    for T in config.T:
        t0 = time.perf_counter()
        res = {"T": T}
        vals = pk_weights(model, xi, theta, T, k, config.replicates, r, config.seed, 0, config.cap)
        vals = vals[np.isfinite(vals)]
        mc, se = plain_mean(vals)
        exact = float(genfun.factorial_moment_discounted(model, T, theta, k)[r])
        z = _z(mc, se, exact)
        # the estimator is heavy tailed: report how few replicates carry the mean
        res["identity"] = {"mc": mc, "se": se, "exact": exact, "z": z, "n": int(vals.size),
                           "nonzero_fraction": float(np.mean(vals > 0)),
                           "max_share": float(vals.max() / vals.sum()) if vals.sum() > 0 else 0.0}
        report.add_test("size_biased_identity", abs(z), config.z_max, abs(z) < config.z_max, T=T)

        sampler = SpineSampler(model, k, theta, T, r)
        times, ev = sampler.root_first_events(config.replicates, config.seed + 1)
        res["first_branch_tail"] = []
        for frac in fractions:
            t = frac * T
            D = genfun.moment_jets(model, [T - t, T], theta, k)[0][:, k, r]
            ref = float(D[0] / D[1] * math.exp(-model.alpha[r] * t))
            p = float(np.mean(times > t))
            se_p = math.sqrt(ref * (1 - ref) / times.size)
            z = _z(p, se_p, ref)
            res["first_branch_tail"].append({"t": t, "mc": p, "exact": ref, "z": z})
            report.add_test("first_branch_tail", abs(z), config.z_max, abs(z) < config.z_max, T=T,
                            t=t)
        res["offspine_offspring_law"] = _offspine_offspring_check(sampler, times, ev, report,
                                                                  config.p_min)
        report.results.append(res)
        report.runtime[str(T)] = time.perf_counter() - t0
    if config.out:
        write_outputs(report, config.out, [], k, model, config.theta)
    return report


def _offspine_offspring_check(sampler: SpineSampler, times, ev, report, p_min) -> list:
    """Offspring law at the root's first off-spine birth against
    l_i p_r(l) prod_m F_m(T-t)^l_m normalised over l, with F the Laplace transform."""
    model, T, r = sampler.model, sampler.T, sampler.root_type
    evt = sampler.events
    sel = np.nonzero((ev >= 0))[0]
    sel = sel[evt.nblocks[ev[sel]] == 1]
    out = []
    if sel.size == 0:
        return out
    u = T - times[sel]
    order = np.argsort(u)
    F = np.empty((sel.size, model.d))
    F[order] = genfun.laplace(model, u[order], sampler.theta)
    ells = np.asarray(model.outcomes[r])
    probs = np.asarray(model.probs[r])
    spine_type = evt.btype[ev[sel], 0]
    chosen = evt.outcome[ev[sel]]
    for i in range(model.d):
        rows = spine_type == i
        if not rows.any():
            continue
        cats = [n for n in range(ells.shape[0]) if ells[n, i] > 0 and probs[n] > 0]
        weights = np.stack([ells[n, i] * probs[n] * np.prod(F[rows] ** ells[n][None, :], axis=1)
                            for n in cats], axis=1)
        expected = (weights / weights.sum(axis=1, keepdims=True)).sum(axis=0)
        observed = np.array([np.sum(chosen[rows] == n) for n in cats], dtype=float)
        stat, df, p = _chi_square(observed, expected)
        entry = {"spine_child_type": i + 1, "n": int(rows.sum()),
                 "outcomes": [_off_label(r, ells[n]) for n in cats],
                 "observed": observed.tolist(), "expected": expected.tolist(),
                 "chi2": stat, "df": df, "p_value": p}
        out.append(entry)
        if df > 0:
            report.add_test("offspine_offspring_law", p, p_min, p > p_min, T=T,
                            spine_child_type=i + 1)
    return out


def offspine_rate_report(model: OffspringModel, theta, k: int, horizons, root_type: int = 0,
                         replicates: int = 0, seed: int = 0, window: float = 0.05) -> Report:
    """Rate of births off the spine at time 0 against its large-horizon limit.

    Exact rates come from the discounted factorial moments at 2 theta/(zeta T);
    with ``replicates`` > 0 each horizon also gets a Monte Carlo estimate from
    the sampler's first root events inside [0, window].
    """
    xi = spectral(model).xi
    limit = offspine_limit_rate(model, xi, root_type)
    report = Report("offspine", {"model": model.to_document(), "k": k,
                                 "theta": list(map(float, np.broadcast_to(theta, (model.d,)))),
                                 "T": list(map(float, horizons)), "root_type": root_type + 1})
    report.references = {"limit_rate": {_off_label(root_type, l): v for l, v in limit.items()}}
    devs = []
    for T in horizons:
        th = scaled_theta(model, np.broadcast_to(theta, (model.d,)), T)
        moments = exact_moments(model, th, k)
        exact = offspine_rates(model, moments, root_type, k, 0.0, T)
        dev = max(abs(exact[l] / limit[l] - 1) for l in limit if limit[l] > 0)
        devs.append(dev)
        res = {"T": T, "rate": {_off_label(root_type, l): v for l, v in exact.items()},
               "relative_deviation": dev}
        if replicates:
            res["monte_carlo"] = _offspine_mc(model, k, th, T, root_type, replicates, seed, window,
                                              offspine_rates(model, moments, root_type, k,
                                                             window / 2, T), report)
        report.results.append(res)
    decreasing = all(b < a for a, b in zip(devs, devs[1:]))
    report.add_test("offspine_deviation_decreasing", float(max(np.diff(devs), default=0.0)), 0.0,
                    decreasing)
    report.add_test("offspine_deviation_final", devs[-1], 0.1, devs[-1] < 0.1, T=float(horizons[-1]))
    return report


def _offspine_mc(model, k, theta, T, r, replicates, seed, window, mid_rates, report) -> dict:
    sampler = SpineSampler(model, k, theta, T, r)
    times, ev = sampler.root_first_events(replicates, seed)
    exposure = float(np.minimum(times, window).sum())
    hit = (times < window) & (ev >= 0)
    hit[hit] = sampler.events.nblocks[ev[hit]] == 1
    outs = np.asarray(model.outcomes[r])
    out = {}
    for l, ref in mid_rates.items():
        if ref <= 0:
            continue
        n = [q for q in range(outs.shape[0]) if tuple(int(x) for x in outs[q]) == l][0]
        c = int(np.sum(sampler.events.outcome[ev[hit]] == n))
        rate, se = c / exposure, math.sqrt(c) / exposure
        z = _z(rate, se, ref)
        out[_off_label(r, l)] = {"rate": rate, "se": se, "exact_mid_window": ref, "z": z}
        report.add_test("offspine_rate_monte_carlo", abs(z), Z_MAX, abs(z) < Z_MAX, T=T)
    return out


# ---------------------------------------------------------------------------
# output files


def density_rows(model: OffspringModel, k: int, grid: int, theta=None) -> tuple:
    """(header, rows) of the limit densities of the rescaled first split time at j/grid, j < grid.

    The right end point is left out: the uniform-sample density diverges there for k = 2.
    """
    if k < 2:
        raise ValueError("density tables need k >= 2")
    xs = np.arange(grid) / grid
    params = LimitParams(model, k, None if theta is None else np.asarray(theta, float))
    header = ["t", "uniform_sample_density", "tilted_density"]
    rows = []
    for x in xs:
        rows.append([f"{x:.6f}", f"{first_split_time_density(k, x):.6f}",
                     f"{first_split_marginal(params, x):.6f}"])
    return header, rows


def write_outputs(report: Report, out, split_rows, k, model, theta, header_extra=(), grid=100):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "timing.json").write_text(json.dumps(report.runtime, indent=2, sort_keys=True) + "\n")
    if split_rows or report.kind in ("unif", "spine", "compare"):
        from .genealogy import SPLIT_CSV_HEADER

        with open(out / "splits.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["T"] + SPLIT_CSV_HEADER + list(header_extra))
            wr.writerows(split_rows)
    if k >= 2:
        header, rows = density_rows(model, k, grid, theta)
        with open(out / f"density_k{k}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            wr.writerows(rows)
