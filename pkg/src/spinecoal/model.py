"""Offspring models for multitype branching processes and their spectral constants."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_TOL = 1e-12
CRITICAL_TOL = 1e-8
DOCUMENT_KEYS = {"d", "alpha", "offspring"}


class ModelError(ValueError):
    """Raised when a model document or model object fails validation."""


@dataclass(frozen=True, eq=False)
class OffspringModel:
    """Types, branching rates and finite offspring tables.

    ``outcomes[i]`` is an (n_i, d) integer array of offspring vectors for a
    type-``i`` parent and ``probs[i]`` the matching probabilities.
    """

    d: int
    alpha: np.ndarray
    outcomes: tuple
    probs: tuple
    name: str = ""
    _padded: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        validate_model(self)

    @property
    def max_outcomes(self) -> int:
        return max(len(p) for p in self.probs)

    def padded(self):
        """Rectangular (ell, p, nout) arrays for the compiled kernels."""
        if not self._padded:
            n = self.max_outcomes
            ell = np.zeros((self.d, n, self.d), dtype=np.int64)
            p = np.zeros((self.d, n))
            nout = np.zeros(self.d, dtype=np.int64)
            for i in range(self.d):
                m = len(self.probs[i])
                ell[i, :m] = self.outcomes[i]
                p[i, :m] = self.probs[i]
                nout[i] = m
            self._padded.update(ell=ell, p=p, nout=nout)
        return self._padded["ell"], self._padded["p"], self._padded["nout"]

    def to_document(self) -> dict:
        return {
            "d": self.d,
            "alpha": [float(a) for a in self.alpha],
            "offspring": [
                {"outcomes": [{"ell": [int(x) for x in ell], "p": float(p)}
                              for ell, p in zip(self.outcomes[i], self.probs[i])]}
                for i in range(self.d)
            ],
        }

    def relabel(self, perm) -> "OffspringModel":
        """Model with type ``perm[j]`` renamed to ``j``."""
        perm = list(perm)
        outcomes = tuple(np.asarray(self.outcomes[perm[j]])[:, perm] for j in range(self.d))
        probs = tuple(np.asarray(self.probs[perm[j]]) for j in range(self.d))
        return OffspringModel(self.d, np.asarray(self.alpha)[perm], outcomes, probs, self.name)


def validate_model(model: OffspringModel) -> None:
    d = model.d
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ModelError("d must be a positive integer")
    alpha = np.asarray(model.alpha, dtype=float)
    if alpha.shape != (d,):
        raise ModelError(f"alpha must have length {d}")
    if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
        raise ModelError("every branching rate alpha_i must be > 0")
    if len(model.outcomes) != d or len(model.probs) != d:
        raise ModelError(f"expected {d} offspring tables")
    simple = True
    for i in range(d):
        ell = np.asarray(model.outcomes[i])
        p = np.asarray(model.probs[i], dtype=float)
        if p.size == 0:
            raise ModelError(f"offspring table of type {i + 1} is empty")
        if ell.ndim != 2 or ell.shape != (p.size, d):
            raise ModelError(f"offspring vectors of type {i + 1} must have length {d}")
        if np.any(ell < 0):
            raise ModelError(f"negative offspring count in table of type {i + 1}")
        if np.any(p < 0):
            raise ModelError(f"negative probability in table of type {i + 1}")
        if abs(p.sum() - 1.0) > PROB_TOL:
            raise ModelError(
                f"probabilities do not sum to 1 for type {i + 1} (sum={p.sum():.15g})")
        if np.any((ell.sum(axis=1) != 1) & (p > 0)):
            simple = False
    if simple:
        raise ModelError(
            "process is simple: every outcome has exactly one child, so the "
            "non-simplicity hypothesis fails and the second moment constant vanishes")


def model_from_document(doc: dict, name: str = "") -> OffspringModel:
    if set(doc) != DOCUMENT_KEYS:
        raise ModelError(f"model document keys must be exactly {sorted(DOCUMENT_KEYS)}")
    try:
        d = doc["d"]
        alpha = np.asarray(doc["alpha"], dtype=float)
        tables = doc["offspring"]
        outcomes, probs = [], []
        for i, table in enumerate(tables):
            if set(table) != {"outcomes"} or any(set(r) != {"ell", "p"} for r in table["outcomes"]):
                raise ModelError(f"offspring table {i + 1}: keys must be 'outcomes', 'ell' and 'p'")
            rows = table["outcomes"]
            if not rows:
                raise ModelError(f"offspring table of type {i + 1} is empty")
            outcomes.append(np.array([r["ell"] for r in rows], dtype=np.int64).reshape(len(rows), -1))
            probs.append(np.array([r["p"] for r in rows], dtype=float))
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model document: {exc!r}") from exc
    if not isinstance(d, int) or isinstance(d, bool):
        raise ModelError("d must be an integer")
    for ell in outcomes:
        if ell.size and ell.shape[1] != d:
            raise ModelError(f"every 'ell' must have length d={d}")
    return OffspringModel(d, alpha, tuple(outcomes), tuple(probs), name)


def load_model(document) -> OffspringModel:
    """Parse a model from JSON text, a path to a JSON file, or an already-decoded dict."""
    name = ""
    if isinstance(document, dict):
        return model_from_document(document)
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        path = Path(document)
        name = path.stem
        document = path.read_text()
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ModelError(f"model document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelError("model document must be a JSON object")
    return model_from_document(doc, name)


def sym2(alpha=(1.0, 1.0)) -> OffspringModel:
    """Two symmetric types; each parent leaves nothing or one child of each type."""
    table = np.array([[0, 0], [1, 1]])
    return OffspringModel(2, np.asarray(alpha, float), (table, table.copy()),
                          (np.array([0.5, 0.5]), np.array([0.5, 0.5])), "SYM2")


def geo1(alpha=1.0) -> OffspringModel:
    """Single-type critical binary branching: zero or two children."""
    return OffspringModel(1, np.array([float(alpha)]), (np.array([[0], [2]]),),
                          (np.array([0.5, 0.5]),), "GEO1")


def mean_matrix(model: OffspringModel) -> np.ndarray:
    return np.array([np.asarray(model.probs[i]) @ np.asarray(model.outcomes[i], dtype=float)
                     for i in range(model.d)])


def is_irreducible(M) -> bool:
    """Strong connectivity of the graph with an edge i -> j whenever M[i, j] > 0."""
    adj = np.asarray(M) > 0
    d = adj.shape[0]

    def reach(a):
        seen = np.zeros(d, dtype=bool)
        seen[0] = True
        stack = [0]
        while stack:
            i = stack.pop()
            for j in np.nonzero(a[i])[0]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        return seen.all()

    return reach(adj) and reach(adj.T)


@dataclass(frozen=True, eq=False)
class SpectralData:
    M: np.ndarray
    C: np.ndarray
    rho: float
    xi: np.ndarray
    eta: np.ndarray
    zeta: float
    zeta_i: np.ndarray
    critical: bool
    iterations: int = 0

    def require_critical(self):
        if not self.critical:
            raise ModelError(f"model is not critical (rho={self.rho:.3e}); limit laws do not apply")


def _perron_vector(A: np.ndarray, tol=1e-12, max_iter=100_000):
    """Inverse iteration with a shift above every Gershgorin disc of ``A``."""
    d = A.shape[0]
    radius = np.abs(A).sum(axis=1) - np.abs(np.diag(A))
    shift = float(np.max(np.diag(A) + radius)) + 1.0
    lu = np.linalg.inv(shift * np.eye(d) - A)
    x = np.full(d, 1.0 / d)
    for it in range(1, max_iter + 1):
        y = lu @ x
        y /= y.sum()
        if np.max(np.abs(y - x)) < tol:
            return y, it
        x = y
    raise ModelError(f"eigen-solver did not converge in {max_iter} iterations")


def w_weight(ell, xi) -> float:
    """Ordered-pair sum of ell_m (ell_n - [m == n]) xi_m xi_n."""
    ell = np.asarray(ell, dtype=float)
    xi = np.asarray(xi, dtype=float)
    s = ell @ xi
    return float(s * s - ell @ (xi * xi))


def zeta(model: OffspringModel, xi, eta):
    """Second-moment constant and its split over parent types.

    The total is computed from the Hessians of the offspring generating
    functions; the per-type parts from the pair weight ``w_weight``.
    """
    xi = np.asarray(xi, float)
    eta = np.asarray(eta, float)
    total = 0.0
    parts = np.zeros(model.d)
    for i in range(model.d):
        ell = np.asarray(model.outcomes[i], dtype=float)
        p = np.asarray(model.probs[i])
        hess = np.einsum("n,nj,nl->jl", p, ell, ell) - np.diag(p @ ell)
        total += model.alpha[i] * eta[i] * xi @ hess @ xi
        ew = sum(pn * w_weight(row, xi) for row, pn in zip(ell, p))
        parts[i] = model.alpha[i] * eta[i] * ew
    if abs(total - parts.sum()) > 1e-12 * max(1.0, abs(total)):
        raise ModelError("inconsistent second moment constants")
    return float(total), parts


def spectral(model: OffspringModel) -> SpectralData:
    M = mean_matrix(model)
    if not is_irreducible(M):
        raise ModelError("mean matrix is not irreducible")
    C = np.diag(model.alpha) @ (M - np.eye(model.d))
    xi, it1 = _perron_vector(C)
    eta, it2 = _perron_vector(C.T)
    eta = eta / (eta @ xi)
    rho = float(eta @ C @ xi)
    critical = abs(rho) <= CRITICAL_TOL
    if not critical:
        warnings.warn(f"model is not critical: rho = {rho:.3e}", stacklevel=2)
    z, zi = zeta(model, xi, eta)
    return SpectralData(M, C, rho, xi, eta, z, zi, critical, it1 + it2)
