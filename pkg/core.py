"""
Core domain types and log-space primitives shared by every solver

All probability mass is carried in log space and only exponentiated at
output boundaries.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit, gammaln
from scipy.special import logsumexp as _scipy_logsumexp
from typing_extensions import Annotated

from errors import DomainError, PortfolioValidationError

logger = logging.getLogger(__name__)

class Edge(NamedTuple):
    """Unordered node pair stored canonically with i < j"""
    i: int
    j: int

    @classmethod
    def of(cls, i: int, j: int) -> "Edge":
        i, j = int(i), int(j)
        if i == j:
            raise DomainError(f"Self-loop on node {i} is not an edge")
        return cls(i, j) if i < j else cls(j, i)


EdgeMap = Dict[Tuple[int, int], float]


def canonical_edges(mapping: Any) -> Dict[Edge, float]:
    """Canonicalise an edge -> value mapping, rejecting self-loops and conflicting duplicates"""
    result: Dict[Edge, float] = {}
    items = mapping.items() if isinstance(mapping, dict) else mapping
    for key, value in items:
        if isinstance(key, str):
            key = tuple(int(part) for part in key.replace("-", ",").split(","))
        edge = Edge.of(*key)
        value = float(value)
        if edge in result and result[edge] != value:
            raise DomainError(f"Edge {edge.i}-{edge.j} listed twice with different values")
        result[edge] = value
    return dict(sorted(result.items()))


# ---------------------------------------------------------------------------
# Numerically stable primitives
# ---------------------------------------------------------------------------

def log_binomial(n: int, k: int) -> float:
    """ln C(n, k) via log-gamma"""
    if n < 0 or k < 0 or k > n:
        raise DomainError(f"log_binomial needs 0 <= k <= n (got n={n}, k={k})")
    if k == 0 or k == n:
        return 0.0
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def log_binomial_row(n: int) -> np.ndarray:
    """ln C(n, l) for l = 0..n"""
    if n < 0:
        raise DomainError(f"log_binomial_row needs n >= 0 (got {n})")
    ell = np.arange(n + 1, dtype=float)
    row = gammaln(n + 1) - gammaln(ell + 1) - gammaln(n - ell + 1)
    row[0] = 0.0
    row[-1] = 0.0
    return row


def log_sum_exp(values: Sequence[float]) -> float:
    """ln sum exp(v) with max subtraction"""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise DomainError("log_sum_exp of an empty sequence is undefined")
    return float(_scipy_logsumexp(arr))


def sigmoid(x):
    """Logistic map alpha -> p"""
    return expit(x)


def softplus(x):
    """ln(1 + e^x)"""
    return np.logaddexp(0.0, x)


def pair_q(p_i: float, p_j: float, rho: float) -> float:
    """Joint default probability <l_i l_j> implied by a default correlation"""
    return rho * math.sqrt(p_i * (1.0 - p_i)) * math.sqrt(p_j * (1.0 - p_j)) + p_i * p_j


def pair_rho(p_i: float, p_j: float, q: float) -> float:
    """Default correlation implied by a joint default probability"""
    return (q - p_i * p_j) / (math.sqrt(p_i * (1.0 - p_i)) * math.sqrt(p_j * (1.0 - p_j)))


def q_window(p_i: float, p_j: float) -> Tuple[float, float]:
    """Open interval of admissible joint default probabilities"""
    return max(0.0, p_i + p_j - 1.0), min(p_i, p_j)


# ---------------------------------------------------------------------------
# Loss distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossPmf:
    """Probability mass over default counts l = 0..n, stored in log space"""
    n: int
    log_mass: np.ndarray = field(repr=False)

    @classmethod
    def from_log_weights(cls, log_weights: Sequence[float]) -> "LossPmf":
        log_weights = np.asarray(log_weights, dtype=float)
        if log_weights.ndim != 1 or log_weights.size < 1:
            raise DomainError("A loss pmf needs at least one default-count bin")
        log_z = _scipy_logsumexp(log_weights)
        if not np.isfinite(log_z):
            raise DomainError("Loss pmf weights do not normalise (all zero or non-finite)")
        log_mass = log_weights - log_z
        log_mass.setflags(write=False)
        return cls(n=log_weights.size - 1, log_mass=log_mass)

    @classmethod
    def from_mass(cls, mass: Sequence[float]) -> "LossPmf":
        mass = np.asarray(mass, dtype=float)
        if np.any(mass < 0) or not np.all(np.isfinite(mass)):
            raise DomainError("Loss pmf masses must be finite and non-negative")
        with np.errstate(divide="ignore"):
            return cls.from_log_weights(np.log(mass))

    @classmethod
    def point_mass(cls, n: int, location: int) -> "LossPmf":
        mass = np.zeros(n + 1)
        mass[location] = 1.0
        return cls.from_mass(mass)

    @property
    def mass(self) -> np.ndarray:
        mass = np.exp(self.log_mass)
        return mass / mass.sum()

    @property
    def loss_counts(self) -> np.ndarray:
        return np.arange(self.n + 1)

    @property
    def loss_fractions(self) -> np.ndarray:
        return self.loss_counts / max(self.n, 1)

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.mass)

    def mean(self) -> float:
        return float(np.dot(self.loss_counts, self.mass))

    def variance(self) -> float:
        mass = self.mass
        mu = float(np.dot(self.loss_counts, mass))
        return float(np.dot((self.loss_counts - mu) ** 2, mass))


# ---------------------------------------------------------------------------
# Recovery models
# ---------------------------------------------------------------------------

class ConstantRecovery(BaseModel):
    """1 - RR = lgd for every borrower"""
    model_config = ConfigDict(frozen=True)

    model: Literal["constant"] = "constant"
    lgd: float = Field(1.0, ge=0.0, le=1.0)


class LinearInAggregateRecovery(BaseModel):
    """1 - RR = (1 + rate / p) / 2, rate the draw's default rate and p its expectation"""
    model_config = ConfigDict(frozen=True)

    model: Literal["linear_in_aggregate"] = "linear_in_aggregate"
    capped: bool = False


class CentralNodeRecovery(BaseModel):
    """1 - RR = a + b * l_hub for a Dandelion portfolio"""
    model_config = ConfigDict(frozen=True)

    model: Literal["central_node"] = "central_node"
    a: float = Field(..., ge=0.0, le=1.0)
    b: float

    @model_validator(mode="after")
    def _check_bad_state(self):
        if not 0.0 <= self.a + self.b <= 1.0:
            raise ValueError(f"a + b must lie in [0, 1] (got {self.a + self.b})")
        return self


class BorrowerSpecificRecovery(BaseModel):
    """1 - RR_i = a_i + b_i * rate with per-borrower coefficients"""
    model_config = ConfigDict(frozen=True)

    model: Literal["borrower_specific"] = "borrower_specific"
    a: List[float]
    b: List[float]

    @model_validator(mode="after")
    def _check_coefficients(self):
        if len(self.a) != len(self.b):
            raise ValueError("a and b must have one entry per borrower")
        for idx, (a_i, b_i) in enumerate(zip(self.a, self.b)):
            if not 0.0 <= a_i <= 1.0:
                raise ValueError(f"a[{idx}]={a_i} must lie in [0, 1]")
            if a_i + b_i < 0.0:
                raise ValueError(f"a[{idx}] + b[{idx}] must be >= 0")
        return self


RecoveryModel = Annotated[
    Union[ConstantRecovery, LinearInAggregateRecovery, CentralNodeRecovery, BorrowerSpecificRecovery],
    Field(discriminator="model"),
]


# ---------------------------------------------------------------------------
# Portfolio and model parameters
# ---------------------------------------------------------------------------

class PortfolioSpec(BaseModel):
    """Empirical inputs: default probabilities, known default correlations, exposures, recovery"""
    model_config = ConfigDict(frozen=True)

    n: int = Field(..., ge=1)
    p: List[float]
    rho: EdgeMap = Field(default_factory=dict)
    exposure: List[float] = Field(default_factory=list)
    recovery: RecoveryModel = Field(default_factory=ConstantRecovery)
    hub: Optional[int] = None

    @model_validator(mode="before")
    @classmethod
    def _fill_defaults(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            if not data.get("exposure") and "n" in data:
                data["exposure"] = [1.0] * int(data["n"])
            if "rho" in data and data["rho"] is not None:
                data["rho"] = {tuple(k): v for k, v in canonical_edges(data["rho"]).items()}
        return data

    @model_validator(mode="after")
    def _check_shape(self):
        if len(self.p) != self.n:
            raise ValueError(f"p has {len(self.p)} entries, expected n={self.n}")
        if len(self.exposure) != self.n:
            raise ValueError(f"exposure has {len(self.exposure)} entries, expected n={self.n}")
        for (i, j) in self.rho:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge {i}-{j} refers to a node outside 0..{self.n - 1}")
        if self.hub is not None and not 0 <= self.hub < self.n:
            raise ValueError(f"hub {self.hub} is outside 0..{self.n - 1}")
        if isinstance(self.recovery, BorrowerSpecificRecovery) and len(self.recovery.a) != self.n:
            raise ValueError("borrower_specific recovery needs one (a, b) pair per node")
        return self

    @property
    def edges(self) -> List[Edge]:
        return [Edge(i, j) for (i, j) in self.rho]

    def q(self, edge: Tuple[int, int]) -> float:
        edge = Edge.of(*edge)
        return pair_q(self.p[edge.i], self.p[edge.j], self.rho[(edge.i, edge.j)])

    @property
    def mean_p(self) -> float:
        return float(np.mean(self.p))

    def hub_node(self) -> Optional[int]:
        """Designated Dandelion centre, or the centre of a star-shaped edge set"""
        if self.hub is not None:
            return self.hub
        return star_center(self.n, self.edges)


def star_center(n: int, edges: Sequence[Edge]) -> Optional[int]:
    """Node linked to every other node when the edge set is exactly a star"""
    if n < 2 or len(edges) != n - 1:
        return None
    degree = np.zeros(n, dtype=int)
    for e in edges:
        degree[e.i] += 1
        degree[e.j] += 1
    centers = np.flatnonzero(degree == n - 1)
    if n == 2:
        return 0
    return int(centers[0]) if centers.size == 1 else None


FiniteFloat = Annotated[float, Field(allow_inf_nan=False)]


class JungleParams(BaseModel):
    """Model parameters: a field per node and a coupling per known edge"""
    model_config = ConfigDict(frozen=True)

    alpha: List[FiniteFloat]
    beta: Dict[Tuple[int, int], FiniteFloat] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def _canonical_beta(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("beta"):
            data = dict(data)
            data["beta"] = {tuple(k): v for k, v in canonical_edges(data["beta"]).items()}
        return data

    @model_validator(mode="after")
    def _check_edges(self):
        n = len(self.alpha)
        if n < 1:
            raise ValueError("JungleParams needs at least one node")
        for (i, j) in self.beta:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"coupling {i}-{j} refers to a node outside 0..{n - 1}")
        return self

    @property
    def n(self) -> int:
        return len(self.alpha)

    @property
    def edges(self) -> List[Edge]:
        return [Edge(i, j) for (i, j) in self.beta]

    def alpha_array(self) -> np.ndarray:
        return np.asarray(self.alpha, dtype=float)

    def beta_array(self) -> np.ndarray:
        return np.asarray(list(self.beta.values()), dtype=float)

    def coupling_matrix(self) -> np.ndarray:
        """Symmetric n x n coupling matrix with zero diagonal"""
        mat = np.zeros((self.n, self.n))
        for (i, j), b in self.beta.items():
            mat[i, j] = b
            mat[j, i] = b
        return mat

    def neighbors(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Per node: (neighbor indices, coupling weights)"""
        idx: List[List[int]] = [[] for _ in range(self.n)]
        wts: List[List[float]] = [[] for _ in range(self.n)]
        for (i, j), b in self.beta.items():
            idx[i].append(j)
            wts[i].append(b)
            idx[j].append(i)
            wts[j].append(b)
        return [(np.asarray(a, dtype=int), np.asarray(w, dtype=float)) for a, w in zip(idx, wts)]

    def log_weight(self, states: np.ndarray) -> np.ndarray:
        """Unnormalised log probability of each state row"""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        energy = states @ self.alpha_array()
        for (i, j), b in self.beta.items():
            energy = energy + b * states[:, i] * states[:, j]
        return energy


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationIssue:
    kind: str
    subject: str
    message: str

    def __str__(self) -> str:
        return f"{self.subject}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    issues: Tuple[ValidationIssue, ...] = ()

    @property
    def valid(self) -> bool:
        return len(self.issues) == 0

    def kinds(self) -> List[str]:
        return [issue.kind for issue in self.issues]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "valid": self.valid,
            "issues": [
                {"kind": i.kind, "subject": i.subject, "message": i.message} for i in self.issues
            ],
        }


def validate_portfolio(spec: PortfolioSpec) -> ValidationReport:
    """List every violated invariant of a portfolio spec; empty iff admissible"""
    issues: List[ValidationIssue] = []

    for i, p_i in enumerate(spec.p):
        if not np.isfinite(p_i):
            issues.append(ValidationIssue("probability_not_finite", f"node {i}", f"p={p_i} is not finite"))
        elif p_i <= 0.0 or p_i >= 1.0:
            kind = "probability_at_boundary" if p_i in (0.0, 1.0) else "probability_out_of_range"
            text = "probability at boundary" if p_i in (0.0, 1.0) else "probability outside (0, 1)"
            issues.append(ValidationIssue(kind, f"node {i}", f"{text} (p={p_i})"))

    for i, e_i in enumerate(spec.exposure):
        if not (np.isfinite(e_i) and e_i > 0.0):
            issues.append(ValidationIssue("exposure_not_positive", f"node {i}",
                                          f"exposure must be positive (got {e_i})"))

    for (i, j), rho in spec.rho.items():
        subject = f"edge {i}-{j}"
        if not np.isfinite(rho) or rho <= -1.0 or rho >= 1.0:
            issues.append(ValidationIssue("correlation_out_of_range", subject,
                                          f"correlation outside (-1, 1) (rho={rho})"))
            continue
        p_i, p_j = spec.p[i], spec.p[j]
        if not (0.0 < p_i < 1.0 and 0.0 < p_j < 1.0):
            continue
        q = pair_q(p_i, p_j, rho)
        lo, hi = q_window(p_i, p_j)
        if q >= hi:
            issues.append(ValidationIssue("q_exceeds_min_p", subject,
                                          f"q_ij exceeds min(p_i,p_j) (q={q:.6g}, min={hi:.6g})"))
        if q <= lo:
            bound = "0" if lo == 0.0 else "p_i+p_j-1"
            issues.append(ValidationIssue("q_below_lower_bound", subject,
                                          f"q_ij below max(0,p_i+p_j-1)={bound} (q={q:.6g})"))

    recovery = spec.recovery
    if isinstance(recovery, CentralNodeRecovery) and spec.hub_node() is None:
        issues.append(ValidationIssue("recovery_needs_hub", "recovery",
                                      "central_node recovery needs a Dandelion topology with a designated hub"))
    if isinstance(recovery, LinearInAggregateRecovery) and not spec.mean_p > 0.0:
        issues.append(ValidationIssue("recovery_needs_positive_rate", "recovery",
                                      "linear_in_aggregate recovery needs a positive expected default rate"))

    return ValidationReport(tuple(issues))


def ensure_admissible(spec: PortfolioSpec) -> ValidationReport:
    """Raise PortfolioValidationError unless the portfolio is admissible"""
    report = validate_portfolio(spec)
    if not report.valid:
        raise PortfolioValidationError(report)
    return report


# ---------------------------------------------------------------------------
# Portfolio spec documents
# ---------------------------------------------------------------------------

_RECOVERY_MODELS = {
    "constant": ConstantRecovery,
    "linear_in_aggregate": LinearInAggregateRecovery,
    "central_node": CentralNodeRecovery,
    "borrower_specific": BorrowerSpecificRecovery,
}


def portfolio_from_document(doc: Dict[str, Any]) -> PortfolioSpec:
    """Build a PortfolioSpec from the JSON document shape"""
    n = int(doc["n"])
    nodes = sorted(doc.get("nodes", []), key=lambda node: int(node["id"]))
    ids = [int(node["id"]) for node in nodes]
    if ids != list(range(n)):
        raise DomainError(f"nodes must carry ids 0..{n - 1} exactly once")
    p = [float(node["p"]) for node in nodes]
    exposure = [float(node.get("exposure", 1.0)) for node in nodes]
    rho = {(int(e["i"]), int(e["j"])): float(e["rho"]) for e in doc.get("edges", [])}

    recovery_doc = doc.get("recovery") or {"model": "constant", "params": {"lgd": 1.0}}
    model_name = recovery_doc.get("model", "constant")
    if model_name not in _RECOVERY_MODELS:
        raise DomainError(f"Unknown recovery model '{model_name}' (choose from {sorted(_RECOVERY_MODELS)})")
    recovery = _RECOVERY_MODELS[model_name](**(recovery_doc.get("params") or {}))

    return PortfolioSpec(n=n, p=p, rho=rho, exposure=exposure, recovery=recovery, hub=doc.get("hub"))


def portfolio_to_document(spec: PortfolioSpec) -> Dict[str, Any]:
    recovery = spec.recovery.model_dump()
    model_name = recovery.pop("model")
    doc = {
        "n": spec.n,
        "nodes": [{"id": i, "p": spec.p[i], "exposure": spec.exposure[i]} for i in range(spec.n)],
        "edges": [{"i": i, "j": j, "rho": r} for (i, j), r in spec.rho.items()],
        "recovery": {"model": model_name, "params": recovery},
    }
    if spec.hub is not None:
        doc["hub"] = spec.hub
    return doc


def load_portfolio(path: Union[str, Path]) -> PortfolioSpec:
    """Read a portfolio spec JSON document"""
    path = Path(path)
    logger.info(f"Loading portfolio spec from {path}")
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return portfolio_from_document(doc)


def save_portfolio(spec: PortfolioSpec, path: Union[str, Path]):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(portfolio_to_document(spec), f, indent=2)
