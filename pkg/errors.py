"""
Error types for jungle-risk
"""

from typing import List, Optional, Sequence, Tuple


class JungleError(Exception):
    """Base class for every error raised by the library"""


class DomainError(JungleError, ValueError):
    """An argument lies outside the domain of an operation"""


class PortfolioValidationError(DomainError):
    """A portfolio spec failed validation; carries the full report"""

    def __init__(self, report):
        self.report = report
        lines = [f"  - {issue}" for issue in report.issues]
        super().__init__(
            "Portfolio spec is not admissible:\n" + "\n".join(lines) +
            "\nFix the listed probabilities/correlations and run again."
        )


class CalibrationDomainError(DomainError):
    """Moment targets that no Jungle model can reproduce"""

    def __init__(self, message: str, bracket: Optional[str] = None):
        self.bracket = bracket
        super().__init__(message)


class ConvergenceError(JungleError):
    """An iterative solver stopped before reaching its tolerance"""

    def __init__(self, message: str, residual: float, trace: Optional[Sequence[float]] = None):
        self.residual = residual
        self.trace: List[float] = list(trace or [])
        super().__init__(
            f"{message} (best residual {residual:.3e} after {len(self.trace)} iterations)\n"
            "Try a larger --max-iter, a looser --tol, or --mode exact for small portfolios."
        )


class ConfigurationError(JungleError):
    """Inconsistent configuration, e.g. a recovery model that does not fit the topology"""


class EnumerationLimitError(DomainError):
    """Full-state enumeration requested above the hard cap"""

    def __init__(self, n: int, cap: int):
        self.n = n
        self.cap = cap
        super().__init__(
            f"Refusing to enumerate 2^{n} states (cap is n <= {cap}).\n"
            "Use the Gibbs sampler (sample command) for larger portfolios."
        )


class SeriesParseError(DomainError):
    """Malformed default-rate CSV; problems are (line number, message) pairs"""

    def __init__(self, path: str, problems: Sequence[Tuple[int, str]]):
        self.path = path
        self.problems = list(problems)
        details = "\n".join(f"  line {line}: {msg}" for line, msg in self.problems[:20])
        more = f"\n  ... {len(self.problems) - 20} more" if len(self.problems) > 20 else ""
        super().__init__(f"Could not parse default-rate series {path}:\n{details}{more}")
