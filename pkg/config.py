import os
from typing import Dict, Any
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _int_env(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or value.strip() == "":
        return default
    try:
        return int(value)
    except ValueError:
        return default


class Config:
    """Configuration management for jungle-risk"""

    # Parallelism
    THREADS = _int_env("JUNGLE_THREADS", os.cpu_count() or 1)

    # Logging Configuration
    LOG_LEVEL = os.getenv("JUNGLE_LOG_LEVEL", "INFO")

    # Exact enumeration
    ENUMERATION_THRESHOLD = _int_env("JUNGLE_ENUMERATION_THRESHOLD", 20)
    ENUMERATION_CAP = 22

    # MCMC defaults (heuristics, overridable per call)
    DEFAULT_BURN_IN = _int_env("JUNGLE_BURN_IN", 1000)
    DEFAULT_THIN = _int_env("JUNGLE_THIN", 10)
    DEFAULT_SEED = _int_env("JUNGLE_SEED", 20240601)

    # Calibration tolerances
    EXACT_TOLERANCE = 1e-6
    SAMPLED_TOLERANCE = 1e-3

    # Synthetic portfolio sizes
    SPECULATIVE_GRADE_N = 800
    CAA_C_N = 80

    # Output
    OUTPUT_SIGNIFICANT_DIGITS = 9

    @classmethod
    def float_format(cls) -> str:
        return f"%.{cls.OUTPUT_SIGNIFICANT_DIGITS}g"

    @classmethod
    def reload(cls):
        """Re-read the environment (after load_dotenv(override=True) or in tests)"""
        cls.THREADS = _int_env("JUNGLE_THREADS", os.cpu_count() or 1)
        cls.LOG_LEVEL = os.getenv("JUNGLE_LOG_LEVEL", "INFO")
        cls.ENUMERATION_THRESHOLD = _int_env("JUNGLE_ENUMERATION_THRESHOLD", 20)
        cls.DEFAULT_BURN_IN = _int_env("JUNGLE_BURN_IN", 1000)
        cls.DEFAULT_THIN = _int_env("JUNGLE_THIN", 10)
        cls.DEFAULT_SEED = _int_env("JUNGLE_SEED", 20240601)

    @classmethod
    def validate_config(cls) -> Dict[str, Any]:
        """Validate configuration and return status"""
        issues = []

        if cls.THREADS < 1:
            issues.append(f"JUNGLE_THREADS must be >= 1 (got {cls.THREADS})")

        if cls.ENUMERATION_THRESHOLD > cls.ENUMERATION_CAP:
            issues.append(
                f"JUNGLE_ENUMERATION_THRESHOLD={cls.ENUMERATION_THRESHOLD} exceeds the "
                f"enumeration cap {cls.ENUMERATION_CAP}"
            )

        if cls.DEFAULT_BURN_IN < 0:
            issues.append("JUNGLE_BURN_IN must be >= 0")
        if cls.DEFAULT_THIN < 1:
            issues.append("JUNGLE_THIN must be >= 1")

        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            issues.append(f"JUNGLE_LOG_LEVEL '{cls.LOG_LEVEL}' is not a logging level")

        return {
            "valid": len(issues) == 0,
            "issues": issues,
            "config": {
                "threads": cls.THREADS,
                "log_level": cls.LOG_LEVEL,
                "enumeration_threshold": cls.ENUMERATION_THRESHOLD,
                "enumeration_cap": cls.ENUMERATION_CAP,
                "burn_in": cls.DEFAULT_BURN_IN,
                "thin": cls.DEFAULT_THIN,
                "seed": cls.DEFAULT_SEED,
            }
        }
