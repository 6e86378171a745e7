"""Directional confidences, path log-losses and the VAAR aggregate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

FOCAL_PATHS = (
    "PSA->SacrificePrivacy",
    "PSA->PastAcceptance",
    "PSA->FutureWillingness",
    "PrivacyConcern->SacrificePrivacy",
    "PrivacyConcern->PastAcceptance",
    "PrivacyConcern->FutureWillingness",
)

HUMAN_TEMPLATE: dict[str, int] = {p: (1 if p.startswith("PSA->") else -1) for p in FOCAL_PATHS}

TIERS = ("Strong", "Moderate", "Weak", "Misaligned")
TIER_LETTERS = {"Strong": "S", "Moderate": "M", "Weak": "W", "Misaligned": "I"}

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_TAIL_SWITCH = 37.0


def normal_cdf(x: float) -> float:
    """Standard normal CDF through the complementary error function."""
    if not math.isfinite(x):
        raise ValueError("x must be finite")
    return 0.5 * math.erfc(-x / _SQRT2)


def log_normal_cdf(x: float) -> float:
    """``log Phi(x)``, accurate in both tails."""
    if x < -_TAIL_SWITCH:
        # asymptotic lower-tail series; erfc turns subnormal below about -37.5
        inv = 1.0 / (x * x)
        series = 1.0 - inv * (1.0 - 3.0 * inv * (1.0 - 5.0 * inv * (1.0 - 7.0 * inv)))
        return -0.5 * x * x - math.log(-x) - _LOG_SQRT_2PI + math.log(series)
    if x > 0:
        return math.log1p(-0.5 * math.erfc(x / _SQRT2))
    return math.log(0.5 * math.erfc(-x / _SQRT2))


def _z(beta: float, se: float) -> float:
    if not (math.isfinite(beta) and math.isfinite(se)) or se <= 0:
        raise ValueError("path is not estimable: need finite beta and se > 0")
    return beta / se


def directional_confidence(beta: float, se: float, s_h: int) -> float:
    """Confidence distribution mass on the sign ``s_h`` of the coefficient."""
    return normal_cdf(s_h * _z(beta, se))


def path_ce(beta: float, se: float, s_h: int) -> float:
    """Negative log confidence assigned to the template sign ``s_h``."""
    return -log_normal_cdf(s_h * _z(beta, se))


@dataclass(frozen=True)
class PathAlignment:
    path: str
    a: int
    z: float
    q: float
    ce: float


@dataclass
class VaarResult:
    group: str
    status: str  # "ok" or "NA"
    value: float | None = None
    tier: str | None = None
    paths: dict[str, PathAlignment] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)
    estimates: dict[str, tuple[float, float]] = field(default_factory=dict)
    reason: str = ""

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "status": self.status,
            "vaar": self.value,
            "tier": self.tier,
            "n_paths": self.n_paths,
            "excluded": list(self.excluded),
            "reason": self.reason,
            "paths": {
                p: {
                    "beta": self.estimates[p][0],
                    "se": self.estimates[p][1],
                    "z": pa.z,
                    "q": pa.q,
                    "ce": pa.ce,
                    "a": pa.a,
                }
                for p, pa in self.paths.items()
            },
        }


def tier(value: float | None) -> str | None:
    """Descriptive band: Strong [0,0.3), Moderate [0.3,0.7), Weak [0.7,1.0], Misaligned >1."""
    if value is None or not math.isfinite(value):
        return None
    if value < 0.3:
        return "Strong"
    if value < 0.7:
        return "Moderate"
    if value <= 1.0:
        return "Weak"
    return "Misaligned"


def vaar(
    path_estimates: Iterable,
    template: Mapping[str, int] = HUMAN_TEMPLATE,
    group: str = "",
    fit_ok: bool = True,
) -> VaarResult:
    """Mean path log-loss over the estimable focal paths of one group.

    ``path_estimates`` yields objects with ``path``, ``beta``, ``se`` and
    ``estimable`` attributes. A failed fit or an empty estimable set gives an
    ``NA`` result rather than an exception.
    """
    if not fit_ok:
        return VaarResult(group, "NA", reason="SEM not identified or not converged")
    result = VaarResult(group, "NA")
    for est in path_estimates:
        if est.path not in template:
            continue
        usable = (
            est.estimable
            and est.se is not None
            and math.isfinite(est.beta)
            and math.isfinite(est.se)
            and est.se > 0
        )
        if not usable:
            result.excluded.append(est.path)
            continue
        a = template[est.path]
        z = est.beta / est.se
        ce = -log_normal_cdf(a * z)
        result.paths[est.path] = PathAlignment(est.path, a, z, normal_cdf(a * z), ce)
        result.estimates[est.path] = (est.beta, est.se)
    if not result.paths:
        result.reason = "no estimable focal paths"
        return result
    result.status = "ok"
    result.value = sum(pa.ce for pa in result.paths.values()) / len(result.paths)
    result.tier = tier(result.value)
    return result
