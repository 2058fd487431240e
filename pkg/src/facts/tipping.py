"""Tipping-point mathematics and parameter selection for the CCBF.

Everything here is a pure function of integers.  Ratios of falling
factorials are evaluated as running products of per-term ratios in double
precision; no big-integer or log-gamma arithmetic is involved.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .ccbf import CcbfParams, ParamError

__all__ = [
    "PRECONDITION_RTOL",
    "TailThresholds",
    "TippingCalculator",
    "TippingTables",
    "check_preconditions",
    "choose_params",
    "fill_probabilities",
    "fill_probability",
    "hypergeom_pmf",
    "intersection_prob",
    "r_table",
    "round_half_away",
    "tail_thresholds",
    "tipping_point",
    "tipping_tables",
    "unfilled_distribution",
]

# Published bound constants.
LOWER_P_V_RATIO = 7.042652
LOWER_P_U_FACTOR = 0.5184846
LOWER_P = 0.956414
UPPER_P_V_MIN = 371
UPPER_P_V_FRACTION = 0.00386
UPPER_P_U_FACTOR = 3.65151
UPPER_P = 0.974876
TAU_S_FACTOR = 96
TAU_V_FACTOR = 7.409
TAU_UPPER_FACTOR = 1.0520553
FP_V_FACTOR = 8
FP_SQRT_FACTOR = 2.1
U_FACTOR = 47.31

# The constants above are printed to 4-7 significant figures; evaluating the
# bound conditions on the recipe's own output misses some of them by ~1e-4
# relative (and v >= 371 by 0.27% at t = 50).
PRECONDITION_RTOL = 5e-3


def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def _ratio_product(num: list[int], den: list[int]) -> float:
    """prod(num) / prod(den) with partial products kept near 1.

    Terms are consumed greedily: divide while the running value is above
    one, multiply while it is below.  Zero numerator terms short-circuit.
    """
    if any(x == 0 for x in num):
        return 0.0
    if any(x == 0 for x in den):
        raise ZeroDivisionError("zero term in denominator")
    num = sorted(num)
    den = sorted(den)
    value = 1.0
    i = j = 0
    while i < len(num) and j < len(den):
        if value >= 1.0:
            value /= den[j]
            j += 1
        else:
            value *= num[i]
            i += 1
    for x in num[i:]:
        value *= x
    for x in den[j:]:
        value /= x
    return value


def _falling_terms(n: int, k: int) -> list[int]:
    return [n - i for i in range(k)]


def hypergeom_pmf(s: int, a: int, b: int, k: int) -> float:
    """Pr(|S ∩ T| = k) for uniform independent subsets with |S|=a, |T|=b.

    Valid for any ordering of ``a`` and ``b``; returns 0 outside the support.
    """
    if min(s, a, b, k) < 0 or a > s or b > s:
        raise ParamError(f"invalid arguments s={s}, a={a}, b={b}, k={k}")
    if k > min(a, b) or b - k > s - a:
        return 0.0
    num = _falling_terms(a, k) + _falling_terms(b, k) + _falling_terms(s - a, b - k)
    den = _falling_terms(s, b) + list(range(1, k + 1))
    return _ratio_product(num, den)


def intersection_prob(s: int, a: int, b: int, k: int) -> float:
    """Probability that random subsets of sizes ``a >= b`` of an s-set meet in exactly k."""
    if not 0 <= k <= b <= a <= s:
        raise ParamError(f"need 0 <= k <= b <= a <= s, got k={k}, b={b}, a={a}, s={s}")
    return hypergeom_pmf(s, a, b, k)


def fill_probability(s: int, u: int, w: int) -> float:
    """Chance that a random user's set meets ``w`` given unfilled item slots."""
    if not 0 <= w <= s or not 0 <= u <= s:
        raise ParamError(f"need 0 <= w <= s and 0 <= u <= s, got s={s}, u={u}, w={w}")
    if w == 0 or u == 0:
        return 0.0
    if w > s - u:
        return 1.0
    miss = _ratio_product(_falling_terms(s - u, w), _falling_terms(s, w))
    return 1.0 - miss


def fill_probabilities(s: int, u: int, v: int) -> np.ndarray:
    """All ``p_w`` for ``0 <= w <= v`` in O(v) via the running miss ratio."""
    if not 0 <= v <= s or not 0 <= u <= s:
        raise ParamError(f"need 0 <= v <= s and 0 <= u <= s, got s={s}, u={u}, v={v}")
    miss = np.empty(v + 1)
    miss[0] = 1.0
    ratio = 1.0
    for w in range(1, v + 1):
        top = s - u - w + 1
        ratio = ratio * top / (s - w + 1) if top > 0 else 0.0
        miss[w] = ratio
    return 1.0 - miss


def r_table(s: int, u: int, v: int, t: int, p: np.ndarray | None = None) -> np.ndarray:
    """Expected unfilled item slots after ``t`` item increments, for each start ``w``.

    Row ``R[w] = R_{w,t}`` of the recurrence
    ``R_{w,k} = p_w R_{w-1,k-1} + (1 - p_w) R_{w,k-1}``,
    ``R_{0,k} = 0``, ``R_{w,0} = w``.
    """
    if t < 0:
        raise ParamError(f"t must be non-negative, got {t}")
    if p is None:
        p = fill_probabilities(s, u, v)
    row = np.arange(v + 1, dtype=float)
    q = 1.0 - p
    for _ in range(t):
        nxt = np.empty_like(row)
        nxt[0] = 0.0
        nxt[1:] = p[1:] * row[:-1] + q[1:] * row[1:]
        row = nxt
    return row


def unfilled_distribution(s: int, v: int, m: int, *, direct: bool = False) -> np.ndarray:
    """``q_w``: probability that ``w`` of ``v`` item slots are still 0 after ``m`` fills.

    The default path computes the mode directly and walks outwards with
    O(1) ratio updates; ``direct=True`` evaluates every entry as a product.
    """
    if not 0 <= m <= s or not 0 <= v <= s:
        raise ParamError(f"need 0 <= m <= s and 0 <= v <= s, got s={s}, v={v}, m={m}")
    q = np.zeros(v + 1)
    if direct:
        for w in range(v + 1):
            q[w] = hypergeom_pmf(s, m, v, v - w)
        return q
    # filled count K = v - w is hypergeometric; start at its mode
    k_mode = min((v + 1) * (m + 1) // (s + 2), v, m)
    w0 = v - k_mode
    q[w0] = hypergeom_pmf(s, m, v, k_mode)
    # q_{w+1} / q_w = (v - w)(s - m - w) / ((m - v + w + 1)(w + 1))
    for w in range(w0, v):
        den = (m - v + w + 1) * (w + 1)
        num = (v - w) * (s - m - w)
        if num <= 0 or q[w] == 0.0:
            break
        q[w + 1] = q[w] * num / den
    for w in range(w0, 0, -1):
        # q_{w-1} / q_w = (m - v + w) w / ((v - w + 1)(s - m - w + 1))
        num = (m - v + w) * w
        den = (v - w + 1) * (s - m - w + 1)
        if num <= 0 or q[w] == 0.0:
            break
        q[w - 1] = q[w] * num / den
    return q


@dataclass(frozen=True)
class TippingTables:
    p: np.ndarray
    q: np.ndarray
    R_row: np.ndarray
    s: int
    u: int
    v: int
    m: int
    t: int

    @property
    def expected_filled(self) -> float:
        return float(self.v - np.dot(self.q, self.R_row))

    @property
    def tau(self) -> int:
        return round_half_away(self.expected_filled)


def _check_tipping_args(s: int, u: int, v: int, m: int, t: int) -> None:
    if not 0 <= m <= s:
        raise ParamError(f"need 0 <= m <= s, got m={m}, s={s}")
    if t < 0:
        raise ParamError(f"t must be non-negative, got {t}")
    if not 0 <= u <= s or not 0 <= v <= s:
        raise ParamError(f"need u, v in [0, s], got u={u}, v={v}, s={s}")


def tipping_tables(s: int, u: int, v: int, m: int, t: int) -> TippingTables:
    _check_tipping_args(s, u, v, m, t)
    p = fill_probabilities(s, u, v)
    return TippingTables(p, unfilled_distribution(s, v, m), r_table(s, u, v, t, p), s, u, v, m, t)


def tipping_point(s: int, u: int, v: int, m: int, t: int) -> int:
    """Expected filled item slots after ``t`` item increments amid ``m`` set bits, rounded."""
    return tipping_tables(s, u, v, m, t).tau


class TippingCalculator:
    """Tipping points for fixed ``(s, u, v, t)`` across changing ``m``.

    ``R_{w,t}`` does not depend on ``m``, so it is computed once and each
    new ``m`` costs only the O(v) ``q_w`` vector.
    """

    def __init__(self, s: int, u: int, v: int, t: int) -> None:
        _check_tipping_args(s, u, v, 0, t)
        self.s, self.u, self.v, self.t = s, u, v, t
        self.p = fill_probabilities(s, u, v)
        self.R_row = r_table(s, u, v, t, self.p)
        self._tau = lru_cache(maxsize=65536)(self._compute)

    @classmethod
    def for_params(cls, params: CcbfParams) -> "TippingCalculator":
        return cls(params.s, params.u, params.v, params.t)

    def _compute(self, m: int) -> int:
        q = unfilled_distribution(self.s, self.v, m)
        return round_half_away(self.v - float(np.dot(q, self.R_row)))

    def expected_filled(self, m: int) -> float:
        q = unfilled_distribution(self.s, self.v, m)
        return self.v - float(np.dot(q, self.R_row))

    def tau(self, m: int) -> int:
        if not 0 <= m <= self.s:
            raise ParamError(f"need 0 <= m <= s, got m={m}")
        return self._tau(m)


# -- parameter selection -----------------------------------------------------


def check_preconditions(params: CcbfParams, rtol: float = PRECONDITION_RTOL) -> dict[str, bool]:
    """Evaluate every bound the accuracy guarantees require of ``(s, u, v, n, t)``.

    The tipping point that the lower fill bound is applied at is its upper
    bound ``1.0520553 t``.  Each inequality is granted ``rtol`` relative slack.
    """
    s, u, v, n, t = params.s, params.u, params.v, params.n, params.t
    tau_max = TAU_UPPER_FACTOR * t

    def ge(lhs: float, rhs: float) -> bool:
        return lhs >= rhs * (1 - rtol)

    def le(lhs: float, rhs: float) -> bool:
        return lhs <= rhs * (1 + rtol)

    return {
        "v >= 7.042652 tau": ge(v, LOWER_P_V_RATIO * tau_max),
        "u >= 0.5184846 s/tau": ge(u, LOWER_P_U_FACTOR * s / tau_max),
        "v >= 371": ge(v, UPPER_P_V_MIN),
        "v <= 0.00386 s": le(v, UPPER_P_V_FRACTION * s),
        "u <= 3.65151 s/v": le(u, UPPER_P_U_FACTOR * s / v),
        "s >= 96 n": ge(s, TAU_S_FACTOR * n),
        "v <= 7.409 t": le(v, TAU_V_FACTOR * t),
        "v <= 8 t": le(v, FP_V_FACTOR * t),
    }


def choose_params(n: int, t: int, lambda_stat: int = 10) -> CcbfParams:
    """Table geometry for at most ``n`` complaints per epoch and audit threshold ``t``."""
    if t < 50:
        raise ParamError(f"threshold t={t} is below the minimum of 50")
    if 20 * t > n:
        raise ParamError(f"threshold t={t} exceeds n/20 = {n / 20:g}")
    params = CcbfParams(
        s=TAU_S_FACTOR * n,
        u=round_half_away(U_FACTOR * n / t),
        v=round_half_away(TAU_V_FACTOR * t),
        n=n,
        t=t,
        lambda_stat=lambda_stat,
    )
    failed = [name for name, ok in check_preconditions(params).items() if not ok]
    if failed:
        raise ParamError(f"parameters {params} violate: {', '.join(failed)}")
    return params


def flag_manual_params(params: CcbfParams) -> list[str]:
    """Names of accuracy preconditions a hand-picked parameter set violates."""
    return [name for name, ok in check_preconditions(params).items() if not ok]


@dataclass(frozen=True)
class TailThresholds:
    fp_safe_count: float
    fn_safe_count: float
    tau_upper: float


def tail_thresholds(t: int, lambda_stat: int) -> TailThresholds:
    """Complaint counts outside which TestCount errs with probability at most 2^-lambda."""
    if t < 1 or lambda_stat < 1:
        raise ParamError(f"need t >= 1 and lambda >= 1, got t={t}, lambda={lambda_stat}")
    root = math.sqrt(lambda_stat * t)
    fp = t - FP_SQRT_FACTOR * root
    if fp <= 0:
        warnings.warn(
            f"threshold t={t} is too small for lambda={lambda_stat}: no complaint count "
            "is guaranteed free of false positives",
            RuntimeWarning,
            stacklevel=2,
        )
    fn = 1.1 * t + 0.4 * lambda_stat + 0.7 * root
    return TailThresholds(fp, fn, TAU_UPPER_FACTOR * t)
