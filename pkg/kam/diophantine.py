"""Arithmetic of the frequency vector: Psi/Delta/Delta* tables, the truncated
tail integral used to pick Q0, and Q-approximations whose numerators form a
Z-basis of Z^n."""
import itertools
import logging
import math
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from .errors import (BudgetError, ConditionUnsatisfiableError, DomainError, EnumerationBudgetError,
                     ResonanceError, TableTooSmallError)
from .types import (ArithmeticProfile, BasisQuality, FrequencyVector, RationalBasis, RationalVector,
                    SearchBudget, TailEstimate)

logger = logging.getLogger('kam')


### Lattice enumeration ###


@lru_cache(maxsize=None)
def _ball_count(m: int, R: int) -> int:
    """Number of integer points in the m-dimensional l1 ball of radius R"""
    if R < 0:
        return 0
    if m == 0:
        return 1
    return sum(_ball_count(m - 1, R - abs(a)) for a in range(-R, R + 1))


def lattice_point_count(n: int, Q: int) -> int:
    """Nonzero k with |k|_1 <= Q, counted up to the sign k ~ -k"""
    return (_ball_count(n, int(Q)) - 1) // 2


def _ball(m: int, R: int) -> np.ndarray:
    if m == 1:
        return np.arange(-R, R + 1, dtype=np.int64)[:, None]
    parts = []
    for a in range(-R, R + 1):
        tail = _ball(m - 1, R - abs(a))
        parts.append(np.column_stack([np.full(len(tail), a, dtype=np.int64), tail]))
    return np.concatenate(parts)


def _half_ball_chunks(n: int, Q: int):
    """Yield the nonzero k with |k|_1 <= Q whose first nonzero entry is positive, chunked by k[0]"""
    for a in range(1, Q + 1):
        if n == 1:
            yield np.array([[a]], dtype=np.int64)
            continue
        tail = _ball(n - 1, Q - a)
        yield np.column_stack([np.full(len(tail), a, dtype=np.int64), tail])
    if n > 1:
        for chunk in _half_ball_chunks(n - 1, Q):
            yield np.column_stack([np.zeros(len(chunk), dtype=np.int64), chunk])


def _check_budget(n: int, Q: int, budget: SearchBudget):
    if n > budget.max_dim:
        raise EnumerationBudgetError(f'dimension n={n} exceeds the enumeration cap {budget.max_dim}')
    if Q > budget.max_k_norm:
        raise EnumerationBudgetError(f'|k|_1 <= {Q} exceeds the enumeration cap {budget.max_k_norm}')
    count = lattice_point_count(n, Q)
    if count > budget.max_lattice_points:
        raise EnumerationBudgetError(
            f'{count} lattice points for n={n}, Q={Q} exceed the cap {budget.max_lattice_points}')


def shell_minima(omega: FrequencyVector, Q: int, budget: Optional[SearchBudget] = None):
    """Smallest |k.omega| on each shell |k|_1 = L, L = 1..Q, with a minimizing k.

    Returns (values, minimizers) with values[L-1] the minimum over the shell L.
    Values below resonance_tol * |k|_1 count as exact zeros."""
    budget = budget or SearchBudget()
    n, Q = omega.n, int(Q)
    _check_budget(n, Q, budget)
    w = omega.array()
    best = np.full(Q + 1, np.inf)
    arg = np.zeros((Q + 1, n), dtype=np.int64)
    for chunk in _half_ball_chunks(n, Q):
        norms = np.abs(chunk).sum(axis=1)
        dots = np.abs(chunk @ w)
        dots[dots <= budget.resonance_tol * norms] = 0.0
        order = np.lexsort((dots, norms))
        shells, first = np.unique(norms[order], return_index=True)
        rows = order[first]
        better = dots[rows] < best[shells]
        best[shells[better]] = dots[rows][better]
        arg[shells[better]] = chunk[rows][better]
    return best[1:], arg[1:]


def worst_divisor(omega: FrequencyVector, Q: float, budget: Optional[SearchBudget] = None) -> Tuple[float, List[int]]:
    """min |k.omega| over 0 < |k|_1 <= floor(Q) and the first k that attains it"""
    if Q < 1:
        raise DomainError(f'Q must be at least 1, got {Q}')
    values, minimizers = shell_minima(omega, int(math.floor(Q)), budget)
    L = int(np.argmin(values))
    return float(values[L]), minimizers[L].tolist()


def psi(omega: FrequencyVector, Q: float, budget: Optional[SearchBudget] = None) -> float:
    """Psi(Q) = max |k.omega|^-1 over 0 < |k|_1 <= Q; +inf on a resonance"""
    value, _ = worst_divisor(omega, Q, budget)
    return math.inf if value == 0.0 else 1.0 / value


### Profile ###


def build_profile(omega: FrequencyVector, q_max: int, budget: Optional[SearchBudget] = None) -> ArithmeticProfile:
    values, minimizers = shell_minima(omega, q_max, budget)
    running = np.minimum.accumulate(values)
    if running[-1] == 0.0:
        Q = int(np.argmax(running == 0.0)) + 1
        k = minimizers[Q - 1].tolist()
        raise ResonanceError(f'k={k} annihilates omega0 (|k|_1 = {Q})', condition='non-resonance')
    # index of the shell attaining the running minimum, first one on ties
    attained = np.zeros(len(values), dtype=np.int64)
    for L in range(1, len(values)):
        attained[L] = L if values[L] < running[L - 1] else attained[L - 1]
    psi_table = 1.0 / running
    delta = np.arange(1, q_max + 1) * psi_table
    logger.info(f'Arithmetic profile up to Q={q_max}: Psi(Q_max)={psi_table[-1]:.6g}, Delta(Q_max)={delta[-1]:.6g}')
    return ArithmeticProfile(omega=omega, q_max=q_max, psi=psi_table.tolist(), delta=delta.tolist(),
                             minimizers=minimizers[attained].tolist())


def delta_star_array(profile: ArithmeticProfile, x) -> np.ndarray:
    """Largest tabulated Q with Delta(Q) <= x, elementwise"""
    x = np.asarray(x, dtype=float)
    delta = profile.delta_array()
    if np.any(x < delta[0]):
        raise DomainError(f'Delta* is undefined below Delta(1) = {delta[0]:.6g}')
    if np.any(x > delta[-1]):
        raise TableTooSmallError(f'x = {float(np.max(x)):.6g} exceeds Delta(Q_max) = {delta[-1]:.6g}; '
                                 f'raise q_max above {profile.q_max}')
    return np.searchsorted(delta, x, side='right')


def delta_star(profile: ArithmeticProfile, x: float) -> int:
    return int(delta_star_array(profile, x))


def bruno_russmann_tail(profile: ArithmeticProfile, Q0: int, x_cut: Optional[float] = None,
                        grid: int = 4000) -> TailEstimate:
    """1/Q0 + (ln 2)^-1 int_{Delta(Q0)}^{x_cut} dx / (x Delta*(x)).

    The integral is a composite trapezoid in u = ln x; the true integral runs to
    infinity, so the estimate is labelled as truncated."""
    Q0 = int(Q0)
    if not 1 <= Q0 <= profile.q_max:
        raise DomainError(f'Q0={Q0} outside the table 1..{profile.q_max}')
    lo = profile.Delta(Q0)
    x_cut = profile.delta[-1] if x_cut is None else float(x_cut)
    if x_cut < lo:
        raise DomainError(f'x_cut={x_cut:.6g} below Delta(Q0)={lo:.6g}')
    if x_cut > profile.delta[-1]:
        raise TableTooSmallError(f'x_cut={x_cut:.6g} exceeds Delta(Q_max)={profile.delta[-1]:.6g}')
    value = 1.0 / Q0
    if x_cut > lo:
        u = np.linspace(math.log(lo), math.log(x_cut), grid)
        x = np.exp(u)
        x[0], x[-1] = lo, x_cut
        value += trapezoid(1.0 / delta_star_array(profile, x), u) / math.log(2.0)
    return TailEstimate(Q0=Q0, x_cut=x_cut, value=float(value))


def choose_q0(profile: ArithmeticProfile, s: float, C: float, x_cut: Optional[float] = None,
              grid: int = 4000) -> TailEstimate:
    """Smallest Q0 with tail(Q0) <= s/(2C)"""
    if not 0 < s <= 1:
        raise DomainError(f's must lie in (0, 1], got {s}')
    if C < 1:
        raise DomainError(f'C must be at least 1, got {C}')
    x_cut = profile.delta[-1] if x_cut is None else float(x_cut)
    threshold = s / (2.0 * C)
    best = None
    for Q0 in range(1, profile.q_max + 1):
        if profile.Delta(Q0) > x_cut:
            break
        estimate = bruno_russmann_tail(profile, Q0, x_cut, grid)
        if best is None or estimate.value < best.value:
            best = estimate
        if estimate.value <= threshold:
            logger.info(f'chooseQ0: Q0={Q0}, tail={estimate.value:.6g} <= s/(2C)={threshold:.6g}')
            return estimate
    achieved = best.value if best else math.inf
    raise ConditionUnsatisfiableError(
        f'no Q0 <= {profile.q_max} meets tail <= s/(2C) = {threshold:.6g}; best tail {achieved:.6g}'
        f'{f" at Q0={best.Q0}" if best else ""}',
        condition='Q0 tail', measured=achieved, threshold=threshold)


def profile_table(profile: ArithmeticProfile, x_cut: Optional[float] = None, grid: int = 4000) -> pd.DataFrame:
    """Columns Q, Psi, Delta, tail; tail is empty where Delta(Q) > x_cut"""
    x_cut = profile.delta[-1] if x_cut is None else float(x_cut)
    tails = [bruno_russmann_tail(profile, Q, x_cut, grid).value if profile.Delta(Q) <= x_cut else np.nan
             for Q in range(1, profile.q_max + 1)]
    return pd.DataFrame({'Q': np.arange(1, profile.q_max + 1), 'Psi': profile.psi,
                         'Delta': profile.delta, 'tail': tails})


### Rational bases ###


def integer_determinant(rows) -> int:
    """Exact determinant by fraction-free (Bareiss) elimination on Python ints"""
    M = [[int(x) for x in row] for row in rows]
    n = len(M)
    if n == 0:
        return 1
    sign, prev = 1, 1
    for i in range(n - 1):
        if M[i][i] == 0:
            swap = next((r for r in range(i + 1, n) if M[r][i] != 0), None)
            if swap is None:
                return 0
            M[i], M[swap] = M[swap], M[i]
            sign = -sign
        for r in range(i + 1, n):
            for c in range(i + 1, n):
                M[r][c] = (M[r][c] * M[i][i] - M[r][i] * M[i][c]) // prev
        prev = M[i][i]
    return sign * M[n - 1][n - 1]


def _candidates(w: np.ndarray, q_top: int, Q: float, budget: SearchBudget):
    """Rational vectors p/q near omega for q <= q_top, sorted by certificate q Q |omega - p/q|"""
    n = len(w)
    qs = np.arange(1, q_top + 1, dtype=np.int64)
    base = np.rint(qs[:, None] * w[None, :]).astype(np.int64)
    base[:, 0] = qs
    R = budget.neighbor_radius
    offsets = np.array(list(itertools.product(range(-R, R + 1), repeat=n - 1)), dtype=np.int64)
    offsets = np.column_stack([np.zeros(len(offsets), dtype=np.int64), offsets])
    nums = (base[:, None, :] + offsets[None, :, :]).reshape(-1, n)
    q = np.repeat(qs, len(offsets))
    errors = np.max(np.abs(w[None, :] - nums / q[:, None]), axis=1)
    resonant = errors <= budget.resonance_tol
    if resonant.any():
        hit = int(np.argmax(resonant))
        raise ResonanceError(f'omega0 = {nums[hit].tolist()}/{int(q[hit])} is rational', condition='non-resonance')
    cert = q * Q * errors
    keep = cert <= budget.cert_max
    nums, q, errors, cert = nums[keep], q[keep], errors[keep], cert[keep]
    order = np.lexsort(tuple(nums[:, c] for c in range(n - 1, -1, -1)) + (cert,))
    return nums[order], q[order], errors[order], cert[order]


def _unimodular_search(nums: np.ndarray, n: int, limit: Optional[int]):
    """First n-subset (by largest index, then lexicographically) with determinant +-1"""
    best, evaluated = None, 0
    for m in range(n - 1, len(nums)):
        for combo in itertools.combinations(range(m), n - 1):
            if limit is not None and evaluated >= limit:
                return None, best
            evaluated += 1
            idx = combo + (m,)
            det = integer_determinant(nums[list(idx)])
            if abs(det) == 1:
                return idx, det
            if det != 0 and (best is None or abs(det) < best):
                best = abs(det)
    return None, best


def rational_basis(omega: FrequencyVector, Q: float, budget: Optional[SearchBudget] = None) -> RationalBasis:
    """n Q-approximations v_j = p_j/q_j of omega whose numerator matrix is unimodular.

    Candidates are the roundings of q*omega (and their neighbours) for
    q <= ceil(c_den Psi(Q)), ranked by q Q |omega - v|. The best few are searched
    for a unimodular n-subset, then all of them within the exhaustive budget.
    The returned basis is ordered from the best approximation to the worst."""
    budget = budget or SearchBudget()
    if Q < max(1.0, budget.q_min):
        raise DomainError(f'Q={Q} below the minimum scale {max(1.0, budget.q_min)}')
    n = omega.n
    value, k = worst_divisor(omega, Q, budget)
    if value == 0.0:
        raise ResonanceError(f'k={k} annihilates omega0', condition='non-resonance')
    q_top = max(n, int(math.ceil(budget.c_den / value)))
    nums, qs, errors, certs = _candidates(omega.array(), q_top, Q, budget)
    logger.debug(f'rationalBasis Q={Q}: {len(nums)} candidates with q <= {q_top}')

    idx, det = _unimodular_search(nums[:budget.top_candidates], n, None)
    if idx is None and len(nums) > budget.top_candidates:
        idx, det = _unimodular_search(nums, n, budget.exhaustive_limit)
    if idx is None:
        raise BudgetError(f'no unimodular basis among {len(nums)} candidates at Q={Q}; '
                          f'best |det| = {det}', best_determinant=det)

    idx = sorted(idx, key=lambda i: (errors[i], qs[i]))
    w = omega.array()
    vectors, quality = [], []
    for i in idx:
        vector = RationalVector(q=int(qs[i]), numerators=nums[i].tolist())
        error = float(np.max(np.abs(w - vector.value())))
        vectors.append(vector)
        quality.append(BasisQuality(q=vector.q, approx_error=error, certificate=vector.q * Q * error))
    determinant = integer_determinant([v.numerators for v in vectors])
    if abs(determinant) != 1:
        raise BudgetError(f'basis determinant {determinant} is not +-1', best_determinant=abs(determinant))
    basis = RationalBasis(vectors=vectors, quality=quality, Q=float(Q), determinant=determinant)
    logger.info(f'rationalBasis Q={Q}: q={[v.q for v in vectors]}, '
                f'max certificate {basis.max_certificate():.3g}, det {determinant}')
    return basis
