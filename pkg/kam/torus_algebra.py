"""Truncated Fourier-Taylor expansions on T^n x actions x parameter offset.

A FourierTaylor holds

    f(I, theta, w) = sum c[k, alpha, beta] exp(2 pi i k.theta) I^alpha w^beta

with w = omega - omega0, as two numpy arrays: `keys` (m x 3n integers, the
columns k | alpha | beta) and `coeffs` (m complex numbers). Keys are kept
unique and sorted lexicographically, so every sum over coefficients runs in
the same order on every run.

Norms are weighted l1 majorant norms

    |f|_{r,s,h} = sum |c| exp(2 pi |k|_1 s) r^|alpha| h^|beta|

which dominate the sup norm on the complex domain and are submultiplicative.
Brackets follow {f, g} = d_theta f . d_I g - d_I f . d_theta g, so that
dg/dt = {g, H} along the flow of H and {F, v.I} = rhs for the solution F of
the homological equation.
"""
import logging
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DomainError, HomologicalPreconditionError, NumericalError, TruncationBudgetError
from .types import Caps, DomainParams, RationalVector, ShrinkDirection

logger = logging.getLogger('kam')

TWO_PI = 2.0 * np.pi

# Max number of pairwise key sums materialized at once in a product
PRODUCT_CHUNK = 2_000_000
# Max number of (point, term) pairs materialized at once in an evaluation
EVAL_CHUNK = 1_000_000


### Key packing ###


def _pack(keys: np.ndarray) -> np.ndarray:
    """Mixed-radix code of each key row, ordered like the rows lexicographically"""
    lo = keys.min(axis=0)
    spans = (keys.max(axis=0) - lo + 1).astype(np.int64)
    if float(np.prod(spans.astype(float))) >= 2.0 ** 62:
        raise NumericalError('key range too wide to pack into int64 codes')
    codes = np.zeros(len(keys), dtype=np.int64)
    for col in range(keys.shape[1]):
        codes = codes * spans[col] + (keys[:, col] - lo[col])
    return codes


def _aggregate(keys: np.ndarray, coeffs: np.ndarray):
    """Sum coefficients of equal keys; returns sorted unique keys with nonzero sums"""
    if len(keys) == 0:
        return keys, coeffs
    codes = _pack(keys)
    _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    size = len(first)
    re = np.bincount(inverse, weights=coeffs.real, minlength=size)
    im = np.bincount(inverse, weights=coeffs.imag, minlength=size)
    keep = (re != 0.0) | (im != 0.0)
    return keys[first][keep], (re + 1j * im)[keep]


def _join(a: Caps, b: Caps) -> Caps:
    return Caps(cutoff_k=max(a.cutoff_k, b.cutoff_k), deg_i=max(a.deg_i, b.deg_i),
                deg_w=max(a.deg_w, b.deg_w))


def _as_index(values, n, name) -> np.ndarray:
    if values is None:
        return np.zeros(n, dtype=np.int64)
    arr = np.asarray(values, dtype=np.int64).reshape(-1)
    if len(arr) != n:
        raise ValueError(f'{name} must have length {n}, got {len(arr)}')
    return arr


class Truncated(NamedTuple):
    kept: "FourierTaylor"
    dropped: "FourierTaylor"


class Linearized(NamedTuple):
    affine: "FourierTaylor"
    tail: "FourierTaylor"
    tail_norm: float  # majorant norm of the tail on the shrunken action domain
    bound: float  # c^2 (1-c)^-1 |f|


class FourierTaylor:
    __slots__ = ('n', 'caps', 'keys', 'coeffs', 'real')

    def __init__(self, n: int, keys, coeffs, caps: Caps, real: bool = True, normalized: bool = False):
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3 * n)
        coeffs = np.asarray(coeffs, dtype=np.complex128).reshape(-1)
        if len(keys) != len(coeffs):
            raise ValueError('keys and coeffs differ in length')
        if not normalized:
            keys, coeffs = _aggregate(keys, coeffs)
            if real and len(keys):
                mirrored = np.concatenate([keys[:, :n] * -1, keys[:, n:]], axis=1)
                keys, coeffs = _aggregate(np.concatenate([keys, mirrored]),
                                          np.concatenate([coeffs, np.conj(coeffs)]))
                coeffs = 0.5 * coeffs
        self.n = n
        self.caps = caps
        self.keys = keys
        self.coeffs = coeffs
        self.real = bool(real)
        if not normalized and len(keys) and not self._within(caps).all():
            raise ValueError('terms beyond the truncation caps; use truncate()')

    ### Constructors ###

    @classmethod
    def zero(cls, n: int, caps: Caps, real: bool = True) -> "FourierTaylor":
        return cls(n, np.zeros((0, 3 * n), dtype=np.int64), np.zeros(0, dtype=complex), caps, real, normalized=True)

    @classmethod
    def monomial(cls, n, caps, k=None, alpha=None, beta=None, coeff=1.0, real=False) -> "FourierTaylor":
        key = np.concatenate([_as_index(k, n, 'k'), _as_index(alpha, n, 'alpha'), _as_index(beta, n, 'beta')])
        return cls(n, key[None, :], [coeff], caps, real)

    @classmethod
    def constant(cls, n, value, caps) -> "FourierTaylor":
        return cls.monomial(n, caps, coeff=value, real=np.isrealobj(value) or np.imag(value) == 0)

    @classmethod
    def from_terms(cls, n, terms: Iterable, caps: Caps, real: bool = True) -> "FourierTaylor":
        """terms: iterable of (k, alpha, beta, coeff)"""
        keys, coeffs = [], []
        for k, alpha, beta, coeff in terms:
            keys.append(np.concatenate([_as_index(k, n, 'k'), _as_index(alpha, n, 'alpha'),
                                        _as_index(beta, n, 'beta')]))
            coeffs.append(coeff)
        if not keys:
            return cls.zero(n, caps, real)
        return cls(n, np.array(keys), coeffs, caps, real)

    @classmethod
    def action(cls, n, l, caps) -> "FourierTaylor":
        """The coordinate function I_l"""
        alpha = np.zeros(n, dtype=np.int64)
        alpha[l] = 1
        return cls.monomial(n, caps, alpha=alpha, real=True)

    @classmethod
    def param(cls, n, l, caps) -> "FourierTaylor":
        """The parameter offset w_l = omega_l - omega0_l"""
        beta = np.zeros(n, dtype=np.int64)
        beta[l] = 1
        return cls.monomial(n, caps, beta=beta, real=True)

    @classmethod
    def linear_form(cls, vector, caps, param=False) -> "FourierTaylor":
        """sum_l vector_l I_l, or sum_l vector_l w_l when `param`"""
        vector = np.asarray(vector, dtype=float)
        n = len(vector)
        eye = np.eye(n, dtype=np.int64)
        zeros = np.zeros((n, n), dtype=np.int64)
        keys = np.concatenate([zeros, zeros, eye] if param else [zeros, eye, zeros], axis=1)
        return cls(n, keys, vector.astype(complex), caps, real=True)

    @classmethod
    def cos_mode(cls, n, k, caps, amplitude=1.0, alpha=None, beta=None) -> "FourierTaylor":
        """amplitude * cos(2 pi k.theta) * I^alpha * w^beta"""
        k = _as_index(k, n, 'k')
        a, b = _as_index(alpha, n, 'alpha'), _as_index(beta, n, 'beta')
        return cls.from_terms(n, [(k, a, b, amplitude / 2), (-k, a, b, amplitude / 2)], caps)

    @classmethod
    def sin_mode(cls, n, k, caps, amplitude=1.0, alpha=None, beta=None) -> "FourierTaylor":
        k = _as_index(k, n, 'k')
        a, b = _as_index(alpha, n, 'alpha'), _as_index(beta, n, 'beta')
        return cls.from_terms(n, [(k, a, b, -0.5j * amplitude), (-k, a, b, 0.5j * amplitude)], caps)

    def _like(self, keys, coeffs, caps=None, real=None, normalized=True) -> "FourierTaylor":
        return FourierTaylor(self.n, keys, coeffs, caps or self.caps, self.real if real is None else real,
                             normalized=normalized)

    ### Views ###

    @property
    def k(self) -> np.ndarray:
        return self.keys[:, :self.n]

    @property
    def alpha(self) -> np.ndarray:
        return self.keys[:, self.n:2 * self.n]

    @property
    def beta(self) -> np.ndarray:
        return self.keys[:, 2 * self.n:]

    def __len__(self):
        return len(self.coeffs)

    def __repr__(self):
        return (f'FourierTaylor(n={self.n}, terms={len(self)}, K={self.caps.cutoff_k}, '
                f'degI={self.caps.deg_i}, degW={self.caps.deg_w}, real={self.real})')

    def is_zero(self) -> bool:
        return len(self) == 0

    def coefficient(self, k=None, alpha=None, beta=None) -> complex:
        key = np.concatenate([_as_index(k, self.n, 'k'), _as_index(alpha, self.n, 'alpha'),
                              _as_index(beta, self.n, 'beta')])
        hits = np.nonzero((self.keys == key).all(axis=1))[0]
        return complex(self.coeffs[hits[0]]) if len(hits) else 0j

    def _within(self, caps: Caps) -> np.ndarray:
        return ((np.abs(self.k).sum(axis=1) <= caps.cutoff_k)
                & (self.alpha.sum(axis=1) <= caps.deg_i)
                & (self.beta.sum(axis=1) <= caps.deg_w))

    def select(self, mask) -> "FourierTaylor":
        return self._like(self.keys[mask], self.coeffs[mask])

    def truncate(self, caps: Optional[Caps] = None) -> Truncated:
        caps = caps or self.caps
        mask = self._within(caps)
        return Truncated(self._like(self.keys[mask], self.coeffs[mask], caps=caps), self.select(~mask))

    def prune(self, threshold: float, domain: DomainParams) -> Truncated:
        """Drop terms whose weighted contribution on `domain` is below `threshold`"""
        if threshold <= 0 or not len(self):
            return Truncated(self, self.select(np.zeros(len(self), dtype=bool)))
        mask = np.abs(self.coeffs) * self.weights(domain.r, domain.s, domain.h) >= threshold
        return Truncated(self.select(mask), self.select(~mask))

    ### Arithmetic ###

    def _combine(self, other: "FourierTaylor", sign: float) -> "FourierTaylor":
        if self.n != other.n:
            raise ValueError(f'dimension mismatch: {self.n} vs {other.n}')
        keys = np.concatenate([self.keys, other.keys])
        coeffs = np.concatenate([self.coeffs, sign * other.coeffs])
        keys, coeffs = _aggregate(keys, coeffs)
        return FourierTaylor(self.n, keys, coeffs, _join(self.caps, other.caps), self.real and other.real,
                             normalized=True)

    def __add__(self, other):
        if isinstance(other, FourierTaylor):
            return self._combine(other, 1.0)
        return self._combine(FourierTaylor.constant(self.n, other, self.caps), 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, FourierTaylor):
            return self._combine(other, -1.0)
        return self._combine(FourierTaylor.constant(self.n, other, self.caps), -1.0)

    def __neg__(self):
        return self._like(self.keys, -self.coeffs)

    def __mul__(self, scalar):
        if isinstance(scalar, FourierTaylor):
            raise TypeError('use multiply() for products of expansions; it reports the truncation')
        if scalar == 0:
            return FourierTaylor.zero(self.n, self.caps, self.real)
        real = self.real and bool(np.imag(scalar) == 0)
        return self._like(self.keys, self.coeffs * scalar, real=real)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / scalar)

    def multiply(self, other: "FourierTaylor", caps: Optional[Caps] = None) -> Truncated:
        """Product truncated to `caps` (default: the joined caps of both factors)"""
        if self.n != other.n:
            raise ValueError(f'dimension mismatch: {self.n} vs {other.n}')
        caps = caps or _join(self.caps, other.caps)
        real = self.real and other.real
        if not len(self) or not len(other):
            empty = FourierTaylor.zero(self.n, caps, real)
            return Truncated(empty, empty)
        chunk = max(1, PRODUCT_CHUNK // len(other))
        parts_k, parts_c = [], []
        for start in range(0, len(self), chunk):
            ka = self.keys[start:start + chunk]
            ca = self.coeffs[start:start + chunk]
            keys = (ka[:, None, :] + other.keys[None, :, :]).reshape(-1, 3 * self.n)
            coeffs = (ca[:, None] * other.coeffs[None, :]).reshape(-1)
            keys, coeffs = _aggregate(keys, coeffs)
            parts_k.append(keys)
            parts_c.append(coeffs)
        keys, coeffs = (parts_k[0], parts_c[0]) if len(parts_k) == 1 else \
            _aggregate(np.concatenate(parts_k), np.concatenate(parts_c))
        full = FourierTaylor(self.n, keys, coeffs, _join(caps, self.caps.widened(other.caps)), real)
        return full.truncate(caps)

    ### Derivatives ###

    def d_theta(self, l: int) -> "FourierTaylor":
        coeffs = self.coeffs * (2j * np.pi * self.k[:, l])
        mask = self.k[:, l] != 0
        return self._like(self.keys[mask], coeffs[mask])

    def _d_power(self, col: int) -> "FourierTaylor":
        powers = self.keys[:, col]
        mask = powers > 0
        keys = self.keys[mask].copy()
        keys[:, col] -= 1
        return self._like(keys, self.coeffs[mask] * powers[mask])

    def d_action(self, l: int) -> "FourierTaylor":
        return self._d_power(self.n + l)

    def d_param(self, l: int) -> "FourierTaylor":
        return self._d_power(2 * self.n + l)

    ### Norms ###

    def weights(self, r: float, s: float, h: float) -> np.ndarray:
        return (np.exp(TWO_PI * s * np.abs(self.k).sum(axis=1))
                * float(r) ** self.alpha.sum(axis=1) * float(h) ** self.beta.sum(axis=1))

    def norm_at(self, r: float, s: float, h: float) -> float:
        if not len(self):
            return 0.0
        return float(np.sum(np.abs(self.coeffs) * self.weights(r, s, h)))

    def norm(self, domain: DomainParams) -> float:
        return self.norm_at(domain.r, domain.s, domain.h)

    def max_abs_coefficient(self) -> float:
        return float(np.max(np.abs(self.coeffs))) if len(self) else 0.0

    ### Projections ###

    def average(self) -> "FourierTaylor":
        """Full torus average: the k = 0 coefficients"""
        return self.select((self.k == 0).all(axis=1))

    def _resonant_mask(self, v: RationalVector) -> np.ndarray:
        return self.k @ np.asarray(v.numerators, dtype=np.int64) == 0

    def average_along(self, v: RationalVector) -> "FourierTaylor":
        """Time average along the q-periodic flow theta + t q v: modes with k.(qv) = 0"""
        return self.select(self._resonant_mask(v))

    def off_average_along(self, v: RationalVector) -> "FourierTaylor":
        """f - average_along(f, v), as an exact split of the terms"""
        return self.select(~self._resonant_mask(v))

    def affine_part(self) -> Truncated:
        mask = self.alpha.sum(axis=1) <= 1
        return Truncated(self.select(mask), self.select(~mask))

    def at_zero_action(self) -> "FourierTaylor":
        return self.select(self.alpha.sum(axis=1) == 0)

    def action_coefficient(self, l: int) -> "FourierTaylor":
        """The coefficient of I_l in the affine part, as a function of (theta, w)"""
        target = np.zeros(self.n, dtype=np.int64)
        target[l] = 1
        mask = (self.alpha == target).all(axis=1)
        keys = self.keys[mask].copy()
        keys[:, self.n:2 * self.n] = 0
        return self._like(keys, self.coeffs[mask])

    def at_params(self, w) -> "FourierTaylor":
        """Fix the parameter offset to the numeric vector w"""
        w = np.asarray(w, dtype=complex).reshape(self.n)
        values = self.coeffs * np.prod(w[None, :] ** self.beta, axis=1)
        keys = self.keys.copy()
        keys[:, 2 * self.n:] = 0
        real = self.real and bool(np.all(np.imag(w) == 0))
        return FourierTaylor(self.n, keys, values, self.caps, real)

    ### Evaluation ###

    def evaluate(self, I, theta, w=None) -> np.ndarray:
        """Values at the points (I[p], theta[p], w[p]); arrays of shape (P, n)"""
        theta = np.atleast_2d(np.asarray(theta))
        points = theta.shape[0]
        I = np.zeros((points, self.n)) if I is None else np.atleast_2d(np.asarray(I))
        w = np.zeros((points, self.n)) if w is None else np.atleast_2d(np.asarray(w))
        I = np.broadcast_to(I, (points, self.n))
        w = np.broadcast_to(w, (points, self.n))
        out = np.zeros(points, dtype=complex)
        if not len(self):
            return out
        step = max(1, EVAL_CHUNK // len(self))
        k = self.k.astype(float)
        for start in range(0, points, step):
            sl = slice(start, start + step)
            phase = np.exp(2j * np.pi * (theta[sl] @ k.T))
            mono_i = np.prod(I[sl][:, None, :] ** self.alpha[None, :, :], axis=2)
            mono_w = np.prod(w[sl][:, None, :] ** self.beta[None, :, :], axis=2)
            out[sl] = (phase * mono_i * mono_w) @ self.coeffs
        return out

    ### Serialization ###

    def to_json(self) -> dict:
        return {
            'n': self.n,
            'cutoffK': self.caps.cutoff_k,
            'degI': self.caps.deg_i,
            'degW': self.caps.deg_w,
            'real': bool(self.real),
            'terms': [
                {'k': key[:self.n].tolist(), 'alpha': key[self.n:2 * self.n].tolist(),
                 'beta': key[2 * self.n:].tolist(), 're': float(c.real), 'im': float(c.imag)}
                for key, c in zip(self.keys, self.coeffs)
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "FourierTaylor":
        n = int(data['n'])
        caps = Caps(cutoff_k=data['cutoffK'], deg_i=data['degI'], deg_w=data['degW'])
        terms = [(t['k'], t['alpha'], t['beta'], complex(t['re'], t['im'])) for t in data['terms']]
        return cls.from_terms(n, terms, caps, real=bool(data.get('real', True)))


### Operations ###


def majorant_norm(f: FourierTaylor, d: DomainParams) -> float:
    return f.norm(d)


def sum_series(items: Sequence[FourierTaylor], n: int, caps: Caps) -> FourierTaylor:
    """Sum in one aggregation pass, in the given order"""
    items = [f for f in items if len(f)]
    if not items:
        return FourierTaylor.zero(n, caps)
    keys, coeffs = _aggregate(np.concatenate([f.keys for f in items]), np.concatenate([f.coeffs for f in items]))
    joined = caps
    for f in items:
        joined = _join(joined, f.caps)
    return FourierTaylor(n, keys, coeffs, joined, all(f.real for f in items), normalized=True)


def poisson_bracket(f: FourierTaylor, g: FourierTaylor) -> Truncated:
    """{f, g} = d_theta f . d_I g - d_I f . d_theta g, truncated to the joined caps"""
    if f.n != g.n:
        raise ValueError(f'dimension mismatch: {f.n} vs {g.n}')
    caps = _join(f.caps, g.caps)
    kept, dropped = [], []
    for l in range(f.n):
        for a, b, sign in ((f.d_theta(l), g.d_action(l), 1.0), (f.d_action(l), g.d_theta(l), -1.0)):
            if not len(a) or not len(b):
                continue
            product = a.multiply(b, caps)
            kept.append(product.kept * sign)
            dropped.append(product.dropped * sign)
    return Truncated(sum_series(kept, f.n, caps), sum_series(dropped, f.n, caps))


def average_full(f: FourierTaylor) -> FourierTaylor:
    return f.average()


def average_along(f: FourierTaylor, v: RationalVector) -> FourierTaylor:
    return f.average_along(v)


def solve_homological(rhs: FourierTaylor, v: RationalVector) -> FourierTaylor:
    """F with {F, v.I} = rhs: F_k = rhs_k / (2 pi i k.v).

    Every divisor satisfies |k.v| >= 1/q, hence |F| <= q |rhs|."""
    numerators = np.asarray(v.numerators, dtype=np.int64)
    dots = rhs.k @ numerators
    resonant = dots == 0
    if resonant.any():
        bad = rhs.k[resonant][0].tolist()
        raise HomologicalPreconditionError(
            f'right-hand side has a nonzero coefficient on the averaged mode k={bad} (k.qv = 0)', mode=bad)
    coeffs = rhs.coeffs * v.q / (2j * np.pi * dots)
    return rhs._like(rhs.keys, coeffs)


def linearize_in_i(f: FourierTaylor, d: DomainParams, c: float) -> Linearized:
    """Split f into its part affine in I and the tail; measure the tail at radius c*r"""
    if not 0 < c < 1:
        raise DomainError(f'shrink factor must lie in (0, 1), got {c}')
    affine, tail = f.affine_part()
    tail_norm = tail.norm_at(c * d.r, d.s, d.h)
    bound = c * c / (1.0 - c) * f.norm(d)
    if tail_norm > bound * (1 + 1e-12):
        raise NumericalError(f'action tail {tail_norm:.3e} exceeds c^2(1-c)^-1|f| = {bound:.3e}')
    return Linearized(affine, tail, tail_norm, bound)


def shrink_cauchy_bound(f: FourierTaylor, d: DomainParams, direction: ShrinkDirection, amount: float) -> float:
    """Majorant norm of the first derivative (max over components) on the domain shrunk by `amount`"""
    direction = ShrinkDirection(direction)
    size = {ShrinkDirection.action: d.r, ShrinkDirection.angle: d.s, ShrinkDirection.param: d.h}[direction]
    if not 0 < amount < size:
        raise DomainError(f'shrink amount {amount} must lie in (0, {size}) for direction {direction.value}')
    r, s, h = d.r, d.s, d.h
    if direction == ShrinkDirection.action:
        derivs, r = [f.d_action(l) for l in range(f.n)], r - amount
    elif direction == ShrinkDirection.angle:
        derivs, s = [f.d_theta(l) for l in range(f.n)], s - amount
    else:
        derivs, h = [f.d_param(l) for l in range(f.n)], h - amount
    bound = max(g.norm_at(r, s, h) for g in derivs)
    cauchy = f.norm(d) / amount
    if bound > cauchy * (1 + 1e-12):
        raise NumericalError(f'derivative bound {bound:.3e} above Cauchy estimate {cauchy:.3e}')
    return bound


def substitute_params(f: FourierTaylor, delta: Sequence[FourierTaylor]) -> Truncated:
    """f(I, theta, w + delta(w)) for parameter-only expansions delta_l(w)"""
    n, caps = f.n, f.caps
    if not len(f) or all(not len(g) for g in delta):
        return Truncated(f, FourierTaylor.zero(n, caps))
    dropped = []
    ys = [FourierTaylor.param(n, l, caps) + delta[l] for l in range(n)]
    max_power = f.beta.max(axis=0) if len(f) else np.zeros(n, dtype=np.int64)
    powers = []
    for l in range(n):
        table = [FourierTaylor.constant(n, 1.0, caps)]
        for _ in range(int(max_power[l])):
            product = table[-1].multiply(ys[l], caps)
            table.append(product.kept)
            dropped.append(product.dropped)
        powers.append(table)
    betas, inverse = np.unique(f.beta, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    pieces = []
    for index, beta in enumerate(betas):
        mask = inverse == index
        keys = f.keys[mask].copy()
        keys[:, 2 * n:] = 0
        part = f._like(keys, f.coeffs[mask])
        factor = None
        for l in range(n):
            if beta[l] == 0:
                continue
            if factor is None:
                factor = powers[l][beta[l]]
            else:
                product = factor.multiply(powers[l][beta[l]], caps)
                factor = product.kept
                dropped.append(product.dropped)
        if factor is None:
            pieces.append(part)
            continue
        product = part.multiply(factor, caps)
        pieces.append(product.kept)
        dropped.append(product.dropped)
    return Truncated(sum_series(pieces, n, caps), sum_series(dropped, n, caps))


### Lie series ###


class LieResult(NamedTuple):
    value: FourierTaylor
    order: int
    dropped: FourierTaylor
    last_norm: float


def lie_sum(term: FourierTaylor, F: FourierTaylor, order: int, domain: DomainParams, tol: float,
            max_order: int) -> LieResult:
    """Sum term + L term/(order+1) + ..., where L g = {g, F} and `term` is T_order = L^order g/order!"""
    n, caps = term.n, _join(term.caps, F.caps)
    total, dropped = [term], []
    last = term.norm(domain)
    m = order
    while last > tol:
        if m >= max_order:
            raise TruncationBudgetError(
                f'Lie series not below {tol:.2e} after order {m} (last term {last:.2e})')
        m += 1
        bracket = poisson_bracket(term, F)
        term = bracket.kept / m
        dropped.append(bracket.dropped / m)
        total.append(term)
        last = term.norm(domain)
    return LieResult(sum_series(total, n, caps), m, sum_series(dropped, n, caps), last)


def lie_series(g: FourierTaylor, F: FourierTaylor, domain: DomainParams, tol: float, max_order: int) -> LieResult:
    """g o X^1_F = sum_m L_F^m g / m!"""
    if not len(F):
        return LieResult(g, 0, FourierTaylor.zero(g.n, g.caps), 0.0)
    return lie_sum(g, F, 0, domain, tol, max_order)


def lie_series_angle(l: int, F: FourierTaylor, domain: DomainParams, tol: float, max_order: int) -> LieResult:
    """Displacement theta_l o X^1_F - theta_l; the first Lie derivative of theta_l is d_{I_l} F"""
    first = F.d_action(l)
    if not len(first):
        return LieResult(FourierTaylor.zero(F.n, F.caps), 0, FourierTaylor.zero(F.n, F.caps), 0.0)
    return lie_sum(first, F, 1, domain, tol, max_order)


### Hamiltonians with parameters ###


class ParamHamiltonian:
    """H(I, theta, omega) = e(omega) + omega.I + P(I, theta, omega), omega = omega0 + w"""

    def __init__(self, omega0, e: FourierTaylor, P: FourierTaylor):
        self.omega0 = np.asarray(omega0, dtype=float)
        self.e = e
        self.P = P
        self.n = len(self.omega0)

    @property
    def caps(self) -> Caps:
        return self.P.caps

    def normal_form(self) -> FourierTaylor:
        caps = self.P.caps
        omega_i = FourierTaylor.linear_form(self.omega0, caps)
        w_i = sum_series([FourierTaylor.monomial(self.n, caps, alpha=np.eye(self.n, dtype=np.int64)[l],
                                                 beta=np.eye(self.n, dtype=np.int64)[l], real=True)
                          for l in range(self.n)], self.n, caps)
        return sum_series([self.e, omega_i, w_i], self.n, caps)

    def full(self) -> FourierTaylor:
        return self.normal_form() + self.P

    def at_params(self, w) -> FourierTaylor:
        """The autonomous Hamiltonian in (I, theta) for the fixed parameter omega0 + w"""
        return self.full().at_params(w)
