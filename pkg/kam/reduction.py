"""From a concrete Hamiltonian h(p) + eps f(p, q) to the parameterized form
e(w) + (omega0 + w).I + P(I, theta, w), placement of the computed torus back
in (p, q), and its dynamical verification.

Angles are measured in turns (period 1) and Hamilton's equations read
dq/dt = dH/dp, dp/dt = -dH/dq.
"""
import logging
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import root
from tqdm import tqdm

from .errors import DomainError, EpsilonTooLargeError, NondegeneracyError, PlacementError
from .kam_step import check_condition
from .torus_algebra import FourierTaylor, ParamHamiltonian, sum_series
from .types import (Caps, ConstantsConfig, DomainParams, FrequencyVector, HamiltonianConfig, ReductionRecipe,
                    TrigKind, VerificationReport, VerifyConfig)
from .utils import wrap_angle

logger = logging.getLogger('kam')

TWO_PI = 2.0 * np.pi

# margin applied to sampled suprema
SAFETY = 1.05


def _monomials(points: np.ndarray, powers: np.ndarray) -> np.ndarray:
    """p^a for every point (rows) and exponent (rows of powers); shape (P, T)"""
    if not len(powers):
        return np.zeros((len(points), 0), dtype=points.dtype)
    return np.prod(points[:, None, :] ** powers[None, :, :], axis=2)


class IntegrableSystem:
    """H(p, q) = omega0.p + sum_t c_t p^a_t + eps sum_u c_u p^b_u trig(2 pi k_u.q)"""

    def __init__(self, omega0, h_powers, h_coeffs, f_k, f_powers, f_coeffs, f_kinds, epsilon: float,
                 action_box: float = 0.05, nondegen_cap: float = 1e8):
        self.omega0 = np.asarray(omega0, dtype=float)
        self.n = n = len(self.omega0)
        self.h_powers = np.asarray(h_powers, dtype=np.int64).reshape(-1, n)
        self.h_coeffs = np.asarray(h_coeffs, dtype=float).reshape(-1)
        if len(self.h_powers) and self.h_powers.sum(axis=1).min() < 2:
            raise DomainError('h terms must have degree >= 2; the linear part is omega0.p')
        self.f_k = np.asarray(f_k, dtype=np.int64).reshape(-1, n)
        self.f_powers = np.asarray(f_powers, dtype=np.int64).reshape(-1, n)
        self.f_coeffs = np.asarray(f_coeffs, dtype=float).reshape(-1)
        self.f_sin = np.array([TrigKind(kind) == TrigKind.sin for kind in f_kinds], dtype=bool)
        self.epsilon = float(epsilon)
        self.action_box = float(action_box)
        self.nondegen_cap = float(nondegen_cap)

    @classmethod
    def from_config(cls, omega: FrequencyVector, cfg: HamiltonianConfig) -> "IntegrableSystem":
        n = omega.n
        for term in cfg.h_terms:
            if len(term.powers) != n:
                raise DomainError(f'h term powers {term.powers} do not match n={n}')
        for term in cfg.f_terms:
            if len(term.k) != n or (term.powers and len(term.powers) != n):
                raise DomainError(f'f term {term.k} does not match n={n}')
        return cls(omega.omega,
                   [t.powers for t in cfg.h_terms], [t.coeff for t in cfg.h_terms],
                   [t.k for t in cfg.f_terms], [t.powers or [0] * n for t in cfg.f_terms],
                   [t.coeff for t in cfg.f_terms], [t.kind for t in cfg.f_terms],
                   cfg.epsilon, cfg.action_box, cfg.nondegen_cap)

    ### Pointwise evaluation; p, q of shape (P, n) ###

    def h(self, p):
        p = np.atleast_2d(p)
        return p @ self.omega0 + _monomials(p, self.h_powers) @ self.h_coeffs

    def grad_h(self, p):
        p = np.atleast_2d(p)
        out = np.tile(self.omega0.astype(p.dtype), (len(p), 1))
        for l in range(self.n):
            a = self.h_powers[:, l]
            mask = a > 0
            if not mask.any():
                continue
            lowered = self.h_powers[mask].copy()
            lowered[:, l] -= 1
            out[:, l] += _monomials(p, lowered) @ (self.h_coeffs[mask] * a[mask])
        return out

    def hessian(self, p):
        p = np.atleast_2d(p)
        out = np.zeros((len(p), self.n, self.n), dtype=p.dtype)
        for l in range(self.n):
            for m in range(self.n):
                a = self.h_powers.copy()
                factor = a[:, l].astype(float)
                a[:, l] -= 1
                factor = factor * a[:, m]
                a[:, m] -= 1
                mask = factor != 0
                if mask.any():
                    out[:, l, m] = _monomials(p, a[mask]) @ (self.h_coeffs[mask] * factor[mask])
        return out

    def _trig(self, q):
        phase = TWO_PI * (q @ self.f_k.T)
        value = np.where(self.f_sin[None, :], np.sin(phase), np.cos(phase))
        slope = np.where(self.f_sin[None, :], np.cos(phase), -np.sin(phase))
        return value, slope

    def f(self, p, q):
        p, q = np.atleast_2d(p), np.atleast_2d(q)
        value, _ = self._trig(q)
        return (_monomials(p, self.f_powers) * value) @ self.f_coeffs

    def grad_f(self, p, q):
        """(df/dp, df/dq)"""
        p, q = np.atleast_2d(p), np.atleast_2d(q)
        value, slope = self._trig(q)
        mono = _monomials(p, self.f_powers)
        dq = (mono * slope * self.f_coeffs[None, :]) @ (TWO_PI * self.f_k)
        dp = np.zeros(dq.shape, dtype=np.result_type(dq, p))
        for l in range(self.n):
            a = self.f_powers[:, l]
            mask = a > 0
            if not mask.any():
                continue
            lowered = self.f_powers[mask].copy()
            lowered[:, l] -= 1
            dp[:, l] = (_monomials(p, lowered) * value[:, mask]) @ (self.f_coeffs[mask] * a[mask])
        return dp, dq

    def energy(self, p, q):
        return self.h(p) + self.epsilon * self.f(p, q)

    def vector_field(self, q, p):
        """(dq/dt, dp/dt)"""
        dp, dq = self.grad_f(p, q)
        return self.grad_h(p) + self.epsilon * dp, -self.epsilon * dq

    ### Suprema on complex domains ###

    def sup_hessian(self, samples: int = 2000, seed: int = 0) -> float:
        """sup of the max-row-sum norm of the Hessian over the polydisc of radius action_box"""
        rng = np.random.default_rng(seed)
        p = self.action_box * np.exp(2j * np.pi * rng.uniform(size=(samples, self.n)))
        p = np.concatenate([np.zeros((1, self.n), dtype=complex), p])
        return float(np.max(np.abs(self.hessian(p)).sum(axis=2)))

    def sup_f(self, s: float, samples: int = 2000, seed: int = 0):
        """(sampled sup, majorant) of |f| for |p| < action_box, |Im q| < s"""
        rng = np.random.default_rng(seed)
        p = self.action_box * np.exp(2j * np.pi * rng.uniform(size=(samples, self.n)))
        q = rng.uniform(size=(samples, self.n)) + 1j * s * rng.choice([-1.0, 1.0], size=(samples, self.n))
        sampled = float(np.max(np.abs(self.f(p, q)))) if len(self.f_coeffs) else 0.0
        majorant = float(np.sum(np.abs(self.f_coeffs) * self.action_box ** self.f_powers.sum(axis=1)
                                * np.exp(TWO_PI * s * np.abs(self.f_k).sum(axis=1))))
        return sampled, majorant


### Series helpers ###


def _polynomial(coeffs, powers, args: Sequence[FourierTaylor], caps: Caps, dropped: List[FourierTaylor]):
    """sum_t c_t prod_l args_l^{a_tl}, truncated to caps"""
    n = len(args)
    if not len(coeffs):
        return FourierTaylor.zero(n, caps)
    tables = []
    for l in range(n):
        table = [FourierTaylor.constant(n, 1.0, caps)]
        for _ in range(int(powers[:, l].max())):
            product = table[-1].multiply(args[l], caps)
            table.append(product.kept)
            dropped.append(product.dropped)
        tables.append(table)
    terms = []
    for c, a in zip(coeffs, powers):
        term = FourierTaylor.constant(n, float(c), caps)
        for l in range(n):
            if a[l]:
                product = term.multiply(tables[l][a[l]], caps)
                term = product.kept
                dropped.append(product.dropped)
        terms.append(term)
    return sum_series(terms, n, caps)


def inverse_gradient(system: IntegrableSystem, caps: Caps) -> List[FourierTaylor]:
    """g(w) with grad h(g(w)) = omega0 + w, as a Taylor polynomial in w of degree deg_w"""
    n = system.n
    H0 = system.hessian(np.zeros((1, n)))[0]
    condition = float(np.linalg.cond(H0)) if np.any(H0) else np.inf
    if not np.isfinite(condition) or condition > system.nondegen_cap:
        raise NondegeneracyError(f'Hessian of h at 0 has condition number {condition:.3e} '
                                 f'above {system.nondegen_cap:.1e}', condition='non-degeneracy',
                                 measured=condition, threshold=system.nondegen_cap)
    H_inv = np.linalg.inv(H0)
    # gradient of the terms of degree >= 3, i.e. grad h - omega0 - H0 p
    cubic = system.h_powers.sum(axis=1) >= 3
    w = [FourierTaylor.param(n, l, caps) for l in range(n)]
    g = [sum_series([w[m] * H_inv[l, m] for m in range(n)], n, caps) for l in range(n)]
    if not cubic.any():
        return g
    dropped: List[FourierTaylor] = []
    for _ in range(caps.deg_w + 1):
        rest = []
        for m in range(n):
            a = system.h_powers[cubic]
            mask = a[:, m] > 0
            lowered = a[mask].copy()
            lowered[:, m] -= 1
            rest.append(_polynomial(system.h_coeffs[cubic][mask] * a[mask, m], lowered, g, caps, dropped))
        g = [sum_series([(w[m] - rest[m]) * H_inv[l, m] for m in range(n)], n, caps) for l in range(n)]
    return g


class Reduction(NamedTuple):
    hamiltonian: ParamHamiltonian
    recipe: ReductionRecipe
    g: List[FourierTaylor]
    dropped: List[FourierTaylor]  # terms beyond the caps


def reduce_to_param_form(system: IntegrableSystem, caps: Caps, s: float, r: Optional[float] = None,
                         h: Optional[float] = None, constants: Optional[ConstantsConfig] = None,
                         seed: int = 0) -> Reduction:
    """Expand h(g(w) + I) + eps f(g(w) + I, theta) around the inverse point g(w).

    With r unset, r = (F eps/M)^(1/2) so that M r^2 = F eps and the perturbation
    size is eps_param = 2 F eps."""
    n = system.n
    g = inverse_gradient(system, caps)
    H0 = system.hessian(np.zeros((1, n)))[0]
    M = SAFETY * max(system.sup_hessian(seed=seed), 0.5 * float(np.abs(H0).sum()))
    F_sampled, F_majorant = system.sup_f(s, seed=seed)
    F = SAFETY * max(F_sampled, F_majorant)
    eps = system.epsilon
    if r is None:
        r = float(np.sqrt(F * eps / M)) if F * eps > 0 else system.action_box
    if not 0 < r <= min(1.0, system.action_box):
        raise EpsilonTooLargeError(f'action radius r={r:.4g} does not fit in the action box {system.action_box}',
                                   condition='r <= action box', measured=r, threshold=system.action_box)
    eps_param = M * r * r + F * eps

    dropped: List[FourierTaylor] = []
    shifted = [g[l] + FourierTaylor.action(n, l, caps) for l in range(n)]
    at_g = _polynomial(system.h_coeffs, system.h_powers, g, caps, dropped)
    at_shifted = _polynomial(system.h_coeffs, system.h_powers, shifted, caps, dropped)
    omega_g = sum_series([g[l] * system.omega0[l] for l in range(n)], n, caps)
    e = sum_series([omega_g, at_g], n, caps)
    w_dot_i = sum_series([FourierTaylor.monomial(n, caps, alpha=np.eye(n, dtype=np.int64)[l],
                                                 beta=np.eye(n, dtype=np.int64)[l], real=True)
                          for l in range(n)], n, caps)
    P_h = at_shifted - at_g - w_dot_i
    perturbation = []
    for k, a, c, is_sin in zip(system.f_k, system.f_powers, system.f_coeffs, system.f_sin):
        mode = FourierTaylor.sin_mode(n, k, caps) if is_sin else FourierTaylor.cos_mode(n, k, caps)
        amplitude = _polynomial([c * eps], a[None, :], shifted, caps, dropped)
        product = amplitude.multiply(mode, caps)
        perturbation.append(product.kept)
        dropped.append(product.dropped)
    P = sum_series([P_h] + perturbation, n, caps)

    recipe = ReductionRecipe(epsilon=eps, M=M, F=F, F_sampled=F_sampled, F_majorant=F_majorant, r=r,
                             eps_param=eps_param, hessian_condition=float(np.linalg.cond(H0)))
    reduction = Reduction(ParamHamiltonian(system.omega0, e, P), recipe, g, [f for f in dropped if len(f)])
    if h is not None:
        check_smallness(reduction, DomainParams(r=r, s=s, h=h), constants)
    logger.info(f'Reduction: M={M:.4g}, F={F:.4g}, r={r:.4g}, eps_param={eps_param:.4g}')
    return reduction


def check_smallness(reduction: Reduction, domain: DomainParams, constants: Optional[ConstantsConfig] = None):
    """eps <= (4MF)^-1 (c h)^2, i.e. eps_param/r <= c h with r = (F eps/M)^(1/2)"""
    constants = constants or ConstantsConfig()
    recipe = reduction.recipe
    recipe.P_norm = reduction.hamiltonian.P.norm(domain)
    recipe.truncation = float(sum(f.norm(domain) for f in reduction.dropped))
    if recipe.M * recipe.F > 0:
        threshold = (constants.eps_r_factor * domain.h) ** 2 / (4 * recipe.M * recipe.F)
        recipe.smallness = check_condition('eps <= (4MF)^-1 (f h)^2', recipe.epsilon, threshold,
                                           error=EpsilonTooLargeError, strict=constants.strict)
    return recipe


### Placement ###


class Placement(NamedTuple):
    action: np.ndarray  # I~ with grad h(I~) = omega_tilde
    residual: float

    def evaluate(self, result, theta):
        """(p, q) on the torus over the real angles theta"""
        I, angles = result.evaluate(theta)
        return self.action[None, :] + I, angles


def place_torus(result, system: IntegrableSystem, tol: float = 1e-13) -> Placement:
    """Solve grad h(I~) = omega_tilde by Newton's method started at the linear guess"""
    n = system.n
    target = np.asarray(result.omega_tilde, dtype=float)
    H0 = system.hessian(np.zeros((1, n)))[0]
    guess = np.linalg.solve(H0, target - system.omega0)
    if not np.any(target - system.omega0):
        return Placement(np.zeros(n), 0.0)
    solution = root(lambda p: system.grad_h(p[None, :])[0] - target, guess,
                    jac=lambda p: system.hessian(p[None, :])[0], method='hybr', tol=tol)
    action = solution.x
    residual = float(np.max(np.abs(system.grad_h(action[None, :])[0] - target)))
    if not solution.success or residual > max(tol, 1e3 * np.finfo(float).eps * np.max(np.abs(target))):
        raise PlacementError(f'Newton solve of grad h(I) = omega_tilde failed: {solution.message} '
                             f'(residual {residual:.3e})')
    if np.max(np.abs(action)) >= system.action_box:
        raise PlacementError(f'I~ = {action.tolist()} lies outside the action box {system.action_box}')
    logger.info(f'Torus placed at I~ = {action.tolist()} (residual {residual:.2e})')
    return Placement(action, residual)


### Verification ###


def implicit_midpoint(field, q0, p0, dt: float, steps: int, tol: float = 1e-15, max_iter: int = 50,
                      progress: bool = False):
    """z_{m+1} = z_m + dt X((z_m + z_{m+1})/2), solved by fixed-point iteration.
    Returns arrays q, p of shape (steps + 1, n)."""
    q = np.empty((steps + 1, len(q0)))
    p = np.empty((steps + 1, len(p0)))
    q[0], p[0] = q0, p0
    for m in tqdm(range(steps), desc='integrate', disable=not progress):
        qm, pm = q[m], p[m]
        dq, dp = field(qm[None, :], pm[None, :])
        q_next, p_next = qm + dt * dq[0], pm + dt * dp[0]
        for _ in range(max_iter):
            dq, dp = field(0.5 * (qm + q_next)[None, :], 0.5 * (pm + p_next)[None, :])
            q_new, p_new = qm + dt * dq[0], pm + dt * dp[0]
            change = max(np.max(np.abs(q_new - q_next)), np.max(np.abs(p_new - p_next)))
            q_next, p_next = q_new, p_new
            if change <= tol * max(1.0, np.max(np.abs(q_next))):
                break
        q[m + 1], p[m + 1] = q_next, p_next
    return q, p


class SeriesSystem:
    """Pointwise vector field and energy of a ParamHamiltonian frozen at the parameter w"""

    def __init__(self, H: ParamHamiltonian, w):
        frozen = H.at_params(w)
        self.n = H.n
        self.H = frozen
        self.d_action = [frozen.d_action(l) for l in range(self.n)]
        self.d_theta = [frozen.d_theta(l) for l in range(self.n)]

    def vector_field(self, q, p):
        dq = np.column_stack([f.evaluate(p, q).real for f in self.d_action])
        dp = -np.column_stack([f.evaluate(p, q).real for f in self.d_theta])
        return dq, dp

    def energy(self, p, q):
        return self.H.evaluate(p, q).real


class Verification(NamedTuple):
    report: VerificationReport
    trajectory: pd.DataFrame


def _angle_grid(n: int, grid: int) -> np.ndarray:
    axes = np.meshgrid(*[np.arange(grid) / grid] * n, indexing='ij')
    return np.column_stack([a.reshape(-1) for a in axes])


def invariance_residual(result, field, offset=None, grid: int = 32) -> float:
    """sup over a grid of |X_H(Phi(theta)) - D Phi(theta) omega0|, max over components"""
    n = len(result.omega0)
    theta = _angle_grid(n, grid)
    I, angles = result.evaluate(theta)
    p = I if offset is None else I + offset[None, :]
    dq, dp = field(angles, p)
    omega0 = result.omega0
    along_i = np.column_stack([sum(f.d_theta(m).evaluate(None, theta).real * omega0[m] for m in range(n))
                               for f in result.embedding.U])
    along_v = np.column_stack([omega0[l] + sum(f.d_theta(m).evaluate(None, theta).real * omega0[m]
                                               for m in range(n))
                               for l, f in enumerate(result.embedding.Vd)])
    return float(max(np.max(np.abs(dq - along_v)), np.max(np.abs(dp - along_i))))


def verify_invariance(result, system: Optional[IntegrableSystem] = None, placement: Optional[Placement] = None,
                      hamiltonian: Optional[ParamHamiltonian] = None, cfg: Optional[VerifyConfig] = None,
                      seed: int = 0, progress: bool = False) -> Verification:
    """Invariance residual on a grid, shadowing of an integrated trajectory, energy drift
    and the rotation number of the trajectory.

    With a physical system the torus is placed at I~ + I(theta); otherwise the
    parameterized Hamiltonian frozen at omega_tilde is integrated directly."""
    cfg = cfg or VerifyConfig()
    n = len(result.omega0)
    if system is not None:
        placement = placement or place_torus(result, system)
        offset = placement.action
        field, energy = system.vector_field, system.energy
    elif hamiltonian is not None:
        frozen = SeriesSystem(hamiltonian, result.w_tilde)
        offset = np.zeros(n)
        field, energy = frozen.vector_field, frozen.energy
    else:
        raise DomainError('verification needs either the physical system or the parameterized Hamiltonian')

    residual = invariance_residual(result, field, offset, cfg.grid)

    rng = np.random.default_rng(seed)
    theta0 = np.asarray(cfg.theta0 if cfg.theta0 is not None else rng.uniform(size=n), dtype=float)
    I0, q0 = result.evaluate(theta0[None, :])
    p0 = I0[0] + offset
    steps = int(round(cfg.t_max / cfg.dt))

    def run(dt, count):
        return implicit_midpoint(field, q0[0], p0, dt, count, cfg.midpoint_tol, cfg.midpoint_max_iter, progress)

    q, p = run(cfg.dt, steps)
    t = np.arange(steps + 1) * cfg.dt
    I_t, angles_t = result.evaluate(theta0[None, :] + t[:, None] * result.omega0[None, :])
    distance = np.maximum(np.max(np.abs(p - (I_t + offset[None, :])), axis=1),
                          np.max(np.abs(wrap_angle(q - angles_t)), axis=1))
    energies = energy(p, q)
    drift = float(np.max(np.abs(energies - energies[0])))
    drift_half = None
    if cfg.halve_dt:
        q_half, p_half = run(cfg.dt / 2, 2 * steps)
        e_half = energy(p_half, q_half)
        drift_half = float(np.max(np.abs(e_half - e_half[0])))

    lift = np.unwrap(q, axis=0, period=1.0)
    rotation = (lift[-1] - lift[0]) / cfg.t_max if cfg.t_max > 0 else result.omega0
    report = VerificationReport(invariance_residual=residual, grid=cfg.grid, shadow_distance=float(distance.max()),
                                t_max=cfg.t_max, dt=cfg.dt, energy_drift=drift, energy_drift_half_dt=drift_half,
                                rotation_number=rotation.tolist(),
                                rotation_error=float(np.max(np.abs(rotation - result.omega0))),
                                theta0=theta0.tolist(), steps=steps)
    stride = max(1, cfg.stride)
    rows = slice(0, steps + 1, stride)
    columns = {'t': t[rows]}
    columns.update({f'p_{l + 1}': p[rows, l] for l in range(n)})
    columns.update({f'q_{l + 1}': np.mod(q[rows, l], 1.0) for l in range(n)})
    columns['distance'] = distance[rows]
    logger.info(f'Verification: residual={residual:.3e}, shadow distance={report.shadow_distance:.3e}, '
                f'energy drift={drift:.3e}, rotation error={report.rotation_error:.3e}')
    return Verification(report, pd.DataFrame(columns))
