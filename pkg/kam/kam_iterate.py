"""The iteration driver: parameter schedule, step chaining, composition of the
transformations and extraction of the torus embedding and shifted frequency."""
import logging
import math
from typing import List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .diophantine import bruno_russmann_tail, choose_q0, delta_star, rational_basis
from .errors import (CompositionDomainError, DivergenceError, EnvelopeError, KamError, Q0TooSmallError,
                     RealityError, ScheduleError, TableTooSmallError, at_iteration)
from .kam_step import KamTransformation, check_condition, kam_step, param_norm, transport
from .torus_algebra import FourierTaylor, ParamHamiltonian, substitute_params, sum_series
from .types import (ArithmeticProfile, ConstantsConfig, DomainParams, IterationRecord, Schedule, ScheduleConfig,
                    SearchBudget, StepConfig, StepReport, StopReason, TorusSummary)

logger = logging.getLogger('kam')


### Schedule ###


def admissible_h(eps: float, r: float, delta0: float, constants: ConstantsConfig):
    """Interval (eps/r)/f1 <= h <= f2/Delta(Q0) allowed by the initial condition"""
    return (eps / r) / constants.eps_r_factor, constants.h_delta_factor / delta0


def auto_h(eps: float, r: float, delta0: float, constants: ConstantsConfig) -> float:
    """Geometric mean of the admissible interval for h"""
    lo, hi = admissible_h(eps, r, delta0, constants)
    if lo > hi:
        raise ScheduleError(f'no admissible h: (eps/r)/f = {lo:.4g} > f/Delta(Q0) = {hi:.4g}',
                            condition='eps/r <= f*h <= f*f/Delta(Q0)', measured=lo, threshold=hi)
    return min(1.0, math.sqrt(lo * hi))


def build_schedule(profile: ArithmeticProfile, domain: DomainParams, eps: float, cfg: ScheduleConfig,
                   constants: Optional[ConstantsConfig] = None) -> Schedule:
    """eps_i = (eta/8)^i eps, r_i = eta^i r, h_i = h/4^i, Delta_i = 2^i Delta(Q0),
    Q_i = Delta*(Delta_i), sigma_i = C/Q_i and s_{i+1} = s_i - sigma_i"""
    constants = constants or ConstantsConfig()
    if cfg.Q0 is None:
        estimate = choose_q0(profile, domain.s, cfg.C, cfg.x_cut, cfg.tail_grid)
    else:
        estimate = bruno_russmann_tail(profile, cfg.Q0, cfg.x_cut, cfg.tail_grid)
    Q0 = estimate.Q0
    delta0 = profile.Delta(Q0)

    conditions = [
        check_condition('eps/r <= f*h', eps / domain.r, domain.h, constants.eps_r_factor, error=ScheduleError,
                        strict=constants.strict),
        check_condition('h <= f/Delta(Q0)', domain.h, 1.0 / delta0, constants.h_delta_factor, error=ScheduleError,
                        strict=constants.strict),
    ]

    steps = cfg.max_iters
    i = np.arange(steps + 1)
    eps_i = eps * cfg.eps_ratio ** i
    r_i = domain.r * cfg.r_ratio ** i
    h_i = domain.h * cfg.h_ratio ** i
    delta_i = delta0 * cfg.delta_ratio ** i[:steps]
    if steps and delta_i[-1] > profile.delta[-1]:
        raise TableTooSmallError(f'Delta_{steps - 1} = {delta_i[-1]:.4g} exceeds Delta(Q_max) = '
                                 f'{profile.delta[-1]:.4g}; raise q_max above {profile.q_max}')
    Q_i = [delta_star(profile, x) for x in delta_i]
    sigma_i = np.array([cfg.C / Q for Q in Q_i])
    s_i = domain.s - np.concatenate([[0.0], np.cumsum(sigma_i)])
    sigma_sum = float(sigma_i.sum())
    conditions.append(check_condition('sum sigma_i <= s/2', sigma_sum, domain.s / 2, error=Q0TooSmallError))

    ratios = {}
    if steps >= 1:
        ratios = {
            'eps_over_r': float((eps_i[1] / r_i[1]) / (eps_i[0] / r_i[0])),
            'h': float(h_i[1] / h_i[0]),
            'inverse_delta': float(delta_i[0] / (delta0 * cfg.delta_ratio)),
        }
    logger.info(f'Schedule: Q0={Q0}, tail={estimate.value:.4g}, Q_i={Q_i}, sum sigma={sigma_sum:.4g}')
    return Schedule(Q0=Q0, tail=estimate.value, eps=eps_i.tolist(), r=r_i.tolist(), h=h_i.tolist(),
                    s=s_i.tolist(), sigma=sigma_i.tolist(), delta=delta_i.tolist(), Q=Q_i, sigma_sum=sigma_sum,
                    conditions=conditions, ratios=ratios)


def schedule_domain(schedule: Schedule, i: int) -> DomainParams:
    return DomainParams(r=schedule.r[i], s=schedule.s[i], h=schedule.h[i])


### Composition ###


def _power_tables(series: Sequence[FourierTaylor], degrees, caps, dropped):
    tables = []
    for f, top in zip(series, degrees):
        table = [FourierTaylor.constant(f.n, 1.0, caps)]
        for _ in range(int(top)):
            product = table[-1].multiply(f, caps)
            table.append(product.kept)
            dropped.append(product.dropped)
        tables.append(table)
    return tables


def _exp_series(X: FourierTaylor, domain: DomainParams, tol: float, max_order: int, dropped) -> FourierTaylor:
    """exp(X) = sum X^m/m! until the terms fall below tol"""
    n, caps = X.n, X.caps
    term = FourierTaylor.constant(n, 1.0, caps)
    total = [term]
    for m in range(1, max_order + 1):
        product = term.multiply(X, caps)
        term = product.kept / m
        dropped.append(product.dropped / m)
        total.append(term)
        if term.norm(domain) <= tol:
            break
    return sum_series(total, n, caps)


def substitute(g: FourierTaylor, B: KamTransformation, domain: DomainParams, tol: float, max_order: int,
               dropped: List[FourierTaylor]) -> FourierTaylor:
    """g(U_B, theta + Vd_B, w + dphi_B) by series substitution"""
    n, caps = g.n, g.caps
    if not len(g):
        return g
    Y = [FourierTaylor.param(n, l, caps) + B.dphi[l] for l in range(n)]
    U_pow = _power_tables(B.U, g.alpha.max(axis=0), caps, dropped)
    Y_pow = _power_tables(Y, g.beta.max(axis=0), caps, dropped)
    pieces = []
    ks, inverse = np.unique(g.k, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for index, k in enumerate(ks):
        if k.any():
            X = sum_series([B.Vd[l] * (2j * np.pi * k[l]) for l in range(n) if k[l]], n, caps)
            phase = _exp_series(X, domain, tol, max_order, dropped)
        else:
            phase = FourierTaylor.constant(n, 1.0, caps)
        for row in np.nonzero(inverse == index)[0]:
            alpha, beta = g.alpha[row], g.beta[row]
            factor = FourierTaylor.monomial(n, caps, k=k, coeff=g.coeffs[row]).multiply(phase, caps)
            dropped.append(factor.dropped)
            factor = factor.kept
            for l in range(n):
                for table, power in ((U_pow[l], alpha[l]), (Y_pow[l], beta[l])):
                    if power:
                        product = factor.multiply(table[power], caps)
                        dropped.append(product.dropped)
                        factor = product.kept
            pieces.append(factor)
    result = sum_series(pieces, n, caps)
    if g.real:
        result = FourierTaylor(n, result.keys, result.coeffs, result.caps, real=True)
    return result


def _check_range(A: KamTransformation, B: KamTransformation, samples: int, seed: int):
    if A.domain is None or B.domain is None:
        return
    rng = np.random.default_rng(seed)
    n = B.n
    I = rng.uniform(-1, 1, (samples, n)) * B.domain.r
    theta = rng.uniform(0, 1, (samples, n))
    w = rng.uniform(-1, 1, (samples, n)) * B.domain.h
    I_new, _, w_new = B.evaluate(I, theta, w)
    reach_i = float(np.max(np.abs(I_new)))
    reach_w = float(np.max(np.abs(w_new)))
    if reach_i >= A.domain.r or reach_w >= A.domain.h:
        raise CompositionDomainError(f'inner map reaches |I|={reach_i:.3e}, |w|={reach_w:.3e} outside the outer '
                                     f'domain r={A.domain.r:.3e}, h={A.domain.h:.3e}')


def compose_transforms(A: KamTransformation, B: KamTransformation, tol_action: float = 1e-18,
                       tol_angle: float = 1e-16, max_order: int = 12, samples: int = 50,
                       seed: int = 0) -> KamTransformation:
    """A o B. When B carries its generators, A's components are Lie transported
    through them and the parameter substitution of B is applied afterwards."""
    if A.n != B.n:
        raise ValueError(f'dimension mismatch: {A.n} vs {B.n}')
    n = A.n
    _check_range(A, B, samples, seed)
    domain = B.domain or A.domain or DomainParams(r=1.0, s=1.0, h=1.0)
    dropped: List[FourierTaylor] = []
    if B.generators:
        U, Vd = A.U, A.Vd
        for F in B.generators:
            moved = transport(U, Vd, F, domain, tol_action, tol_angle, max_order)
            U, Vd = moved.U, moved.Vd
            dropped.extend(moved.dropped)
        results = [substitute_params(f, B.dphi) for f in U + Vd]
        dropped.extend(r.dropped for r in results)
        U, Vd = [r.kept for r in results[:n]], [r.kept for r in results[n:]]
    else:
        U = [substitute(f, B, domain, tol_action, max_order, dropped) for f in A.U]
        Vd = [f + substitute(g, B, domain, tol_angle, max_order, dropped) for f, g in zip(B.Vd, A.Vd)]
    outer = [substitute_params(f, B.dphi) for f in A.dphi]
    dropped.extend(r.dropped for r in outer)
    dphi = [r.kept + d for r, d in zip(outer, B.dphi)]
    # the action map stays affine in I; drop the quadratic residue of truncated products
    U = [f.select(f.alpha.sum(axis=1) <= 1) if len(f) else f for f in U]
    Vd = [f.select(~f.alpha.any(axis=1)) if len(f) else f for f in Vd]
    composed = KamTransformation(U, Vd, dphi, B.domain or A.domain)
    discard = sum(f.norm(domain) for f in dropped if len(f))
    if discard:
        logger.debug(f'composition discard {discard:.3e}')
    return composed


### Driver ###


class TorusResult:
    """Outcome of the iteration: the embedding theta -> (I(theta), Theta(theta)) of the
    invariant torus of H_{omega_tilde} and the frequency parameter omega_tilde"""

    def __init__(self, embedding: KamTransformation, omega0, omega_tilde, summary: TorusSummary,
                 transformation: KamTransformation, records: List[IterationRecord], reports: List[StepReport],
                 schedule: Optional[Schedule] = None, hamiltonian: Optional[ParamHamiltonian] = None):
        self.embedding = embedding
        self.omega0 = np.asarray(omega0, dtype=float)
        self.omega_tilde = np.asarray(omega_tilde, dtype=float)
        self.summary = summary
        self.transformation = transformation
        self.records = records
        self.reports = reports
        self.schedule = schedule
        self.hamiltonian = hamiltonian

    @property
    def converged(self) -> bool:
        return self.summary.converged

    @property
    def w_tilde(self) -> np.ndarray:
        return self.omega_tilde - self.omega0

    def evaluate(self, theta):
        """Points (I, theta') of the torus over the real angles theta (shape (P, n))"""
        I, theta_new, _ = self.embedding.evaluate(None, theta)
        return I.real, theta_new.real

    def embedding_json(self) -> dict:
        return {
            'omega0': self.omega0.tolist(),
            'omega_tilde': self.omega_tilde.tolist(),
            'I': [f.to_json() for f in self.embedding.U],
            'theta': [f.to_json() for f in self.embedding.Vd],
        }

    @classmethod
    def from_embedding_json(cls, data: dict, summary: Optional[TorusSummary] = None) -> "TorusResult":
        U = [FourierTaylor.from_json(f) for f in data['I']]
        Vd = [FourierTaylor.from_json(f) for f in data['theta']]
        n = len(U)
        embedding = KamTransformation(U, Vd, [FourierTaylor.zero(n, U[0].caps)] * n)
        omega0, omega_tilde = data['omega0'], data['omega_tilde']
        summary = summary or TorusSummary(omega0=omega0, omega_tilde=omega_tilde,
                                          frequency_shift=float(np.max(np.abs(np.subtract(omega_tilde, omega0)))),
                                          embedding_distance=0.0, converged=True, reason=StopReason.converged,
                                          iterations=0, final_remainder=0.0)
        return cls(embedding, omega0, omega_tilde, summary, embedding, [], [])


def _telescope(new: KamTransformation, old: KamTransformation, domain: DomainParams, r0: float, sigma0: float,
               h0: float) -> float:
    n = new.n
    du = max((new.U[l] - old.U[l]).norm(domain) for l in range(n)) / r0
    dv = max((new.Vd[l] - old.Vd[l]).norm(domain) for l in range(n)) / sigma0
    dp = max(param_norm(new.dphi[l] - old.dphi[l], domain.h) for l in range(n)) / h0
    return max(du, dv, dp)


def extract_torus(T: KamTransformation, omega0, s: float, r0: float, sigma0: float, reality_tol: float):
    """Embedding at I = 0, w = 0, the real frequency omega_tilde and |W(Phi - Phi_0)|_{s/2}"""
    n = T.n
    shift = np.array([f.coefficient() for f in T.dphi]) if n else np.zeros(0)
    worst = float(np.max(np.abs(shift.imag))) if n else 0.0
    if worst > reality_tol:
        raise RealityError(f'omega_tilde has imaginary part {worst:.3e} above {reality_tol:.1e}')
    omega_tilde = np.asarray(omega0, dtype=float) + shift.real
    embedding = T.at_zero_section()
    distance = max(max(f.norm_at(1.0, s / 2, 1.0) for f in embedding.U) / r0,
                   max(f.norm_at(1.0, s / 2, 1.0) for f in embedding.Vd) / sigma0)
    return embedding, omega_tilde, distance


def iterate(H0: ParamHamiltonian, schedule: Schedule, profile: ArithmeticProfile, cfg: ScheduleConfig,
            step_cfg: Optional[StepConfig] = None, budget: Optional[SearchBudget] = None,
            progress: bool = False) -> TorusResult:
    """Chain KAM steps along the schedule until the remainder falls below stop_tol*eps
    or max_iters steps are done"""
    step_cfg = step_cfg or StepConfig()
    budget = budget or SearchBudget()
    const, tol = step_cfg.constants, step_cfg.tolerances
    n = H0.n
    d0 = schedule_domain(schedule, 0)
    eps0 = schedule.eps[0]
    r0, h0 = d0.r, d0.h
    sigma0 = schedule.sigma[0] if schedule.sigma else 1.0
    T = KamTransformation.identity(n, H0.caps, d0)
    H = H0
    records: List[IterationRecord] = []
    reports: List[StepReport] = []
    norms: List[float] = []
    product = 1.0
    reason = StopReason.max_iters
    steps = len(schedule.Q)

    for i in tqdm(range(steps), desc='KAM', disable=not progress):
        d_i = schedule_domain(schedule, i)
        p_norm = H.P.norm(d_i)
        check_condition(f'iteration {i}: |P_i| <= eps_i', p_norm, schedule.eps[i], error=EnvelopeError)
        if H.P.is_zero():
            reason = StopReason.zero_perturbation
            break
        if i >= cfg.min_iters and p_norm <= cfg.stop_tol * eps0:
            reason = StopReason.converged
            break
        if len(norms) >= 2 and p_norm >= norms[-1] >= norms[-2]:
            raise DivergenceError(f'iteration {i}: remainder did not decrease over two steps '
                                  f'({norms[-2]:.3e}, {norms[-1]:.3e}, {p_norm:.3e})')
        norms.append(p_norm)
        try:
            basis = rational_basis(profile.omega, schedule.Q[i], budget)
            step = kam_step(H, d_i, schedule.sigma[i], schedule.Q[i], basis, step_cfg, eps=schedule.eps[i],
                            delta_Q=profile.Delta(schedule.Q[i]))
            T_next = compose_transforms(T, step.transformation, tol.coord_tol * r0, tol.coord_tol * sigma0,
                                        tol.lie_max_order, seed=step_cfg.seed)
        except KamError as e:
            raise at_iteration(e, i)
        d_next = schedule_domain(schedule, i + 1)
        distance = _telescope(T_next, T, d_next, r0, sigma0, h0)
        product *= 1.0 + distance
        check_condition(f'iteration {i}: telescope distance <= f*eps_i/(r_i h_i)', distance,
                        schedule.eps[i] / (d_i.r * d_i.h), const.telescope_factor, error=EnvelopeError,
                        strict=const.strict)
        check_condition(f'iteration {i}: prod(1 + dist) <= bound', product, const.product_bound,
                        error=EnvelopeError, strict=const.strict)
        report = step.report
        records.append(IterationRecord(
            i=i, eps_i=schedule.eps[i], r_i=d_i.r, h_i=d_i.h, s_i=d_i.s, sigma_i=schedule.sigma[i],
            Q_i=schedule.Q[i], P_norm=p_norm, P_plus_norm=report.p_plus_norm, telescope_distance=distance,
            product=product, lie_order_max=max([stage.flow_order for stage in report.stages] or [0]),
            discard=report.discard))
        reports.append(report)
        logger.info(f'iteration {i}: |P_i|={p_norm:.3e} <= eps_i={schedule.eps[i]:.3e}, Q_i={schedule.Q[i]}, '
                    f'|P+|={report.p_plus_norm:.3e}, telescope={distance:.3e}')
        H, T = step.hamiltonian, T_next
    else:
        final = H.P.norm(schedule_domain(schedule, steps))
        if H.P.is_zero():
            reason = StopReason.zero_perturbation
        elif final <= cfg.stop_tol * eps0:
            reason = StopReason.converged

    done = len(records)
    final_remainder = H.P.norm(schedule_domain(schedule, done))
    embedding, omega_tilde, distance = extract_torus(T, H0.omega0, schedule.s[0], r0, sigma0, tol.reality_tol)
    converged = reason != StopReason.max_iters
    summary = TorusSummary(omega0=H0.omega0.tolist(), omega_tilde=omega_tilde.tolist(),
                           frequency_shift=float(np.max(np.abs(omega_tilde - H0.omega0))),
                           embedding_distance=distance, converged=converged, reason=reason, iterations=done,
                           final_remainder=final_remainder)
    logger.info(f'KAM iteration {"converged" if converged else "stopped"} ({reason.value}) after {done} steps: '
                f'|omega_tilde - omega0|={summary.frequency_shift:.3e}, final |P|={final_remainder:.3e}')
    return TorusResult(embedding, H0.omega0, omega_tilde, summary, T, records, reports, schedule, H0)
