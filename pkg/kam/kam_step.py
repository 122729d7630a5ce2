"""One elementary KAM transformation.

The perturbation is linearized in the actions, averaged successively along the
n rational directions of a unimodular basis, and the n averaging generators
are composed as time-one flows. The averaged part left over is absorbed into
the frequency parameter by inverting w -> w + nu(w).
"""
import logging
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .diophantine import psi
from .errors import (DomainError, FlowDomainError, InversionError, InversionPreconditionError, NumericalError,
                     StepConditionError, TruncationBudgetError)
from .torus_algebra import (FourierTaylor, ParamHamiltonian, lie_series, lie_series_angle, lie_sum,
                            poisson_bracket, solve_homological, substitute_params, sum_series)
from .types import (Caps, ConditionCheck, DomainParams, FrequencyVector, InversionCertificates, RationalBasis,
                    StageReport, StepConfig, StepReport, TransformCertificates)

logger = logging.getLogger('kam')


def check_condition(name: str, lhs: float, rhs: float, factor: float = 1.0, error=StepConditionError,
                    strict: bool = True) -> ConditionCheck:
    """Evaluate lhs <= factor * rhs, log it, and raise `error` on failure when strict"""
    passed = bool(lhs <= factor * rhs)
    check = ConditionCheck(name=name, lhs=float(lhs), rhs=float(rhs), factor=float(factor), passed=passed)
    message = f'{name}: {lhs:.4g} vs {factor:.4g}*{rhs:.4g} -> {"pass" if passed else "fail"}'
    if passed:
        logger.info(message)
        return check
    logger.warning(message)
    if strict:
        raise error(message, condition=name, measured=float(lhs), threshold=float(factor * rhs))
    return check


def param_norm(f: FourierTaylor, h: float) -> float:
    """Norm of a parameter-only expansion on the polydisc of radius h"""
    return f.norm_at(1.0, 0.0, h)


### Transformations ###


class KamTransformation:
    """(I, theta, w) -> (U, theta + Vd, w + dphi) with U affine in I, Vd and dphi free of I.

    `generators` holds the F_j whose time-one flows make up the map before the
    parameter substitution; composition with such a map is done by Lie transport.
    """

    def __init__(self, U: Sequence[FourierTaylor], Vd: Sequence[FourierTaylor], dphi: Sequence[FourierTaylor],
                 domain: Optional[DomainParams] = None, generators: Sequence[FourierTaylor] = (),
                 certificates: Optional[TransformCertificates] = None):
        self.U = list(U)
        self.Vd = list(Vd)
        self.dphi = list(dphi)
        self.n = len(self.U)
        self.domain = domain
        self.generators = list(generators)
        self.certificates = certificates or TransformCertificates()
        for f in self.U:
            if len(f) and f.alpha.sum(axis=1).max() > 1:
                raise ValueError('action map must be affine in I')
        for f in self.Vd + self.dphi:
            if len(f) and f.alpha.any():
                raise ValueError('angle and parameter maps must not depend on I')
        for f in self.dphi:
            if len(f) and f.k.any():
                raise ValueError('parameter map must not depend on theta')

    @classmethod
    def identity(cls, n: int, caps: Caps, domain: Optional[DomainParams] = None) -> "KamTransformation":
        zero = FourierTaylor.zero(n, caps)
        return cls([FourierTaylor.action(n, l, caps) for l in range(n)], [zero] * n, [zero] * n, domain)

    @property
    def caps(self) -> Caps:
        return self.U[0].caps

    def action_displacement(self) -> List[FourierTaylor]:
        return [self.U[l] - FourierTaylor.action(self.n, l, self.U[l].caps) for l in range(self.n)]

    def is_identity(self) -> bool:
        return all(f.is_zero() for f in self.action_displacement() + self.Vd + self.dphi)

    def evaluate(self, I, theta, w=None):
        """Images (I', theta', w') of the points (I[p], theta[p], w[p])"""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        points = theta.shape[0]
        I = np.zeros((points, self.n)) if I is None else np.broadcast_to(np.atleast_2d(I), (points, self.n))
        w = np.zeros((points, self.n)) if w is None else np.broadcast_to(np.atleast_2d(w), (points, self.n))
        I_new = np.column_stack([f.evaluate(I, theta, w) for f in self.U])
        theta_new = theta + np.column_stack([f.evaluate(I, theta, w) for f in self.Vd])
        w_new = w + np.column_stack([f.evaluate(I, theta, w) for f in self.dphi])
        return I_new, theta_new, w_new

    def jacobian(self, I, theta, w=None) -> np.ndarray:
        """D Phi at fixed parameter, in the coordinate order (theta, I); shape (P, 2n, 2n)"""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        n, points = self.n, theta.shape[0]
        M = np.zeros((points, 2 * n, 2 * n))
        for l in range(n):
            for m in range(n):
                M[:, l, m] = (l == m) + self.Vd[l].d_theta(m).evaluate(I, theta, w).real
                M[:, l, n + m] = self.Vd[l].d_action(m).evaluate(I, theta, w).real
                M[:, n + l, m] = self.U[l].d_theta(m).evaluate(I, theta, w).real
                M[:, n + l, n + m] = self.U[l].d_action(m).evaluate(I, theta, w).real
        return M

    def symplectic_defect(self, domain: DomainParams, samples: int = 100, seed: int = 0) -> float:
        """max |M^T J M - J| over random real points of the domain"""
        rng = np.random.default_rng(seed)
        n = self.n
        I = rng.uniform(-0.9, 0.9, (samples, n)) * domain.r
        theta = rng.uniform(0.0, 1.0, (samples, n))
        w = rng.uniform(-0.9, 0.9, (samples, n)) * domain.h
        M = self.jacobian(I, theta, w)
        J = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
        defect = np.einsum('pji,jk,pkl->pil', M, J, M) - J[None, :, :]
        return float(np.max(np.abs(defect))) if samples else 0.0

    def measure(self, domain: DomainParams, r_weight: float, sigma_weight: float) -> TransformCertificates:
        """Weighted distances to the identity with W = Diag(r_weight^-1, sigma_weight^-1)"""
        n, d = self.n, domain
        du = self.action_displacement()
        w_distance = max(max(f.norm(d) for f in du) / r_weight, max(f.norm(d) for f in self.Vd) / sigma_weight)
        ratio = sigma_weight / r_weight
        rows = []
        for l in range(n):
            rows.append(sum(du[l].d_action(m).norm(d) + ratio * du[l].d_theta(m).norm(d) for m in range(n)))
            rows.append(sum(self.Vd[l].d_theta(m).norm(d) + self.Vd[l].d_action(m).norm(d) / ratio
                            for m in range(n)))
        phi_distance = max(param_norm(f, d.h) for f in self.dphi)
        phi_jacobian = d.h * max(sum(param_norm(f.d_param(m), d.h) for m in range(n)) for f in self.dphi)
        return TransformCertificates(w_distance=w_distance, w_jacobian=max(rows), phi_distance=phi_distance,
                                     phi_jacobian=phi_jacobian)

    def at_zero_section(self, w=None) -> "KamTransformation":
        """Restriction to I = 0 at the fixed parameter offset w (default 0)"""
        w = np.zeros(self.n) if w is None else np.asarray(w)
        U = [f.at_zero_action().at_params(w) for f in self.U]
        Vd = [f.at_params(w) for f in self.Vd]
        zero = FourierTaylor.zero(self.n, self.caps)
        return KamTransformation(U, Vd, [zero] * self.n, self.domain)

    def to_json(self) -> dict:
        return {
            'n': self.n,
            'U': [f.to_json() for f in self.U],
            'V': [f.to_json() for f in self.Vd],
            'phi': [f.to_json() for f in self.dphi],
            'domain': self.domain.dict() if self.domain else None,
            'certificates': self.certificates.dict(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "KamTransformation":
        domain = DomainParams(**data['domain']) if data.get('domain') else None
        return cls([FourierTaylor.from_json(f) for f in data['U']], [FourierTaylor.from_json(f) for f in data['V']],
                   [FourierTaylor.from_json(f) for f in data['phi']], domain,
                   certificates=TransformCertificates(**data.get('certificates', {})))


class Transport(NamedTuple):
    U: List[FourierTaylor]
    Vd: List[FourierTaylor]
    order: int
    dropped: List[FourierTaylor]


def transport(U: Sequence[FourierTaylor], Vd: Sequence[FourierTaylor], F: FourierTaylor, domain: DomainParams,
              tol_action: float, tol_angle: float, max_order: int) -> Transport:
    """Coordinates composed with the time-one flow of F: U o X_F and theta + Vd o X_F - theta"""
    U_new, V_new, dropped, order = [], [], [], 0
    for f in U:
        moved = lie_series(f, F, domain, tol_action, max_order)
        U_new.append(moved.value)
        dropped.append(moved.dropped)
        order = max(order, moved.order)
    for l, f in enumerate(Vd):
        shift = lie_series_angle(l, F, domain, tol_angle, max_order)
        moved = lie_series(f, F, domain, tol_angle, max_order)
        V_new.append(shift.value + moved.value)
        dropped.extend([shift.dropped, moved.dropped])
        order = max(order, shift.order, moved.order)
    return Transport(U_new, V_new, order, dropped)


class Flow(NamedTuple):
    U: List[FourierTaylor]
    Vd: List[FourierTaylor]
    order: int
    discard: float


def time_one_flow(F: FourierTaylor, domain: DomainParams, tol: float, max_order: int,
                  r: Optional[float] = None, sigma: Optional[float] = None, strict: bool = True) -> Flow:
    """Time-one map of the flow of F (affine in I) applied to the coordinate functions.

    With r and sigma given, the derivative bounds |d_theta F| <= r/(2n) and
    |d_I F| <= sigma/n are checked on `domain` first."""
    n = F.n
    if len(F) and F.alpha.sum(axis=1).max() > 1:
        raise DomainError('generator must be affine in I')
    if r is not None and sigma is not None:
        d_theta = max(F.d_theta(l).norm(domain) for l in range(n))
        d_action = max(F.d_action(l).norm(domain) for l in range(n))
        check_condition('|d_theta F| <= r/(2n)', d_theta, r / (2 * n), error=FlowDomainError, strict=strict)
        check_condition('|d_I F| <= sigma/n', d_action, sigma / n, error=FlowDomainError, strict=strict)
    identity = KamTransformation.identity(n, F.caps)
    moved = transport(identity.U, identity.Vd, F, domain, tol, tol, max_order)
    discard = sum(f.norm(domain) for f in moved.dropped)
    return Flow(moved.U, moved.Vd, moved.order, discard)


### Frequency renormalization ###


class Inversion(NamedTuple):
    delta: List[FourierTaylor]  # phi(w) = w + delta(w)
    certificates: InversionCertificates
    discard: float


def invert_frequency_map(nu: Sequence[FourierTaylor], h: float, tol: float = 1e-14, max_iter: int = 60,
                         check: bool = True) -> Inversion:
    """Inverse phi of w -> w + nu(w) on the polydisc of radius h/4.

    Fixed point delta = -nu(w + delta), iterated in truncated arithmetic;
    requires |nu|_h <= h/4."""
    nu = list(nu)
    n = len(nu)
    for f in nu:
        if len(f) and (f.k.any() or f.alpha.any()):
            raise DomainError('nu must depend on the parameter only')
    size = max(param_norm(f, h) for f in nu)
    if check:
        check_condition('|nu|_h <= h/4', size, h / 4, error=InversionPreconditionError)
    quarter = h / 4
    delta = [FourierTaylor.zero(n, f.caps) for f in nu]
    dropped = [FourierTaylor.zero(n, f.caps) for f in nu]
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        moved = [substitute_params(f, delta) for f in nu]
        updated = [-m.kept for m in moved]
        dropped = [m.dropped for m in moved]
        change = max(param_norm(a - b, quarter) for a, b in zip(updated, delta))
        delta = updated
        if change == 0.0 or change <= tol * size:
            converged = True
            break
    if not converged:
        raise InversionError(f'frequency inversion did not contract to {tol:.1e} within {max_iter} iterations '
                             f'(last change {change:.3e})')
    distance = max(param_norm(f, quarter) for f in delta)
    jacobian = quarter * max(sum(param_norm(f.d_param(m), quarter) for m in range(n)) for f in delta)
    certificates = InversionCertificates(delta=size, iterations=iterations, phi_distance=distance,
                                         phi_jacobian=jacobian, converged=converged)
    logger.debug(f'frequency inversion: |nu|_h={size:.3e}, {iterations} iterations, |phi-Id|={distance:.3e}')
    return Inversion(delta, certificates, sum(param_norm(f, quarter) for f in dropped))


### The step ###


class StepResult(NamedTuple):
    hamiltonian: ParamHamiltonian  # e+(w) + (omega0 + w).I + P+
    transformation: KamTransformation
    report: StepReport

    @property
    def N_plus(self) -> FourierTaylor:
        return self.hamiltonian.normal_form()

    @property
    def P_plus(self) -> FourierTaylor:
        return self.hamiltonian.P


def _norms(items: Sequence[FourierTaylor], domain: DomainParams) -> float:
    return float(sum(f.norm(domain) for f in items))


def kam_step(H: ParamHamiltonian, domain: DomainParams, sigma: float, Q: float, basis: RationalBasis,
             cfg: Optional[StepConfig] = None, eps: Optional[float] = None,
             delta_Q: Optional[float] = None) -> StepResult:
    """Conjugate H = e + omega.I + P on D_{r,s} x O_h to e+ + omega.I + P+ on
    D_{eta r, s - sigma} x O_{h/4} with |P+| <= eta eps/8.

    eps is the envelope |P|_{r,s,h} <= eps (default: the measured norm);
    delta_Q is Delta(Q) = Q Psi(Q) (default: enumerated)."""
    cfg = cfg or StepConfig()
    n, r, s, h = H.n, domain.r, domain.s, domain.h
    eta, tol, const = cfg.eta, cfg.tolerances, cfg.constants
    strict = const.strict
    P = H.P
    p_norm = P.norm(domain)
    eps = p_norm if eps is None else eps
    if not 0 < sigma < s:
        raise DomainError(f'sigma={sigma} must lie in (0, s={s})')
    if len(basis.vectors) != n:
        raise DomainError(f'basis has {len(basis.vectors)} vectors for n={n}')
    if delta_Q is None:
        delta_Q = Q * psi(FrequencyVector(omega=H.omega0.tolist()), Q)

    report = StepReport(eps=eps, r=r, s=s, h=h, sigma=sigma, Q=Q, basis=basis)
    conditions = report.conditions
    conditions.append(check_condition('eps/r <= f*h', eps / r, h, const.eps_r_factor, strict=strict))
    conditions.append(check_condition('h <= f/Delta(Q)', h, 1.0 / delta_Q, const.h_delta_factor, strict=strict))
    conditions.append(check_condition('1 <= f*Q*sigma', 1.0, Q * sigma, const.q_sigma_factor, strict=strict))

    target = eta * eps / 8
    lie_tol = tol.lie_tol_ratio * eta * eps / 16
    budget = tol.discard_ratio * eta * eps / 16
    out = DomainParams(r=eta * r, s=s - sigma, h=h)
    final = out.with_(h=h / 4)

    # linearize in the actions
    P_bar, tail = P.affine_part()
    c = 2 * eta
    report.tail_norm = tail.norm_at(c * r, s, h)
    report.tail_bound = c * c / (1 - c) * p_norm
    if report.tail_norm > report.tail_bound * (1 + 1e-12):
        raise NumericalError(f'action tail {report.tail_norm:.3e} exceeds c^2(1-c)^-1|P| = {report.tail_bound:.3e}')
    conditions.append(check_condition('|P - P_bar|_{2 eta r} <= eta*eps/16', report.tail_norm, eta * eps / 16,
                                      strict=strict))

    omega0 = H.omega0
    caps = P.caps
    w_dot_i = sum_series([FourierTaylor.monomial(n, caps, alpha=np.eye(n, dtype=np.int64)[l],
                                                 beta=np.eye(n, dtype=np.int64)[l], real=True)
                          for l in range(n)], n, caps)
    remainder = tail
    dropped: List[FourierTaylor] = []
    U = KamTransformation.identity(n, caps).U
    Vd = [FourierTaylor.zero(n, caps)] * n
    generators = []
    P_j = P_bar
    for j, v in enumerate(basis.vectors, start=1):
        ladder = DomainParams(r=r - j * r / (2 * n), s=s - j * sigma / n, h=h)
        P_next = P_j.average_along(v)
        rhs = P_j - P_next
        pj_norm = P_j.norm(domain)
        shift = basis.quality[j - 1].approx_error + h
        if rhs.is_zero():
            logger.debug(f'stage {j}: already averaged along q={v.q}, skipped')
            report.stages.append(StageReport(j=j, q=v.q, shift_bound=shift, p_norm=pj_norm, f_norm=0.0,
                                             f_over_qp=0.0, homological_defect=0.0, d_theta_f=0.0, d_action_f=0.0,
                                             flow_order=0, flow_discard=0.0, remainder_norm=0.0,
                                             absorption_ratio=0.0, skipped=True))
            P_j = P_next
            continue

        F = solve_homological(rhs, v)
        generators.append(F)
        N_v = FourierTaylor.linear_form(v.value(), caps)
        defect = (poisson_bracket(F, N_v).kept - rhs).norm(domain)
        if defect > tol.homological_tol * max(pj_norm, np.finfo(float).tiny):
            raise NumericalError(f'stage {j}: homological defect {defect:.3e} above '
                                 f'{tol.homological_tol:.1e}*|P_j| = {tol.homological_tol * pj_norm:.3e}')
        f_norm = F.norm(ladder)
        if f_norm > v.q * P_j.norm(ladder) * (1 + 1e-12):
            raise NumericalError(f'stage {j}: |F_j| = {f_norm:.3e} above q_j|P_j| = {v.q * P_j.norm(ladder):.3e}')
        d_theta = max(F.d_theta(l).norm(ladder) for l in range(n))
        d_action = max(F.d_action(l).norm(ladder) for l in range(n))
        conditions.append(check_condition(f'stage {j}: |d_theta F| <= r/(2n)', d_theta, r / (2 * n),
                                          error=FlowDomainError, strict=strict))
        conditions.append(check_condition(f'stage {j}: |d_I F| <= sigma/n', d_action, sigma / n,
                                          error=FlowDomainError, strict=strict))

        # P~_j = {S_j + P_j, F} + sum_{m >= 2} L^{m-1}({S_j + P_j, F} - rhs)/m!
        S = FourierTaylor.linear_form(omega0 - v.value(), caps) + w_dot_i
        first = poisson_bracket(S + P_j, F)
        second = poisson_bracket(first.kept - rhs, F)
        higher = lie_sum(second.kept / 2, F, 2, out, lie_tol, tol.lie_max_order)
        P_tilde = first.kept + higher.value
        moved = lie_series(remainder, F, out, lie_tol, tol.lie_max_order)
        remainder = P_tilde + moved.value
        stage_dropped = [first.dropped, second.dropped / 2, higher.dropped, moved.dropped]
        dropped.extend(stage_dropped)

        coords = transport(U, Vd, F, out, tol.coord_tol * r, tol.coord_tol * sigma, tol.lie_max_order)
        U, Vd = coords.U, coords.Vd
        dropped_coords = _norms(coords.dropped, out)
        order = max(higher.order, moved.order, coords.order)
        tilde_norm = P_tilde.norm(out)
        report.stages.append(StageReport(
            j=j, q=v.q, shift_bound=shift, p_norm=pj_norm, f_norm=f_norm, f_over_qp=f_norm / (v.q * pj_norm),
            homological_defect=defect, d_theta_f=d_theta, d_action_f=d_action, flow_order=order,
            flow_discard=_norms(stage_dropped, out) + dropped_coords, remainder_norm=tilde_norm,
            absorption_ratio=tilde_norm * Q * sigma / eps if eps else 0.0))
        logger.debug(f'stage {j}: q={v.q}, |P_j|={pj_norm:.3e}, |F_j|={f_norm:.3e}, '
                     f'|P~_j|={tilde_norm:.3e}, Lie order {order}')
        P_j = P_next

    # renormalize the frequency: [P_bar] = c(w) + nu(w).I
    averaged = P_j
    if averaged.k.any():
        raise NumericalError('directional averages left nonzero modes; the basis is not unimodular')
    constant = averaged.at_zero_action()
    nu = [averaged.action_coefficient(l) for l in range(n)]
    report.nu_norm = max(param_norm(f, h) for f in nu)
    conditions.append(check_condition('|nu|_h <= f*eps/r', report.nu_norm, eps / r, const.nu_factor,
                                      strict=strict))
    inversion = invert_frequency_map(nu, h, tol.inv_tol, tol.inv_max_iter)
    report.inversion = inversion.certificates
    delta = inversion.delta

    e_plus = substitute_params(H.e + constant, delta)
    P_plus = substitute_params(remainder, delta)
    dropped.append(P_plus.dropped)
    P_plus = P_plus.kept
    if tol.prune_ratio > 0:
        pruned = P_plus.prune(tol.prune_ratio * eta * eps / 16, final)
        P_plus = pruned.kept
        dropped.append(pruned.dropped)
    report.discard = _norms(dropped, final) + inversion.discard + e_plus.dropped.norm(final)
    if report.discard > budget:
        raise TruncationBudgetError(f'truncation discard {report.discard:.3e} above budget {budget:.3e}')

    U = [substitute_params(f, delta).kept for f in U]
    Vd = [substitute_params(f, delta).kept for f in Vd]
    T = KamTransformation(U, Vd, delta, final, generators)
    T.certificates = T.measure(final, r, sigma)
    T.certificates.symplectic_defect = T.symplectic_defect(final, tol.sym_samples, cfg.seed)
    report.certificates = T.certificates
    if T.certificates.symplectic_defect > tol.sym_tol:
        logger.warning(f'symplectic defect {T.certificates.symplectic_defect:.3e} above {tol.sym_tol:.1e}')

    report.p_plus_norm = P_plus.norm(final)
    report.p_plus_target = target
    conditions.append(check_condition('|P+| + discard <= eta*eps/8', report.p_plus_norm + report.discard, target,
                                      strict=strict))
    report.success = all(check.passed for check in conditions)
    logger.info(f'KAM step: eps={eps:.3e}, |P|={p_norm:.3e}, |P+|={report.p_plus_norm:.3e} '
                f'(target {target:.3e}), Q={Q:g}, sigma={sigma:.4g}, discard={report.discard:.2e}')
    return StepResult(ParamHamiltonian(omega0, e_plus.kept, P_plus), T, report)
