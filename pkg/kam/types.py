from enum import Enum
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, validator

### Schema types ###


class TrigKind(str, Enum):
    """Real Fourier factor of a perturbation term"""
    cos = "cos"
    sin = "sin"


class ShrinkDirection(str, Enum):
    action = "action"
    angle = "angle"
    param = "param"


class StopReason(str, Enum):
    zero_perturbation = "zero_perturbation"
    converged = "converged"
    max_iters = "max_iters"


class Caps(BaseModel):
    """Truncation caps of a Fourier-Taylor expansion"""
    cutoff_k: int = Field(16, ge=0)  # max |k|_1
    deg_i: int = Field(2, ge=0)  # max total degree in the actions
    deg_w: int = Field(2, ge=0)  # max total degree in the parameter offset

    class Config:
        frozen = True

    def widened(self, other: "Caps") -> "Caps":
        return Caps(cutoff_k=self.cutoff_k + other.cutoff_k, deg_i=self.deg_i + other.deg_i,
                    deg_w=self.deg_w + other.deg_w)


class DomainParams(BaseModel):
    """Complex domain D_{r,s} x O_h: |I| < r, |Im theta| < s, |omega - omega0| < h"""
    r: float
    s: float
    h: float

    class Config:
        frozen = True

    @validator('r', 's', 'h')
    def in_unit_interval(cls, v):
        if not 0 < v <= 1:
            raise ValueError(f'domain parameter must lie in (0, 1], got {v}')
        return v

    def with_(self, **changes) -> "DomainParams":
        values = self.dict()
        values.update(changes)
        return DomainParams(**values)


class FrequencyVector(BaseModel):
    omega: List[float]

    class Config:
        frozen = True

    @validator('omega')
    def normalized(cls, v):
        if len(v) < 2:
            raise ValueError('frequency vector needs dimension n >= 2')
        if v[0] != 1.0:
            raise ValueError(f'first component must be exactly 1, got {v[0]}')
        if any(abs(x) > 1 for x in v[1:]):
            raise ValueError('components after the first must lie in [-1, 1]')
        return v

    @property
    def n(self) -> int:
        return len(self.omega)

    def array(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=float)


class RationalVector(BaseModel):
    """v = numerators / q; the numerators are q*v and numerators[0] == q"""
    q: int = Field(..., gt=0)
    numerators: List[int]

    class Config:
        frozen = True

    @validator('numerators')
    def leading_numerator(cls, v, values):
        if 'q' in values and v and v[0] != values['q']:
            raise ValueError('numerators[0] must equal q so that v[0] = 1')
        return v

    def value(self) -> np.ndarray:
        return np.asarray(self.numerators, dtype=float) / self.q


class BasisQuality(BaseModel):
    q: int
    approx_error: float  # sup-norm |omega0 - v_j|, recomputed
    certificate: float  # q_j * Q * approx_error


class RationalBasis(BaseModel):
    vectors: List[RationalVector]
    quality: List[BasisQuality]
    Q: float
    determinant: int

    def matrix(self) -> np.ndarray:
        """Integer matrix with columns q_j v_j"""
        return np.array([v.numerators for v in self.vectors], dtype=np.int64).T

    def max_certificate(self) -> float:
        return max(item.certificate for item in self.quality)


class TailEstimate(BaseModel):
    Q0: int
    x_cut: float
    value: float
    truncated: bool = True
    label: str = "heuristic within cutoff"


class ArithmeticProfile(BaseModel):
    """Tables of Psi(Q) and Delta(Q) = Q Psi(Q) on the integer grid Q = 1..q_max"""
    omega: FrequencyVector
    q_max: int
    psi: List[float]
    delta: List[float]
    minimizers: List[List[int]]
    tail_estimates: List[TailEstimate] = Field(default_factory=list)

    def delta_array(self) -> np.ndarray:
        return np.asarray(self.delta, dtype=float)

    def Delta(self, Q: int) -> float:
        return self.delta[int(Q) - 1]

    def Psi(self, Q: int) -> float:
        return self.psi[int(Q) - 1]


class SearchBudget(BaseModel):
    """Limits for the lattice enumeration and the unimodular basis search"""
    max_dim: int = 4
    max_k_norm: int = 200
    max_lattice_points: int = 50_000_000
    c_den: float = 2.0  # candidate denominators q <= ceil(c_den * Psi(Q))
    cert_max: float = 10.0
    neighbor_radius: int = 1
    top_candidates: int = 40
    exhaustive_limit: int = 200_000  # max determinant evaluations in the exhaustive fallback
    q_min: float = 1.0
    resonance_tol: float = 1e-14


### Run configuration ###


class FrequencyConfig(BaseModel):
    preset: Optional[str] = None
    omega: Optional[Union[List[float], str]] = None


class MonomialTerm(BaseModel):
    """coeff * p^powers, a term of the integrable part h(p) (degree >= 2)"""
    powers: List[int]
    coeff: float

    @validator('powers')
    def nonnegative(cls, v):
        if any(a < 0 for a in v):
            raise ValueError('powers must be nonnegative')
        return v


class PerturbationTerm(BaseModel):
    """coeff * p^powers * cos(2 pi k.q) (or sin)"""
    k: List[int]
    powers: List[int] = Field(default_factory=list)
    coeff: float = 1.0
    kind: TrigKind = TrigKind.cos


class HamiltonianConfig(BaseModel):
    h_terms: List[MonomialTerm] = Field(default_factory=list)
    f_terms: List[PerturbationTerm] = Field(default_factory=list)
    epsilon: float = Field(1e-6, ge=0)
    action_box: float = Field(0.05, gt=0)  # radius of the action domain D
    nondegen_cap: float = 1e8  # max condition number of the Hessian at 0


class DomainConfig(BaseModel):
    r: Union[float, str] = "auto"
    s: float = Field(0.4, gt=0, le=1)
    h: Union[float, str] = "auto"

    @validator('r', 'h')
    def auto_or_positive(cls, v):
        if isinstance(v, str):
            if v != "auto":
                raise ValueError('expected a number in (0, 1] or "auto"')
            return v
        if not 0 < v <= 1:
            raise ValueError(f'expected a number in (0, 1], got {v}')
        return v


class ConstantsConfig(BaseModel):
    """Factors for the inequalities whose constants are only known to exist.
    Every check reads `lhs <= factor * rhs`."""
    eps_r_factor: float = 1 / 16  # eps/r <= f*h
    h_delta_factor: float = 1.0  # h <= f/Delta(Q)
    q_sigma_factor: float = 1.0  # 1 <= f*Q*sigma
    nu_factor: float = 1.0  # |nu|_h <= f*eps/r
    telescope_factor: float = 1.0  # |W0(F^{i+1}-F^i)| <= f*eps_i/(r_i h_i)
    product_bound: float = 2.0  # prod(1 + dist_l)
    strict: bool = True  # raise on a failed check instead of only logging it


class ToleranceConfig(BaseModel):
    lie_tol_ratio: float = 1e-3  # Lie series stops below ratio * eta*eps/16
    lie_max_order: int = 12
    coord_tol: float = 1e-15  # Lie series on coordinate functions
    discard_ratio: float = 1.0  # truncation budget = ratio * eta*eps/16
    prune_ratio: float = 0.0  # drop coefficients below ratio * eps in weighted norm
    inv_tol: float = 1e-14
    inv_max_iter: int = 60
    sym_tol: float = 1e-9
    compose_tol: float = 1e-10
    reality_tol: float = 1e-12
    newton_tol: float = 1e-13
    homological_tol: float = 1e-10
    sym_samples: int = 100


class ScheduleConfig(BaseModel):
    eta: float = Field(1 / 66, gt=0, lt=0.5)
    C: float = Field(1.0, ge=1.0)
    Q0: Optional[int] = None  # None: chooseQ0
    q_max: int = 200
    x_cut: Optional[float] = None  # None: Delta(q_max)
    tail_grid: int = 4000
    max_iters: int = Field(12, ge=0)
    min_iters: int = Field(0, ge=0)
    stop_tol: float = 1e-14  # relative to the initial eps

    @property
    def eps_ratio(self) -> float:
        return self.eta / 8

    @property
    def r_ratio(self) -> float:
        return self.eta

    h_ratio: float = 0.25
    delta_ratio: float = 2.0


class VerifyConfig(BaseModel):
    enabled: bool = True
    grid: int = Field(32, ge=8)
    dt: float = 1e-3
    t_max: float = 100.0
    theta0: Optional[List[float]] = None
    samples: int = 100
    halve_dt: bool = True  # repeat the integration at dt/2 for the energy-drift scaling
    stride: int = 100  # trajectory.csv keeps every stride-th step
    midpoint_tol: float = 1e-15
    midpoint_max_iter: int = 50


class OutputConfig(BaseModel):
    directory: str = "runs/desk"
    embedding: bool = True


class RunConfig(BaseModel):
    frequency: FrequencyConfig = Field(default_factory=FrequencyConfig)
    hamiltonian: HamiltonianConfig = Field(default_factory=HamiltonianConfig)
    domain: DomainConfig = Field(default_factory=DomainConfig)
    caps: Caps = Field(default_factory=Caps)
    constants: ConstantsConfig = Field(default_factory=ConstantsConfig)
    tolerances: ToleranceConfig = Field(default_factory=ToleranceConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    budget: SearchBudget = Field(default_factory=SearchBudget)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    seed: int = 0


class StepConfig(BaseModel):
    """Everything a single KAM step needs besides its inputs"""
    eta: float = 1 / 66
    caps: Caps = Field(default_factory=Caps)
    constants: ConstantsConfig = Field(default_factory=ConstantsConfig)
    tolerances: ToleranceConfig = Field(default_factory=ToleranceConfig)
    seed: int = 0

    @classmethod
    def from_run(cls, config: RunConfig) -> "StepConfig":
        return cls(eta=config.schedule.eta, caps=config.caps, constants=config.constants,
                   tolerances=config.tolerances, seed=config.seed)


### Reports ###


class ConditionCheck(BaseModel):
    name: str
    lhs: float
    rhs: float
    factor: float = 1.0
    passed: bool

    @property
    def threshold(self) -> float:
        return self.factor * self.rhs


class StageReport(BaseModel):
    j: int
    q: int
    shift_bound: float  # |omega0 - v_j| + h
    p_norm: float  # |P_j|_{r,s,h}
    f_norm: float  # |F_j| on the ladder domain
    f_over_qp: float  # |F_j| / (q_j |P_j|)
    homological_defect: float
    d_theta_f: float
    d_action_f: float
    flow_order: int
    flow_discard: float
    remainder_norm: float  # |P~_j| on the output domain
    absorption_ratio: float  # |P~_j| Q sigma / eps
    skipped: bool = False


class TransformCertificates(BaseModel):
    w_distance: float = 0.0  # |W(Phi - Id)|
    w_jacobian: float = 0.0  # |W(DPhi - Id)W^-1|
    phi_distance: float = 0.0  # |phi - Id|_{h/4}
    phi_jacobian: float = 0.0  # h/4 |Dphi - Id|_{h/4}
    symplectic_defect: float = 0.0


class InversionCertificates(BaseModel):
    delta: float
    iterations: int
    phi_distance: float
    phi_jacobian: float
    converged: bool


class StepReport(BaseModel):
    eps: float
    r: float
    s: float
    h: float
    sigma: float
    Q: float
    basis: RationalBasis
    stages: List[StageReport] = Field(default_factory=list)
    tail_norm: float = 0.0
    tail_bound: float = 0.0
    p_plus_norm: float = 0.0
    p_plus_target: float = 0.0
    nu_norm: float = 0.0
    inversion: Optional[InversionCertificates] = None
    certificates: TransformCertificates = Field(default_factory=TransformCertificates)
    conditions: List[ConditionCheck] = Field(default_factory=list)
    discard: float = 0.0
    success: bool = False


class Schedule(BaseModel):
    Q0: int
    tail: float
    eps: List[float]
    r: List[float]
    h: List[float]
    s: List[float]
    sigma: List[float]
    delta: List[float]
    Q: List[int]
    sigma_sum: float
    conditions: List[ConditionCheck] = Field(default_factory=list)
    ratios: Dict[str, float] = Field(default_factory=dict)


class IterationRecord(BaseModel):
    i: int
    eps_i: float
    r_i: float
    h_i: float
    s_i: float
    sigma_i: float
    Q_i: int
    P_norm: float
    P_plus_norm: float
    telescope_distance: float
    product: float
    lie_order_max: int
    discard: float


class ReductionRecipe(BaseModel):
    epsilon: float
    M: float
    F: float
    F_sampled: float
    F_majorant: float
    r: float
    eps_param: float
    hessian_condition: float
    P_norm: float = 0.0
    truncation: float = 0.0  # norm of the terms beyond the caps dropped while expanding h and f
    smallness: Optional[ConditionCheck] = None


class TorusSummary(BaseModel):
    omega0: List[float]
    omega_tilde: List[float]
    frequency_shift: float  # |omega_tilde - omega0|
    embedding_distance: float  # |W(Phi_omega0 - Phi_0)|_{s/2}
    converged: bool
    reason: StopReason
    iterations: int
    final_remainder: float
    action_shift: Optional[List[float]] = None  # I~ with grad h(I~) = omega_tilde


class VerificationReport(BaseModel):
    invariance_residual: float
    grid: int
    shadow_distance: float
    t_max: float
    dt: float
    energy_drift: float
    energy_drift_half_dt: Optional[float] = None
    rotation_number: List[float]
    rotation_error: float
    theta0: List[float]
    symplectic_defect: Optional[float] = None
    steps: int = 0
