import math
import unittest

import numpy as np

from kam.diophantine import rational_basis
from kam.errors import (DomainError, FlowDomainError, InversionPreconditionError, StepConditionError)
from kam.kam_iterate import compose_transforms
from kam.kam_step import (KamTransformation, check_condition, invert_frequency_map, kam_step, param_norm,
                          time_one_flow)
from kam.torus_algebra import FourierTaylor, ParamHamiltonian, poisson_bracket
from kam.types import Caps, ConstantsConfig, DomainParams, FrequencyVector, StepConfig, ToleranceConfig

CAPS = Caps(cutoff_k=16, deg_i=2, deg_w=2)
GOLDEN = FrequencyVector(omega=[1.0, (math.sqrt(5.0) - 1.0) / 2.0])


def desk_hamiltonian(eps=1e-6, caps=CAPS):
    """|I|^2/2 + eps (cos 2 pi theta1 + cos 2 pi (theta1 + theta2)) around golden omega0"""
    P = (FourierTaylor.cos_mode(2, [1, 0], caps, amplitude=eps)
         + FourierTaylor.cos_mode(2, [1, 1], caps, amplitude=eps)
         + FourierTaylor.from_terms(2, [([0, 0], [2, 0], [0, 0], 0.5), ([0, 0], [0, 2], [0, 0], 0.5)], caps))
    return ParamHamiltonian(GOLDEN.omega, FourierTaylor.zero(2, caps), P)


def random_nu(rng, n, h, size, caps=CAPS):
    """Affine nu(w) = c + A w with max_l |nu_l|_h = size"""
    nu = []
    for _ in range(n):
        terms = [([0] * n, [0] * n, [0] * n, rng.normal())]
        for m in range(n):
            beta = [0] * n
            beta[m] = 1
            terms.append(([0] * n, [0] * n, beta, rng.normal()))
        nu.append(FourierTaylor.from_terms(n, terms, caps))
    scale = size / max(param_norm(f, h) for f in nu)
    return [f * scale for f in nu]


def grid_points(domain, grid=16, seed=0):
    """A grid x grid lattice of real angles with random actions and parameters inside `domain`"""
    axis = np.arange(grid) / grid
    theta = np.stack(np.meshgrid(axis, axis, indexing='ij'), axis=-1).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    I = rng.uniform(-0.5, 0.5, theta.shape) * domain.r
    w = rng.uniform(-0.5, 0.5, theta.shape) * domain.h
    return I, theta, w


def conjugacy_defect(H, step, points):
    """max |H o Phi - (N+ + P+)| over the points"""
    I, theta, w = points
    I_new, theta_new, w_new = step.transformation.evaluate(I, theta, w)
    before = H.full().evaluate(I_new.real, theta_new.real, w_new.real)
    after = step.hamiltonian.full().evaluate(I, theta, w)
    return float(np.max(np.abs(before - after)))


class TestConditions(unittest.TestCase):

    def test_pass_and_fail(self):
        check = check_condition('a <= f*b', 1.0, 2.0, 0.5)
        self.assertTrue(check.passed)
        self.assertEqual(check.threshold, 1.0)
        check = check_condition('a <= f*b', 3.0, 2.0, 1.0, strict=False)
        self.assertFalse(check.passed)

    def test_strict_failure_carries_measurements(self):
        with self.assertRaises(StepConditionError) as caught:
            check_condition('a <= b', 3.0, 2.0)
        self.assertEqual(caught.exception.condition, 'a <= b')
        self.assertEqual(caught.exception.measured, 3.0)
        self.assertEqual(caught.exception.threshold, 2.0)
        self.assertEqual(caught.exception.exit_code, 2)


class TestFrequencyInversion(unittest.TestCase):

    def test_random_affine_maps(self):
        rng = np.random.default_rng(21)
        h = 0.1
        for _ in range(100):
            size = rng.uniform(0.05, 0.95) * h / 4
            nu = random_nu(rng, 2, h, size)
            inversion = invert_frequency_map(nu, h)
            self.assertTrue(inversion.certificates.converged)
            self.assertLessEqual(inversion.certificates.phi_distance, inversion.certificates.delta * (1 + 1e-12))
            w = rng.uniform(-1, 1, size=(20, 2)) * h / 4
            theta = np.zeros((20, 2))
            phi = w + np.column_stack([f.evaluate(None, theta, w).real for f in inversion.delta])
            back = phi + np.column_stack([f.evaluate(None, theta, phi).real for f in nu])
            np.testing.assert_allclose(back, w, atol=1e-12)

    def test_zero_map(self):
        nu = [FourierTaylor.zero(2, CAPS)] * 2
        inversion = invert_frequency_map(nu, 0.1)
        self.assertTrue(all(f.is_zero() for f in inversion.delta))
        self.assertEqual(inversion.certificates.iterations, 1)

    def test_constant_map(self):
        nu = [FourierTaylor.constant(2, 3e-3, CAPS), FourierTaylor.constant(2, -1e-3, CAPS)]
        inversion = invert_frequency_map(nu, 0.1)
        self.assertEqual(inversion.delta[0].coefficient(), -3e-3)
        self.assertEqual(inversion.delta[1].coefficient(), 1e-3)

    def test_scalar_closed_form(self):
        # nu = a w_1 is inverted by w_1 -> w_1/(1 + a)
        a, h = 0.1, 0.1
        nu = [FourierTaylor.from_terms(2, [([0, 0], [0, 0], [1, 0], a)], CAPS), FourierTaylor.zero(2, CAPS)]
        inversion = invert_frequency_map(nu, h)
        self.assertAlmostEqual(inversion.delta[0].coefficient(beta=[1, 0]).real, -a / (1 + a), delta=1e-14)
        self.assertTrue(inversion.delta[1].is_zero())
        w = np.random.default_rng(26).uniform(-1, 1, size=(20, 2)) * h / 4
        phi = w[:, 0] + inversion.delta[0].evaluate(None, np.zeros((20, 2)), w).real
        np.testing.assert_allclose(phi, w[:, 0] / (1 + a), atol=1e-16)

    def test_too_large_rejected(self):
        nu = random_nu(np.random.default_rng(22), 2, 0.1, 0.03)
        with self.assertRaises(InversionPreconditionError):
            invert_frequency_map(nu, 0.1)

    def test_angle_dependence_rejected(self):
        nu = [FourierTaylor.cos_mode(2, [1, 0], CAPS, amplitude=1e-4), FourierTaylor.zero(2, CAPS)]
        with self.assertRaises(DomainError):
            invert_frequency_map(nu, 0.1)


class TestTransformation(unittest.TestCase):

    def test_identity(self):
        T = KamTransformation.identity(2, CAPS)
        self.assertTrue(T.is_identity())
        theta = np.random.default_rng(23).uniform(size=(5, 2))
        I = np.full((5, 2), 0.01)
        I_new, theta_new, w_new = T.evaluate(I, theta)
        np.testing.assert_allclose(I_new.real, I)
        np.testing.assert_allclose(theta_new.real, theta)
        np.testing.assert_allclose(w_new, 0.0)

    def test_rejects_nonaffine_action_map(self):
        quadratic = FourierTaylor.from_terms(2, [([0, 0], [2, 0], [0, 0], 1.0)], CAPS)
        zero = FourierTaylor.zero(2, CAPS)
        with self.assertRaises(ValueError):
            KamTransformation([quadratic, zero], [zero, zero], [zero, zero])

    def test_angle_only_flow_in_closed_form(self):
        b = 1e-3
        F = FourierTaylor.cos_mode(2, [1, 0], CAPS, amplitude=b)
        flow = time_one_flow(F, DomainParams(r=0.1, s=0.2, h=0.1), tol=1e-18, max_order=10)
        theta = np.random.default_rng(24).uniform(size=(10, 2))
        T = KamTransformation(flow.U, flow.Vd, [FourierTaylor.zero(2, CAPS)] * 2)
        I_new, theta_new, _ = T.evaluate(np.zeros((10, 2)), theta)
        np.testing.assert_allclose(I_new[:, 0].real, 2 * np.pi * b * np.sin(2 * np.pi * theta[:, 0]), atol=1e-15)
        np.testing.assert_allclose(theta_new.real, theta, atol=1e-15)

    def test_flow_is_symplectic(self):
        caps = Caps(cutoff_k=16, deg_i=2, deg_w=0)
        F = (FourierTaylor.cos_mode(2, [1, 0], caps, amplitude=1e-3)
             + FourierTaylor.cos_mode(2, [1, 1], caps, amplitude=1e-3, alpha=[1, 0]))
        domain = DomainParams(r=0.05, s=0.2, h=0.1)
        flow = time_one_flow(F, domain, tol=1e-18, max_order=30)
        T = KamTransformation(flow.U, flow.Vd, [FourierTaylor.zero(2, caps)] * 2)
        self.assertLess(T.symplectic_defect(domain, samples=50), 1e-10)

    def test_flow_domain_check(self):
        F = FourierTaylor.cos_mode(2, [1, 0], CAPS, amplitude=1.0)
        with self.assertRaises(FlowDomainError):
            time_one_flow(F, DomainParams(r=0.01, s=0.2, h=0.1), 1e-12, 10, r=0.01, sigma=0.1)

    def test_json(self):
        F = FourierTaylor.cos_mode(2, [1, 0], CAPS, amplitude=1e-3)
        flow = time_one_flow(F, DomainParams(r=0.1, s=0.2, h=0.1), tol=1e-18, max_order=10)
        T = KamTransformation(flow.U, flow.Vd, [FourierTaylor.zero(2, CAPS)] * 2, DomainParams(r=0.1, s=0.2, h=0.1))
        data = T.to_json()
        self.assertEqual(set(data), {'n', 'U', 'V', 'phi', 'domain', 'certificates'})
        again = KamTransformation.from_json(data)
        theta = np.random.default_rng(25).uniform(size=(5, 2))
        np.testing.assert_allclose(again.evaluate(None, theta)[0], T.evaluate(None, theta)[0])


class TestKamStep(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.H = desk_hamiltonian()
        cls.domain = DomainParams(r=0.01284, s=0.4, h=0.01)
        cls.basis = rational_basis(GOLDEN, 5)
        cls.cfg = StepConfig(constants=ConstantsConfig(eps_r_factor=16.0))
        cls.step = kam_step(cls.H, cls.domain, 0.2, 5, cls.basis, cls.cfg)

    def test_contract(self):
        report = self.step.report
        self.assertTrue(report.success)
        self.assertLessEqual(report.p_plus_norm + report.discard, report.p_plus_target)
        self.assertAlmostEqual(report.p_plus_target, self.cfg.eta * self.H.P.norm(self.domain) / 8)
        self.assertTrue(all(check.passed for check in report.conditions))

    def test_tail_record(self):
        report = self.step.report
        eta = self.cfg.eta
        # the tail is |I|^2/2, measured at radius 2 eta r
        self.assertAlmostEqual(report.tail_norm, (2 * eta * self.domain.r) ** 2, delta=1e-20)
        self.assertLessEqual(report.tail_norm, eta * report.eps / 16)
        self.assertLessEqual(report.tail_norm, report.tail_bound)

    def test_stages(self):
        stages = self.step.report.stages
        self.assertEqual(len(stages), 2)
        self.assertFalse(stages[0].skipped)
        # both perturbing modes are off-resonant for the first direction
        self.assertTrue(stages[1].skipped)
        self.assertLessEqual(stages[0].f_over_qp, 1.0)
        self.assertLessEqual(stages[0].homological_defect, 1e-10 * stages[0].p_norm)

    def test_output_hamiltonian(self):
        final = DomainParams(r=self.cfg.eta * self.domain.r, s=0.2, h=self.domain.h / 4)
        self.assertAlmostEqual(self.step.P_plus.norm(final), self.step.report.p_plus_norm)
        self.assertLess(self.step.report.p_plus_norm, 1e-2 * self.H.P.norm(self.domain))
        # no averaged part to absorb, so the frequency map is the identity
        self.assertTrue(all(f.is_zero() for f in self.step.transformation.dphi))

    def test_transformation_certificates(self):
        certificates = self.step.report.certificates
        self.assertLess(certificates.symplectic_defect, 1e-9)
        self.assertLess(certificates.w_distance, 1.0)
        self.assertEqual(len(self.step.transformation.generators), 1)

    def test_conjugacy_on_grid(self):
        report = self.step.report
        points = grid_points(self.step.transformation.domain)
        self.assertLessEqual(conjugacy_defect(self.H, self.step, points),
                             report.discard + 1e-2 * report.p_plus_target)

    def test_h_too_large(self):
        with self.assertRaises(StepConditionError):
            kam_step(self.H, self.domain.with_(h=0.5), 0.2, 5, self.basis, self.cfg)

    def test_sigma_range(self):
        with self.assertRaises(DomainError):
            kam_step(self.H, self.domain, 0.5, 5, self.basis, self.cfg)


class TestAveragedInput(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.domain = DomainParams(r=0.01284, s=0.4, h=0.01)
        cls.basis = rational_basis(GOLDEN, 5)
        cls.cfg = StepConfig(constants=ConstantsConfig(eps_r_factor=16.0))

    def test_zero_perturbation(self):
        H = ParamHamiltonian(GOLDEN.omega, FourierTaylor.zero(2, CAPS), FourierTaylor.zero(2, CAPS))
        step = kam_step(H, self.domain, 0.2, 5, self.basis, self.cfg)
        self.assertTrue(step.report.success)
        self.assertTrue(step.P_plus.is_zero())
        self.assertTrue(step.transformation.is_identity())
        self.assertEqual(step.transformation.generators, [])
        self.assertTrue(all(stage.skipped for stage in step.report.stages))

    def test_angle_free_affine_perturbation(self):
        # P = eps (0.3 + I_1 - I_2/2 + 2 w_1 I_1) gives nu = eps (1 + 2 w_1, -1/2)
        eps, h = 1e-6, self.domain.h
        P = FourierTaylor.from_terms(2, [([0, 0], [0, 0], [0, 0], 0.3 * eps), ([0, 0], [1, 0], [0, 0], eps),
                                         ([0, 0], [0, 1], [0, 0], -0.5 * eps), ([0, 0], [1, 0], [1, 0], 2 * eps)],
                                     CAPS)
        H = ParamHamiltonian(GOLDEN.omega, FourierTaylor.zero(2, CAPS), P)
        step = kam_step(H, self.domain, 0.2, 5, self.basis, self.cfg)
        T = step.transformation
        self.assertTrue(step.report.success)
        self.assertTrue(all(stage.skipped for stage in step.report.stages))
        self.assertEqual(T.generators, [])
        self.assertTrue(all(f.is_zero() for f in T.action_displacement() + T.Vd))
        self.assertTrue(step.P_plus.is_zero())
        self.assertAlmostEqual(step.report.nu_norm, eps * (1 + 2 * h), delta=1e-20)

        # phi(w) = w + delta with delta = -nu(w + delta)
        I, theta, w = grid_points(T.domain, grid=4)
        delta = np.column_stack([f.evaluate(None, theta, w).real for f in T.dphi])
        np.testing.assert_allclose(delta[:, 0], -eps * (1 + 2 * w[:, 0]) / (1 + 2 * eps), rtol=1e-12)
        np.testing.assert_allclose(delta[:, 1], 0.5 * eps, rtol=1e-12)
        after = step.hamiltonian.full().evaluate(I, theta, w)
        np.testing.assert_allclose(after, H.full().evaluate(I, theta, w + delta), atol=1e-16)


class TestFrequencyAbsorption(unittest.TestCase):
    """The desk Hamiltonian plus eps I_1: the step absorbs eps into the frequency"""

    @classmethod
    def setUpClass(cls):
        cls.eps = 1e-6
        desk = desk_hamiltonian(cls.eps)
        drift = FourierTaylor.cos_mode(2, [0, 0], CAPS, amplitude=cls.eps, alpha=[1, 0])
        cls.H = ParamHamiltonian(desk.omega0, desk.e, desk.P + drift)
        cls.domain = DomainParams(r=0.01284, s=0.4, h=0.01)
        cls.cfg = StepConfig(constants=ConstantsConfig(eps_r_factor=16.0))
        cls.step = kam_step(cls.H, cls.domain, 0.2, 5, rational_basis(GOLDEN, 5), cls.cfg)

    def test_parameter_shift(self):
        report, T = self.step.report, self.step.transformation
        self.assertTrue(report.success)
        self.assertAlmostEqual(report.nu_norm, self.eps, delta=1e-20)
        self.assertAlmostEqual(T.dphi[0].coefficient().real, -self.eps, delta=1e-20)
        self.assertTrue(T.dphi[1].is_zero())

    def test_conjugacy_on_grid(self):
        report = self.step.report
        points = grid_points(self.step.transformation.domain, seed=1)
        self.assertLessEqual(conjugacy_defect(self.H, self.step, points),
                             report.discard + 1e-2 * report.p_plus_target)

    def test_composition_with_numerical_inverse(self):
        T = self.step.transformation
        F = T.generators[0]
        flow = time_one_flow(-F, T.domain, tol=1e-20, max_order=20)
        inverse = invert_frequency_map(T.dphi, T.domain.h)
        inner = T.domain.with_(r=T.domain.r / 2, h=T.domain.h / 2)
        T_inv = KamTransformation(flow.U, flow.Vd, inverse.delta, inner, generators=[-F])
        composed = compose_transforms(T, T_inv)
        rng = np.random.default_rng(27)
        I = rng.uniform(-1, 1, (50, 2)) * inner.r
        theta = rng.uniform(size=(50, 2))
        w = rng.uniform(-1, 1, (50, 2)) * inner.h
        tol = ToleranceConfig().compose_tol
        I_new, theta_new, w_new = composed.evaluate(I, theta, w)
        np.testing.assert_allclose(I_new.real, I, rtol=0, atol=tol)
        np.testing.assert_allclose(theta_new.real, theta, rtol=0, atol=tol)
        np.testing.assert_allclose(w_new.real, w, rtol=0, atol=tol)


class TestRemainderIntegralForm(unittest.TestCase):
    """P = eps cos(2 pi theta_1)(1 + I_1) is averaged in a single stage, so P+ is the stage remainder

        P~ = int_0^1 {(1 - t) P_2 + t P_1 + S, F} o X^t_F dt,  S = (omega - v).I,  P_2 = 0"""

    @classmethod
    def setUpClass(cls):
        cls.eps = 1e-6
        P = (FourierTaylor.cos_mode(2, [1, 0], CAPS, amplitude=cls.eps)
             + FourierTaylor.cos_mode(2, [1, 0], CAPS, amplitude=cls.eps, alpha=[1, 0]))
        cls.H = ParamHamiltonian(GOLDEN.omega, FourierTaylor.zero(2, CAPS), P)
        cls.basis = rational_basis(GOLDEN, 5)
        cls.cfg = StepConfig(constants=ConstantsConfig(eps_r_factor=16.0))
        cls.step = kam_step(cls.H, DomainParams(r=0.01284, s=0.4, h=0.01), 0.2, 5, cls.basis, cls.cfg)

    def test_output_bound(self):
        report = self.step.report
        self.assertTrue(report.success)
        self.assertLessEqual(report.p_plus_norm, report.p_plus_target)
        self.assertTrue(report.stages[1].skipped)
        self.assertTrue(all(f.is_zero() for f in self.step.transformation.dphi))

    def test_matches_quadrature(self):
        T = self.step.transformation
        F = T.generators[0]
        v = self.basis.vectors[0]
        S = ParamHamiltonian(GOLDEN.omega - v.value(), FourierTaylor.zero(2, CAPS),
                             FourierTaylor.zero(2, CAPS)).normal_form()
        with_p = poisson_bracket(self.H.P, F).kept
        with_s = poisson_bracket(S, F).kept
        I, theta, w = grid_points(T.domain, seed=2)
        nodes, weights = np.polynomial.legendre.leggauss(8)
        expected = np.zeros(len(theta))
        for t, c in zip((nodes + 1) / 2, weights / 2):
            flow = time_one_flow(F * t, T.domain, tol=1e-20, max_order=20)
            I_t = np.column_stack([f.evaluate(I, theta, w).real for f in flow.U])
            theta_t = theta + np.column_stack([f.evaluate(I, theta, w).real for f in flow.Vd])
            expected += c * (t * with_p.evaluate(I_t, theta_t, w) + with_s.evaluate(I_t, theta_t, w)).real
        got = self.step.P_plus.evaluate(I, theta, w).real
        self.assertGreater(np.max(np.abs(got)), 1e-10)
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-3 * self.step.report.p_plus_target)


if __name__ == '__main__':
    unittest.main()
