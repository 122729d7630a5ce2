import math
import os
import unittest
from pathlib import Path

import numpy as np

from kam.cli import load_config, prepare
from kam.diophantine import build_profile, choose_q0, delta_star
from kam.errors import Q0TooSmallError, ScheduleError, TableTooSmallError
from kam.kam_iterate import (TorusResult, admissible_h, auto_h, build_schedule, compose_transforms,
                             iterate)
from kam.kam_step import KamTransformation, time_one_flow
from kam.reduction import place_torus, verify_invariance
from kam.torus_algebra import FourierTaylor
from kam.types import (Caps, ConstantsConfig, DomainParams, FrequencyVector, PerturbationTerm, ScheduleConfig,
                       StepConfig, StopReason)
from kam.utils import wrap_angle

DESK = Path(__file__).resolve().parents[2] / 'configs' / 'desk.toml'
GOLDEN = FrequencyVector(omega=[1.0, (math.sqrt(5.0) - 1.0) / 2.0])
CONSTANTS = ConstantsConfig(eps_r_factor=16.0)


class TestSchedule(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.profile = build_profile(GOLDEN, 200)
        cls.eps, cls.r, cls.s = 3.3e-4, 0.01284, 0.4
        cls.Q0 = choose_q0(cls.profile, cls.s, 1.0).Q0
        h = auto_h(cls.eps, cls.r, cls.profile.Delta(cls.Q0), CONSTANTS)
        cls.domain = DomainParams(r=cls.r, s=cls.s, h=h)
        cls.cfg = ScheduleConfig(max_iters=6)
        cls.schedule = build_schedule(cls.profile, cls.domain, cls.eps, cls.cfg, CONSTANTS)

    def test_sigma_budget(self):
        schedule = self.schedule
        self.assertEqual(schedule.Q0, self.Q0)
        self.assertLessEqual(schedule.sigma_sum, self.s / 2)
        self.assertAlmostEqual(schedule.sigma_sum, sum(schedule.sigma))
        self.assertGreaterEqual(schedule.s[-1], self.s / 2)
        self.assertTrue(all(a > b for a, b in zip(schedule.s, schedule.s[1:])))

    def test_scales_follow_delta_star(self):
        schedule = self.schedule
        delta0 = self.profile.Delta(self.Q0)
        for i, (x, Q) in enumerate(zip(schedule.delta, schedule.Q)):
            self.assertAlmostEqual(x, delta0 * 2 ** i, delta=1e-9 * x)
            self.assertEqual(Q, delta_star(self.profile, x))
            self.assertAlmostEqual(schedule.sigma[i], 1.0 / Q)
        self.assertEqual(schedule.Q[0], self.Q0)
        self.assertEqual(schedule.Q, sorted(schedule.Q))

    def test_geometric_sequences(self):
        schedule, eta = self.schedule, self.cfg.eta
        self.assertEqual(len(schedule.eps), 7)
        for i in range(7):
            self.assertAlmostEqual(schedule.eps[i], self.eps * (eta / 8) ** i, delta=1e-12 * schedule.eps[i])
            self.assertAlmostEqual(schedule.r[i], self.r * eta ** i, delta=1e-12 * schedule.r[i])
            self.assertAlmostEqual(schedule.h[i], self.domain.h / 4 ** i, delta=1e-12 * schedule.h[i])

    def test_ratios(self):
        ratios = self.schedule.ratios
        self.assertAlmostEqual(ratios['eps_over_r'], 1 / 8)
        self.assertAlmostEqual(ratios['h'], 1 / 4)
        self.assertAlmostEqual(ratios['inverse_delta'], 1 / 2)

    def test_initial_conditions_recorded(self):
        names = [check.name for check in self.schedule.conditions]
        self.assertEqual(names, ['eps/r <= f*h', 'h <= f/Delta(Q0)', 'sum sigma_i <= s/2'])
        self.assertTrue(all(check.passed for check in self.schedule.conditions))

    def test_table_too_small(self):
        with self.assertRaises(TableTooSmallError):
            build_schedule(self.profile, self.domain, self.eps, ScheduleConfig(max_iters=12), CONSTANTS)

    def test_q0_too_small(self):
        with self.assertRaises(Q0TooSmallError):
            build_schedule(self.profile, self.domain, self.eps, ScheduleConfig(max_iters=6, Q0=1), CONSTANTS)

    def test_h_outside_interval(self):
        with self.assertRaises(ScheduleError):
            build_schedule(self.profile, self.domain.with_(h=0.5), self.eps, self.cfg, CONSTANTS)


class TestAutoH(unittest.TestCase):

    def test_geometric_mean(self):
        lo, hi = admissible_h(1e-4, 0.01, 100.0, CONSTANTS)
        self.assertAlmostEqual(lo, 1e-2 / 16)
        self.assertAlmostEqual(hi, 1e-2)
        self.assertAlmostEqual(auto_h(1e-4, 0.01, 100.0, CONSTANTS), math.sqrt(lo * hi))

    def test_empty_interval(self):
        with self.assertRaises(ScheduleError):
            auto_h(1.0, 0.01, 100.0, ConstantsConfig())


class TestComposition(unittest.TestCase):

    def test_identity_is_neutral(self):
        caps = Caps(cutoff_k=16, deg_i=2, deg_w=2)
        domain = DomainParams(r=0.05, s=0.2, h=0.01)
        F = FourierTaylor.cos_mode(2, [1, 1], caps, amplitude=1e-4)
        flow = time_one_flow(F, domain, tol=1e-18, max_order=12)
        zero = FourierTaylor.zero(2, caps)
        B = KamTransformation(flow.U, flow.Vd, [zero, zero], domain, [F])
        composed = compose_transforms(KamTransformation.identity(2, caps), B)
        theta = np.random.default_rng(31).uniform(size=(20, 2))
        np.testing.assert_allclose(composed.evaluate(None, theta)[0], B.evaluate(None, theta)[0], atol=1e-16)
        np.testing.assert_allclose(composed.evaluate(None, theta)[1], B.evaluate(None, theta)[1], atol=1e-16)

    def test_matches_pointwise_composition(self):
        caps = Caps(cutoff_k=16, deg_i=2, deg_w=0)
        domain = DomainParams(r=0.05, s=0.2, h=0.01)
        F = FourierTaylor.cos_mode(2, [1, 0], caps, amplitude=1e-4)
        G = FourierTaylor.cos_mode(2, [0, 1], caps, amplitude=1e-4, alpha=[1, 0])
        zero = FourierTaylor.zero(2, caps)
        first = time_one_flow(F, domain, tol=1e-20, max_order=12)
        second = time_one_flow(G, domain, tol=1e-20, max_order=12)
        A = KamTransformation(first.U, first.Vd, [zero, zero])
        B = KamTransformation(second.U, second.Vd, [zero, zero], domain, [G])
        composed = compose_transforms(A, B)
        rng = np.random.default_rng(32)
        I = rng.uniform(-0.01, 0.01, size=(20, 2))
        theta = rng.uniform(size=(20, 2))
        I_b, theta_b, _ = B.evaluate(I, theta)
        I_ab, theta_ab, _ = A.evaluate(I_b.real, theta_b.real)
        I_c, theta_c, _ = composed.evaluate(I, theta)
        np.testing.assert_allclose(I_c.real, I_ab.real, atol=1e-14)
        np.testing.assert_allclose(theta_c.real, theta_ab.real, atol=1e-14)


class TestDeskRun(unittest.TestCase):
    """The golden-mean system |p|^2/2 + eps (cos 2 pi q1 + cos 2 pi (q1 + q2)) at eps = 1e-6"""

    @classmethod
    def setUpClass(cls):
        cls.cfg = load_config(DESK)
        cls.prepared = prepare(cls.cfg)
        cls.step_cfg = StepConfig.from_run(cls.cfg)
        cls.result = iterate(cls.prepared.reduction.hamiltonian, cls.prepared.schedule, cls.prepared.profile,
                             cls.cfg.schedule, cls.step_cfg, cls.cfg.budget)

    def test_converged(self):
        summary = self.result.summary
        self.assertTrue(self.result.converged)
        self.assertEqual(summary.reason, StopReason.converged)
        self.assertGreaterEqual(summary.iterations, 5)
        self.assertLessEqual(summary.final_remainder, self.cfg.schedule.stop_tol * self.prepared.schedule.eps[0])

    def test_envelope(self):
        for record in self.result.records:
            self.assertLessEqual(record.P_norm, record.eps_i)
            self.assertLessEqual(record.P_plus_norm + record.discard, self.cfg.schedule.eta * record.eps_i / 8)
            self.assertLessEqual(record.product, self.cfg.constants.product_bound)

    def test_step_reports(self):
        eta = self.cfg.schedule.eta
        self.assertEqual(len(self.result.reports), len(self.result.records))
        for report in self.result.reports:
            self.assertTrue(report.success)
            self.assertLessEqual(report.tail_norm, eta * report.eps / 16)
            self.assertIn(report.basis.determinant, (1, -1))
            self.assertLess(report.certificates.symplectic_defect, 1e-9)

    def test_frequency_shift(self):
        # f has no angle-independent part, so nothing is absorbed into the frequency
        shift = self.result.summary.frequency_shift
        self.assertLessEqual(shift, 1e-15)
        self.assertTrue(all(report.nu_norm <= 1e-15 for report in self.result.reports))
        np.testing.assert_allclose(self.result.summary.omega0, GOLDEN.omega, rtol=1e-15)

    def test_placement(self):
        placement = place_torus(self.result, self.prepared.system)
        # grad h(p) = omega0 + p for h = omega0.p + |p|^2/2
        np.testing.assert_allclose(placement.action, self.result.w_tilde, atol=1e-13)

    def test_invariance_and_shadowing(self):
        verify = self.cfg.verify.copy(update={'t_max': 20.0, 'halve_dt': False})
        verification = verify_invariance(self.result, self.prepared.system, cfg=verify)
        report = verification.report
        self.assertLessEqual(report.invariance_residual, 1e-8)
        self.assertLessEqual(report.shadow_distance, 1e-6)
        self.assertLessEqual(report.rotation_error, 0.1)
        self.assertEqual(list(verification.trajectory.columns), ['t', 'p_1', 'p_2', 'q_1', 'q_2', 'distance'])

    @unittest.skipUnless(os.environ.get('KAM_SLOW'), 'set KAM_SLOW=1 for the full shadowing horizon')
    def test_shadowing_over_full_horizon(self):
        self.assertEqual(self.cfg.verify.t_max, 100.0)
        report = verify_invariance(self.result, self.prepared.system, cfg=self.cfg.verify).report
        self.assertEqual(report.t_max, 100.0)
        self.assertLessEqual(report.invariance_residual, 1e-8)
        self.assertLessEqual(report.shadow_distance, 1e-6)

    def test_embedding_json(self):
        data = self.result.embedding_json()
        again = TorusResult.from_embedding_json(data)
        theta = np.random.default_rng(33).uniform(size=(10, 2))
        for a, b in zip(again.evaluate(theta), self.result.evaluate(theta)):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_preparation_is_deterministic(self):
        again = prepare(self.cfg)
        self.assertEqual(again.schedule.json(), self.prepared.schedule.json())
        self.assertEqual(again.reduction.recipe.json(), self.prepared.reduction.recipe.json())


def with_drift(cfg, eps):
    """The desk system plus eps*p_1, whose torus sits at omega_tilde = omega0 - eps e_1"""
    cfg = cfg.copy(deep=True)
    cfg.hamiltonian.epsilon = eps
    cfg.hamiltonian.f_terms.append(PerturbationTerm(k=[0, 0], powers=[1, 0]))
    return cfg


def run_iteration(cfg):
    prepared = prepare(cfg)
    result = iterate(prepared.reduction.hamiltonian, prepared.schedule, prepared.profile, cfg.schedule,
                     StepConfig.from_run(cfg), cfg.budget)
    return prepared, result


class TestFrequencyShift(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.cfg = with_drift(load_config(DESK), 1e-6)
        cls.prepared, cls.result = run_iteration(cls.cfg)

    def test_shift_matches_drift(self):
        self.assertTrue(self.result.converged)
        w = self.result.w_tilde
        self.assertAlmostEqual(w[0], -1e-6, delta=1e-9)
        self.assertLessEqual(abs(w[1]), 1e-9)
        self.assertAlmostEqual(self.result.summary.frequency_shift, 1e-6, delta=1e-9)

    def test_first_step_inverts_frequency_map(self):
        report = self.result.reports[0]
        self.assertGreater(report.nu_norm, 0.0)
        self.assertIsNotNone(report.inversion)
        self.assertTrue(report.inversion.converged)
        self.assertLessEqual(report.inversion.phi_distance, report.inversion.delta * (1 + 1e-12))

    def test_invariance(self):
        verify = self.cfg.verify.copy(update={'t_max': 5.0, 'halve_dt': False})
        report = verify_invariance(self.result, self.prepared.system, cfg=verify).report
        self.assertLessEqual(report.invariance_residual, 1e-8)
        self.assertLessEqual(report.shadow_distance, 1e-6)


@unittest.skipUnless(os.environ.get('KAM_SLOW'), 'set KAM_SLOW=1 for the eps-scaling runs')
class TestEpsilonScaling(unittest.TestCase):
    """|omega_tilde - omega0| r / eps_param is r/(2F) up to O(eps) with r = (F eps/M)^(1/2), so it
    shrinks like eps^(1/2); the band is taken after dividing that out"""

    epsilons = (1e-6, 1e-7, 1e-8)

    @classmethod
    def setUpClass(cls):
        base = load_config(DESK)
        cls.runs = [run_iteration(with_drift(base, eps)) for eps in cls.epsilons]

    def test_shift_ratio_band(self):
        ratios = []
        for eps, (prepared, result) in zip(self.epsilons, self.runs):
            self.assertTrue(result.converged)
            self.assertAlmostEqual(result.w_tilde[0], -eps, delta=1e-3 * eps)
            recipe = prepared.reduction.recipe
            ratios.append(result.summary.frequency_shift * recipe.r / recipe.eps_param)
        self.assertEqual(ratios, sorted(ratios, reverse=True))
        scaled = [ratio / math.sqrt(eps / self.epsilons[0]) for ratio, eps in zip(ratios, self.epsilons)]
        self.assertLessEqual(max(scaled) / min(scaled), 3.0)

    def test_placed_torus_approaches_unperturbed(self):
        # the unperturbed torus is p = 0, q = theta
        axis = np.arange(16) / 16
        theta = np.stack(np.meshgrid(axis, axis, indexing='ij'), axis=-1).reshape(-1, 2)
        distances = []
        for prepared, result in self.runs:
            p, q = place_torus(result, prepared.system).evaluate(result, theta)
            distances.append(max(np.max(np.abs(p)), np.max(np.abs(wrap_angle(q - theta)))))
        for coarse, fine in zip(distances, distances[1:]):
            self.assertAlmostEqual(coarse / fine, 10.0, delta=1.0)


if __name__ == '__main__':
    unittest.main()
