import contextlib
import filecmp
import io
import json
import tempfile
import unittest
from pathlib import Path

import pandas as pd

from kam.cli import load_config, main
from kam.errors import ConfigError
from kam.utils import load_json

DESK = Path(__file__).resolve().parents[2] / 'configs' / 'desk.toml'


def run_main(argv):
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main(argv)
    return code, out.getvalue()


class TestUsage(unittest.TestCase):

    def test_missing_config(self):
        code, _ = run_main(['run', '--config', '/nonexistent/kam.toml'])
        self.assertEqual(code, 1)

    def test_bad_arguments(self):
        self.assertEqual(run_main(['analyze'])[0], 1)
        self.assertEqual(run_main(['bogus'])[0], 1)
        self.assertEqual(run_main(['approx', '--freq', 'golden', '--Q', 'many'])[0], 1)

    def test_unknown_frequency(self):
        self.assertEqual(run_main(['approx', '--freq', 'silver-ish', '--Q', '5'])[0], 1)


class TestConfig(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write(self, text):
        path = Path(self.tmp.name) / 'kam.toml'
        path.write_text(text, encoding='utf-8')
        return path

    def test_desk_config_loads(self):
        cfg = load_config(DESK)
        self.assertEqual(cfg.frequency.preset, 'golden')
        self.assertEqual(len(cfg.hamiltonian.h_terms), 2)
        self.assertEqual(cfg.schedule.max_iters, 6)

    def test_error_names_the_line(self):
        path = self.write('seed = 1\n\n[schedule]\neta = 0.7\n')
        with self.assertRaises(ConfigError) as caught:
            load_config(path)
        self.assertIn(f'{path}:4: schedule.eta', str(caught.exception))

    def test_error_in_array_of_tables(self):
        path = self.write('[[hamiltonian.h_terms]]\npowers = [2, 0]\ncoeff = 0.5\n\n'
                          '[[hamiltonian.h_terms]]\npowers = [0, 2]\ncoeff = "half"\n')
        with self.assertRaises(ConfigError) as caught:
            load_config(path)
        self.assertIn(f'{path}:7: hamiltonian.h_terms.1.coeff', str(caught.exception))

    def test_malformed_toml(self):
        with self.assertRaises(ConfigError):
            load_config(self.write('[schedule\neta = 0.1\n'))


class TestAnalyze(unittest.TestCase):

    def test_table_on_stdout(self):
        out, err = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = main(['analyze', '--freq', 'golden', '--qmax', '10'])
        self.assertEqual(code, 0)
        table = pd.read_csv(io.StringIO(out.getvalue()))
        self.assertEqual(list(table.columns), ['Q', 'Psi', 'Delta', 'tail'])
        self.assertEqual(len(table), 10)
        self.assertAlmostEqual(table['Psi'][0], 1.618033988749895, places=10)
        summary = json.loads(err.getvalue())
        self.assertEqual(summary['q_max'], 10)
        self.assertEqual(len(summary['minimizers']), 10)

    def test_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _ = run_main(['analyze', '--freq', 'golden', '--qmax', '200', '--s', '0.4', '--out', tmp])
            self.assertEqual(code, 0)
            self.assertTrue((Path(tmp) / 'analyze.csv').is_file())
            summary = load_json(Path(tmp) / 'analyze.json')
            self.assertEqual(summary['q_max'], 200)
            self.assertLessEqual(summary['choose_q0']['value'], 0.2)


class TestApprox(unittest.TestCase):

    def test_golden_basis(self):
        code, out = run_main(['approx', '--freq', 'golden', '--Q', '5'])
        self.assertEqual(code, 0)
        basis = json.loads(out)
        self.assertEqual([v['numerators'] for v in basis['vectors']], [[13, 8], [8, 5]])
        self.assertEqual(abs(basis['determinant']), 1)

    def test_comma_separated_frequency(self):
        code, out = run_main(['approx', '--freq', '1,0.41421356237309503', '--Q', '5'])
        self.assertEqual(code, 0)
        self.assertEqual([v['numerators'] for v in json.loads(out)['vectors']], [[12, 5], [5, 2]])


class TestPipeline(unittest.TestCase):
    """One short desk run shared by the output, re-verification and reproducibility checks"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.config = cls.root / 'desk.toml'
        cls.config.write_text(DESK.read_text(encoding='utf-8').replace('t_max = 100.0', 't_max = 5.0'),
                              encoding='utf-8')
        cls.out = cls.root / 'run'
        cls.code, _ = run_main(['run', '--config', str(cls.config), '--out', str(cls.out), '--quiet'])

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_single_step(self):
        path = self.root / 'step.json'
        code, _ = run_main(['step', '--config', str(DESK), '--dump-report', str(path)])
        self.assertEqual(code, 0)
        report = load_json(path)
        self.assertTrue(report['success'])
        self.assertEqual(len(report['stages']), 2)
        self.assertLessEqual(report['p_plus_norm'] + report['discard'], report['p_plus_target'])

    def test_run_outputs(self):
        self.assertEqual(self.code, 0)
        for name in ('config.json', 'versions.json', 'iterations.csv', 'result.json', 'embedding.json',
                     'verification.json', 'trajectory.csv', 'run.log'):
            self.assertTrue((self.out / name).is_file(), name)
        result = load_json(self.out / 'result.json')
        self.assertEqual(set(result), {'summary', 'reduction', 'domain', 'schedule', 'steps'})
        self.assertTrue(result['summary']['converged'])
        self.assertIsNotNone(result['summary']['action_shift'])
        iterations = pd.read_csv(self.out / 'iterations.csv')
        self.assertEqual(len(iterations), result['summary']['iterations'])
        self.assertTrue((iterations['P_norm'] <= iterations['eps_i']).all())
        embedding = load_json(self.out / 'embedding.json')
        self.assertEqual(len(embedding['I']), 2)
        self.assertTrue(all(f['real'] is True for f in embedding['I'] + embedding['theta']))

    def test_verify_stored_torus(self):
        self.assertEqual(self.code, 0)
        code, printed = run_main(['verify', '--result', str(self.out / 'result.json'), '--tmax', '2'])
        self.assertEqual(code, 0)
        report = json.loads(printed)
        self.assertEqual(report['t_max'], 2.0)
        self.assertLessEqual(report['invariance_residual'], 1e-8)

    def test_same_config_gives_identical_files(self):
        self.assertEqual(self.code, 0)
        again = self.root / 'again'
        code, _ = run_main(['run', '--config', str(self.config), '--out', str(again), '--quiet'])
        self.assertEqual(code, 0)
        for name in ('iterations.csv', 'result.json', 'embedding.json'):
            self.assertTrue(filecmp.cmp(self.out / name, again / name, shallow=False), name)


if __name__ == '__main__':
    unittest.main()
