"""Command-line entry point: `kam analyze | approx | run | step | verify`."""
import argparse
import contextlib
import json
import logging
import os
import re
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
from pathlib import Path
from typing import List, NamedTuple, Optional

import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from .diophantine import build_profile, choose_q0, profile_table, rational_basis
from .errors import ConfigError, KamError, UsageError
from .kam_iterate import TorusResult, auto_h, build_schedule, iterate, schedule_domain
from .kam_step import kam_step
from .logger_config import level_from_env, setup_logger
from .reduction import IntegrableSystem, check_smallness, place_torus, reduce_to_param_form, verify_invariance
from .types import ArithmeticProfile, DomainParams, RunConfig, Schedule, StepConfig, TorusSummary
from .utils import dump_json, dumps_json, load_json, package_versions, parse_frequency

logger = logging.getLogger('kam')


class KamArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 1 through UsageError instead of argparse's 2"""

    def error(self, message):
        raise UsageError(f'{self.prog}: {message}')


### Configuration ###


def _locate(text: str, loc) -> Optional[int]:
    """1-based line of the TOML key addressed by a pydantic error location"""
    names = [str(part) for part in loc if not isinstance(part, int)]
    indices = [part for part in loc if isinstance(part, int)]
    if not names:
        return None
    table, key = '.'.join(names[:-1]), names[-1]
    wanted = indices[0] if indices else 0
    current, seen, fallback = '', {}, None
    for number, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        header = re.match(r'^\[\[?\s*([^\]]+?)\s*\]\]?$', stripped)
        if header:
            current = header.group(1)
            seen[current] = seen.get(current, -1) + 1
            if current == '.'.join(names) and seen[current] == wanted:
                fallback = number
            continue
        if re.match(rf'^"?{re.escape(key)}"?\s*=', stripped):
            if current == table and seen.get(current, 0) == wanted:
                return number
            if current == table and fallback is None:
                fallback = number
    return fallback


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'config file {path} does not exist')
    text = path.read_text(encoding='utf-8')
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f'{path}: {e}')
    try:
        return RunConfig(**data)
    except ValidationError as e:
        messages = []
        for item in e.errors():
            line = _locate(text, item['loc'])
            where = f'{path}:{line}' if line else str(path)
            field = '.'.join(str(part) for part in item['loc'])
            messages.append(f'{where}: {field}: {item["msg"]}')
        raise ConfigError('; '.join(messages))


def _threads():
    value = os.environ.get('KAM_THREADS')
    if not value:
        return contextlib.nullcontext()
    try:
        return threadpool_limits(limits=int(value))
    except ValueError:
        raise ConfigError(f'KAM_THREADS must be an integer, got "{value}"')


### Run pipeline ###


class Prepared(NamedTuple):
    config: RunConfig
    profile: ArithmeticProfile
    system: IntegrableSystem
    reduction: object
    domain: DomainParams
    schedule: Schedule


def prepare(cfg: RunConfig) -> Prepared:
    """Frequency profile, reduction to parameterized form, domain and schedule"""
    omega = parse_frequency(cfg.frequency)
    profile = build_profile(omega, cfg.schedule.q_max, cfg.budget)
    system = IntegrableSystem.from_config(omega, cfg.hamiltonian)
    r = None if cfg.domain.r == 'auto' else float(cfg.domain.r)
    s = cfg.domain.s
    reduction = reduce_to_param_form(system, cfg.caps, s, r=r, constants=cfg.constants, seed=cfg.seed)
    recipe = reduction.recipe
    if cfg.domain.h == 'auto':
        if cfg.schedule.Q0 is None:
            Q0 = choose_q0(profile, s, cfg.schedule.C, cfg.schedule.x_cut, cfg.schedule.tail_grid).Q0
        else:
            Q0 = cfg.schedule.Q0
        h = auto_h(recipe.eps_param, recipe.r, profile.Delta(Q0), cfg.constants)
    else:
        h = float(cfg.domain.h)
    domain = DomainParams(r=recipe.r, s=s, h=h)
    check_smallness(reduction, domain, cfg.constants)
    schedule = build_schedule(profile, domain, recipe.eps_param, cfg.schedule, cfg.constants)
    return Prepared(cfg, profile, system, reduction, domain, schedule)


def _write_common(directory: Path, cfg: RunConfig):
    directory.mkdir(parents=True, exist_ok=True)
    dump_json(json.loads(cfg.json()), directory / 'config.json')
    dump_json(package_versions(), directory / 'versions.json')


def _write_verification(directory: Path, verification):
    dump_json(json.loads(verification.report.json()), directory / 'verification.json')
    verification.trajectory.to_csv(directory / 'trajectory.csv', index=False)


def run(cfg: RunConfig, directory: Path, progress: bool = True) -> TorusResult:
    _write_common(directory, cfg)
    prepared = prepare(cfg)
    H0 = prepared.reduction.hamiltonian
    result = iterate(H0, prepared.schedule, prepared.profile, cfg.schedule, StepConfig.from_run(cfg), cfg.budget,
                     progress=progress)

    columns = ['i', 'eps_i', 'r_i', 'h_i', 's_i', 'sigma_i', 'Q_i', 'P_norm', 'P_plus_norm', 'telescope_distance',
               'product', 'lie_order_max', 'discard']
    pd.DataFrame([record.dict() for record in result.records], columns=columns).to_csv(
        directory / 'iterations.csv', index=False)

    placement = place_torus(result, prepared.system, cfg.tolerances.newton_tol)
    result.summary.action_shift = placement.action.tolist()
    dump_json({
        'summary': json.loads(result.summary.json()),
        'reduction': json.loads(prepared.reduction.recipe.json()),
        'domain': prepared.domain.dict(),
        'schedule': json.loads(prepared.schedule.json()),
        'steps': [json.loads(report.json()) for report in result.reports],
    }, directory / 'result.json')
    if cfg.output.embedding:
        dump_json(result.embedding_json(), directory / 'embedding.json')

    if cfg.verify.enabled:
        verification = verify_invariance(result, prepared.system, placement, cfg=cfg.verify, seed=cfg.seed,
                                         progress=progress)
        final = schedule_domain(prepared.schedule, len(result.records))
        verification.report.symplectic_defect = result.transformation.symplectic_defect(
            final, cfg.tolerances.sym_samples, cfg.seed)
        _write_verification(directory, verification)
    return result


### Subcommands ###


def cmd_analyze(args) -> int:
    omega = parse_frequency(args.freq)
    profile = build_profile(omega, args.qmax)
    table = profile_table(profile)
    summary = {'omega': omega.omega, 'q_max': profile.q_max, 'minimizers': profile.minimizers}
    if args.s is not None:
        summary['choose_q0'] = json.loads(choose_q0(profile, args.s, args.C).json())
    if args.out:
        directory = Path(args.out)
        directory.mkdir(parents=True, exist_ok=True)
        table.to_csv(directory / 'analyze.csv', index=False)
        dump_json(summary, directory / 'analyze.json')
        logger.info(f'Wrote {directory / "analyze.csv"} and {directory / "analyze.json"}')
    else:
        table.to_csv(sys.stdout, index=False)
        print(dumps_json(summary), file=sys.stderr)
    return 0


def cmd_approx(args) -> int:
    omega = parse_frequency(args.freq)
    basis = rational_basis(omega, args.Q)
    print(basis.json(indent=2))
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    directory = Path(args.out or cfg.output.directory)
    directory.mkdir(parents=True, exist_ok=True)
    level = logging.DEBUG if args.verbose else level_from_env()
    run_logger = setup_logger('kam', level, log_file=directory / 'run.log')
    try:
        result = run(cfg, directory, progress=not args.quiet)
    finally:
        for handler in run_logger.handlers:
            handler.close()
        setup_logger('kam', level)
    if not result.converged:
        logger.error(f'Iteration stopped after {result.summary.iterations} steps without reaching stop_tol')
        return 3
    return 0


def cmd_step(args) -> int:
    cfg = load_config(args.config)
    prepared = prepare(cfg)
    schedule = prepared.schedule
    if not schedule.Q:
        raise UsageError('schedule.max_iters must be at least 1 for a single step')
    basis = rational_basis(prepared.profile.omega, schedule.Q[0], cfg.budget)
    step = kam_step(prepared.reduction.hamiltonian, prepared.domain, schedule.sigma[0], schedule.Q[0], basis,
                    StepConfig.from_run(cfg), eps=schedule.eps[0], delta_Q=prepared.profile.Delta(schedule.Q[0]))
    report = json.loads(step.report.json())
    if args.dump_report:
        dump_json(report, args.dump_report)
    else:
        print(dumps_json(report))
    return 0


def cmd_verify(args) -> int:
    result_path = Path(args.result)
    directory = result_path.parent
    config_path = Path(args.config) if args.config else directory / 'config.json'
    if config_path.suffix == '.json':
        if not config_path.is_file():
            raise ConfigError(f'config file {config_path} does not exist')
        try:
            cfg = RunConfig(**load_json(config_path))
        except ValidationError as e:
            raise ConfigError(f'{config_path}: {e}')
    else:
        cfg = load_config(config_path)
    embedding_path = Path(args.embedding) if args.embedding else directory / 'embedding.json'
    if not result_path.is_file() or not embedding_path.is_file():
        raise ConfigError(f'need both {result_path} and {embedding_path}')
    summary = TorusSummary(**load_json(result_path)['summary'])
    result = TorusResult.from_embedding_json(load_json(embedding_path), summary)
    system = IntegrableSystem.from_config(parse_frequency(cfg.frequency), cfg.hamiltonian)
    verify_cfg = cfg.verify.copy(update={'t_max': args.tmax}) if args.tmax is not None else cfg.verify
    placement = place_torus(result, system, cfg.tolerances.newton_tol)
    verification = verify_invariance(result, system, placement, cfg=verify_cfg, seed=cfg.seed)
    _write_verification(directory, verification)
    print(verification.report.json(indent=2))
    return 0


def build_parser() -> KamArgumentParser:
    parser = KamArgumentParser(prog='kam', description='Invariant tori by KAM steps along rational approximations.')
    parser.add_argument('--verbose', action='store_true', help='log at DEBUG level')
    commands = parser.add_subparsers(dest='command', required=True)

    analyze = commands.add_parser('analyze', help='Psi, Delta and tail tables of a frequency vector')
    analyze.add_argument('--freq', required=True, help='preset name or comma-separated components')
    analyze.add_argument('--qmax', type=int, default=50)
    analyze.add_argument('--s', type=float, default=None, help='also choose Q0 for this analyticity width')
    analyze.add_argument('--C', type=float, default=1.0)
    analyze.add_argument('--out', default=None,
                         help='directory for analyze.csv/analyze.json (default: CSV on stdout, summary on stderr)')
    analyze.set_defaults(handler=cmd_analyze)

    approx = commands.add_parser('approx', help='unimodular basis of Q-approximations')
    approx.add_argument('--freq', required=True)
    approx.add_argument('--Q', type=float, required=True)
    approx.set_defaults(handler=cmd_approx)

    run_cmd = commands.add_parser('run', help='full KAM iteration, placement and verification')
    run_cmd.add_argument('--config', required=True)
    run_cmd.add_argument('--out', default=None, help='output directory (default: output.directory)')
    run_cmd.add_argument('--quiet', action='store_true', help='no progress bars')
    run_cmd.set_defaults(handler=cmd_run)

    step = commands.add_parser('step', help='a single KAM step on the configured system')
    step.add_argument('--config', required=True)
    step.add_argument('--dump-report', default=None)
    step.set_defaults(handler=cmd_step)

    verify = commands.add_parser('verify', help='re-verify a stored torus')
    verify.add_argument('--result', required=True)
    verify.add_argument('--embedding', default=None)
    verify.add_argument('--config', default=None, help='default: config.json next to the result')
    verify.add_argument('--tmax', type=float, default=None)
    verify.set_defaults(handler=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            setup_logger('kam', logging.DEBUG)
        with _threads():
            return args.handler(args)
    except KamError as e:
        logger.error(f'{type(e).__name__}: {e}')
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
