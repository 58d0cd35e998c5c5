"""
promptpan command line: continual panoptic segmentation experiments.

    python cli.py run --config configs/desk.ini [--output DIR] [--resume] [--seed N]

Exit codes: 0 ok, 1 unexpected failure, 2 config error, 3 checkpoint mismatch.
"""

import sys
import logging
import argparse
from typing import List, Optional

import harness
from errors import ConfigError, PromptPanError

logger = logging.getLogger(__name__)


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(',') if v.strip()]


def _pairs(text: str) -> List[tuple]:
    """'10:5,20:10' -> [(10, 5), (20, 10)]"""
    try:
        pairs = [tuple(int(v) for v in item.split(':')) for item in text.split(',')]
    except ValueError:
        pairs = []
    if not pairs or any(len(p) != 2 for p in pairs):
        raise ConfigError(f"--prompt-counts expects base:step pairs, got {text!r}")
    return pairs


# ─── Commands ─────────────────────────────────────────────────────────────────

def generate_data_command(cfg, args):
    return harness.generate_data(cfg)


def run_command(cfg, args):
    return harness.run_scenario(cfg, resume=args.resume)


def sweep_delta_command(cfg, args):
    return harness.sweep_delta(cfg, _floats(args.deltas) if args.deltas else None)


def sweep_orderings_command(cfg, args):
    return harness.sweep_orderings(cfg, args.n, resume=args.resume)


def ablate_command(cfg, args):
    switches = [s for s in args.switches.split(',') if s] if args.switches is not None else None
    counts = _pairs(args.prompt_counts) if args.prompt_counts else None
    return harness.ablate(cfg, switches, counts, resume=args.resume)


def eval_command(cfg, args):
    steps = [int(s) for s in args.only_steps.split(',')] if args.only_steps else None
    return harness.evaluate(cfg, only_steps=steps)


def export_predictions_command(cfg, args):
    return harness.export_predictions(cfg)


COMMANDS = {
    'generate-data': generate_data_command,
    'run': run_command,
    'sweep-delta': sweep_delta_command,
    'sweep-orderings': sweep_orderings_command,
    'ablate': ablate_command,
    'eval': eval_command,
    'export-predictions': export_predictions_command,
}


# ─── Main ─────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='promptpan', description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest='verb', required=True)
    for verb in COMMANDS:
        p = sub.add_parser(verb)
        p.add_argument('--config', required=True, help='experiment config file')
        p.add_argument('--output', help='run directory (default: <output root>/<name>-<hash>)')
        p.add_argument('--resume', action='store_true', help='continue from the newest checkpoint')
        p.add_argument('--seed', type=int, help='model and training seed')
        if verb == 'sweep-delta':
            p.add_argument('--deltas', help='comma-separated delta values')
        elif verb == 'sweep-orderings':
            p.add_argument('--n', type=int, help='number of class orderings')
        elif verb == 'ablate':
            p.add_argument('--switches', help='comma-separated subset of ' + ','.join(harness.SWITCHES))
            p.add_argument('--prompt-counts', help='base:step prompt pairs, e.g. 10:5,20:10')
        elif verb == 'eval':
            p.add_argument('--only-steps', help='comma-separated prompt sets to evaluate in isolation')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = harness.with_overrides(harness.load_experiment(args.config), args.seed, args.output)
        logger.info(f"{args.verb}: config {cfg.hash}, run dir {cfg.run_dir}")
        bundle = COMMANDS[args.verb](cfg, args)
        for path in bundle.files:
            logger.info(f"wrote {path}")
        return 0
    except PromptPanError as e:
        logger.error(f"{args.verb} failed: {e}")
        return e.exit_code
    except Exception:
        logger.exception(f"{args.verb} failed unexpectedly")
        return 1


if __name__ == '__main__':
    sys.exit(main())
