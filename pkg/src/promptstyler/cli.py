"""Command-line entry point: ``promptstyler {run,sweep,ablate}``.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""

import argparse
import logging
import sys

from .errors import ConfigInvalid, NonFiniteLoss, PromptStylerError
from .harness import ExperimentConfig, load_config, run_ablation_grid, run_experiment, run_sweep, write_outputs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

log = logging.getLogger("promptstyler")


def _values(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="promptstyler", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "one experiment"), ("sweep", "sweep K or L"),
                            ("ablate", "loss-flag and classifier-loss ablation grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", type=int, default=None, help="replicate count (config value, else 3)")
        p.add_argument("--workers", type=int, default=1, help="processes for independent cells")
        if name == "sweep":
            p.add_argument("--param", choices=("K", "L"), required=True)
            p.add_argument("--values", type=_values, required=True, help="comma list, e.g. 1,5,10,20")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
        if args.seeds is not None:
            config = config.replace(seeds=args.seeds)
        config = config.validate()
        if args.command == "run":
            result = run_experiment(config)
        elif args.command == "sweep":
            result = run_sweep(config, args.param, args.values, args.workers)
        else:
            result = run_ablation_grid(config, args.workers)
        out = write_outputs(result, args.out)
    except ConfigInvalid as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (NonFiniteLoss, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except PromptStylerError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    log.info("wrote %s", out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
