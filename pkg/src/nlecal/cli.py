"""Command-line interface for the calibration pipeline.

Every subcommand runs the pipeline up to (and including) the named
stage; ``run`` executes everything and writes the report bundle. Stages
are stamped with content hashes, so repeating a command with unchanged
inputs is a no-op and interrupted experiments resume where they stopped.

Configuration comes from a plain-text ``key = value`` file plus repeated
``--set key=value`` overrides; flags win over the file.
"""

import argparse
import logging
import sys

from .errors import ConfigError, NlecalError
from .llm import API_KEY_ENV
from .pipeline import CONFIG_KEYS, METHODS, ExperimentConfig, run_pipeline

logger = logging.getLogger(__name__)

_STAGE_COMMANDS = {
    "ingest": "load and validate the collection, write dataset.json",
    "generate": "sample the LLM for the configured method",
    "aggregate": "fold samples into per-pair explanations",
    "train": "fit the builtin scorer on the train split",
    "score": "score the test split",
    "calibrate": "fit/apply the post-hoc calibrator",
    "evaluate": "compute ranking and calibration metrics",
    "qpp": "compute query-performance predictors and correlations",
    "report": "write report.json, summary.csv, reliability.csv, qpp.csv",
    "run": "execute the full pipeline and write reports",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="nlecal",
        description="Scale-calibrated ranking scores from sampled LLM relevance explanations.",
        epilog=(
            f"Methods: {', '.join(METHODS)}. HTTP endpoint credentials are read from "
            f"the {API_KEY_ENV} environment variable and sent as a bearer token."
        ),
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _STAGE_COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("-c", "--config", help="key = value configuration file")
        cmd.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help=f"override one config key (known keys: {', '.join(sorted(CONFIG_KEYS))})",
        )
    config_cmd = sub.add_parser("config-keys", help="list configuration keys and defaults")
    del config_cmd
    return parser


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_config(args) -> ExperimentConfig:
    overrides = _parse_overrides(args.overrides)
    if args.config:
        return ExperimentConfig.from_file(args.config, overrides)
    if not overrides:
        raise ConfigError("no configuration given; pass --config and/or --set")
    return ExperimentConfig.from_dict(overrides)


def main(argv=None) -> int:
    args_list = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(args_list)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        if args.command == "config-keys":
            for key, (_, default) in sorted(CONFIG_KEYS.items()):
                print(f"{key} = {default}")
            return 0
        config = _load_config(args)
        stop_after = None if args.command == "run" else args.command
        result = run_pipeline(config, stop_after=stop_after)
        for outcome in result.outcomes:
            head = outcome.eval_report
            print(
                f"seed={outcome.seed} nDCG={head.ndcg:.4f} nDCG@10={head.ndcg_at_10:.4f} "
                f"CB-ECE={head.cb_ece:.4f} ECE={head.ece:.4f} MSE={head.mse:.4f}"
            )
        if result.report_files:
            print(f"report written to {result.report_files['report']}")
        return 0
    except NlecalError as exc:
        stage = getattr(exc, "stage", None)
        prefix = f"stage {stage}: " if stage else ""
        print(f"error: {prefix}{exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
