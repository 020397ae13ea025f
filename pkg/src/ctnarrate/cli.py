"""Command-line entry points.

``ctnarrate generate`` runs the whole pipeline; ``ctnarrate storyboard``
is the dry run that prints the storyboard JSON; ``ctnarrate stage <name>``
runs one stage against the artifact cache. Exit codes: 0 success, 2 config
error, 3 provider error, 4 pipeline error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import PipelineConfig
from .errors import ConfigError, CtNarrateError, PipelineFailure, ProviderError
from .pipeline import run_generate, run_stage, run_storyboard

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROVIDER = 3
EXIT_PIPELINE = 4

# flag spellings like ``llm=mock`` map onto config keys
_PROVIDER_KEYS = {"llm": "providers.llm", "seg": "providers.seg",
                  "tts": "providers.tts"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctnarrate",
        description="Turn a chest CT volume plus its radiology report into "
                    "a narrated, patient-friendly video report.",
    )
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--out", help="output artifact path (overrides config)")
    parser.add_argument(
        "--provider", action="append", default=[], metavar="KIND=NAME",
        help="provider override, e.g. llm=mock, seg=phantom, tts=offline",
    )
    parser.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
        dest="overrides", help="override any config key, e.g. storyboard.fps=5",
    )
    parser.add_argument("--seed", type=int, default=None,
                        help="reserved for future stochastic components")
    parser.add_argument("--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="run the full pipeline")
    sub.add_parser("storyboard", help="dry run: print storyboard JSON")
    stage = sub.add_parser("stage", help="run one stage against the cache")
    stage.add_argument("name", choices=["findings", "segment", "register",
                                        "mesh"])
    return parser


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_toml(args.config) if args.config else PipelineConfig()
    for item in args.provider:
        if "=" not in item:
            raise ConfigError(f"--provider needs KIND=NAME, got {item!r}")
        kind, name = item.split("=", 1)
        if kind not in _PROVIDER_KEYS:
            raise ConfigError(
                f"--provider kind must be one of {sorted(_PROVIDER_KEYS)}"
            )
        cfg.override(_PROVIDER_KEYS[kind], name)
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.override(key, value)
    if args.out:
        cfg.override("paths.output", args.out)
    return cfg


def _error_record(exc: Exception) -> dict:
    record = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, PipelineFailure):
        record["stage"] = exc.stage
    return record


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args)
        if args.command == "generate":
            result = run_generate(cfg)
            print(f"artifact: {result.artifact_path}")
            print(f"storyboard: {result.storyboard_path}")
            print(f"run log: {result.run_log_path}")
        elif args.command == "storyboard":
            sys.stdout.write(run_storyboard(cfg))
        else:
            artifact = run_stage(cfg, args.name)
            print(f"artifact: {artifact}")
        return EXIT_OK
    except ConfigError as exc:
        print(json.dumps(_error_record(exc)), file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as exc:
        print(json.dumps(_error_record(exc)), file=sys.stderr)
        return EXIT_PROVIDER
    except (CtNarrateError, OSError) as exc:
        print(json.dumps(_error_record(exc)), file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
