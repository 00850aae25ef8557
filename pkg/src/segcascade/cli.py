"""``segcascade`` command-line entry point.

Failures print one JSON object ``{"error": <kind>, "message": ...}`` to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import ConfigError, MissingArtifact, SegCascadeError

COMMANDS = ("generate", "normalize", "train", "predict", "evaluate", "report-empties")
EXIT_CODES = {"ConfigError": 2, "CheckpointMismatch": 2, "MissingArtifact": 3, "IoError": 4}


def load_label_map(path) -> dict[int, int] | None:
    if path is None:
        return None
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"label map not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"label map is not valid JSON: {exc}") from exc
    try:
        return {int(k): int(v) for k, v in raw.items()}
    except (AttributeError, TypeError, ValueError) as exc:
        raise ConfigError("label map must be an object of integer code pairs") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segcascade", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--label-map", help="JSON object mapping external label codes to canonical ones")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-fold/per-case work")
    p.add_argument("--manifest", help="prediction manifest for evaluate/report-empties")
    p.add_argument("--split", default="val", choices=("train", "val"), help="cases to predict")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def dispatch(args) -> object:
    cfg = load_config(args.config)
    label_map = load_label_map(args.label_map)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.command == "generate":
        m = pipeline.generate(cfg)
        return {"cases": len(m["cases"]), "manifest": str(cfg.data_dir / "manifest.json")}
    if args.command == "normalize":
        m = pipeline.normalize(cfg, args.jobs)
        return {"cases": len(m["cases"])}
    if args.command == "train":
        return pipeline.train_command(cfg, args.jobs, label_map)
    if args.command == "predict":
        m = pipeline.predict(cfg, args.jobs, args.split)
        return {"cases": len(m["cases"]), "dir": str(pipeline.predictions_dir(cfg))}
    if args.command == "evaluate":
        return pipeline.evaluate(cfg, args.manifest, args.jobs, label_map)
    return pipeline.report_empties(cfg, args.manifest, label_map)


def _fail(kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return EXIT_CODES.get(kind, 1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except (ConfigError, MissingArtifact) as exc:
        return _fail(type(exc).__name__, str(exc))
    except SegCascadeError as exc:
        return _fail(type(exc).__name__, str(exc))
    except OSError as exc:
        return _fail("IoError", str(exc))
    if isinstance(result, str):
        sys.stdout.write(result)
    else:
        print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
