"""Command-line entry point: ``python -m cli.main <command> [options]``.

Exit codes: 0 success, 2 bad usage or configuration, 3 an acceptance check
failed, 4 a numerical failure (non-finite state, velocity floor, oracle).
"""
import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from cli import __version__
from cli.commands import (
    AcceptanceFailure,
    CommandError,
    cmd_bench,
    cmd_eval,
    cmd_gradcheck,
    cmd_oracle,
    cmd_train,
)
from core.config import DEFAULT_LOG_LEVEL, DEFAULT_OUT_DIR, PROFILES, RunConfig, config_hash, load_run_config
from core.oracle import OracleFailure
from core.tensor import NonFiniteError
from core.vehicles import VelocityFloorError

_log = logging.getLogger(__name__)

COMMANDS = ("train", "eval", "bench", "oracle", "gradcheck")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transmpc", description="Transformer explicit MPC")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--profile", choices=sorted(PROFILES), help="Built-in size profile")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help=f"Run directory (default {DEFAULT_OUT_DIR}/<command>)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Override one config entry, e.g. train.lr=3e-4 (repeatable)")
        p.add_argument("--log-level", default=DEFAULT_LOG_LEVEL)
        if name == "train":
            p.add_argument("--model", choices=("transformer", "mlp"))
            p.add_argument("--resume", type=Path, help="Checkpoint to continue from")
        if name in ("eval", "bench"):
            p.add_argument("--checkpoint", type=Path)
    return parser


def _code_version() -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, check=True, timeout=5,
            cwd=Path(__file__).resolve().parent.parent,
        )
        return result.stdout.strip() or f"v{__version__}"
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"


def _echo_config(config: RunConfig, out: Path, command: str) -> None:
    """Write the effective config (reloadable with --config) and run metadata."""
    (out / "config.json").write_text(json.dumps(config.model_dump(mode="json"), indent=2))
    (out / "run.json").write_text(json.dumps({
        "command": command,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "eval_oracle": config.eval.oracle.model_dump(mode="json"),
        "version": _code_version(),
    }, indent=2))


def _fail(out: Path, exit_code: int, error: str, detail: str) -> int:
    payload = {"error": error, "detail": detail, "exit_code": exit_code}
    print(json.dumps(payload), file=sys.stderr)
    (out / "error.json").write_text(json.dumps(payload, indent=2))
    return exit_code


def _dispatch(args: argparse.Namespace, config: RunConfig, out: Path) -> dict:
    if args.command == "train":
        return cmd_train(config, out, model=args.model, resume=str(args.resume) if args.resume else None)
    if args.command == "eval":
        return cmd_eval(config, out, str(args.checkpoint) if args.checkpoint else None)
    if args.command == "bench":
        return cmd_bench(config, out, str(args.checkpoint) if args.checkpoint else None)
    if args.command == "oracle":
        return cmd_oracle(config, out)
    return cmd_gradcheck(config, out)


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    out: Path = args.out or Path(DEFAULT_OUT_DIR) / args.command
    out.mkdir(parents=True, exist_ok=True)

    try:
        # --- Step 1: effective configuration ---
        config = load_run_config(args.config, args.profile, args.overrides, args.seed)
        _echo_config(config, out, args.command)
        _log.info("%s: profile=%s seed=%d out=%s", args.command, config.profile, config.seed, out)

        # --- Step 2: run the command ---
        summary = _dispatch(args, config, out)
    except CommandError as exc:
        return _fail(out, exc.exit_code, "usage", exc.detail)
    except AcceptanceFailure as exc:
        return _fail(out, 3, "acceptance", str(exc))
    except (NonFiniteError, VelocityFloorError, OracleFailure) as exc:
        return _fail(out, 4, "numerical", str(exc))
    except ValidationError as exc:
        return _fail(out, 2, "config", str(exc))
    except (ValueError, FileNotFoundError) as exc:
        return _fail(out, 2, "invalid", str(exc))

    print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
