"""Command-line entry point ``reverb-doa-lab``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from . import training
from .errors import ArtifactError, ConfigError, DoaLabError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

# flag name -> default; a JSON config may set any of these
DEFAULTS = {
    "preset": "design", "seed": 1, "J": None, "alpha": None, "method": "vae-ssl", "out": "runs",
    "jobs": 1, "full": False, "epochs": None, "lr": None, "batch": None, "checkpoint": None,
    "auto": False, "P": 32, "stride": 32, "verbose": False,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file whose keys mirror the flags")
    common.add_argument("--preset", help="role (design/validation/test1/test2) or preset name")
    common.add_argument("--seed", type=int)
    common.add_argument("--J", type=int, dest="J", help="labeled sample count (multiple of T)")
    common.add_argument("--alpha", type=float)
    common.add_argument("--method", choices=pl.METHODS)
    common.add_argument("--out", help="artifact directory")
    common.add_argument("--jobs", type=int, help="worker processes for simulation")
    common.add_argument("--full", action="store_true", default=None, help="full-size presets and training")
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch", type=int)
    common.add_argument("--checkpoint", type=Path)
    common.add_argument("--auto", action="store_true", default=None, help="create missing upstream artifacts")
    common.add_argument("--P", type=int, dest="P")
    common.add_argument("--stride", type=int)
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    parser = argparse.ArgumentParser(prog="reverb-doa-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a room dataset")
    sub.add_parser("features", parents=[common], help="extract normalized RTF-phase windows")
    sub.add_parser("train", parents=[common], help="train vae-ssl or cnn")
    sub.add_parser("alpha-search", parents=[common], help="grid search alpha = 10..100")
    sub.add_parser("evaluate", parents=[common], help="score a method on a preset")
    sub.add_parser("report", parents=[common], help="write results tables")
    return parser


def resolve_options(ns: argparse.Namespace) -> dict:
    opts = dict(DEFAULTS)
    if ns.config is not None:
        try:
            loaded = json.loads(Path(ns.config).read_text())
        except FileNotFoundError as exc:
            raise ArtifactError(f"missing config file {ns.config}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {ns.config} is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        opts.update(loaded)
    for key in DEFAULTS:
        value = getattr(ns, key, None)
        if value is not None:
            opts[key] = value
    opts["command"] = ns.command
    return opts


def _labeled_count(ws: pl.Workspace, opts: dict) -> int:
    if opts["J"] is not None:
        return int(opts["J"])
    from .roomsim import get_preset

    return len(get_preset(ws.preset("design")).doa_grid)


def _overrides(opts: dict) -> dict:
    return {k: opts[k] for k in ("alpha", "epochs", "lr", "batch") if opts[k] is not None}


def run(opts: dict) -> int:
    ws = pl.Workspace(Path(opts["out"]), full=bool(opts["full"]), seed=int(opts["seed"]))
    cmd, jobs, auto = opts["command"], int(opts["jobs"]), bool(opts["auto"])
    if cmd == "simulate":
        print(pl.simulate(ws, opts["preset"], jobs))
    elif cmd == "features":
        print(pl.extract(ws, opts["preset"], int(opts["P"]), int(opts["stride"]), jobs, auto))
    elif cmd == "train":
        j = _labeled_count(ws, opts)
        cfg = pl.default_train_config(ws, j, _overrides(opts))
        print(pl.train(ws, opts["method"], cfg, auto, jobs))
    elif cmd == "alpha-search":
        j = _labeled_count(ws, opts)
        over = {k: v for k, v in _overrides(opts).items() if k != "alpha"}
        best, table, path = pl.alpha_search(ws, j, training.ALPHA_GRID, over, auto, jobs)
        for alpha, acc in table:
            print(f"alpha={alpha:g} val_accuracy={acc:.2f}")
        print(f"best alpha={best:g} ({path})")
    elif cmd == "evaluate":
        method = opts["method"]
        j = 0 if method == "srp-phat" else _labeled_count(ws, opts)
        ckpt = Path(opts["checkpoint"]) if opts["checkpoint"] else None
        r = pl.evaluate(ws, method, opts["preset"], j, opts["alpha"], ckpt, auto, jobs)
        print(f"{r.method} {r.preset} J={r.labeled_count}: MAE={r.mae_degrees:.2f} deg "
              f"accuracy={r.accuracy_percent:.2f}%")
    elif cmd == "report":
        for p in pl.report(ws):
            print(p)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        opts = resolve_options(ns)
        logging.basicConfig(level=logging.INFO if opts["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return run(opts)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DoaLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
