"""Command-line entry point: ``flatsurr <subcommand> --config PATH --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 run error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3

COMMANDS = ("gen-data", "train", "collect-lgv", "attack", "eval-transfer", "sharpness",
            "alpha-trace", "sweep", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flatsurr", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment configuration")
    common.add_argument("--out", type=Path, help="artifact directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="restrict to one surrogate seed")
    common.add_argument("--threads", type=int, help="parallel worker slots")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "alpha-trace":
            sp.add_argument("--decay-epoch", type=int, help="completed epochs at the decay")
            sp.add_argument("--window", type=int, default=5, help="epochs on each side")
        if name == "sweep":
            sp.add_argument("--path", help="dotted config path to vary")
            sp.add_argument("--values", help="JSON list of values")
    return p


def _config(args):
    from .harness import ConfigError, ExperimentConfig, load_config

    if args.config is None:
        if args.command == "report":
            return None
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    d = cfg.model_dump(mode="json")
    if args.out is not None:
        d["output"]["dir"] = str(args.out)
    if args.seed is not None:
        d["surrogate"]["seeds"] = [args.seed]
    if args.threads is not None:
        d["threads"] = args.threads
    return ExperimentConfig.model_validate(d)


def _seeds(run):
    return run.cfg.surrogate.seeds


def dispatch(args) -> int:
    from . import report as R
    from . import sharpness as S
    from .harness import Run, sweep

    cfg = _config(args)
    if args.command == "report":
        out = args.out or (Path(cfg.output.dir) if cfg else None)
        if out is None:
            from .harness import ConfigError
            raise ConfigError("report needs --out or --config")
        for p in R.emit_report(out):
            print(p)
        return EXIT_OK
    if args.command == "sweep":
        values = json.loads(args.values) if args.values else None
        rows = sweep(cfg, args.path, values, args.out)
        for r in rows:
            print(r["value"], r["mean"], r["status"])
        return EXIT_OK
    if args.threads:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    run = Run(cfg)
    if args.command == "gen-data":
        for k, ds in run.datasets().items():
            print(k, len(ds))
    elif args.command == "train":
        run.targets()
        for s in _seeds(run):
            run.train_surrogate(s)
        print(f"trained {run.trained} models")
    elif args.command == "collect-lgv":
        if run.cfg.attack.lgv is None:
            from .harness import ConfigError
            raise ConfigError("attack.lgv section is required for collect-lgv")
        for s in _seeds(run):
            print(s, len(run.lgv_pool(s)))
    elif args.command == "attack":
        for s in _seeds(run):
            for e in run.attack_epochs(s):
                adv = run.attack(s, e)
                print(run.adv_path(s, e), len(adv))
    elif args.command == "eval-transfer":
        rows = [r for s in _seeds(run) for e in run.attack_epochs(s) for r in run.evaluate(s, e)]
        rows.sort(key=lambda r: (r["epoch"], r["target"], r["seed"]))
        R.write_csv(run.dir / "transfer.csv", R.TRANSFER_COLUMNS, rows)
        R.emit_report(run.dir)
        print(run.dir / "transfer.csv")
    elif args.command == "sharpness":
        d = run.cfg.model_dump(mode="json")
        d["diagnostics"]["sharpness"] = True
        run = Run(d, run.dir)
        for s in _seeds(run):
            run.sharpness(s)
            print(run.surrogate_dir(s) / "sharpness.csv")
    elif args.command == "alpha-trace":
        if not run.cfg.diagnostics.alpha_every:
            from .harness import ConfigError
            raise ConfigError("diagnostics.alpha_every must be > 0 for alpha-trace")
        decay = args.decay_epoch
        if decay is None:
            sched = run.cfg.surrogate.optimizer.spec().schedule
            decay = sched[0][0] if sched else None
        for s in _seeds(run):
            run.train_surrogate(s)
            recs = run.alpha_records(s)
            if decay is None:
                print(s, len(recs), "records")
                continue
            _, _, (t, df, p) = S.alpha_campaign(recs, args.window, args.window, decay)
            print(f"seed {s}: t={t:.4f} df={df:.2f} p={p:.3g}")
    return EXIT_OK


def main(argv=None) -> int:
    from .harness import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"run error: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
