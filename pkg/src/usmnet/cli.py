"""Command-line driver: ``usmnet <stage> [options]``.

Exit codes: 0 success, 1 invalid input (config, files, arguments),
2 runtime failure inside a stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataset as ds
from . import pipeline as pl
from . import training as tr

log = logging.getLogger("usmnet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _common(p, config_required=False):
    p.add_argument("--config", required=config_required, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override the data seed (generate-data) or train seeds (train)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for per-snapshot stages")
    p.add_argument("--reproducible", action="store_true", help="byte-identical outputs (no timings)")
    p.add_argument("--out", help="output directory or file")


def _geometry_args(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--geometry", help="geometry artifacts JSON (bifurcation)")
    p.add_argument("--H", type=float, help="cavity height")
    p.add_argument("--mu-p", type=float, nargs="*", default=None, help="physical parameters (e.g. Re)")


def build_parser():
    ap = argparse.ArgumentParser(prog="usmnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("generate-data", help="run the FOM and write a corpus"), True)
    _common(sub.add_parser("train", help="train one model per seed"), True)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a partition")
    _common(p, True)
    p.add_argument("--checkpoint", help="defaults to <out>/model_seed<seed>.usmn")
    p.add_argument("--partition", choices=pl.PARTITIONS)

    p = sub.add_parser("infer", help="predict at query points")
    _common(p)
    _geometry_args(p)
    p.add_argument("--points", required=True, help="CSV with header and x,y columns")

    p = sub.add_parser("trace-streamlines", help="streamlines of a trained model")
    _common(p)
    _geometry_args(p)
    p.add_argument("--seeds", help="CSV of seed points (x,y); default: a line of seeds")
    p.add_argument("--n-seeds", type=int, default=20)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--max-steps", type=int, default=2000)

    p = sub.add_parser("nearest-pair", help="closest pair of landmark vectors in a corpus")
    _common(p)
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus of the config)")
    p.add_argument("--landmark-mode", type=int, choices=(6, 26), default=26)
    p.add_argument("--partition", choices=pl.PARTITIONS, default="all")
    return ap


def _config(args):
    cfg = pl.load_config(args.config)
    if args.workers < 1:
        raise pl.ConfigError("--workers must be >= 1")
    return cfg


def run(args) -> int:
    cmd = args.command
    if cmd == "generate-data":
        cfg = _config(args)
        if args.seed is not None:
            cfg.seed = args.seed
        s = pl.generate_data(cfg, args.out, args.workers, args.reproducible)
        print(f"wrote {s['written']} of {s['requested']} snapshots")
    elif cmd == "train":
        cfg = _config(args)
        seeds = [args.seed] if args.seed is not None else None
        for r in pl.train(cfg, out=args.out, seeds=seeds, reproducible=args.reproducible):
            print(f"seed {r['seed']}: loss {r['final_loss']:.6e} -> {r['checkpoint']}")
    elif cmd == "evaluate":
        cfg = _config(args)
        out = Path(args.out or cfg.paths.out)
        seed = args.seed if args.seed is not None else cfg.train_seeds[0]
        ckpt = args.checkpoint or pl.checkpoint_path(out, seed)
        rep = pl.evaluate(cfg, ckpt, args.partition, out=out, reproducible=args.reproducible)
        agg = rep.aggregates()
        print(json.dumps({m: agg[m]["median"] for m in agg}, sort_keys=True))
    elif cmd in ("infer", "trace-streamlines"):
        if args.out is None:
            raise pl.ConfigError("--out is required")
        if cmd == "infer":
            _, ok = pl.infer(args.checkpoint, args.points, args.out, args.mu_p, args.H, args.geometry)
            if not ok.all():
                print(f"{int((~ok).sum())} point(s) outside the domain", file=sys.stderr)
        else:
            if args.step <= 0 or args.max_steps < 1:
                raise pl.ConfigError("--step must be positive and --max-steps >= 1")
            lines = pl.trace(args.checkpoint, args.out, args.mu_p, args.H, args.geometry, args.seeds,
                             args.n_seeds, args.step, args.max_steps)
            print(f"traced {sum(ln.reason != 'outside' for ln in lines)} streamline(s)")
    elif cmd == "nearest-pair":
        cfg = pl.load_config(args.config) if args.config else None
        corpus = args.corpus or (cfg.paths.corpus if cfg else None)
        if corpus is None:
            raise pl.ConfigError("--corpus or --config is required")
        res = pl.nearest_pair(corpus, args.landmark_mode, args.out, args.partition, cfg)
        print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (pl.ConfigError, ds.CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (pl.PipelineError, tr.TrainingError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
