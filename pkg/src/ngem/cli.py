"""Command line entry point: ``ngem train | bench | verify``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ngem.diffnet import save_checkpoint
from ngem.errors import NgemError
from ngem.harness import LOSSES, benchmark_overhead, emit_csv, load_config, train


def _train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, loss=args.loss)
    out = Path(args.out or f"runs/{Path(args.config).stem}-{cfg.loss}-s{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, timing=not args.no_timing)
    emit_csv(result.metrics, out / "metrics.csv")
    save_checkpoint(result.model, out / "model.mdn")
    last = result.final
    print(f"{cfg.loss} seed={cfg.seed} iterations={result.iterations} "
          f"test_nll={last.test_nll:.4f} entropy={last.entropy:.4f} rmse_min={last.rmse_min:.4f}")
    print(f"wrote {out / 'metrics.csv'} and {out / 'model.mdn'}")
    if result.divergence:
        d = result.divergence
        print(f"diverged: non-finite {d['tensor']} at iteration {d['iteration']}", file=sys.stderr)
        return 3
    return 0


def _bench(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    wall_ngem, wall_nll = benchmark_overhead(cfg, args.updates)
    ratio = wall_ngem / wall_nll if wall_nll > 0 else float("nan")
    print(f"updates={args.updates} ngem={wall_ngem:.3f}s nll={wall_nll:.3f}s ratio={ratio:.4f}")
    return 0


def _verify(args) -> int:
    from ngem.verify import run_all

    results = run_all(n_samples=args.samples)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ngem", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=LOSSES)
    p.add_argument("--out", help="output directory (default runs/<config>-<loss>-s<seed>)")
    p.add_argument("--no-timing", action="store_true",
                   help="write wall_ms as 0 so repeated runs give byte-identical CSVs")
    p.set_defaults(func=_train)

    p = sub.add_parser("bench", help="time nGEM against NLL on the same config")
    p.add_argument("--config", required=True)
    p.add_argument("--updates", type=int, default=10_000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_bench)

    p = sub.add_parser("verify", help="run the theorem checks")
    p.add_argument("--samples", type=int, default=1_000_000, help="Monte-Carlo sample count")
    p.set_defaults(func=_verify)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NgemError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
