"""Command-line entry points.

Exit codes: 0 ok, 2 config error, 3 numeric divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .mirror import SearchDiverged


def _table(rows: list[dict]) -> str:
    if not rows:
        return "(empty)"
    cols = list(rows[0])
    widths = [max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    for r in rows:
        lines.append("  ".join(_fmt(r[c]).ljust(w) for c, w in zip(cols, widths)))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _add_common(p):
    p.add_argument("--config", required=True, help="path to JSON run config")
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--seed", type=int, default=None, help="search seed override")
    p.add_argument("--budgets", default=None,
                   help="comma-separated sparsities, e.g. 0.5,0.6,0.7")
    p.add_argument("--pattern", choices=["unstructured", "2:4"], default=None)
    p.add_argument("--scope", choices=["global", "per-layer"], default=None)


def _load(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["search"]["seed"] = args.seed
        cfg["search"]["metric"]["seed"] = args.seed
    if args.budgets:
        cfg["export"]["sparsities"] = [float(x) for x in args.budgets.split(",")]
    if args.pattern:
        cfg["search"]["pattern"] = ("unstructured" if args.pattern == "unstructured"
                                    else [2, 4])
    if args.scope:
        cfg["export"]["scope"] = args.scope
    if args.out:
        cfg["output"]["dir"] = args.out
    return cfg


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mdprune")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in ("pretrain", "calibrate", "search", "export", "eval", "pipeline"):
        _add_common(sub.add_parser(name))
    ab = sub.add_parser("ablate")
    _add_common(ab)
    ab.add_argument("--mode", choices=["no-mirror", "metric-sweep"], required=True)
    args = ap.parse_args(argv)

    from . import harness as H

    try:
        cfg = _load(args)
        manifest = H.RunManifest(cfg["output"]["dir"], cfg)
        if args.cmd == "pretrain":
            H.stage_pretrain(cfg, manifest)
        elif args.cmd == "calibrate":
            model = H.stage_pretrain(cfg, manifest)
            H.stage_calibrate(cfg, manifest, model)
        elif args.cmd == "search":
            model = H.stage_pretrain(cfg, manifest)
            calib, _ = H.stage_calibrate(cfg, manifest, model)
            H.stage_search(cfg, manifest, model, calib)
        elif args.cmd == "export":
            model = H.stage_pretrain(cfg, manifest)
            calib, _ = H.stage_calibrate(cfg, manifest, model)
            gammas = H.stage_search(cfg, manifest, model, calib)
            H.stage_export(cfg, manifest, gammas)
        elif args.cmd in ("eval", "pipeline"):
            _, rows = H.run_pipeline(cfg, cfg["output"]["dir"])
            print(_table(rows))
        elif args.cmd == "ablate":
            model = H.stage_pretrain(cfg, manifest)
            calib, held = H.stage_calibrate(cfg, manifest, model)
            if args.mode == "no-mirror":
                rows = H.ablation_no_mirror(cfg, model, calib, held)
            else:
                rows = H.ablation_metric_sweep(cfg, model, calib, held)
            H._write_rows_csv(manifest.artifact(f"ablation_{args.mode}.csv"), rows)
            print(_table(rows))
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except SearchDiverged as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return 3
    except (OSError, FileNotFoundError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
