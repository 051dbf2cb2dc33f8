"""Command line: ckpt-import import --src PATH --map FILE --out PATH
[--preserve-dtype]. Exit codes: 0 ok, 2 bad selection/map, 3 unreadable
source, 4 other I/O error."""
from __future__ import annotations

import argparse
import sys

from .convert import import_checkpoint
from .select import SelectionError, load_selection
from .sources import SourceError


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ckpt-import")
    sub = ap.add_subparsers(dest="cmd", required=True)
    imp = sub.add_parser("import", help="convert a checkpoint to an archive")
    imp.add_argument("--src", required=True, help="source .safetensors or .npz")
    imp.add_argument("--map", required=True, dest="map_file",
                     help="JSON selection rules (pattern/role pairs)")
    imp.add_argument("--out", required=True, help="output archive path")
    imp.add_argument("--preserve-dtype", action="store_true",
                     help="keep f32 payloads instead of converting to f64")
    args = ap.parse_args(argv)

    try:
        selection = load_selection(args.map_file)
        meta = import_checkpoint(args.src, selection, args.out,
                                 preserve_dtype=args.preserve_dtype)
    except SelectionError as e:
        print(f"selection error: {e}", file=sys.stderr)
        return 2
    except SourceError as e:
        print(f"source error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4
    names = ", ".join(meta["tensors"])
    print(f"wrote {args.out}: {len(meta['tensors'])} tensors ({names})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
