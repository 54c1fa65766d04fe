"""`slicecast-sam-adapter`: serve a SAM1/SAM2 checkpoint on stdio or TCP."""

from __future__ import annotations

import argparse
import json
import sys

from .config import SIZES, AdapterConfig
from .server import AdapterServer


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slicecast-sam-adapter")
    ap.add_argument("--family", required=True, choices=sorted(SIZES))
    ap.add_argument("--size", required=True)
    ap.add_argument("--ckpt", help="checkpoint path")
    ap.add_argument("--device", default="cpu")
    ap.add_argument("--port", type=int, help="serve TCP instead of stdio")
    ap.add_argument("--stub", action="store_true",
                    help="checkpoint-free intensity-matching predictors, "
                         "for protocol testing only")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = AdapterConfig(family=args.family, size=args.size,
                               checkpoint=args.ckpt, device=args.device,
                               stub=args.stub)
        server = AdapterServer(config)
    except Exception as e:
        # Checkpoint/device failures surface as a protocol error, then a
        # nonzero exit.
        sys.stdout.write(json.dumps(
            {"type": "error", "id": None, "code": "startup",
             "text": f"{type(e).__name__}: {e}"}) + "\n")
        sys.stdout.flush()
        print(f"startup failed: {e}", file=sys.stderr)
        return 1
    if args.port is not None:
        server.serve_tcp(args.port)
    else:
        server.serve_stdio()
    return 0


if __name__ == "__main__":
    sys.exit(main())
