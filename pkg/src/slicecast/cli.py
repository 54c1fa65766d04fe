"""Batch CLI: synth, prompts, run, eval, report, backend-check, summarize.

Exit codes: 0 success, 1 validation/usage error, 2 backend or transport
error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import tempfile

from . import conformance, driver, metrics, prompts as prompts_mod, volio
from .errors import (PartialResultError, ProtocolError, SlicecastError,
                     TransportError)
from .refbackends import make_synthetic_case
from .wireproto import open_backend

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_names(spec):
    if spec is None:
        return None
    out = {}
    for part in spec.split(","):
        k, v = part.split(":")
        out[int(k)] = v.strip()
    return out


def _parse_window(spec):
    lo, hi = (float(x) for x in spec.split(","))
    return (lo, hi)


def build_parser() -> _Parser:
    ap = _Parser(prog="slicecast")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic case")
    p.add_argument("--preset", required=True,
                   choices=("two_bars", "two_bars_noisy", "touching_bars"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("prompts", help="derive prompts from a label volume")
    p.add_argument("--labels", required=True)
    p.add_argument("--names", help="label names, e.g. '1:femur,2:tibia'")
    p.add_argument("--scheme", required=True, choices=prompts_mod.SCHEMES)
    p.add_argument("--aux", help="aux point file (JSON)")
    p.add_argument("--anchor", type=int)
    p.add_argument("--snap", action="store_true")
    p.add_argument("--slice-axis", dest="slice_axis")
    p.add_argument("--out", required=True)

    p = sub.add_parser("summarize", help="print counts for a prompt set")
    p.add_argument("prompts")

    p = sub.add_parser("run", help="run a backend over one or more volumes")
    p.add_argument("--volume", action="append", required=True)
    p.add_argument("--prompts", required=True,
                   help="prompt file, or a directory matched by volume stem")
    p.add_argument("--backend", default=os.environ.get("SLICECAST_BACKEND"))
    p.add_argument("--mode", required=True, choices=("image", "video"))
    p.add_argument("--window", default="0.5,99.5")
    p.add_argument("--slice-axis", dest="slice_axis")
    p.add_argument("--out", required=True,
                   help="output file (single volume) or directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--per-object-sessions", action="store_true")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--names", help="label names, e.g. '1:femur,2:tibia'")
    p.add_argument("--combined", default="union", choices=("union", "macro"))
    p.add_argument("--volume-id", dest="volume_id")
    p.add_argument("--out", help="metrics JSONL (default: stdout)")
    p.add_argument("--append", action="store_true")

    p = sub.add_parser("report", help="render a summary table from metrics")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--format", default="markdown", choices=("markdown", "tsv"))
    p.add_argument("--out")

    p = sub.add_parser("backend-check", help="probe protocol conformance")
    p.add_argument("--backend", default=os.environ.get("SLICECAST_BACKEND"))
    return ap


def _cmd_synth(args) -> int:
    case = make_synthetic_case(args.preset, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    volio.save_volume(case.volume, os.path.join(args.out, "volume.nii"))
    volio.save_labels(case.labels, os.path.join(args.out, "labels.nii"))
    case.aux.save(os.path.join(args.out, "aux.json"))
    meta = {"preset": case.preset, "seed": case.seed,
            "label_names": {str(k): v
                            for k, v in case.labels.label_names.items()}}
    with open(os.path.join(args.out, "case.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    print(f"wrote {case.preset} case to {args.out}")
    return EXIT_OK


def _cmd_prompts(args) -> int:
    labels = volio.load_labels(args.labels, label_names=_parse_names(args.names),
                               slice_axis_override=args.slice_axis)
    aux = prompts_mod.AuxPointFile.load(args.aux) if args.aux else None
    ps = prompts_mod.build_prompts(labels, args.scheme, aux=aux,
                                   anchor=args.anchor, snap=args.snap)
    ps.save(args.out)
    counts = prompts_mod.summarize(ps)
    print(f"wrote {counts['total']} prompts ({args.scheme}) to {args.out}")
    return EXIT_OK


def _cmd_summarize(args) -> int:
    ps = prompts_mod.PromptSet.load(args.prompts)
    print(json.dumps(prompts_mod.summarize(ps), indent=2, sort_keys=True))
    return EXIT_OK


def _run_one(volume_path, prompt_path, out_path, args) -> str:
    vol = volio.load_volume(volume_path, slice_axis_override=args.slice_axis)
    ps = prompts_mod.PromptSet.load(prompt_path)
    window = _parse_window(args.window)
    frames = volio.volume_to_frames(vol, window=window)
    with open_backend(args.backend) as conn:
        conn.hello()
        kwargs = dict(window=window, deterministic=args.deterministic)
        if args.mode == "video":
            kwargs["per_object_sessions"] = args.per_object_sessions
        pred = driver.run(frames, ps, conn, args.mode, **kwargs)
    pred.provenance["volume"] = os.path.basename(volume_path)
    pred.save(out_path)
    return out_path


def _stem(path) -> str:
    base = os.path.basename(path)
    for ext in (".nii.gz", ".nii", ".scvl"):
        if base.endswith(ext):
            return base[: -len(ext)]
    return os.path.splitext(base)[0]


def _cmd_run(args) -> int:
    if not args.backend:
        raise _UsageError("no backend: pass --backend or set SLICECAST_BACKEND")
    volumes = args.volume
    jobs = []
    if len(volumes) == 1 and not os.path.isdir(args.prompts):
        out = args.out
        if os.path.isdir(out):
            out = os.path.join(out, _stem(volumes[0]) + ".pred.json")
        jobs.append((volumes[0], args.prompts, out))
    else:
        if not os.path.isdir(args.prompts):
            raise _UsageError("--prompts must be a directory for multi-volume "
                              "runs")
        os.makedirs(args.out, exist_ok=True)
        for v in volumes:
            stem = _stem(v)
            ppath = os.path.join(args.prompts, stem + ".json")
            if not os.path.exists(ppath):
                raise _UsageError(f"no prompt file for {v} (looked for {ppath})")
            jobs.append((v, ppath, os.path.join(args.out,
                                                stem + ".pred.json")))
    if args.jobs > 1 and len(jobs) > 1:
        with concurrent.futures.ThreadPoolExecutor(args.jobs) as pool:
            futures = [pool.submit(_run_one, v, p, o, args) for v, p, o in jobs]
            for fut in futures:
                print(f"wrote {fut.result()}")
    else:
        for v, p, o in jobs:
            print(f"wrote {_run_one(v, p, o, args)}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    gt = volio.load_labels(args.labels, label_names=_parse_names(args.names))
    records = []
    for pred_path in args.pred:
        pred = driver.PredictionSet.load(pred_path)
        volume_id = args.volume_id or _stem(pred_path)
        pred.masks = {int(k) if isinstance(k, str) and k.isdigit() else k: v
                      for k, v in pred.masks.items()}
        records.append(metrics.evaluate_volume(pred, gt, volume_id=volume_id,
                                               combined_rule=args.combined))
    if args.out:
        metrics.save_records(records, args.out, append=args.append)
        print(f"wrote {len(records)} record(s) to {args.out}")
    else:
        for r in records:
            print(json.dumps(r.to_dict(), sort_keys=True))
    return EXIT_OK


def _cmd_report(args) -> int:
    records = []
    for path in args.metrics:
        records.extend(metrics.load_records(path))
    table = metrics.build_summary(records)
    text = metrics.render_report(table, fmt=args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_backend_check(args) -> int:
    if not args.backend:
        raise _UsageError("no backend: pass --backend or set SLICECAST_BACKEND")
    with tempfile.TemporaryDirectory() as workdir:
        results = conformance.run_backend_check(args.backend, workdir)
    print(conformance.render_results(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_BACKEND


_COMMANDS = {
    "synth": _cmd_synth,
    "prompts": _cmd_prompts,
    "summarize": _cmd_summarize,
    "run": _cmd_run,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "backend-check": _cmd_backend_check,
}


def dispatch(argv) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return EXIT_VALIDATION
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ProtocolError, TransportError, PartialResultError) as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (SlicecastError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
