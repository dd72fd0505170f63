"""Command line front end.

    dflab run --manifest exp.json [--seed U64] [--workers N] [--out DIR]
    dflab acceptance [all | NAME ...] [--seed U64] [--workers N] [--out DIR]

Exit status: 0 pass, 2 assertion failure, 1 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, acceptance
from .manifest import ConfigError, execute

SCHEMA_VERSION = 1
log = logging.getLogger("dflab")


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if hasattr(obj, "to_record"):
        return _clean(obj.to_record())
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_tables(path: Path, rows: list) -> None:
    flat = [{k: v for k, v in r.items() if not isinstance(v, (dict, list))} for r in rows]
    keys = sorted({k for r in flat for k in r})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in flat:
            w.writerow(_clean(r))


def cmd_run(args) -> int:
    started = _now()
    try:
        raw = Path(args.manifest).read_bytes()
    except OSError as exc:
        print(f"error: manifest: {exc}", file=sys.stderr)
        return 1
    try:
        manifest = json.loads(raw)
    except json.JSONDecodeError as exc:
        print(f"error: manifest: invalid JSON ({exc})", file=sys.stderr)
        return 1
    out = Path(args.out or manifest.get("output", "dflab-out"))
    try:
        result, passed = execute(manifest, args.seed, args.workers)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_bytes(raw)
    seed = args.seed if args.seed is not None else manifest.get("params", {}).get("seed", 0)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "dflab_version": __version__,
        "kind": manifest["kind"],
        "manifest_sha256": hashlib.sha256(raw).hexdigest(),
        "seed": seed,
        "workers_independent": True,
        "pass": bool(passed),
        "result": result,
    }
    (out / "results.json").write_text(dumps(doc) + "\n")
    (out / "timestamps.json").write_text(json.dumps({"started": started, "finished": _now()}, indent=2) + "\n")
    if isinstance(result, dict) and isinstance(result.get("rows"), list) and result["rows"]:
        _write_tables(out / "tables.csv", result["rows"])
    print(f"{manifest['kind']}: {'PASS' if passed else 'FAIL'} -> {out / 'results.json'}")
    return 0 if passed else 2


def cmd_acceptance(args) -> int:
    names = args.names or ["all"]
    try:
        rows = acceptance.run(names, seed=args.seed if args.seed is not None else acceptance.SEED,
                              workers=args.workers)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 1
    ok = all(r["pass"] for r in rows)
    print(f"{sum(r['pass'] for r in rows)}/{len(rows)} criteria passed")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stable = [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
        (out / "acceptance.json").write_text(dumps({"schema_version": SCHEMA_VERSION, "rows": stable}) + "\n")
        (out / "timestamps.json").write_text(json.dumps(
            {"finished": _now(), "seconds": {r["name"]: r["seconds"] for r in rows}}, indent=2) + "\n")
    return 0 if ok else 2


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dflab", description="Dirichlet-Ferguson diffusion laboratory")
    ap.add_argument("--version", action="version", version=f"dflab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, default=None, help="override the master seed")
    common.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--out", default=None, help="output directory")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run one experiment manifest")
    r.add_argument("--manifest", required=True, help="experiment manifest (JSON)")
    r.set_defaults(func=cmd_run)
    a = sub.add_parser("acceptance", parents=[common], help="run the acceptance suite")
    a.add_argument("names", nargs="*", help=f"'all' or criteria: {', '.join(acceptance.CRITERIA)}")
    a.set_defaults(func=cmd_acceptance)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0].startswith("--manifest"):
        argv = ["run"] + argv
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 1
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
