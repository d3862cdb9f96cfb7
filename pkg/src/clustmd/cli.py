"""``clustmd`` command line: fit, select, simulate and score.

Every command writes a ``manifest.json`` beside its outputs. Exit codes are
0 on success, 1 when the computation itself fails and 2 for bad usage or
invalid input.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DatasetError, load_dataset, write_dataset
from .em import INIT_METHODS, FitConfig, FitError, fit
from .params import ALL_MODELS, CovModel
from .selection import grid_search
from .simulate import load_generator_spec, score, shipped_spec, simulate

log = logging.getLogger("clustmd")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or unreadable/invalid input files."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict, started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in inputs.items()},
        "version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _load(args):
    try:
        return load_dataset(_existing(args.data, "data"), _existing(args.schema, "schema"))
    except (DatasetError, json.JSONDecodeError) as err:
        raise UsageError(f"invalid input: {err}") from err


def read_labels(path: str | Path) -> np.ndarray:
    """First column of a CSV; a non-numeric first row is taken as a header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows:
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]
    try:
        vals = [float(r[0]) for r in rows]
    except ValueError as err:
        raise UsageError(f"{path}: {err}") from err
    arr = np.asarray(vals)
    if np.all(arr == np.round(arr)):
        arr = arr.astype(np.int64)
    return arr


def write_labels(path: Path, labels, header: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([header])
        w.writerows([[int(x)] for x in labels])


def _sidecar_labels(data_path: Path) -> Path | None:
    p = data_path.with_name(data_path.stem + ".labels.csv")
    return p if p.is_file() else None


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_fit(args) -> int:
    started = time.perf_counter()
    data = _load(args)
    try:
        cfg = FitConfig(model=CovModel(args.model), G=args.G, max_iters=args.iters,
                        mc_samples=args.mc_samples, seed=args.seed, init=args.init,
                        **_windows(args.iters))
    except ValueError as err:
        raise UsageError(str(err)) from err
    try:
        res = fit(data, cfg)
    except (FitError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"fit failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    out = _out_dir(args.out)
    doc = res.to_dict(include_tau=args.tau)
    doc["names"] = data.names
    truth = _sidecar_labels(Path(args.data))
    inputs = {"data": args.data, "schema": args.schema}
    if truth is not None:
        s = score(read_labels(truth), res.assignments)
        doc["ari_vs_truth"] = s.ari
        inputs["labels"] = truth
        print(f"ARI vs {truth.name}: {s.ari:.4f}")
    _write_json(out / "fit.json", doc)
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loglik"] + res.trace_names)
        for t in range(res.n_iter):
            w.writerow([t + 1, repr(float(res.loglik_trace[t]))] + [repr(float(x)) for x in res.trace[t]])
    write_labels(out / (args.labels or "assignments.csv"), res.assignments, "cluster")
    if args.dump_mc and res.mc_table is not None:
        _write_json(out / "mc_table.json", res.mc_table.to_dict())
    write_manifest(out, "fit", cfg.to_dict(), cfg.seed, inputs, started)
    flag = "converged" if res.converged else "NOT converged"
    print(f"{cfg.model.value} G={cfg.G}: {flag} after {res.n_iter} iterations, "
          f"loglik {res.loglik:.3f}, BIC-hat {res.bic:.3f}")
    return EXIT_OK


def cmd_select(args) -> int:
    started = time.perf_counter()
    data = _load(args)
    if args.gmin < 1 or args.gmax < args.gmin:
        raise UsageError("need 1 <= --gmin <= --gmax")
    try:
        models = [CovModel(m.strip().upper()) for m in args.models.split(",")] if args.models else list(ALL_MODELS)
        cfg = FitConfig(max_iters=args.iters, mc_samples=args.mc_samples, seed=args.seed, init=args.init,
                        **_windows(args.iters))
    except ValueError as err:
        raise UsageError(str(err)) from err
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    try:
        report = grid_search(data, models, range(args.gmin, args.gmax + 1), cfg, jobs=jobs, keep_fits=False)
    except RuntimeError as err:
        print(f"selection failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    out = _out_dir(args.out)
    _write_json(out / "selection.json", report.to_dict())
    with open(out / "bic_table.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(report.csv_rows())
    config = cfg.to_dict()
    config.update(models=[m.value for m in models], gmin=args.gmin, gmax=args.gmax, jobs=jobs)
    config.pop("model"), config.pop("G")
    write_manifest(out, "select", config, cfg.seed, {"data": args.data, "schema": args.schema}, started)
    print(report.bic_table())
    if report.best is None:
        print("no cell converged; no model selected", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"winner: {report.best.model.value} G={report.best.G}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    try:
        spec = shipped_spec() if args.spec is None else load_generator_spec(_existing(args.spec, "spec"))
    except (ValueError, KeyError, TypeError) as err:
        raise UsageError(f"invalid generator spec: {err}") from err
    if args.n_replicates < 1:
        raise UsageError("--n-replicates must be positive")
    out = _out_dir(args.out_dir)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.n_replicates, dtype=np.uint32)
    files = []
    for r, s in enumerate(seeds, start=1):
        data, labels = simulate(spec, seed=int(s))
        stem = f"rep{r:03d}"
        write_dataset(data, out / f"{stem}.csv", out / f"{stem}.schema.json")
        write_labels(out / f"{stem}.labels.csv", labels)
        files.append({"replicate": r, "seed": int(s), "data": f"{stem}.csv"})
    _write_json(out / "replicates.json", files)
    inputs = {} if args.spec is None else {"spec": args.spec}
    config = {"spec": args.spec or "shipped:vii_g2_mixed", "n_replicates": args.n_replicates,
              "generator": spec.to_dict()}
    write_manifest(out, "simulate", config, args.seed, inputs, started)
    print(f"wrote {args.n_replicates} replicate(s) to {out}")
    return EXIT_OK


def cmd_score(args) -> int:
    started = time.perf_counter()
    a = read_labels(_existing(args.labels_a, "labels"))
    b = read_labels(_existing(args.labels_b, "labels"))
    if a.size != b.size:
        raise UsageError(f"label files differ in length: {a.size} vs {b.size}")
    try:
        s = score(a, b)
    except ValueError as err:
        raise UsageError(str(err)) from err
    print(f"ARI: {s.ari:.6f}")
    width = max(6, max(len(str(x)) for x in s.table.ravel()) + 1)
    print(" " * 8 + "".join(f"{str(c):>{width}}" for c in s.col_labels))
    for r, row in zip(s.row_labels, s.table):
        print(f"{str(r):<8}" + "".join(f"{x:>{width}}" for x in row))
    out = _out_dir(args.out)
    _write_json(out / "score.json", s.to_dict())
    write_manifest(out, "score", {}, None, {"labels_a": args.labels_a, "labels_b": args.labels_b}, started)
    return EXIT_OK


def _windows(iters: int) -> dict:
    # convergence compares two consecutive windows, so a window may use at most half the budget
    w = max(1, min(100, iters // 2))
    return {"window": w, "average_window": w}


def _fit_flags(p, mc_default=2000):
    p.add_argument("--data", required=True, help="CSV with a header row")
    p.add_argument("--schema", required=True, help="JSON schema listing column names, kinds and levels")
    p.add_argument("--iters", type=int, default=1000, help="maximum (MC)EM iterations")
    p.add_argument("--mc-samples", type=int, default=mc_default, help="Monte Carlo draws per cluster and nominal variable")
    p.add_argument("--seed", type=int, default=0, help="master seed (logged in the manifest)")
    p.add_argument("--init", choices=INIT_METHODS, default="kmeans")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="clustmd", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit one covariance model and cluster count")
    _fit_flags(p)
    p.add_argument("--model", required=True, type=str.upper, choices=[m.value for m in ALL_MODELS])
    p.add_argument("--G", type=int, required=True, help="number of clusters")
    p.add_argument("--out", default="clustmd_fit")
    p.add_argument("--labels", default=None, help="file name for hard assignments (default assignments.csv)")
    p.add_argument("--dump-mc", action="store_true", help="also write the final Monte Carlo table")
    p.add_argument("--tau", action="store_true", help="include responsibilities in fit.json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="fit a (model x G) grid and pick the BIC-hat maximiser")
    _fit_flags(p)
    p.add_argument("--models", default=None, help="comma separated, default all six")
    p.add_argument("--gmin", type=int, default=1)
    p.add_argument("--gmax", type=int, default=4)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: available cores)")
    p.add_argument("--out", default="clustmd_select")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="draw replicate datasets from a generator spec")
    p.add_argument("--spec", default=None, help="generator JSON (default: the shipped 2-cluster VII design)")
    p.add_argument("--n-replicates", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="clustmd_sim")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("score", help="adjusted Rand index between two label files")
    p.add_argument("labels_a")
    p.add_argument("labels_b")
    p.add_argument("--out", default="clustmd_score")
    p.set_defaults(func=cmd_score)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"clustmd: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help / --version
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"clustmd {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"clustmd {args.command}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
