"""Command line interface: run, verify, sweep and plot.

Exit codes: 0 ok, 2 validation error, 3 scheme stop (collision, det drift,
determinant floor), 4 failed inequality assertion.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from . import flowmap as fm
from .config import (RunManifest, config_from_dict, config_to_dict,
                     parse_config, shipped_config, shipped_configs)
from .errors import (InequalityViolation, SchemaMismatch, SchemeStop,
                     ValidationError)
from .fluid import FluidGrid
from .geometry import write_field
from .ledger import (COLUMNS, fit_hoelder, read_csv, summarize, summary_dict,
                     verify_epochs, verify_single_step, verify_telescoped,
                     write_csv)
from .steppers import run

__all__ = ["main", "emit_outputs", "verify_rows", "execute", "EXIT_OK",
           "EXIT_VALIDATION", "EXIT_STOP", "EXIT_ASSERTION"]

EXIT_OK, EXIT_VALIDATION, EXIT_STOP, EXIT_ASSERTION = 0, 2, 3, 4

log = logging.getLogger("varistep")


def _epoch_len(cfg):
    return cfg.steps_per_epoch if cfg.mode.startswith("hyperbolic") else None


def verify_rows(rows, factor=1e-8, epoch_len=None):
    """All ledger checks from rows alone; returns ``(ok, report dict)``."""
    single = verify_single_step(rows, factor, require_nonnegative=epoch_len is None)
    tele = verify_telescoped(rows, factor, epoch_len=epoch_len)
    report = {
        "single_step_ok": all(s["ok"] for s in single),
        "single_step_matches": all(s["matches"] for s in single),
        "min_slack_single": min(s["recomputed"] for s in single),
        "telescoped_ok": tele["ok"],
        "min_slack_telescope": tele["min_slack"],
        "telescope_constant": tele["C"],
    }
    ok = report["single_step_ok"] and report["telescoped_ok"]
    if epoch_len:
        ep = verify_epochs(rows, epoch_len, factor)
        report["epochs_ok"] = all(e["ok"] for e in ep)
        report["min_epoch_slack"] = min((e["slack"] for e in ep), default=0.0)
        ok = ok and report["epochs_ok"]
    return ok, report


def _hoelder(record, grid):
    if len(record.snapshots) < 10:
        return float("nan")
    return fit_hoelder(record.times, record.snapshots, grid.w12_norm,
                       record.config.tau)


def emit_outputs(record, manifest, out_dir, stride=None):
    """Write the ledger, field and marker dumps and the manifest.

    Field dumps ``fields/eta_<step>.txt`` are written every ``stride``
    steps (``0`` disables them).  FSI runs also dump the final velocity
    and marker states per epoch.  Returns the updated manifest.
    """
    cfg = record.config
    stride = cfg.stride if stride is None else stride
    try:
        os.makedirs(out_dir, exist_ok=True)
        outputs = {"ledger": "ledger.csv"}
        write_csv(os.path.join(out_dir, "ledger.csv"), record.rows)
        grid = cfg.grid.build()
        if stride:
            os.makedirs(os.path.join(out_dir, "fields"), exist_ok=True)
            names = []
            for k, X in enumerate(record.snapshots):
                if k % stride == 0:
                    name = os.path.join("fields", f"eta_{k:06d}.txt")
                    write_field(os.path.join(out_dir, name), grid, X)
                    names.append(name)
            outputs["fields"] = names
            fs = record.final_state
            if fs is not None and fs.U is not None:
                name = "velocity_final.txt"
                _write_velocity(os.path.join(out_dir, name), cfg, fs.U)
                outputs["velocity"] = name
        if record.marker_states:
            os.makedirs(os.path.join(out_dir, "markers"), exist_ok=True)
            names = []
            for e, st in enumerate(record.marker_states):
                name = os.path.join("markers", f"epoch_{e:04d}.txt")
                fm.write_markers(os.path.join(out_dir, name), st)
                names.append(name)
            outputs["markers"] = names
        manifest.outputs = outputs
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            fh.write(manifest.to_json() + "\n")
    except OSError as err:
        raise OSError(f"cannot write outputs to {out_dir}: {err}") from err
    return manifest


def _write_velocity(path, cfg, U):
    """Cell-centred velocity in the plain-text field format."""
    fg = FluidGrid(cfg.container)
    nx, ny = fg.nx, fg.ny
    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    pts = np.stack([fg.lo[0] + (I.ravel() + 0.5) * fg.h,
                    fg.lo[1] + (J.ravel() + 0.5) * fg.h], axis=1)
    vel = (fg.interp_matrix(pts) @ U).reshape(2, -1).T.reshape(nx, ny, 2)
    with open(path, "w") as fh:
        fh.write(f"{nx} {ny}\n{float(fg.h)!r} {float(fg.h)!r}\n")
        for j in range(ny):
            for i in range(nx):
                fh.write(f"{float(vel[i, j, 0])!r} {float(vel[i, j, 1])!r}\n")


def execute(cfg, out_dir=None, korn=False):
    """Run a config, verify the ledger and write outputs.

    Returns
    -------
    (exit_code, record, manifest)
    """
    manifest = RunManifest.for_config(cfg)
    kw = {"korn": True} if korn and cfg.mode == "parabolic_fsi" else {}
    try:
        record = run(cfg, **kw)
    except InequalityViolation as err:
        log.error("inequality violated: %s", err)
        manifest.stop_reason = "inequality_violation"
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
                fh.write(manifest.to_json() + "\n")
        return EXIT_ASSERTION, None, manifest
    grid = cfg.grid.build()
    ok, report = verify_rows(record.rows, cfg.tol.ineq_factor, _epoch_len(cfg))
    summary = summary_dict(summarize(
        record.rows, cfg.tol.ineq_factor, _epoch_len(cfg), hoelder=_hoelder(record, grid),
        korn=min((k["constant"] for k in record.korn), default=float("nan")),
        comparison=min(record.comparison_slacks, default=float("nan"))))
    summary.update(report)
    summary["epoch_len"] = _epoch_len(cfg)
    summary["ineq_factor"] = cfg.tol.ineq_factor
    if record.interface_mismatch:
        summary["max_interface_mismatch"] = max(record.interface_mismatch)
    if record.momentum_gap:
        summary["max_momentum_gap"] = max(abs(g) for g in record.momentum_gap)
    manifest.summary = summary
    if record.stop_reason:
        manifest.stop_reason = record.stop_reason
        manifest.stop_time = record.stop_time
    if out_dir:
        emit_outputs(record, manifest, out_dir)
    if not ok:
        return EXIT_ASSERTION, record, manifest
    if record.stop_reason:
        return EXIT_STOP, record, manifest
    return EXIT_OK, record, manifest


def _load_config(args):
    if args.preset:
        if args.preset not in shipped_configs():
            raise ValidationError([f"preset: unknown config {args.preset!r}; "
                                   f"choose from {', '.join(shipped_configs())}"])
        return parse_config(shipped_config(args.preset))
    if not args.config:
        raise ValidationError(["config: pass --config <file> or --preset <name>"])
    return parse_config(args.config)


def _cmd_run(args):
    cfg = _load_config(args)
    if args.stride is not None:
        cfg = replace(cfg, stride=args.stride)
    code, record, manifest = execute(cfg, args.out, korn=args.korn)
    s = manifest.summary
    print(f"mode={cfg.mode} hash={manifest.config_hash[:12]} "
          f"stop={manifest.stop_reason} rows={s.get('n_rows', 0)}")
    if s:
        print(f"min single slack={s['min_slack_single']:.3e} "
              f"min telescoped slack={s['min_slack_telescope']:.3e} "
              f"C={s['telescope_constant']:.4g} hoelder={s['hoelder_constant']:.4g}")
    return code


def _cmd_verify(args):
    rows = read_csv(args.ledger)
    epoch_len = args.epoch_len
    factor = args.factor
    mpath = os.path.join(os.path.dirname(os.path.abspath(args.ledger)), "manifest.json")
    if os.path.exists(mpath):
        with open(mpath) as fh:
            summ = json.load(fh).get("summary", {})
        if epoch_len is None:
            epoch_len = summ.get("epoch_len")
        if factor is None:
            factor = summ.get("ineq_factor")
    factor = 1e-8 if factor is None else factor
    ok, report = verify_rows(rows, factor, epoch_len)
    for key, val in report.items():
        print(f"{key}: {val}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_ASSERTION


def _parse_value(text):
    try:
        v = float(text)
    except ValueError:
        return text
    return int(v) if v.is_integer() and "." not in text and "e" not in text.lower() else v


def _set_path(d, path, value):
    keys = path.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def _cmd_sweep(args):
    base = config_to_dict(_load_config(args))
    out_rows = []
    worst = EXIT_OK
    for text in args.values:
        data = json.loads(json.dumps(base))
        _set_path(data, args.param, _parse_value(text))
        cfg = config_from_dict(data)
        sub = os.path.join(args.out, f"{args.param}={text}") if args.out else None
        code, record, manifest = execute(cfg, sub)
        worst = max(worst, code)
        s = manifest.summary
        out_rows.append({"value": text, "exit": code, "stop": manifest.stop_reason,
                         "min_slack_single": s.get("min_slack_single", math.nan),
                         "min_slack_telescope": s.get("min_slack_telescope", math.nan),
                         "telescope_constant": s.get("telescope_constant", math.nan),
                         "hoelder_constant": s.get("hoelder_constant", math.nan)})
        print(" ".join(f"{k}={v}" for k, v in out_rows[-1].items()))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(out_rows[0]), lineterminator="\n")
            wr.writeheader()
            wr.writerows(out_rows)
    return worst


def _cmd_plot(args):
    rows = read_csv(args.ledger)
    os.makedirs(args.out, exist_ok=True)
    cols = args.columns or [c for c in COLUMNS if c not in ("step", "t")]
    t = np.array([r.t for r in rows])
    use_png = args.format == "png"
    if use_png:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            log.warning("matplotlib not available, writing CSV series instead")
            use_png = False
    for c in cols:
        if c not in COLUMNS:
            raise ValidationError([f"columns: unknown ledger column {c!r}"])
        y = np.array([getattr(r, c) for r in rows])
        if use_png:
            fig, ax = plt.subplots(figsize=(5, 3.2))
            ax.plot(t, y, lw=1.2)
            ax.set_xlabel("t")
            ax.set_ylabel(c)
            fig.tight_layout()
            fig.savefig(os.path.join(args.out, f"{c}.png"), dpi=100)
            plt.close(fig)
        else:
            with open(os.path.join(args.out, f"{c}.csv"), "w") as fh:
                fh.write(f"t,{c}\n")
                for a, b in zip(t.tolist(), y.tolist()):
                    fh.write(f"{a!r},{b!r}\n")
    print(f"wrote {len(cols)} series to {args.out}")
    return EXIT_OK


def _parser():
    p = argparse.ArgumentParser(prog="varistep", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="YAML config file")
        g.add_argument("--preset", help="bundled config name")

    r = sub.add_parser("run", help="run a scheme and write its ledger")
    config_args(r)
    r.add_argument("--out", default="varistep_out", help="output directory")
    r.add_argument("--stride", type=int, help="field dump stride (0: none)")
    r.add_argument("--korn", action="store_true",
                   help="log global Korn quantities (parabolic_fsi)")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("verify", help="re-check every inequality from a ledger")
    v.add_argument("--ledger", required=True)
    v.add_argument("--epoch-len", type=int, default=None,
                   help="steps per epoch for hyperbolic ledgers")
    v.add_argument("--factor", type=float, default=None,
                   help="tolerance factor (default 1e-8)")
    v.set_defaults(func=_cmd_verify)

    s = sub.add_parser("sweep", help="run a config for several parameter values")
    config_args(s)
    s.add_argument("--param", required=True, help="dotted field path, e.g. tau")
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_sweep)

    pl = sub.add_parser("plot", help="per-column PNG or CSV series of a ledger")
    pl.add_argument("--ledger", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--format", choices=("png", "csv"), default="png")
    pl.add_argument("--columns", nargs="*")
    pl.set_defaults(func=_cmd_plot)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as err:
        for v in err.violations:
            print(f"validation error: {v}", file=sys.stderr)
        return EXIT_VALIDATION
    except SchemaMismatch as err:
        print(f"ledger schema error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except InequalityViolation as err:
        print(f"assertion failed: {err}", file=sys.stderr)
        return EXIT_ASSERTION
    except SchemeStop as err:
        print(f"scheme stop: {err.reason} at t={err.time}", file=sys.stderr)
        return EXIT_STOP


if __name__ == "__main__":
    sys.exit(main())
