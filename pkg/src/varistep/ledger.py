"""Energy ledger: CSV schema and independent re-verification.

Every inequality is recomputed from the raw columns only, so a dumped
ledger can be checked without the run that produced it.  With
``kin = kin_avg_solid + kin_avg_fluid`` the per-step slack is

    slack_k = E_h[k-1] - E_h[k] - (kin[k] - kin[k-1])
              - R_step[k] - fluid_diss[k] + work_f[k],

and the telescoped slack is its running sum, i.e.

    E_h[0] + kin[0] + sum work - E_h[k] - kin[k] - sum (R + fluid_diss).
"""

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import SchemaMismatch

__all__ = [
    "COLUMNS",
    "LedgerRow",
    "LedgerSummary",
    "write_csv",
    "read_csv",
    "recompute_slacks",
    "verify_single_step",
    "verify_telescoped",
    "verify_epochs",
    "fit_hoelder",
    "summarize",
    "ineq_tolerance",
]

COLUMNS = ("step", "t", "E", "E_h", "R_step", "fluid_diss", "kin_avg_solid",
           "kin_avg_fluid", "work_f", "slack_single", "slack_telescope",
           "cn_defect", "min_det_eta", "max_detJ_drift", "self_distance")


@dataclass(frozen=True)
class LedgerRow:
    """One accepted step; row 0 holds the initial state."""

    step: int
    t: float
    E: float
    E_h: float
    R_step: float
    fluid_diss: float
    kin_avg_solid: float
    kin_avg_fluid: float
    work_f: float
    slack_single: float
    slack_telescope: float
    cn_defect: float
    min_det_eta: float
    max_detJ_drift: float
    self_distance: float

    @property
    def kin(self):
        return self.kin_avg_solid + self.kin_avg_fluid


assert tuple(f.name for f in fields(LedgerRow)) == COLUMNS


@dataclass
class LedgerSummary:
    """Run-level results of the verification passes."""

    n_rows: int
    single_step_ok: bool
    telescoped_ok: bool
    min_slack_single: float
    min_slack_telescope: float
    telescope_constant: float
    hoelder_constant: float = float("nan")
    korn_constant_min: float = float("nan")
    min_self_distance: float = float("nan")
    max_cn_defect: float = float("nan")
    min_comparison_slack: float = float("nan")
    epoch_ok: bool = True


def ineq_tolerance(rows, factor=1e-8):
    """``factor * (1 + |E(eta_0)|)``."""
    return factor * (1.0 + abs(rows[0].E))


def write_csv(path, rows):
    """Write rows with the fixed column order; floats use ``repr``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(COLUMNS)
        for r in rows:
            wr.writerow([str(r.step)] + [repr(float(getattr(r, c)))
                                         for c in COLUMNS[1:]])


def read_csv(path):
    """Read a ledger written by :func:`write_csv`.

    Raises
    ------
    SchemaMismatch
        If the header differs from the expected column list.
    """
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or tuple(header) != COLUMNS:
            raise SchemaMismatch(f"expected columns {COLUMNS}, got {header}")
        rows = []
        for line in rd:
            if len(line) != len(COLUMNS):
                raise SchemaMismatch(f"row {len(rows)} has {len(line)} fields")
            rows.append(LedgerRow(int(line[0]), *[float(x) for x in line[1:]]))
    return rows


def recompute_slacks(rows):
    """Per-step and telescoped slacks from the raw columns."""
    single = [0.0]
    tele = [0.0]
    acc = 0.0
    for prev, r in zip(rows[:-1], rows[1:]):
        s = (prev.E_h - r.E_h - (r.kin - prev.kin) - r.R_step - r.fluid_diss
             + r.work_f)
        single.append(s)
        acc += s
        tele.append(acc)
    return np.array(single), np.array(tele)


def _check_rows(rows):
    if not rows:
        raise SchemaMismatch("ledger is empty")
    for k, r in enumerate(rows):
        if not all(math.isfinite(getattr(r, c)) for c in COLUMNS):
            raise SchemaMismatch(f"row {k} has non-finite entries")
        if k and not r.t > rows[k - 1].t:
            raise SchemaMismatch(f"row {k} is not time-ordered")


def verify_single_step(rows, factor=1e-8, match=1e-10, require_nonnegative=True):
    """Recompute every single-step slack and compare with the stored one.

    Returns
    -------
    list of dict
        Per row: ``step``, ``recomputed``, ``stored``, ``matches``, ``ok``.
    """
    _check_rows(rows)
    tol = ineq_tolerance(rows, factor)
    scale = 1.0 + abs(rows[0].E)
    single, _ = recompute_slacks(rows)
    out = []
    for r, s in zip(rows, single):
        matches = abs(s - r.slack_single) <= match * scale
        ok = matches and (s >= -tol or not require_nonnegative)
        out.append({"step": r.step, "recomputed": float(s),
                    "stored": r.slack_single, "matches": bool(matches),
                    "ok": bool(ok)})
    return out


def verify_telescoped(rows, factor=1e-8, match=1e-10, epoch_len=None):
    """Assert the telescoped bound for every prefix (or every epoch end).

    The bound is ``E_h + kin + sum(R + fluid_diss) <= E_h[0] + kin[0] +
    sum work``.  The stored telescoped slack must equal an independent
    accumulation.  Also fits ``C`` in ``E_h + kin + diss <= C + C t^2``.

    Returns
    -------
    dict with keys ``ok``, ``checked``, ``min_slack``, ``C``, ``lhs``.
    """
    _check_rows(rows)
    tol = ineq_tolerance(rows, factor)
    scale = 1.0 + abs(rows[0].E)
    E = np.array([r.E_h for r in rows])
    kin = np.array([r.kin for r in rows])
    diss = np.cumsum([0.0] + [r.R_step + r.fluid_diss for r in rows[1:]])
    work = np.cumsum([0.0] + [r.work_f for r in rows[1:]])
    t = np.array([r.t for r in rows])
    lhs = E + kin + diss
    rhs = E[0] + kin[0] + work
    slack = rhs - lhs
    stored = np.array([r.slack_telescope for r in rows])
    matches = np.abs(stored - slack) <= match * scale * (1 + np.arange(len(rows)))
    steps = np.array([r.step for r in rows])
    if epoch_len:
        check = (steps % epoch_len) == 0
    else:
        check = np.ones(len(rows), dtype=bool)
    ok = bool(np.all(slack[check] >= -tol) and np.all(matches))
    C = float(np.max(lhs / (1.0 + t ** 2)))
    return {"ok": ok, "checked": int(check.sum()),
            "min_slack": float(slack[check].min()),
            "min_slack_all": float(slack.min()), "matches": bool(np.all(matches)),
            "C": C, "lhs": lhs, "rhs": rhs}


def verify_epochs(rows, epoch_len, factor=1e-8):
    """Epoch energy inequality: per-epoch sums of slacks are >= -tol."""
    tol = ineq_tolerance(rows, factor)
    single, _ = recompute_slacks(rows)
    out = []
    n = (len(rows) - 1) // epoch_len
    for e in range(n):
        s = float(np.sum(single[1 + e * epoch_len:1 + (e + 1) * epoch_len]))
        out.append({"epoch": e, "slack": s, "ok": s >= -tol})
    return out


def fit_hoelder(times, snapshots, norm, tau):
    """Least-squares ``C`` in ``||eta(t) - eta(t0)|| ~ C sqrt(t - t0)``.

    Uses every pair with ``t - t0 > tau``; ``norm`` maps a nodal difference
    to a scalar.

    Raises
    ------
    ValueError
        If fewer than 10 snapshots are given.
    """
    times = np.asarray(times, dtype=float)
    if len(times) < 10:
        raise ValueError("fit_hoelder needs at least 10 snapshots")
    num = 0.0
    den = 0.0
    for i in range(len(times)):
        dt = times[i + 1:] - times[i]
        sel = np.nonzero(dt > tau * (1 + 1e-9))[0] + i + 1
        if len(sel) == 0:
            continue
        d = np.array([norm(snapshots[j] - snapshots[i]) for j in sel])
        s = np.sqrt(times[sel] - times[i])
        num += float(d @ s)
        den += float(s @ s)
    C = num / den if den > 0 else 0.0
    if not math.isfinite(C):
        raise ValueError("Hoelder fit is not finite")
    return C


def summarize(rows, factor=1e-8, epoch_len=None, hoelder=float("nan"),
              korn=float("nan"), comparison=float("nan")):
    """Run every verification pass and collect a summary."""
    single = verify_single_step(rows, factor,
                                require_nonnegative=epoch_len is None)
    tele = verify_telescoped(rows, factor, epoch_len=epoch_len)
    epochs_ok = True
    if epoch_len:
        epochs_ok = all(e["ok"] for e in verify_epochs(rows, epoch_len, factor))
    return LedgerSummary(
        n_rows=len(rows),
        single_step_ok=all(s["ok"] for s in single),
        telescoped_ok=tele["ok"],
        min_slack_single=min(s["recomputed"] for s in single),
        min_slack_telescope=tele["min_slack"],
        telescope_constant=tele["C"],
        hoelder_constant=hoelder,
        korn_constant_min=korn,
        min_self_distance=min(r.self_distance for r in rows),
        max_cn_defect=max(r.cn_defect for r in rows),
        min_comparison_slack=comparison,
        epoch_ok=epochs_ok,
    )


def summary_dict(summary):
    return asdict(summary)
