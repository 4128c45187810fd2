"""Pre-tabulated dose-transition decisions for trial conduct.

For every reachable (patients, observed DLTs, pending) cell the table gives
the verdict, with escalation cells that depend on accrued follow-up expressed
as conditions on TF (summed pending follow-up fraction) and MF (minimum
pending follow-up fraction).  Rows are compressed exactly as the published
convention: consecutive DLT counts pool when their whole feasible pending
range shares one verdict signature, and pending ranges collapse to
"<= hi" / ">= lo" / "lo, hi" / "lo-hi" segment labels.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .boundaries import boin_boundaries, eliminate_dose
from .core import DesignConfig, validate_config
from .estimator import escalation_tf_threshold

_HEADERS = ["n", "dlt", "pending", "suspend", "escalate", "stay", "deescalate", "eliminate"]


@dataclass(frozen=True)
class TableRow:
    n: int
    y_lo: int
    y_hi: int
    m_lo: int
    m_hi: int
    pattern: str  # escalate | mf_only | mf_tf | suspend | stay | de_escalate | eliminate
    threshold: float | None
    y_label: str
    m_label: str
    suspension: str
    escalation: str
    stay: str
    de_escalation: str
    eliminate: bool

    def csv_fields(self) -> list[str]:
        return [
            str(self.n), self.y_label, self.m_label,
            self.suspension, self.escalation, self.stay, self.de_escalation,
            "yes" if self.eliminate else "no",
        ]


def _round2(value: float) -> str:
    return str(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def classify_cell(
    n: int, dlt: int, pending: int, config: DesignConfig
) -> tuple[str, float | None]:
    """Verdict pattern for one concrete (n, dlt, pending) cell.

    Patterns with follow-up conditions return the exact TF threshold at which
    escalation opens; display rounding happens at render time only.
    """
    cfg = config
    bounds = boin_boundaries(cfg.phi, cfg.phi1, cfg.phi2)
    if eliminate_dose(
        dlt, n, cfg.phi, cfg.elimination_cutoff, cfg.elimination_min_n, cfg.elimination_prior
    ):
        return "eliminate", None
    if dlt / n > bounds.lambda_d:
        return "de_escalate", None
    if (n - pending) / n < cfg.suspension_min_observed_fraction:
        return "suspend", None
    if pending == 0:
        return ("escalate", None) if dlt / n <= bounds.lambda_e else ("stay", None)
    t = escalation_tf_threshold(n, dlt, pending, cfg.phi, bounds.lambda_e)
    if t <= 0:
        return "mf_only", None
    if t < pending:
        return "mf_tf", t
    return "stay", None


def _cells(pattern: str, threshold: float | None, b_label: str) -> tuple[str, str, str, str, bool]:
    """(suspension, escalation, stay, de-escalation, eliminate) cell texts."""
    if pattern == "escalate":
        return "No", "Yes", "No", "No", False
    if pattern == "mf_only":
        return f"MF < {b_label}", f"MF >= {b_label}", "No", "No", False
    if pattern == "mf_tf":
        t = _round2(threshold)
        return (
            f"MF < {b_label} & TF >= {t}",
            f"MF >= {b_label} & TF >= {t}",
            f"TF < {t}",
            "No",
            False,
        )
    if pattern == "suspend":
        return "Yes", "No", "No", "No", False
    if pattern == "stay":
        return "No", "No", "Yes", "No", False
    if pattern == "de_escalate":
        return "No", "No", "No", "Yes", False
    if pattern == "eliminate":
        return "No", "No", "No", "Yes & Eliminate", True
    raise ValueError(f"unknown pattern {pattern!r}")


def _m_label(lo: int, hi: int, feasible_hi: int) -> str:
    if lo == hi:
        return str(lo)
    if lo == 0 and hi == feasible_hi:
        return f"<= {hi}" if hi > 0 else "0"
    if lo == 0:
        return f"<= {hi}"
    if hi == feasible_hi:
        return f">= {lo}"
    if hi - lo == 1:
        return f"{lo}, {hi}"
    return f"{lo}-{hi}"


def _y_label(lo: int, hi: int, n: int) -> str:
    if lo == hi:
        return str(lo)
    if hi == n:
        return f">= {lo}"
    if hi - lo == 1:
        return f"{lo}, {hi}"
    return f"{lo}-{hi}"


def _segments(n: int, dlt: int, config: DesignConfig) -> list[tuple[int, int, str, float | None]]:
    """Maximal pending-count runs with one signature, for a fixed (n, dlt)."""
    out: list[tuple[int, int, str, float | None]] = []
    for m in range(0, n - dlt + 1):
        pattern, threshold = classify_cell(n, dlt, m, config)
        if out and out[-1][2] == pattern and out[-1][3] == threshold and pattern != "mf_tf":
            lo, _, _, _ = out[-1]
            out[-1] = (lo, m, pattern, threshold)
        else:
            out.append((m, m, pattern, threshold))
    return out


def generate_table(config: DesignConfig, n_max: int | None = None) -> list[TableRow]:
    """All rows for cohort-multiple patient counts up to n_max."""
    cfg = validate_config(config)
    if n_max is None:
        n_max = 4 * cfg.cohort_size
    b_label = _round2(cfg.suspension_min_followup_fraction)
    rows: list[TableRow] = []
    for n in range(cfg.cohort_size, n_max + 1, cfg.cohort_size):
        per_y = [(_y, _segments(n, _y, cfg)) for _y in range(0, n + 1)]
        i = 0
        while i <= n:
            y, segs = per_y[i]
            poolable = (
                len(segs) == 1
                and segs[0][0] == 0
                and segs[0][1] == n - y
                and segs[0][2] != "mf_tf"
            )
            if poolable:
                # extend the run while the next y has the identical one-segment
                # signature over its own full feasible range
                j = i
                while j + 1 <= n:
                    y2, segs2 = per_y[j + 1]
                    if (
                        len(segs2) == 1
                        and segs2[0][0] == 0
                        and segs2[0][1] == n - y2
                        and segs2[0][2] == segs[0][2]
                        and segs2[0][3] == segs[0][3]
                    ):
                        j += 1
                    else:
                        break
                if j > i:
                    pattern, threshold = segs[0][2], segs[0][3]
                    sus, esc, stay, deesc, elim = _cells(pattern, threshold, b_label)
                    hi_m = n - y
                    rows.append(
                        TableRow(
                            n=n, y_lo=y, y_hi=j, m_lo=0, m_hi=hi_m,
                            pattern=pattern, threshold=threshold,
                            y_label=_y_label(y, j, n),
                            m_label=f"<= {hi_m}" if hi_m > 0 else "0",
                            suspension=sus, escalation=esc, stay=stay,
                            de_escalation=deesc, eliminate=elim,
                        )
                    )
                    i = j + 1
                    continue
            for lo, hi, pattern, threshold in segs:
                sus, esc, stay, deesc, elim = _cells(pattern, threshold, b_label)
                rows.append(
                    TableRow(
                        n=n, y_lo=y, y_hi=y, m_lo=lo, m_hi=hi,
                        pattern=pattern, threshold=threshold,
                        y_label=str(y),
                        m_label=_m_label(lo, hi, n - y),
                        suspension=sus, escalation=esc, stay=stay,
                        de_escalation=deesc, eliminate=elim,
                    )
                )
            i += 1
    return rows


# --------------------------------------------------------------------------
# rendering


def render_markdown(rows: list[TableRow]) -> str:
    lines = [
        "| No. patients | No. DLT | No. pending | Suspension | Escalation | Stay | De-escalation |",
        "| --- | --- | --- | --- | --- | --- | --- |",
    ]
    for r in rows:
        lines.append(
            f"| {r.n} | {r.y_label} | {r.m_label} | {r.suspension} | "
            f"{r.escalation} | {r.stay} | {r.de_escalation} |"
        )
    return "\n".join(lines) + "\n"


def render_text(rows: list[TableRow]) -> str:
    headers = [
        "No. patients", "No. DLT", "No. pending",
        "Suspension", "Escalation", "Stay", "De-escalation",
    ]
    table = [headers] + [
        [str(r.n), r.y_label, r.m_label, r.suspension, r.escalation, r.stay, r.de_escalation]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = []
    for k, row in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_csv(rows: list[TableRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_HEADERS)
    for r in rows:
        writer.writerow(r.csv_fields())
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    """Parse a rendered CSV back into its column dicts (round-trip check)."""
    reader = csv.reader(io.StringIO(text))
    headers = next(reader)
    if headers != _HEADERS:
        raise ValueError(f"unexpected table headers {headers}")
    return [dict(zip(_HEADERS, row)) for row in reader]


def render_table(rows: list[TableRow], fmt: str = "csv") -> str:
    if fmt == "csv":
        return render_csv(rows)
    if fmt == "markdown":
        return render_markdown(rows)
    if fmt == "text":
        return render_text(rows)
    raise ValueError(f"unknown table format {fmt!r}")
