"""Decision-table generation: frozen reference table, cell classification,
row compression, and the CSV/markdown/text renderers."""

import pytest

from beboin.boundaries import boin_boundaries, eliminate_dose
from beboin.core import DesignConfig, validate_config
from beboin.estimator import escalation_tf_threshold
from beboin.tablegen import (
    classify_cell,
    generate_table,
    parse_csv,
    render_csv,
    render_markdown,
    render_table,
    render_text,
)

CFG = DesignConfig(num_doses=1, phi=0.25, cohort_size=3, n_stage1=9)

# Reference conduct table for phi = 0.25, cohorts of 3, up to 9 patients.
# Derived cell by cell from the decision rules with the frozen boundary and
# follow-up threshold values (see test_boundaries / test_estimator); any
# regression in classification, compression, or rounding shows up here.
FROZEN_CSV = """\
n,dlt,pending,suspend,escalate,stay,deescalate,eliminate
3,0,0,No,Yes,No,No,no
3,0,1,MF < 0.25,MF >= 0.25,No,No,no
3,0,>= 2,Yes,No,No,No,no
3,"1, 2",<= 2,No,No,No,Yes,no
3,3,0,No,No,No,Yes & Eliminate,yes
6,0,0,No,Yes,No,No,no
6,0,"1, 2",MF < 0.25,MF >= 0.25,No,No,no
6,0,>= 3,Yes,No,No,No,no
6,1,0,No,Yes,No,No,no
6,1,1,MF < 0.25 & TF >= 0.22,MF >= 0.25 & TF >= 0.22,TF < 0.22,No,no
6,1,2,MF < 0.25 & TF >= 1.38,MF >= 0.25 & TF >= 1.38,TF < 1.38,No,no
6,1,>= 3,Yes,No,No,No,no
6,"2, 3",<= 4,No,No,No,Yes,no
6,>= 4,<= 2,No,No,No,Yes & Eliminate,yes
9,0,0,No,Yes,No,No,no
9,0,1-4,MF < 0.25,MF >= 0.25,No,No,no
9,0,>= 5,Yes,No,No,No,no
9,1,0,No,Yes,No,No,no
9,1,1-3,MF < 0.25,MF >= 0.25,No,No,no
9,1,4,MF < 0.25 & TF >= 0.66,MF >= 0.25 & TF >= 0.66,TF < 0.66,No,no
9,1,>= 5,Yes,No,No,No,no
9,2,<= 4,No,No,Yes,No,no
9,2,>= 5,Yes,No,No,No,no
9,"3, 4",<= 6,No,No,No,Yes,no
9,>= 5,<= 4,No,No,No,Yes & Eliminate,yes
"""


def test_frozen_reference_table():
    rows = generate_table(CFG, n_max=9)
    assert render_csv(rows) == FROZEN_CSV


def test_frozen_table_row_count():
    assert len(generate_table(CFG, n_max=9)) == 25


def _oracle_pattern(n: int, y: int, m: int, cfg: DesignConfig):
    """Independent restatement of the cell rules in their stated order."""
    bounds = boin_boundaries(cfg.phi, cfg.phi1, cfg.phi2)
    if eliminate_dose(y, n, cfg.phi, cfg.elimination_cutoff,
                      cfg.elimination_min_n, cfg.elimination_prior):
        return "eliminate", None
    if y / n > bounds.lambda_d:
        return "de_escalate", None
    if (n - m) / n < cfg.suspension_min_observed_fraction:
        return "suspend", None
    if m == 0:
        return ("escalate" if y / n <= bounds.lambda_e else "stay"), None
    t = escalation_tf_threshold(n, y, m, cfg.phi, bounds.lambda_e)
    if t <= 0:
        return "mf_only", None
    if t < m:
        return "mf_tf", t
    return "stay", None


def test_classify_cell_matches_rule_order():
    cfg = validate_config(CFG)
    for n in (3, 6, 9):
        for y in range(n + 1):
            for m in range(n - y + 1):
                assert classify_cell(n, y, m, cfg) == _oracle_pattern(n, y, m, cfg)


def test_rows_partition_every_cell():
    """Each concrete (n, y, m) cell is covered by exactly one table row,
    and that row's verdict pattern is the cell's own classification."""
    cfg = validate_config(CFG)
    rows = generate_table(CFG, n_max=9)
    for n in (3, 6, 9):
        for y in range(n + 1):
            for m in range(n - y + 1):
                hits = [
                    r for r in rows
                    if r.n == n and r.y_lo <= y <= r.y_hi and r.m_lo <= m <= r.m_hi
                ]
                assert len(hits) == 1, (n, y, m, hits)
                assert hits[0].pattern == classify_cell(n, y, m, cfg)[0]


def test_threshold_display_rounding():
    rows = generate_table(CFG, n_max=9)
    shown = {
        (r.n, r.y_lo, r.m_lo): r.stay
        for r in rows
        if r.pattern == "mf_tf"
    }
    assert shown == {
        (6, 1, 1): "TF < 0.22",
        (6, 1, 2): "TF < 1.38",
        (9, 1, 4): "TF < 0.66",
    }


def test_followup_gate_label_uses_config_fraction():
    cfg = DesignConfig(
        num_doses=1, cohort_size=3, n_stage1=9,
        suspension_min_followup_fraction=0.3,
    )
    rows = generate_table(cfg, n_max=3)
    mf_rows = [r for r in rows if r.pattern == "mf_only"]
    assert mf_rows and all("MF >= 0.30" in r.escalation for r in mf_rows)


def test_parse_csv_round_trip():
    rows = generate_table(CFG, n_max=9)
    text = render_csv(rows)
    parsed = parse_csv(text)
    assert len(parsed) == len(rows)
    for rec, row in zip(parsed, rows):
        assert rec["n"] == str(row.n)
        assert rec["dlt"] == row.y_label
        assert rec["pending"] == row.m_label
        assert rec["suspend"] == row.suspension
        assert rec["escalate"] == row.escalation
        assert rec["stay"] == row.stay
        assert rec["deescalate"] == row.de_escalation
        assert rec["eliminate"] == ("yes" if row.eliminate else "no")


def test_parse_csv_rejects_foreign_header():
    with pytest.raises(ValueError):
        parse_csv("a,b,c\n1,2,3\n")


def test_markdown_renderer_shape():
    rows = generate_table(CFG, n_max=9)
    lines = render_markdown(rows).splitlines()
    assert len(lines) == len(rows) + 2
    assert lines[0].startswith("| No. patients | No. DLT | No. pending |")
    assert set(lines[1].replace("|", "").split()) == {"---"}
    assert lines[2] == "| 3 | 0 | 0 | No | Yes | No | No |"


def test_text_renderer_shape():
    rows = generate_table(CFG, n_max=9)
    lines = render_text(rows).splitlines()
    assert len(lines) == len(rows) + 2
    assert lines[0].split() == [
        "No.", "patients", "No.", "DLT", "No.", "pending",
        "Suspension", "Escalation", "Stay", "De-escalation",
    ]
    assert set(lines[1]) <= {"-", " "}


def test_render_table_dispatch():
    rows = generate_table(CFG, n_max=3)
    assert render_table(rows, "csv") == render_csv(rows)
    assert render_table(rows, "markdown") == render_markdown(rows)
    assert render_table(rows, "text") == render_text(rows)
    with pytest.raises(ValueError):
        render_table(rows, "html")


def test_default_n_max_is_four_cohorts():
    rows = generate_table(CFG)
    assert sorted({r.n for r in rows}) == [3, 6, 9, 12]


def test_cohort_size_drives_row_grid():
    cfg = DesignConfig(num_doses=1, cohort_size=2, n_stage1=8)
    rows = generate_table(cfg, n_max=8)
    assert sorted({r.n for r in rows}) == [2, 4, 6, 8]


def test_phi_030_changes_first_cohort_verdicts():
    cfg = validate_config(DesignConfig(num_doses=1, phi=0.30, cohort_size=3, n_stage1=9))
    # 1/3 = 0.333 sits inside (lambda_e, lambda_d) = (0.236, 0.359) at phi=0.30,
    # so a fully observed 1-of-3 cohort stays rather than de-escalating.
    assert classify_cell(3, 1, 0, cfg) == ("stay", None)
    # ... while at phi=0.25 the same cell de-escalates (0.333 > 0.298).
    assert classify_cell(3, 1, 0, validate_config(CFG)) == ("de_escalate", None)
