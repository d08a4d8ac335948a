"""Verdict thresholds.  Every pass/fail decision in the harness reads this table.

Bump ``CRITERIA_VERSION`` whenever a number changes; the version and the full
table are echoed into each run's summary.
"""

from __future__ import annotations

from typing import Dict, List

CRITERIA_VERSION = "2026.1"

CRITERIA: Dict[str, Dict[str, object]] = {
    "C1": {"title": "reflection identities", "n_fields": 20, "identity_tol": 1e-12,
           "solver_agreement_tol": 1e-10},
    "C2": {"title": "Neumann flux solve order", "grids": (64, 128, 256),
           "ratio_lo": 3.5, "ratio_hi": 4.5},
    "C3": {"title": "manufactured-solution order", "min_order": 1.8},
    "C4": {"title": "mass and energy", "mass_drift_rel": 1e-8, "energy_rise_rate": 1e-3},
    "C5": {"title": "density upper bound", "all_factor": 2.0, "top_factor": 1.5},
    "C6": {"title": "incompressible-limit scaling", "exp_lo": -0.65, "exp_hi": -0.35,
           "min_r2": 0.95},
    "C7": {"title": "vacuum decay rates", "grad_exp_max": -0.35, "udot_exp_max": -0.7,
           "min_r2": 0.9, "edge_tol": 1e-6},
    "C8": {"title": "mass localization", "ball_mass_min": 0.25 - 1e-6, "moment_ratio_max": 1.2},
    "C9": {"title": "non-vacuum large-time decay", "ratio_max": 0.2, "t_ref": 1.0},
    "C10": {"title": "comparison lemma and characteristic residual", "n_cases": 200,
            "min_ratio": 3.0},
    "C11": {"title": "determinism and restart", "restart_tol": 1e-12},
}


def threshold(cid: str, key: str):
    return CRITERIA[cid][key]


def table_lines() -> List[str]:
    """``key = value`` lines for the summary document."""
    out = [f"criteria.version = {CRITERIA_VERSION}"]
    for cid, row in CRITERIA.items():
        for k, v in row.items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"criteria.{cid}.{k} = {v}")
    return out
