"""Scaling-law fitting and prediction.

Three families:
  - generic two-constant power law L(X) = (X_c / X)^alpha for X in {N, D, C},
    fit by OLS in log-log space (exactly linear there, so noiseless recovery
    is exact);
  - a linear local-step penalty L(s, N) = alpha_s * s + L(N), with the
    intercept pinned to the L(N) power law;
  - the combined L(K, N) = lambda * K/(1-K) + L(N).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FitError

STEP_PENALTY_MAX_S = 1024  # linear regime bound for the step-penalty model


@dataclass(frozen=True)
class PowerLawFit:
    axis: str           # "N" | "D" | "C"
    x_c: float
    alpha: float
    r_squared: float
    n_points: int

    def to_dict(self):
        return {"axis": self.axis, "X_c": self.x_c, "alpha": self.alpha,
                "r_squared": self.r_squared, "n_points": self.n_points}


@dataclass
class StepPenaltyFit:
    alpha_s: float
    base: PowerLawFit
    max_s: int = STEP_PENALTY_MAX_S
    intercept_diagnostic: float = 0.0   # free intercept of residual-vs-s OLS
    slope_diagnostic: float = 0.0       # slope of that same free-intercept fit
    per_size_slopes: dict = field(default_factory=dict)
    max_abs_residual: float = 0.0


def fit_power_law(points, axis: str = "N") -> PowerLawFit:
    """OLS on (ln X, ln L): ln L = alpha*ln X_c - alpha*ln X."""
    if axis not in ("N", "D", "C"):
        raise FitError(f"unknown axis {axis!r}")
    pts = [(float(x), float(l)) for x, l in points]
    if len(pts) < 2:
        raise FitError("need at least 2 points")
    if any(x <= 0 or l <= 0 for x, l in pts):
        raise FitError("power-law fit needs strictly positive X and L")
    x = np.log(np.array([p[0] for p in pts]))
    y = np.log(np.array([p[1] for p in pts]))
    if np.ptp(x) == 0:
        raise FitError("all X values identical; fit is rank deficient")
    slope, intercept = np.polyfit(x, y, 1)
    alpha = -slope
    if alpha <= 0:
        raise FitError(f"loss does not decrease with {axis}; fitted alpha={alpha:.3g}")
    x_c = float(np.exp(intercept / alpha))
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return PowerLawFit(axis=axis, x_c=x_c, alpha=float(alpha),
                       r_squared=r2, n_points=len(pts))


def predict_power_law(fit: PowerLawFit, x: float) -> float:
    """L = (X_c / X)^alpha."""
    if x <= 0:
        raise ValueError("X must be positive")
    return (fit.x_c / x) ** fit.alpha


def fit_step_penalty(points, base: PowerLawFit) -> StepPenaltyFit:
    """Fit alpha_s in L = alpha_s*s + L(N); slope through the origin of the
    residual L - L(N) against s. A free-intercept OLS and per-size slopes are
    reported as diagnostics only."""
    pts = [(float(s), float(n), float(l)) for s, n, l in points]
    if not pts:
        raise FitError("no points")
    if any(s >= STEP_PENALTY_MAX_S for s, _, _ in pts):
        raise FitError(f"step-penalty model only valid for s < {STEP_PENALTY_MAX_S}")
    s = np.array([p[0] for p in pts])
    resid = np.array([l - predict_power_law(base, n) for _, n, l in pts])
    if not np.any(s != 0):
        raise FitError("all points at s=0; slope is undetermined")
    alpha_s = float((s * resid).sum() / (s * s).sum())

    slope_d = intercept_d = 0.0
    if np.ptp(s) > 0:
        slope_d, intercept_d = (float(v) for v in np.polyfit(s, resid, 1))
    per_size = {}
    for n in sorted({p[1] for p in pts}):
        ss = np.array([p[0] for p in pts if p[1] == n])
        rr = np.array([p[2] - predict_power_law(base, n) for p in pts if p[1] == n])
        if np.any(ss != 0):
            per_size[n] = float((ss * rr).sum() / (ss * ss).sum())
    fitted = alpha_s * s
    return StepPenaltyFit(
        alpha_s=alpha_s, base=base,
        intercept_diagnostic=intercept_d, slope_diagnostic=slope_d,
        per_size_slopes=per_size,
        max_abs_residual=float(np.abs(resid - fitted).max()),
    )


def predict_step_penalty(fit: StepPenaltyFit, s: float, n: float) -> float:
    if not (0 <= s < fit.max_s):
        raise ValueError(f"s must be in [0, {fit.max_s})")
    return fit.alpha_s * s + predict_power_law(fit.base, n)


def predict_loss_from_efficiency(base: PowerLawFit, lam: float, k: float,
                                 n: float) -> float:
    """L(K, N) = lambda * K/(1-K) + (N_c/N)^alpha; singular at K = 1."""
    if not (0.0 <= k < 1.0):
        raise ValueError("K must be in [0, 1)")
    return lam * k / (1.0 - k) + predict_power_law(base, n)


def goodness_report(fit: PowerLawFit, holdout) -> dict:
    """Residuals (nats) of `fit` on held-out (X, L) points."""
    pts = [(float(x), float(l)) for x, l in holdout]
    if not pts:
        raise FitError("empty holdout")
    table = []
    for x, l in pts:
        pred = predict_power_law(fit, x)
        table.append({"x": x, "actual": l, "predicted": pred,
                      "residual": l - pred})
    actual = np.array([t["actual"] for t in table])
    resid = np.array([t["residual"] for t in table])
    ss_tot = float(((actual - actual.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(resid @ resid) / ss_tot
    return {
        "r_squared": r2,
        "max_abs_residual_nats": float(np.abs(resid).max()),
        "points": table,
    }


def fit_report_json(fit: PowerLawFit, report: dict | None = None) -> str:
    out = {"fit": fit.to_dict()}
    if report is not None:
        out["holdout"] = report
    return json.dumps(out, indent=2, sort_keys=True)
