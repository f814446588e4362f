"""Runtime scaling of the fast log-determinant against the dense oracle."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .jacdet import fast_log_det, oracle_log_det, relative_error
from .manifolds import RadiusField, Sphere
from .spherical import sample_uniform_angles

DEFAULT_DIMS = (16, 32, 64, 128, 256, 512)
METHODS = ("fast", "oracle")


@dataclass
class BenchRow:
    method: str
    d: int
    rep: int
    seconds: float


@dataclass
class BenchResult:
    rows: list = field(default_factory=list)
    max_rel_error: float = 0.0

    def medians(self, method: str) -> dict[int, float]:
        by_d: dict[int, list[float]] = {}
        for r in self.rows:
            if r.method == method:
                by_d.setdefault(r.d, []).append(r.seconds)
        return {d: float(np.median(v)) for d, v in sorted(by_d.items())}

    def fits(self) -> dict:
        out = {}
        for m in METHODS:
            rows = [r for r in self.rows if r.method == m]
            if len({r.d for r in rows}) >= 3:
                slope, intercept, stderr = fit_loglog_exponent(rows)
                out[m] = {"slope": slope, "intercept": intercept, "stderr": stderr}
        return out

    def speedup(self, d: int) -> float:
        return self.medians("oracle")[d] / self.medians("fast")[d]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "d", "rep", "seconds"])
            for r in self.rows:
                w.writerow([r.method, r.d, r.rep, repr(r.seconds)])
        return path

    def summary(self) -> dict:
        dims = sorted({r.d for r in self.rows})
        out = {
            "dims": dims,
            "reps": {m: {d: sum(1 for r in self.rows if r.method == m and r.d == d) for d in dims}
                     for m in METHODS},
            "median_seconds": {m: self.medians(m) for m in METHODS},
            "fits": self.fits(),
            "max_rel_error": self.max_rel_error,
        }
        if 256 in dims:
            out["speedup_d256"] = self.speedup(256)
        return out

    def write_summary(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True, default=str))
        return path


def time_jacdet(dims=DEFAULT_DIMS, reps: int = 20, field: RadiusField | None = None,
                rng: np.random.Generator | None = None) -> BenchResult:
    """Time both methods at fresh random angles, one untimed warm-up per (method, d).

    Every timed point is also a correctness check: the relative gap between
    the two methods is tracked in ``max_rel_error``.
    """
    field = Sphere() if field is None else field
    rng = np.random.default_rng(0) if rng is None else rng
    if reps < 1:
        raise ValueError("reps must be >= 1")
    result = BenchResult()
    fns = {
        "fast": lambda th: fast_log_det(th, field).log_abs,
        "oracle": lambda th: oracle_log_det(th, field),
    }
    for d in dims:
        if d < 2:
            raise ValueError(f"dimension must be >= 2, got {d}")
        thetas = sample_uniform_angles(d, reps + 1, rng, field.positive_orthant)
        values = {}
        for method in METHODS:
            fn = fns[method]
            fn(thetas[-1])  # warm-up
            vals = []
            for rep in range(reps):
                t0 = time.perf_counter()
                v = fn(thetas[rep])
                result.rows.append(BenchRow(method, d, rep, time.perf_counter() - t0))
                vals.append(float(v))
            values[method] = np.array(vals)
        rel = relative_error(values["fast"], values["oracle"])
        result.max_rel_error = max(result.max_rel_error, float(rel.max()))
    return result


def fit_loglog_exponent(rows) -> tuple[float, float, float]:
    """OLS of log median seconds on log d; returns ``(slope, intercept, stderr of slope)``.

    ``rows`` are :class:`BenchRow` (or ``(d, seconds)`` pairs) for one method.
    """
    by_d: dict[int, list[float]] = {}
    for r in rows:
        d, sec = (r.d, r.seconds) if isinstance(r, BenchRow) else r
        by_d.setdefault(int(d), []).append(float(sec))
    if len(by_d) < 3:
        raise ValueError(f"need at least 3 distinct dimensions, got {len(by_d)}")
    ds = np.array(sorted(by_d))
    x = np.log(ds)
    y = np.log([np.median(by_d[d]) for d in ds])
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = len(x) - 2
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    stderr = float(np.sqrt(s2 / np.sum((x - x.mean()) ** 2)))
    return float(coef[0]), float(coef[1]), stderr
