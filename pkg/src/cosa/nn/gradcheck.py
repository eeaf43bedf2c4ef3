from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(f, x0, step=1e-5, tol=1e-4):
    """Compare the analytic gradient of ``f`` with central differences.

    ``f(x)`` must return ``(value, grad)``.  The relative error is the largest
    coordinate deviation divided by the largest gradient magnitude of either
    estimate, which stays meaningful when individual coordinates are ~0.
    """
    x0 = np.array(x0, dtype=np.float64)
    value, analytic = f(x0.copy())
    if not np.isfinite(value):
        raise ValueError("objective is not finite at x0")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x0.shape)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = f(xp.reshape(x0.shape))[0]
        fm = f(xm.reshape(x0.shape))[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"objective is not finite near coordinate {i}")
        flat[i] = (fp - fm) / (2 * step)
    abs_err = np.abs(analytic - numeric).max()
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-300)
    return GradCheckReport(float(abs_err / scale), float(abs_err), analytic, numeric, tol)
