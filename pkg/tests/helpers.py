"""Independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np


def central_difference(f, arrays: dict[str, np.ndarray], h: float = 1e-5, max_coords: int | None = None, rng=None):
    """Central finite differences of the scalar ``f()`` w.r.t. each array, in place.

    ``f`` must read the arrays afresh on every call. With ``max_coords`` only a
    random subset of coordinates per array is probed; the rest are NaN.
    """
    out = {}
    for name, arr in arrays.items():
        grad = np.full(arr.shape, np.nan)
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        gflat = grad.reshape(-1)
        for k in coords:
            old = flat[k]
            flat[k] = old + h
            up = f()
            flat[k] = old - h
            down = f()
            flat[k] = old
            gflat[k] = (up - down) / (2 * h)
        out[name] = grad
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error over the probed (non-NaN) coordinates."""
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def naive_matmul(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def random_hetero_edges(rng, n: int, m: int, p: float):
    views = []
    for _ in range(m):
        views.append([(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p])
    return views


# one "PASS|FAIL <criterion>: <detail>" line per acceptance criterion,
# echoed in the terminal summary by conftest.py
ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
