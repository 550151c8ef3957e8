"""Independent oracles used by the tests.

The grid oracle evaluates the exact same sum-of-squares objective as the
solver, but by brute force over a regular grid, so it shares no code path
with the iterative fit.
"""

import numpy as np


def ssr(point, anchor_pts, dists):
    """Sum of squared range residuals at one point."""
    point = np.asarray(point, dtype=float)
    d = np.linalg.norm(anchor_pts - point[None, :], axis=1)
    return float(np.sum((d - dists) ** 2))


def grid_argmin(anchor_pts, dists, x_range, y_range, step=0.01, chunk_rows=200):
    """Brute-force SSR minimizer over a regular 2D grid.

    Returns (best_point, best_ssr). Evaluates every grid node; chunked over
    rows to bound memory.
    """
    anchor_pts = np.asarray(anchor_pts, dtype=float)
    dists = np.asarray(dists, dtype=float)
    xs = np.arange(x_range[0], x_range[1] + step / 2, step)
    ys = np.arange(y_range[0], y_range[1] + step / 2, step)

    best_val = np.inf
    best_xy = None
    for start in range(0, len(ys), chunk_rows):
        yy = ys[start:start + chunk_rows]
        gx, gy = np.meshgrid(xs, yy)
        total = np.zeros_like(gx)
        for (ax, ay), d in zip(anchor_pts, dists):
            dist = np.sqrt((gx - ax) ** 2 + (gy - ay) ** 2)
            total += (dist - d) ** 2
        idx = np.unravel_index(np.argmin(total), total.shape)
        if total[idx] < best_val:
            best_val = float(total[idx])
            best_xy = (float(gx[idx]), float(gy[idx]))
    return best_xy, best_val
