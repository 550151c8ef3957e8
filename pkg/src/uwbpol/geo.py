"""Ranging arithmetic and position estimation.

Distances come from single-sided two-way ranging (poll/response), positions
from iterative least squares over ranges to fixed anchors. Everything here
is a pure function over immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    GeometryError,
    InsufficientDofError,
    InsufficientRangesError,
    InvalidTimingError,
)

SPEED_OF_LIGHT = 299_792_458.0  # m/s, vacuum; close enough for air at desk scale

GN_MAX_ITERATIONS = 50
GN_STEP_TOL = 1e-9  # meters; step norm below this counts as converged
COND_LIMIT = 1e12  # condition number of J^T J beyond which geometry is degenerate

WARN_FEW_ANCHORS = "anchor-count-below-recommended"


@dataclass(frozen=True)
class Position:
    """A point in meters. z defaults to 0 for planar scenarios."""

    x: float
    y: float
    z: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"coordinate {name} must be finite, got {v!r}")

    def to_array(self, dimension: int = 3) -> np.ndarray:
        if dimension == 2:
            return np.array([self.x, self.y], dtype=float)
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a: np.ndarray) -> "Position":
        if len(a) == 2:
            return Position(float(a[0]), float(a[1]), 0.0)
        return Position(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class RangeMeasurement:
    """One measured anchor-to-target distance.

    sigma is the assumed noise standard deviation of the measurement; it is
    carried as metadata (the solver itself is unweighted).
    """

    anchor_id: str
    distance: float
    sigma: float = 0.05
    timestamp: int = 0

    def __post_init__(self):
        if not math.isfinite(self.distance) or self.distance < 0:
            raise ValueError(f"distance must be finite and >= 0, got {self.distance!r}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma!r}")


class AnchorSet:
    """Ordered set of named anchor positions with validated geometry.

    Requires at least dimension+1 anchors, unique ids, and anchors that are
    not all collinear (2D) / coplanar (3D).
    """

    def __init__(self, anchors: Sequence[tuple[str, Position]], dimension: int = 2):
        if dimension not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {dimension}")
        anchors = list(anchors)
        ids = [a_id for a_id, _ in anchors]
        if len(set(ids)) != len(ids):
            raise GeometryError("anchor ids must be unique")
        if len(anchors) < dimension + 1:
            raise GeometryError(
                f"need at least {dimension + 1} anchors for {dimension}D, got {len(anchors)}"
            )
        pts = np.array([p.to_array(dimension) for _, p in anchors])
        # Rank of the centered anchor cloud: < dimension means collinear/coplanar.
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < dimension:
            kind = "collinear" if dimension == 2 else "coplanar"
            raise GeometryError(f"anchors must not be all {kind}")
        self.dimension = dimension
        self.anchors = tuple(anchors)
        self._by_id = {a_id: p for a_id, p in anchors}
        self._points = pts

    def __len__(self) -> int:
        return len(self.anchors)

    def __contains__(self, anchor_id: str) -> bool:
        return anchor_id in self._by_id

    def position_of(self, anchor_id: str) -> Position:
        return self._by_id[anchor_id]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(a_id for a_id, _ in self.anchors)

    def centroid(self) -> Position:
        c = self._points.mean(axis=0)
        return Position.from_array(c)


@dataclass(frozen=True)
class EstimateResult:
    """Least-squares position fit with residual and error-radius diagnostics."""

    position: Position
    residual_rms: float
    error_radius: float
    iterations: int
    converged: bool
    warnings: tuple[str, ...] = field(default=())


def distance(p: Position, q: Position) -> float:
    """Euclidean distance between two points, in meters."""
    return math.dist((p.x, p.y, p.z), (q.x, q.y, q.z))


def twr_distance(t_round_ns: float, t_reply_ns: float, c: float = SPEED_OF_LIGHT) -> float:
    """Single-sided two-way-ranging distance.

    t_round_ns is the initiator's poll-to-response round-trip time and
    t_reply_ns the responder's internal reply delay, both in nanoseconds on
    their own local clocks (offsets cancel). Distance is c*(round - reply)/2.
    """
    if t_round_ns < t_reply_ns:
        raise InvalidTimingError(
            f"t_round ({t_round_ns} ns) must be >= t_reply ({t_reply_ns} ns)"
        )
    return c * (t_round_ns - t_reply_ns) * 1e-9 / 2.0


def error_radius(jacobian: np.ndarray, ssr: float, dimension: int) -> float:
    """Scalar 1-sigma error radius of a converged fit.

    Uses the parameter covariance of the linearized problem:
    sqrt(trace(sigma_hat^2 * (J^T J)^-1)) with sigma_hat^2 = SSR/(n - dimension).
    """
    n = jacobian.shape[0]
    if n <= dimension:
        raise InsufficientDofError(
            f"error radius needs more than {dimension} measurements, got {n}"
        )
    jtj = jacobian.T @ jacobian
    if np.linalg.cond(jtj) > COND_LIMIT:
        raise GeometryError("normal equations near-singular; error radius undefined")
    sigma_sq = ssr / (n - dimension)
    return float(math.sqrt(max(sigma_sq, 0.0) * np.trace(np.linalg.inv(jtj))))


def _residuals_jacobian(p: np.ndarray, pts: np.ndarray, dists: np.ndarray):
    diff = p[None, :] - pts
    norms = np.linalg.norm(diff, axis=1)
    norms = np.maximum(norms, 1e-12)  # guard: estimate sitting exactly on an anchor
    r = norms - dists
    jac = diff / norms[:, None]
    return r, jac


def _linear_seed(pts: np.ndarray, dists: np.ndarray, dimension: int) -> Optional[np.ndarray]:
    """Closed-form linearized trilateration, used as a second solver start.

    Subtracting the first equation removes the quadratic term, leaving a
    linear system in p. None when the system is rank-deficient.
    """
    a0, d0 = pts[0], dists[0]
    rows = 2.0 * (pts[1:] - a0[None, :])
    rhs = (d0**2 - dists[1:] ** 2) + (pts[1:] ** 2).sum(axis=1) - (a0**2).sum()
    sol, _, rank, _ = np.linalg.lstsq(rows, rhs, rcond=None)
    if rank < dimension or not np.all(np.isfinite(sol)):
        return None
    return sol


def _gauss_newton(p: np.ndarray, pts: np.ndarray, dists: np.ndarray,
                  max_iterations: int, step_tol: float):
    """Plain Gauss-Newton from one start; returns (p, ssr, jac, iters, converged)."""
    converged = False
    iterations = 0
    r, jac = _residuals_jacobian(p, pts, dists)
    for iterations in range(1, max_iterations + 1):
        jtj = jac.T @ jac
        if np.linalg.cond(jtj) > COND_LIMIT:
            raise GeometryError("degenerate geometry: singular normal equations")
        step = np.linalg.solve(jtj, -(jac.T @ r))
        p = p + step
        r, jac = _residuals_jacobian(p, pts, dists)
        if np.linalg.norm(step) < step_tol:
            converged = True
            break
    return p, float(r @ r), jac, iterations, converged


def multilaterate(
    anchors: AnchorSet,
    ranges: Sequence[RangeMeasurement],
    dimension: int = 2,
    init: Optional[Position] = None,
    max_iterations: int = GN_MAX_ITERATIONS,
    step_tol: float = GN_STEP_TOL,
) -> EstimateResult:
    """Estimate a position from anchor ranges by Gauss-Newton least squares.

    Minimizes sum_i (||p - a_i|| - d_i)^2. Multiple measurements per anchor
    are allowed and simply add residual rows, but the measurements must cover
    at least dimension+1 distinct anchors.

    With an explicit init, a single Gauss-Newton run starts there. Otherwise
    two runs start from the anchor centroid and from a closed-form linearized
    seed, and the converged fit with the lower SSR wins; the second start is
    what keeps the solver out of the mirror-image local minimum that plagues
    thin anchor geometries. Converged means the step norm dropped below
    step_tol within max_iterations.
    """
    if dimension not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {dimension}")
    if anchors.dimension != dimension:
        raise GeometryError(
            f"anchor set built for {anchors.dimension}D, requested {dimension}D"
        )
    ranges = list(ranges)
    for m in ranges:
        if m.anchor_id not in anchors:
            raise GeometryError(f"range references unknown anchor {m.anchor_id!r}")
    covered = {m.anchor_id for m in ranges}
    if len(covered) < dimension + 1:
        raise InsufficientRangesError(
            f"need ranges to at least {dimension + 1} distinct anchors, "
            f"got {len(covered)}"
        )

    pts = np.array([anchors.position_of(m.anchor_id).to_array(dimension) for m in ranges])
    dists = np.array([m.distance for m in ranges])

    if init is not None:
        starts = [init.to_array(dimension)]
    else:
        starts = [anchors.centroid().to_array(dimension)]
        seed = _linear_seed(pts, dists, dimension)
        if seed is not None:
            starts.append(seed)

    best = None
    for start in starts:
        fit = _gauss_newton(start, pts, dists, max_iterations, step_tol)
        if best is None:
            best = fit
            continue
        # Prefer converged fits, then lower SSR.
        if (fit[4] and not best[4]) or (fit[4] == best[4] and fit[1] < best[1]):
            best = fit

    p, ssr, jac, iterations, converged = best
    warnings = ()
    if len(covered) < 4:
        warnings = (WARN_FEW_ANCHORS,)

    n = len(ranges)
    er = error_radius(jac, ssr, dimension) if (n > dimension and converged) else 0.0
    return EstimateResult(
        position=Position.from_array(p),
        residual_rms=math.sqrt(ssr / n),
        error_radius=er,
        iterations=iterations,
        converged=converged,
        warnings=warnings,
    )


