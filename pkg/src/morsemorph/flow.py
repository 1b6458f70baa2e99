"""Sphere-restricted gradient-like fields and descent-flow integration.

A TangentField is the tangential projection of a scalar field's gradient onto
a sphere.  Flow lines integrate x' = -V adaptively (Runge-Kutta with embedded
error control) with reprojection onto the sphere after every accepted step,
terminating early near restricted critical points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import RK45

from .jet import FieldError
from .critical import NotCritical, restricted_critical


class IntegratorStalled(FieldError):
    pass


MIN_STEP = 1e-14
CP_CAPTURE = 1e-6


@dataclass
class TangentField:
    field: object            # ScalarField
    sphere_radius: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = x[None, :] if single else x
        g = self.field.grad(pts)
        nrm = pts / self.sphere_radius
        v = g - np.sum(g * nrm, axis=1, keepdims=True) * nrm
        return v[0] if single else v

    def project(self, x):
        x = np.asarray(x, dtype=float)
        return self.sphere_radius * x / np.linalg.norm(x)


@dataclass
class FlowLine:
    times: np.ndarray
    points: np.ndarray
    values: np.ndarray
    source: object = None    # CriticalPoint or None (backward limit)
    target: object = None    # CriticalPoint or None (forward limit)

    def to_csv(self, path):
        n = self.points.shape[1]
        header = "t," + ",".join(f"x{i + 1}" for i in range(n)) + ",f"
        data = np.column_stack([self.times, self.points, self.values])
        np.savetxt(path, data, delimiter=",", header=header, comments="")


def check_gradient_like(V, f, samples=1000, critical_points=None, seed=0):
    """True iff <V, tangential grad f> > 0 at all sampled non-critical points."""
    assert samples >= 1000, "need at least 1000 samples"
    n = f.dim
    R = V.sphere_radius
    if critical_points is None:
        critical_points = restricted_critical(f, R)
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(samples, n))
    pts = R * pts / np.linalg.norm(pts, axis=1, keepdims=True)
    if critical_points:
        locs = np.stack([c.location for c in critical_points])
        d = np.min(np.linalg.norm(pts[:, None, :] - locs[None], axis=2), axis=1)
        pts = pts[d > 1e-9]
    v = V(pts)
    g = f.grad(pts)
    nrm = pts / R
    gt = g - np.sum(g * nrm, axis=1, keepdims=True) * nrm
    return bool(np.all(np.sum(v * gt, axis=1) > 0.0))


def _descend(V, x0, t_max, rtol, cps, direction=1.0):
    """Integrate x' = -direction*V from x0 for flow time up to t_max > 0."""
    R = V.sphere_radius

    def rhs(t, y):
        return -direction * V(R * y / np.linalg.norm(y))

    ts = [0.0]
    ys = [np.array(x0, dtype=float)]
    hit = None
    solver = RK45(rhs, 0.0, x0, t_max, rtol=rtol, atol=1e-12)
    while solver.status == "running":
        solver.step()
        if solver.status == "failed":
            raise IntegratorStalled(f"integrator failed at t = {solver.t}")
        if solver.step_size is not None and solver.step_size < MIN_STEP:
            raise IntegratorStalled(f"step size underflow at t = {solver.t}")
        y = solver.y
        drift = abs(np.linalg.norm(y) - R)
        assert drift < 1e-6, "flow left the sphere"
        y = R * y / np.linalg.norm(y)
        solver.y = y
        ts.append(solver.t)
        ys.append(y.copy())
        for cp in cps:
            if np.linalg.norm(y - cp.location) < CP_CAPTURE:
                hit = cp
                break
        if hit is not None or np.linalg.norm(V(y)) < 1e-9:
            break
    return np.array(ts), np.stack(ys), hit


def integrate_flow(V, x0, t_span, rtol=1e-9, critical_points=None):
    """Descent flow line of -V through x0 over t_span = (t0 <= 0 <= t1)."""
    x0 = np.asarray(x0, dtype=float)
    R = V.sphere_radius
    assert abs(np.linalg.norm(x0) - R) < 1e-9, "start point must be on the sphere"
    if np.linalg.norm(V(x0)) < 1e-9:
        raise NotCritical(f"flow start {x0} is a critical point")
    t0, t1 = t_span
    assert t0 <= 0.0 <= t1
    cps = critical_points if critical_points is not None else \
        restricted_critical(V.field, R)
    times = [np.array([0.0])]
    points = [x0[None, :]]
    source = target = None
    if t0 < 0.0:
        tb, yb, source = _descend(V, x0, -t0, rtol, cps, direction=-1.0)
        times.insert(0, -tb[::-1][:-1])
        points.insert(0, yb[::-1][:-1])
    if t1 > 0.0:
        tf, yf, target = _descend(V, x0, t1, rtol, cps, direction=1.0)
        times.append(tf[1:])
        points.append(yf[1:])
    times = np.concatenate(times)
    points = np.concatenate(points)
    values = V.field.value(points)
    return FlowLine(times, points, values, source, target)


def point_on_flowline(V, p, s, rtol=1e-9):
    """gamma(s) on the descent flow line of -V with gamma(0) = p."""
    p = np.asarray(p, dtype=float)
    if s == 0.0:
        return p.copy()
    direction = 1.0 if s > 0 else -1.0
    _, ys, _ = _descend(V, p, abs(s), rtol, cps=(), direction=direction)
    return ys[-1]
