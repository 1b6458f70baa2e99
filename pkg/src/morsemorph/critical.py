"""Critical-point location, classification, parity/degree bookkeeping, and
gradient lower-bound certificates.

Interior critical points come from a grid scan of |grad|^2 followed by batched
Newton refinement.  Boundary-restricted points live on spheres and use
tangent-graph coordinates (restricted Hessian = U^T H U - <g, n> / R on the
tangent frame U).  Certificates are produced by adaptive anisotropic box
subdivision with per-axis Lipschitz bounds estimated from sampled Hessians.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .jet import Region, FieldError, ball, annulus


class CriticalError(FieldError):
    pass


class DegenerateCritical(CriticalError):
    pass


class NewtonDiverged(CriticalError):
    pass


class NotCritical(CriticalError):
    pass


class GradVanishesOnBoundary(CriticalError):
    pass


class FormulaInconsistent(CriticalError):
    pass


class DimensionUnsupported(CriticalError):
    pass


class ResolutionTooCoarse(CriticalError):
    pass


class CertificationFailed(CriticalError):
    pass


DEFAULT_GRID = {2: 64, 3: 32, 4: 16}
NEWTON_TOL = 1e-10
DEGENERACY_REL = 1e-6


@dataclass
class CriticalPoint:
    location: np.ndarray
    kind: str                    # "interior" | "boundary-restricted"
    index: int
    eigenvalues: np.ndarray      # sorted, of the relevant Hessian
    radial_sign: str             # "in" | "out" | "none"
    value: float

    def to_json(self):
        return {"location": [float(v) for v in self.location], "kind": self.kind,
                "index": int(self.index),
                "eigenvalues": [float(v) for v in self.eigenvalues],
                "radial_sign": self.radial_sign, "value": float(self.value)}


@dataclass
class Certificate:
    region: Region
    grad_lower_bound: float
    resolution: float
    lipschitz_bound: float
    stats: dict = dc_field(default_factory=dict)

    def to_json(self):
        return {"region": self.region.to_json(),
                "grad_lower_bound": float(self.grad_lower_bound),
                "resolution": float(self.resolution),
                "lipschitz_bound": float(self.lipschitz_bound),
                "stats": {k: (float(v) if isinstance(v, (int, float, np.floating))
                              else v) for k, v in self.stats.items()}}


# ---------------------------------------------------------------------------
# interior critical points

def _grid_points(region, grid_res):
    lo, hi = region.bounding_box()
    n = len(lo)
    axes = [np.linspace(lo[i], hi[i], grid_res) for i in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return pts, tuple(grid_res for _ in range(n)), (hi - lo) / (grid_res - 1)


def _region_mask(region, pts, pad=0.0):
    return np.array([region.contains(p, tol=pad) for p in pts])


def _local_minima(values, shape):
    from scipy.ndimage import minimum_filter
    v = values.reshape(shape)
    mins = minimum_filter(v, size=3, mode="nearest")
    return (v <= mins + 1e-300).ravel()


def _newton_polish(field, pts, max_iter=60, step_cap=None):
    """Batched Newton on grad = 0; returns refined points and final |grad|."""
    pts = np.array(pts, dtype=float)
    for _ in range(max_iter):
        _, g, h = field.eval_batch(pts)
        gn = np.linalg.norm(g, axis=1)
        if np.all(gn < 1e-14):
            break
        try:
            delta = np.linalg.solve(h, g[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            delta = np.einsum("mij,mj->mi", np.linalg.pinv(h), g)
        if step_cap is not None:
            ln = np.linalg.norm(delta, axis=1, keepdims=True)
            delta = delta * np.minimum(1.0, step_cap / np.maximum(ln, 1e-300))
        pts = pts - delta
        if np.max(np.linalg.norm(delta, axis=1)) < 1e-15:
            break
    _, g, _ = field.eval_batch(pts)
    return pts, np.linalg.norm(g, axis=1)


def find_critical(field, region=None, grid_res=None, newton_tol=NEWTON_TOL,
                  degeneracy_rel=DEGENERACY_REL):
    """Interior critical points: grid scan of |grad|^2, Newton refinement,
    duplicate merging, and Morse classification."""
    region = region or field.region
    n = field.dim
    grid_res = grid_res or DEFAULT_GRID.get(n, 16)
    pts, shape, widths = _grid_points(region, grid_res)
    inside = _region_mask(region, pts)
    _, g, _ = field.eval_batch(pts)
    with np.errstate(over="ignore", invalid="ignore"):
        g2 = np.sum(g * g, axis=1)
    g2 = np.where(inside & np.isfinite(g2), g2, np.inf)
    cand = pts[_local_minima(g2, shape) & inside & (g2 < np.inf)]
    if len(cand) == 0:
        return []
    step_cap = 2.0 * float(np.max(widths))
    refined, gn = _newton_polish(field, cand, step_cap=step_cap)
    ok = gn < newton_tol
    refined = refined[ok]
    # merge duplicates and discard escapes from the region
    found = []
    for p in refined:
        if not region.contains(p, tol=1e-9):
            continue
        if any(np.linalg.norm(p - q) < max(10 * newton_tol, 1e-8) for q in found):
            continue
        found.append(p)
    out = []
    for p in found:
        j = field.jet(p)
        eig = np.linalg.eigvalsh(j.hess)
        if np.min(np.abs(eig)) <= degeneracy_rel * np.max(np.abs(eig)):
            raise DegenerateCritical(f"near-degenerate critical point at {p}")
        out.append(CriticalPoint(p, "interior", int(np.sum(eig < 0)), eig,
                                 "none", j.value))
    out.sort(key=lambda c: tuple(c.location))
    return out


def morse_index(field, point, degeneracy_rel=DEGENERACY_REL, newton_tol=1e-8):
    j = field.jet(np.asarray(point, dtype=float))
    if np.linalg.norm(j.grad) >= newton_tol:
        raise NotCritical(f"|grad| = {np.linalg.norm(j.grad)} at {point}")
    eig = np.linalg.eigvalsh(j.hess)
    if np.min(np.abs(eig)) <= degeneracy_rel * np.max(np.abs(eig)):
        raise DegenerateCritical(f"degenerate Hessian at {point}")
    return int(np.sum(eig < 0))


# ---------------------------------------------------------------------------
# boundary-restricted critical points

def _tangent_frames(p_hat):
    """Batched orthonormal tangent frames U (m, n, n-1) at unit vectors."""
    m, n = p_hat.shape
    rng = np.random.default_rng(12345)
    fill = rng.normal(size=(n, n - 1))
    M = np.empty((m, n, n))
    M[:, :, 0] = p_hat
    M[:, :, 1:] = fill[None, :, :]
    q, _ = np.linalg.qr(M)
    return q[:, :, 1:]


def _restricted_jets(field, pts, radius):
    """Tangential gradient, tangent frame, restricted Hessian at sphere points."""
    v, g, h = field.eval_batch(pts)
    p_hat = pts / radius
    gr = np.sum(g * p_hat, axis=1)
    gt = g - gr[:, None] * p_hat
    U = _tangent_frames(p_hat)
    Hr = np.einsum("mia,mij,mjb->mab", U, h, U)
    Hr -= (gr / radius)[:, None, None] * np.eye(pts.shape[1] - 1)[None]
    return v, g, gr, gt, U, Hr


def sphere_grid(n, res, radius=1.0):
    """Covering point set: normalized grids on the 2n cube faces."""
    if n == 2:
        th = np.linspace(0.0, 2 * math.pi, 4 * res, endpoint=False)
        return radius * np.stack([np.cos(th), np.sin(th)], axis=1)
    axes = [np.linspace(-1, 1, res) for _ in range(n - 1)]
    mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    pts = []
    for axis in range(n):
        for sgn in (-1.0, 1.0):
            face = np.insert(mesh, axis, sgn * np.ones(len(mesh)), axis=1)
            pts.append(face)
    pts = np.concatenate(pts, axis=0)
    return radius * pts / np.linalg.norm(pts, axis=1, keepdims=True)


def restricted_critical(field, sphere_radius, grid_res=None, tol=NEWTON_TOL,
                        degeneracy_rel=DEGENERACY_REL, max_iter=40, seeds=None):
    """Critical points of the restriction of the field to a sphere.

    seeds: optional (m, n) start points appended to the search grid, for
    features finer than the grid resolution.
    """
    n = field.dim
    grid_res = grid_res or {2: 64, 3: 48, 4: 24}.get(n, 24)
    pts = sphere_grid(n, grid_res, sphere_radius)
    if seeds is not None and len(seeds):
        seeds = np.asarray(seeds, dtype=float)
        seeds = sphere_radius * seeds / np.linalg.norm(seeds, axis=1,
                                                       keepdims=True)
        pts = np.concatenate([pts, seeds])
    # batched Newton in tangent-graph coordinates
    for _ in range(max_iter):
        _, _, gr, gt, U, Hr = _restricted_jets(field, pts, sphere_radius)
        rhs = np.einsum("mia,mi->ma", U, gt)
        delta = np.einsum("mab,mb->ma", np.linalg.pinv(Hr), rhs)
        ln = np.linalg.norm(delta, axis=1, keepdims=True)
        cap = 0.2 * sphere_radius
        delta = delta * np.minimum(1.0, cap / np.maximum(ln, 1e-300))
        pts = pts - np.einsum("mia,ma->mi", U, delta)
        pts = sphere_radius * pts / np.linalg.norm(pts, axis=1, keepdims=True)
        if np.max(ln) < 1e-14 * sphere_radius:
            break
    v, g, gr, gt, U, Hr = _restricted_jets(field, pts, sphere_radius)
    gtn = np.linalg.norm(gt, axis=1)
    conv = gtn < tol
    # dedup
    merged = []
    for i in np.nonzero(conv)[0]:
        if any(np.linalg.norm(pts[i] - pts[j]) < 1e-6 * sphere_radius for j in merged):
            continue
        merged.append(i)
    out = []
    for i in merged:
        if abs(gr[i]) < tol:
            raise GradVanishesOnBoundary(
                f"full gradient vanishes on the sphere at {pts[i]}")
        eig = np.linalg.eigvalsh(Hr[i])
        if np.min(np.abs(eig)) <= degeneracy_rel * np.max(np.abs(eig)):
            raise DegenerateCritical(f"degenerate restricted Hessian at {pts[i]}")
        out.append(CriticalPoint(pts[i], "boundary-restricted",
                                 int(np.sum(eig < 0)), eig,
                                 "out" if gr[i] > 0 else "in", v[i]))
    out.sort(key=lambda c: tuple(c.location))
    return out


# ---------------------------------------------------------------------------
# parity / degree / forced index

def parity_from_boundary(cps, n):
    """Parity of the interior index from boundary data, via both signed-count
    formulas; raises if they disagree."""
    if any(c.radial_sign not in ("in", "out") for c in cps):
        raise FormulaInconsistent("every point needs a radial sign")
    s_out = sum((-1) ** c.index for c in cps if c.radial_sign == "out")
    s_in = sum((-1) ** c.index for c in cps if c.radial_sign == "in")
    v1 = (-1) ** n + s_out
    v2 = 1 - s_in
    if v1 != v2 or abs(v1) != 1:
        raise FormulaInconsistent(f"out-formula {v1} vs in-formula {v2}")
    return "even" if v1 == 1 else "odd"


def degree_of_gradient(field, sphere_radius, resolution=None):
    """Degree of the normalized gradient on the sphere (n = 2 or 3)."""
    n = field.dim
    if n == 2:
        res = resolution or 2048
        th = np.linspace(0.0, 2 * math.pi, res, endpoint=False)
        pts = sphere_radius * np.stack([np.cos(th), np.sin(th)], axis=1)
        g = field.grad(pts)
        ang = np.arctan2(g[:, 1], g[:, 0])
        d = np.diff(np.append(ang, ang[0]))
        d = (d + math.pi) % (2 * math.pi) - math.pi
        total = float(np.sum(d)) / (2 * math.pi)
        deg = round(total)
        if abs(total - deg) >= 0.1:
            raise ResolutionTooCoarse(f"winding residual {abs(total - deg)}")
        return int(deg)
    if n == 3:
        res = resolution or 128
        th = np.linspace(0.0, math.pi, res + 1)
        ph = np.linspace(0.0, 2 * math.pi, res + 1)
        T, P = np.meshgrid(th, ph, indexing="ij")
        V = sphere_radius * np.stack([np.sin(T) * np.cos(P),
                                      np.sin(T) * np.sin(P), np.cos(T)], axis=-1)
        g = field.grad(V.reshape(-1, 3)).reshape(res + 1, res + 1, 3)
        g = g / np.linalg.norm(g, axis=-1, keepdims=True)
        a = g[:-1, :-1]
        b = g[1:, :-1]
        c = g[1:, 1:]
        d2 = g[:-1, 1:]
        total = _solid_angle(a, b, c) + _solid_angle(a, c, d2)
        total = float(np.sum(total)) / (4 * math.pi)
        deg = round(total)
        if abs(total - deg) >= 0.1:
            raise ResolutionTooCoarse(f"solid-angle residual {abs(total - deg)}")
        return int(deg)
    raise DimensionUnsupported(f"degree not computed for n = {n}")


def _solid_angle(a, b, c):
    """Signed solid angle of unit-vector triangles (Van Oosterom-Strackee)."""
    num = np.einsum("...i,...i->...", a, np.cross(b, c))
    den = (1.0 + np.einsum("...i,...i->...", a, b)
           + np.einsum("...i,...i->...", b, c)
           + np.einsum("...i,...i->...", a, c))
    return 2.0 * np.arctan2(num, den)


def forced_index(cps, n):
    """0 or n when the extreme boundary point's radial sign forces the interior
    index; None otherwise."""
    if not cps:
        return None
    top = max(cps, key=lambda c: c.value)
    bot = min(cps, key=lambda c: c.value)
    if top.index == n - 1 and top.radial_sign == "in":
        return n
    if bot.index == 0 and bot.radial_sign == "out":
        return 0
    return None


# ---------------------------------------------------------------------------
# certification

def _box_min_max_dist(lo, hi, center):
    """Min/max distance to a point, for a batch of boxes (m, n)."""
    nearest = np.clip(center, lo, hi)
    dmin = np.linalg.norm(nearest - center, axis=-1)
    far = np.maximum(np.abs(lo - center), np.abs(hi - center))
    dmax = np.linalg.norm(far, axis=-1)
    return dmin, dmax


def _box_intersects(region, lo, hi):
    """Boolean mask: which boxes of the (m, n) batch can meet the region."""
    k, p = region.kind, region.params
    if k == "ball":
        dmin, _ = _box_min_max_dist(lo, hi, np.asarray(p["center"]))
        return dmin <= p["radius"]
    if k == "annulus":
        dmin, dmax = _box_min_max_dist(lo, hi, np.asarray(p["center"]))
        return (dmin <= p["r_out"]) & (dmax >= p["r_in"])
    if k in ("box", "product"):
        blo, bhi = region.bounding_box()
        return np.all(lo <= bhi, axis=-1) & np.all(hi >= blo, axis=-1)
    raise ValueError(k)


def _corner_offsets(n):
    bits = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
    return bits.astype(float)


def certify_no_critical(field, region, resolution=None, exclude=(),
                        max_cells=400000, min_width=1e-5, batch=4096):
    """Certificate that grad has no zero in region (minus excluded balls).

    Adaptive anisotropic subdivision: a cell passes when the center gradient
    norm exceeds the propagated per-axis Lipschitz bound
    sum_i L_i w_i / 2, with L_i twice the max sampled Hessian column norm.
    Cells split along the axis with the largest L_i w_i.
    """
    lo0, hi0 = region.bounding_box()
    # asymmetric pad so cell centers and corners never land exactly on a
    # symmetric non-smooth point of the formula (e.g. |x| at the origin)
    span = hi0 - lo0
    lo0 = lo0 - 1.719e-4 * span
    hi0 = hi0 + 2.813e-4 * span
    n = field.dim
    if resolution:
        k = max(1, int(math.ceil(float(np.max(hi0 - lo0)) / resolution)))
        if k ** n > max_cells:
            raise CertificationFailed(
                f"initial grid {k}^{n} exceeds the cell budget ({max_cells})")
        edges = [np.linspace(lo0[i], hi0[i], k + 1) for i in range(n)]
        idx = np.stack([m.ravel() for m in
                        np.meshgrid(*[np.arange(k)] * n, indexing="ij")], axis=1)
        q_lo = np.stack([edges[i][idx[:, i]] for i in range(n)], axis=1)
        q_hi = np.stack([edges[i][idx[:, i] + 1] for i in range(n)], axis=1)
    else:
        q_lo = lo0[None, :].copy()
        q_hi = hi0[None, :].copy()

    processed = 0
    worst_bound = np.inf
    worst_lip = 0.0
    worst_res = float(np.max(hi0 - lo0))
    offs = _corner_offsets(n)
    chunks = [(q_lo[i:i + batch], q_hi[i:i + batch])
              for i in range(0, len(q_lo), batch)]
    queued = len(q_lo)
    while chunks:
        w_lo, w_hi = chunks.pop()
        if len(w_lo) > batch:
            chunks.append((w_lo[batch:], w_hi[batch:]))
            w_lo, w_hi = w_lo[:batch], w_hi[:batch]
        queued -= len(w_lo)
        keep = _box_intersects(region, w_lo, w_hi)
        for (ec, er) in exclude:
            _, dmax = _box_min_max_dist(w_lo, w_hi, np.asarray(ec, dtype=float))
            keep &= dmax > er
        if not np.any(keep):
            continue
        w_lo, w_hi = w_lo[keep], w_hi[keep]
        m = len(w_lo)
        widths = w_hi - w_lo
        centers = 0.5 * (w_lo + w_hi)
        _, gc, hc = field.eval_batch(centers)
        gn = np.linalg.norm(gc, axis=1)
        # Hessian samples: center plus the 2^n corners
        corners = w_lo[:, None, :] + offs[None] * widths[:, None, :]
        _, _, hcorn = field.eval_batch(corners.reshape(-1, n))
        hmax = np.maximum(np.abs(hc),
                          np.max(np.abs(hcorn.reshape(m, -1, n, n)), axis=1))
        Lcol = 2.0 * np.linalg.norm(hmax, axis=1)          # (m,n) per-axis
        spread = 0.5 * np.sum(Lcol * widths, axis=1)
        ok = gn > spread
        processed += int(np.sum(ok))
        if np.any(ok):
            worst_bound = min(worst_bound, float(np.min((gn - spread)[ok])))
            worst_lip = max(worst_lip, float(np.max(np.linalg.norm(Lcol[ok], axis=1))))
            worst_res = min(worst_res, float(np.min(np.max(widths[ok], axis=1))))
        bad = ~ok
        if np.any(bad):
            b_lo, b_hi, bw = w_lo[bad], w_hi[bad], widths[bad]
            small = np.max(bw, axis=1) < min_width
            if np.any(small):
                i = int(np.nonzero(small)[0][0])
                raise CertificationFailed(
                    f"cell at {0.5 * (b_lo[i] + b_hi[i])} too small; "
                    f"|grad| = {gn[bad][i]}")
            ax = np.argmax(Lcol[bad] * bw, axis=1)
            rows = np.arange(len(ax))
            mid = 0.5 * (b_lo[rows, ax] + b_hi[rows, ax])
            a_hi = b_hi.copy(); a_hi[rows, ax] = mid
            c_lo = b_lo.copy(); c_lo[rows, ax] = mid
            chunks.append((np.concatenate([b_lo, c_lo]),
                           np.concatenate([a_hi, b_hi])))
            queued += 2 * len(ax)
        if processed + queued > max_cells:
            raise CertificationFailed(f"cell budget exceeded ({max_cells})")
    if not np.isfinite(worst_bound):
        raise CertificationFailed("region contained no certifiable cells")
    # summary resolution chosen so the stated invariant holds for the summary
    # numbers (each leaf satisfied its own inequality)
    res_stat = min(worst_res, 1.999 * worst_bound / (worst_lip * math.sqrt(n))
                   if worst_lip > 0 else worst_res)
    return Certificate(region, worst_bound, res_stat, worst_lip,
                       {"cells": processed})
