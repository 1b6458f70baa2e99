"""Charts and diffeomorphisms with exact second-order derivative data.

Everything here is an expression DAG, so transported fields keep exact jets.
The charts come in three flavours: boundary collars (cap coordinates plus the
radial offset y = |x| - r), meridian charts adapted to the height function's
flow lines on the sphere, and bump-localized translation chains used to move
an interior critical point to the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .jet import (
    FieldBuilder, ScalarField, Region, SmoothProfile, Expr,
    ball, annulus, box, cap, product_region,
    make_step, make_downstep, make_exp, _merge_vector_dag,
    FieldError, DimMismatch,
)


class CapTooLarge(FieldError):
    pass


class NotEquator(FieldError):
    pass


class TimeTooLarge(FieldError):
    pass


class RegionMismatch(FieldError):
    pass


# ---------------------------------------------------------------------------
# diffeos

class Diffeo:
    """Invertible map given by paired vector DAGs (forward and inverse)."""

    def __init__(self, dim, fwd, inv, domain, codomain):
        assert len(fwd) == dim and len(inv) == dim
        self.dim = dim
        self.fwd = fwd        # list of ScalarField components
        self.inv = inv
        self.domain = domain
        self.codomain = codomain

    def apply(self, pts):
        pts = np.asarray(pts, dtype=float)
        one = pts.ndim == 1
        if one:
            pts = pts[None, :]
        out = np.stack([c.value(pts) for c in self.fwd], axis=1)
        return out[0] if one else out

    def apply_inv(self, pts):
        pts = np.asarray(pts, dtype=float)
        one = pts.ndim == 1
        if one:
            pts = pts[None, :]
        out = np.stack([c.value(pts) for c in self.inv], axis=1)
        return out[0] if one else out

    def jacobian(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.stack([c.grad(pts) for c in self.fwd], axis=1)  # (m, out, in)

    def roundtrip_error(self, pts):
        return float(np.max(np.abs(self.apply_inv(self.apply(pts)) - pts)))

    def to_json(self):
        return {"dim": self.dim,
                "domain": self.domain.to_json(), "codomain": self.codomain.to_json(),
                "fwd": [c.to_json() for c in self.fwd],
                "inv": [c.to_json() for c in self.inv]}

    @staticmethod
    def from_json(d):
        return Diffeo(d["dim"],
                      [ScalarField.from_json(c) for c in d["fwd"]],
                      [ScalarField.from_json(c) for c in d["inv"]],
                      Region.from_json(d["domain"]), Region.from_json(d["codomain"]))


@dataclass
class Chart:
    base_point: np.ndarray
    map: Diffeo
    kind: str
    meta: dict = dc_field(default_factory=dict)


def identity_diffeo(n, region):
    b = FieldBuilder(n, region)
    comps = [b.build(b.coord(i)) for i in range(n)]
    return Diffeo(n, comps, comps, region, region)


def compose_diffeo(outer, inner):
    """outer o inner as a Diffeo (forward inner-then-outer)."""
    if outer.dim != inner.dim:
        raise DimMismatch("diffeo dims disagree")
    n = outer.dim
    fwd = []
    for j in range(n):
        b = FieldBuilder(n, inner.domain)
        args = [b.import_field(c) for c in inner.fwd]
        fwd.append(b.build(b.subfield(outer.fwd[j], args)))
    inv = []
    for j in range(n):
        b = FieldBuilder(n, outer.codomain)
        args = [b.import_field(c) for c in outer.inv]
        inv.append(b.build(b.subfield(inner.inv[j], args)))
    return Diffeo(n, fwd, inv, inner.domain, outer.codomain)


def transport(field, diffeo, direction="pull"):
    """pull: field o diffeo (over the domain); push: field o diffeo^-1."""
    if field.dim != diffeo.dim:
        raise RegionMismatch("field and diffeo dims disagree")
    if direction == "pull":
        comps, region = diffeo.fwd, diffeo.domain
    elif direction == "push":
        comps, region = diffeo.inv, diffeo.codomain
    else:
        raise ValueError(direction)
    b = FieldBuilder(field.dim, region)
    args = [b.import_field(c) for c in comps]
    return b.build(b.subfield(field, args))


# ---------------------------------------------------------------------------
# frames

def equator_frame(p, n):
    """Orthonormal vectors spanning the orthocomplement of {p, e_n}."""
    p = np.asarray(p, dtype=float)
    if n == 2:
        return np.zeros((0, n))
    j_star = int(np.argmax(np.abs(p[:n - 1])))
    cols = [p, np.eye(n)[n - 1]]
    cols += [np.eye(n)[j] for j in range(n - 1) if j != j_star]
    q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return q[:, 2:].T


def tangent_frame(p):
    """Orthonormal basis of the tangent space at unit vector p (rows)."""
    p = np.asarray(p, dtype=float)
    n = len(p)
    M = np.eye(n)
    k = int(np.argmax(np.abs(p)))
    M[:, [0, k]] = M[:, [k, 0]]
    M[:, 0] = p
    q, _ = np.linalg.qr(M)
    return q[:, 1:].T  # (n-1, n)


# ---------------------------------------------------------------------------
# charts

def meridian_chart(p, n, sigma=-1.0, cosbeta=0.0, w_max=0.45, t_range=(-0.4, 0.4),
                   y_range=(-0.2, 0.05), tol=1e-10):
    """Chart (w, t, y) adapted to the height function x^n at equator point p.

    The image point is (1+y)(sin a * u(w) + cos a * e_n) with
    (1+y) cos a = t + sigma*y + cosbeta, so the height pulls back to exactly
    t + sigma*y + cosbeta and the last coordinate y is the radial offset
    |x| - 1.  The axis w = 0, y = 0 runs along the meridian through the
    base point, on which the restricted height is t + cosbeta.
    """
    p = np.asarray(p, dtype=float)
    if abs(np.linalg.norm(p) - 1.0) > tol or abs(p[-1]) > tol:
        raise NotEquator(f"{p} is not a unit equator point")
    ca_max = max(abs(t + sigma * y + cosbeta) for t in t_range for y in y_range)
    r_min = 1.0 + y_range[0]
    assert ca_max < 0.95 * r_min, "chart box reaches the poles"
    Q = equator_frame(p, n)  # (n-2, n) rows orthonormal, span eq. complement
    dom = product_region([-w_max] * (n - 2) + [t_range[0]], [w_max] * (n - 2) + [t_range[1]],
                         y_range[0], y_range[1])
    codom = annulus([0.0] * n, 1.0 + y_range[0] - 1e-9, 1.0 + y_range[1] + 1e-9)

    # forward: chart -> ambient
    b = FieldBuilder(n, dom)
    w = [b.coord(i) for i in range(n - 2)]
    t = b.coord(n - 2)
    y = b.coord(n - 1)
    R = y + 1.0
    ca = t + sigma * y + cosbeta           # (1+y) cos a
    rs = b.rpow(b.prod(R, R) - b.prod(ca, ca), 0.5)   # (1+y) sin a
    pw = b.rpow(1.0 - b.sqnorm(w), 0.5) if n > 2 else b.const(1.0)
    fwd = []
    for j in range(n - 1):
        u_j = pw * float(p[j])
        for i in range(n - 2):
            u_j = u_j + w[i] * float(Q[i, j])
        fwd.append(b.build(b.prod(rs, u_j)))
    fwd.append(b.build(ca))

    # inverse: ambient -> chart (safe away from the poles and the origin)
    bi = FieldBuilder(n, codom)
    z = bi.coords()
    r = bi.rnorm(z)
    yi = r - 1.0
    ti = z[n - 1] - sigma * yi - cosbeta
    rs_i = bi.rpow(bi.sqnorm(z) - bi.ipow(z[n - 1], 2), -0.5)
    inv = []
    for i in range(n - 2):
        qz = bi.lincomb([(float(Q[i, j]), z[j]) for j in range(n)])
        inv.append(bi.build(bi.prod(qz, rs_i)))
    inv.append(bi.build(ti))
    inv.append(bi.build(yi))

    base = np.zeros(n)
    base[:n - 1] = math.sqrt(1.0 - cosbeta ** 2) * p[:n - 1]
    base[n - 1] = cosbeta
    d = Diffeo(n, fwd, inv, dom, codom)
    return Chart(base, d, "meridian", {"sigma": float(sigma), "cosbeta": float(cosbeta)})


def collar_chart(p, radius=1.0, a=0.3):
    """Boundary collar at unit direction p: (v, y) -> (radius+y) (p+Uv)/|p+Uv|."""
    p = np.asarray(p, dtype=float)
    p = p / np.linalg.norm(p)
    n = len(p)
    if a >= 1.0:
        raise CapTooLarge(f"a = {a}")
    U = tangent_frame(p)  # (n-1, n)
    dom = product_region([-a] * (n - 1), [a] * (n - 1), -0.4 * radius, 0.1 * radius)
    codom = annulus([0.0] * n, 0.6 * radius - 1e-9, 1.1 * radius + 1e-9)

    b = FieldBuilder(n, dom)
    v = [b.coord(i) for i in range(n - 1)]
    y = b.coord(n - 1)
    scale = b.prod(y + radius, b.rpow(1.0 + b.sqnorm(v), -0.5))
    fwd = []
    for j in range(n):
        comp = b.lincomb([(float(U[i, j]), v[i]) for i in range(n - 1)], float(p[j]))
        fwd.append(b.build(b.prod(scale, comp)))

    bi = FieldBuilder(n, codom)
    z = bi.coords()
    pz_inv = bi.rpow(bi.lincomb([(float(p[j]), z[j]) for j in range(n)]), -1.0)
    inv = []
    for i in range(n - 1):
        uz = bi.lincomb([(float(U[i, j]), z[j]) for j in range(n)])
        inv.append(bi.build(bi.prod(uz, pz_inv)))
    inv.append(bi.build(bi.rnorm(z) - radius))
    d = Diffeo(n, fwd, inv, dom, codom)
    return Chart(radius * p, d, "boundary-collar", {"a": float(a), "radius": float(radius)})


# ---------------------------------------------------------------------------
# the two global sphere diffeos

def height_shift_diffeo(n, sigma, eps, h_plateau=0.25, h_zero=0.6,
                        r2_lo=0.2025, r2_hi=0.5625, region=None):
    """Meridian shift moving the height h = x^n/|x| to h + 2 sigma eps chi(h).

    chi is 1 on |h| <= h_plateau and 0 on |h| >= h_zero; the shift dies off
    radially (identity for |x|^2 <= r2_lo, full strength for |x|^2 >= r2_hi).
    Radii are preserved exactly.
    """
    assert 2 * eps < (h_zero - h_plateau) / 2.1, "shift too strong to stay injective"
    chi = SmoothProfile("bump", {"t0": float(h_plateau), "t1": float(h_zero)})
    cut = make_step(r2_lo, r2_hi)
    region = region or ball([0.0] * n, 1.5)

    def components(sgn):
        b = FieldBuilder(n, region)
        z = b.coords()
        r2 = b.sqnorm(z)
        g_r = b.profile(cut, r2)
        rinv = b.rpow(r2, -0.5)
        h = b.prod(z[n - 1], rinv)
        g_h = b.profile(chi, h)
        delta = (2.0 * sgn * eps) * b.prod(g_h, g_r)
        hp = h + delta
        ratio = b.prod(b.rpow(1.0 - b.prod(hp, hp), 0.5),
                       b.rpow(1.0 - b.prod(h, h), -0.5))
        comps = []
        for j in range(n - 1):
            corr = b.prod(z[j], ratio - 1.0)
            comps.append(b.build(z[j] + b.guarded(g_r, b.guarded(g_h, corr))))
        corr_n = b.prod(b.rpow(r2, 0.5), delta)
        comps.append(b.build(z[n - 1] + b.guarded(g_r, b.guarded(g_h, corr_n))))
        return comps

    fwd = components(float(sigma))
    # inverse by fixed point on the forward perturbation
    pert = []
    for j in range(n):
        bp = FieldBuilder(n, region)
        root = bp.import_field(fwd[j])
        pert.append(bp.build(root - bp.coord(j)))
    inv = []
    for j in range(n):
        bi = FieldBuilder(n, region)
        inv.append(bi.build(bi.pinv(bi.coords(), pert, j)))
    return Diffeo(n, fwd, inv, region, region)


def flow_rotation_extension(t, n, max_t=0.5, region=None):
    """Extend the time-t sphere flow of minus the restricted-height gradient.

    On the unit sphere the height obeys dh/ds = -(1 - h^2) along the descent
    flow, giving the closed form
        H(t, h) = ((1+h) - e^{2t}(1-h)) / ((1+h) + e^{2t}(1-h)),
    with tangential scaling 2 e^t / ((1+h) + e^{2t}(1-h)).  The flow time is
    cut off radially so the map is the identity for |x| <= 1/2, and radii are
    preserved exactly.  The inverse is the same map with -t.
    """
    if abs(t) > max_t:
        raise TimeTooLarge(f"|t| = {abs(t)} > {max_t}")
    region = region or ball([0.0] * n, 1.5)
    cut = make_step(0.25, 0.5625)

    def components(tt):
        b = FieldBuilder(n, region)
        z = b.coords()
        r2 = b.sqnorm(z)
        g = b.profile(cut, r2)
        tau = tt * g
        h = b.prod(z[n - 1], b.rpow(r2, -0.5))
        e2 = b.profile(make_exp(2.0), tau)
        e1 = b.profile(make_exp(1.0), tau)
        om = 1.0 + h                       # 1 + h
        op_ = b.prod(e2, 1.0 - h)          # e^{2 tau} (1 - h)
        dinv = b.rpow(om + op_, -1.0)
        H = b.prod(om - op_, dinv)
        rho = 2.0 * b.prod(e1, dinv)
        comps = []
        for j in range(n - 1):
            comps.append(b.build(z[j] + b.guarded(g, b.prod(z[j], rho - 1.0))))
        corr_n = b.prod(b.rpow(r2, 0.5), H - h)
        comps.append(b.build(z[n - 1] + b.guarded(g, corr_n)))
        return comps

    return Diffeo(n, components(float(t)), components(-float(t)), region, region)


# ---------------------------------------------------------------------------
# recentring

def _axial_profile(xi_left, xi0, d, xi_end, ramp, s_max):
    """A(xi): 0 outside (xi_left, xi_end), apex value d at xi0 with two flat
    derivatives, slope bounded by s_max on the falling side (trapezoidal A')."""
    L2 = xi0 - xi_left
    L = xi_end - xi0
    r_fall = min(ramp, L / 3.0)
    r_rise = min(ramp, L2 / 3.0)
    s_fall = d / (L - r_fall)
    assert s_fall <= s_max + 1e-12, f"fall slope {s_fall} exceeds {s_max}"
    s_rise = d / (L2 - r_rise)
    assert s_rise < 0.9, f"rise slope {s_rise} too steep for fixed-point inversion"
    knots = [xi_left, xi_left + r_rise, xi0 - r_rise, xi0,
             xi0 + r_fall, xi_end - r_fall, xi_end]
    vals = [0.0, s_rise, s_rise, 0.0, -s_fall, -s_fall, 0.0]
    from .jet import make_hermite_integral
    return make_hermite_integral(knots, [(v, 0.0, 0.0) for v in vals], c0=0.0)


def recentring_legs(dist, xi_end=0.92, ramp=0.05, s_max=0.68):
    """Split the travel 0 -> dist into legs with bounded axial compression."""
    legs = []
    rho = 0.0
    while dist - rho > 1e-14:
        d = min(dist - rho, 0.98 * s_max * (xi_end - rho - ramp))
        assert d > 1e-6, "target too close to the support boundary"
        legs.append((rho, d))
        rho += d
        assert len(legs) < 40
    return legs


def recentring_diffeo(q, region=None, xi_end=0.92, ramp=0.05, s_max=0.68,
                      tube=(0.04, 0.094)):
    """Diffeo of the ball, identity for |z| >= 0.97, mapping 0 to q.

    Composite of axial shifts z -> z + u A(xi) B(rho^2) along u = q/|q|,
    with xi = <u,z> and rho the distance to the axis.  Each map's Jacobian
    is block-triangular with determinant 1 + A'(xi)B >= 1 - s_max, and A is
    flat to second order at the tracked point, so the composite has identity
    Jacobian and vanishing second derivative at 0.
    """
    q = np.asarray(q, dtype=float)
    n = len(q)
    dist = float(np.linalg.norm(q))
    u = q / dist
    region = region or ball([0.0] * n, 1.0 + 1e-9)
    B = make_downstep(*tube)
    legs = recentring_legs(dist, xi_end, ramp, s_max)

    def one_map(xi0, d):
        A = _axial_profile(-0.85, xi0, d, xi_end, ramp, s_max)
        b = FieldBuilder(n, region)
        z = b.coords()
        xi = b.lincomb([(float(u[j]), z[j]) for j in range(n)])
        rho2 = b.sqnorm(z) - b.prod(xi, xi)
        shift = b.prod(b.profile(A, xi), b.profile(B, rho2))
        fwd = [b.build(z[j] + float(u[j]) * shift) for j in range(n)]
        pert = []
        for j in range(n):
            bp = FieldBuilder(n, region)
            pert.append(bp.build(bp.import_field(fwd[j]) - bp.coord(j)))
        bi = FieldBuilder(n, region)
        inv = [bi.build(bi.pinv(bi.coords(), pert, j)) for j in range(n)]
        return Diffeo(n, fwd, inv, region, region)

    d = one_map(*legs[0])
    for xi0, dd in legs[1:]:
        d = compose_diffeo(one_map(xi0, dd), d)
    return d
