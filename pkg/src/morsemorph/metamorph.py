"""Morse metamorphoses of sphere-adapted scalar fields.

Four operations, each returning a MetamorphResult:

* standard_birth -- create a cancelling pair of critical points (indices
  lam, lam+1) on the sphere restriction, inside a meridian-chart cap,
  without creating interior critical points.
* flip -- push a boundary-restricted critical point into the interior,
  reversing the radial derivative at that point and leaving the sphere
  restriction untouched.
* connect -- build a field on the annulus 1 <= |x| <= 2 interpolating two
  boundary Morse functions with the same restricted critical points, with
  no critical points in the annulus.
* smooth_join -- glue two fields across a sphere with a thin radial
  partition of unity, without creating critical points in the seam.

Postcondition evidence is recomputed from scratch with the critical-point
machinery and stored as a list of {"claim", "pass", "data"} entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .jet import (FieldBuilder, Region, FieldError, ball, annulus,
                  SmoothProfile, make_step, make_downstep,
                  make_hermite, make_cubicinv)
from .critical import (find_critical, restricted_critical, certify_no_critical,
                       CertificationFailed, CriticalError)
from .flow import check_gradient_like


class MetamorphError(FieldError):
    pass


class WrongRadialSign(MetamorphError):
    pass


class ChartMismatch(MetamorphError):
    pass


class PostconditionFailed(MetamorphError):
    pass


class IndexOutOfRange(MetamorphError):
    pass


class CriticalSetMismatch(MetamorphError):
    pass


class ValueCollision(MetamorphError):
    pass


class SignCondition(MetamorphError):
    pass


class NoCommonGradientLikeField(MetamorphError):
    pass


class GradientMismatchAtCP(MetamorphError):
    pass


class DeltaSearchFailed(MetamorphError):
    pass


@dataclass
class MetamorphResult:
    field: object                 # ScalarField
    changed_region: Region
    evidence: list = dc_field(default_factory=list)

    def ok(self):
        return all(e["pass"] for e in self.evidence)

    def to_json(self):
        return {"field": self.field.to_json(),
                "changed_region": self.changed_region.to_json(),
                "ok": self.ok(),
                "evidence": self.evidence}


def _num(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, np.ndarray):
        return [float(x) for x in v.ravel()]
    return v


def _ev(evidence, claim, ok, **data):
    evidence.append({"claim": claim, "pass": bool(ok),
                     "data": {k: _num(v) for k, v in data.items()}})
    return bool(ok)


def _finish(field, changed, evidence, check):
    res = MetamorphResult(field, changed, evidence)
    if check and not res.ok():
        bad = [e["claim"] for e in evidence if not e["pass"]]
        raise PostconditionFailed("; ".join(bad))
    return res


def _gated(b, guard, expr):
    """Exact zero (with derivatives) where guard == 0, guard*expr elsewhere."""
    return b.guarded(guard, b.prod(guard, expr))


def _match_sets(locs_a, locs_b, tol):
    """Pair each row of locs_a with a distinct nearest row of locs_b."""
    if len(locs_a) != len(locs_b):
        return None
    pairing = []
    used = set()
    for i, p in enumerate(locs_a):
        d = np.linalg.norm(locs_b - p, axis=1)
        j = int(np.argmin(d))
        if d[j] > tol or j in used:
            return None
        used.add(j)
        pairing.append(j)
    return pairing


# ---------------------------------------------------------------------------
# standard birth

def _chart_seeds(chart, n, t_vals, w_half, nw=7):
    """Sphere points covering a chart cap, as Newton seeds for searches
    finer than the default restriction grid."""
    axes = ([np.linspace(-w_half, w_half, nw)] * (n - 2)
            + [np.asarray(t_vals, dtype=float), np.zeros(1)])
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    return chart.map.apply(grid)


def birth_scales(eps):
    """Shape scales of the standard birth: (tau, eps1, default cap scale a)."""
    tau = (0.75 * eps) ** (1.0 / 3.0)
    return tau, 3.0 * tau ** 2, 4.4 * tau


def standard_birth(F, chart, lam, eps, a=None, sigma=-1.0, seed=0, check=True):
    """Create a cancelling pair of restricted critical points.

    F must pull back through the meridian chart to t + sigma*y + const.
    The modification is a cubic cap in the chart coordinates (w, t), constant
    along the chart y curves inside the working band, so d(F o Theta)/dy
    stays exactly sigma there.  The new restricted critical points sit on the
    chart axis at t = +-3*eps with values const -+ 1.5*eps and indices
    lam (at +3*eps) and lam+1 (at -3*eps).
    """
    n = F.dim
    if not (0 <= lam <= n - 2):
        raise IndexOutOfRange(f"lam = {lam} not in [0, {n - 2}]")
    if chart.kind != "meridian":
        raise ChartMismatch(f"need a meridian chart, got {chart.kind}")
    if abs(chart.meta["sigma"] - sigma) > 0:
        raise ChartMismatch(f"chart sigma {chart.meta['sigma']} != {sigma}")

    tau, eps1, a_def = birth_scales(eps)
    a = a_def if a is None else float(a)
    tmax = (a / 2) ** 3 + eps1 * (a / 2) + (a / 2) ** 2
    cbeta = chart.meta["cosbeta"]
    assert 1.07 * tmax + abs(cbeta) < 0.19, \
        f"birth cap too wide in t ({tmax:.3g}); shrink eps"
    assert a / 2 < 0.44, f"birth cap too wide in w (a = {a:.3g}); shrink eps"

    rng = np.random.default_rng(seed)
    uc = chart.map.domain.sample(400, rng)
    zc = chart.map.apply(uc)
    resid = F.value(zc) - uc[:, n - 2] - sigma * uc[:, n - 1]
    if float(np.ptp(resid)) > 1e-8:
        raise ChartMismatch(f"field is not normalized in the chart "
                            f"(spread {np.ptp(resid):.3g})")
    c0 = float(np.mean(resid))

    # the modification, in ambient coordinates via the chart inverse
    b = FieldBuilder(n, F.region)
    z = b.coords()
    rho2 = b.sqnorm(z)
    B_y = b.profile(make_step(0.36, 0.64), rho2)            # radial band gate
    t = b.import_field(chart.map.inv[n - 2])
    gate_t = b.profile(SmoothProfile("bump", {"t0": 1.01 * tmax,
                                              "t1": 1.07 * tmax}), t)
    # hemisphere gate: the chart inverse formulas are blind to the sign of
    # the meridian direction, so the cap would duplicate at the antipodal
    # meridian.  u0.z is linear, positive on the chart side, negative at the
    # antipode, and its step plateau covers the cap wherever gate_t != 0, so
    # d(F o Theta)/dy == sigma is untouched.
    bb = chart.base_point / np.linalg.norm(chart.base_point)
    u0 = bb.copy()
    u0[n - 1] = 0.0
    u0 /= np.linalg.norm(u0)
    dside = b.const(0.0)
    for i in range(n):
        if u0[i] != 0.0:
            dside = dside + z[i] * float(u0[i])
    gate_h = b.profile(make_step(0.42, 0.58), dside)
    w = [b.import_field(chart.map.inv[i]) for i in range(n - 2)]
    q = b.const(0.0)
    for i, wi in enumerate(w):
        q = q + (b.prod(wi, wi) * (-1.0 if i < lam else 1.0))
    eta = b.profile(make_cubicinv(eps1), t - q)
    wtilde = b.profile(make_downstep((a / 4) ** 2, (a / 2) ** 2),
                       b.sqnorm(w) + b.prod(eta, eta) if n > 2
                       else b.prod(eta, eta))
    D_b = b.prod(eta, wtilde) * (-2.0 * eps1)
    mod = _gated(b, B_y, _gated(b, gate_h, _gated(b, gate_t, D_b)))
    F2 = b.build(b.import_field(F) + mod)

    # geometry of the changed set: the support is a tilted ribbon, since the
    # t window pins z_n near sigma*(rho - 1) + cbeta along each radius.  Cover
    # its spine numerically and pad by the w and t extents.
    r_lo = 0.6
    r_hi = float(np.max(F.region.bounding_box()[1]))
    spine = []
    for r in np.linspace(r_lo, r_hi, 49):
        for dt in (-1.07 * tmax, 1.07 * tmax):
            zn = min(max(sigma * (r - 1.0) + cbeta + dt, -0.999 * r),
                     0.999 * r)
            req = math.sqrt(r ** 2 - zn ** 2)
            spine.append(req * u0 + zn * np.eye(n)[n - 1])
    spine = np.stack(spine)
    cen = 0.5 * (spine.min(axis=0) + spine.max(axis=0))
    rad = float(np.max(np.linalg.norm(spine - cen, axis=1)))
    rad += r_hi * (a / 2) + 0.03
    changed = ball(cen, rad)

    evidence = []
    # locality: bit-exact agreement outside the changed ball
    pts = F.region.sample(4000, rng)
    far = np.linalg.norm(pts - cen, axis=1) > rad
    if np.any(far):
        dmax = float(np.max(np.abs(F2.value(pts[far]) - F.value(pts[far]))))
    else:
        dmax = 0.0
    _ev(evidence, "field unchanged outside the changed region", dmax <= 1e-12,
        max_diff=dmax, samples=int(np.sum(far)))

    # d/dy == sigma across the chart band
    uc2 = chart.map.domain.sample(1000, rng)
    z2 = chart.map.apply(uc2)
    J = chart.map.jacobian(uc2)
    dy = np.einsum("mi,mi->m", F2.grad(z2), J[:, :, n - 1])
    dev = float(np.max(np.abs(dy - sigma)))
    _ev(evidence, "dF/dy equals sigma throughout the chart", dev <= 1e-9,
        max_dev=dev)

    # restricted critical points: old ones preserved, two born on the axis.
    # The born pair is eps-scale, far below the default grid resolution, so
    # seed the Newton search with a fine grid over the cap.
    from scipy.optimize import brentq
    eta_star = brentq(lambda x: 3.0 * x ** 2 - eps1, 0.0, max(a, 1.0))
    t_star = eta_star ** 3 + eps1 * eta_star
    t_vals = np.concatenate([np.linspace(-1.3 * tmax, 1.3 * tmax, 49),
                             np.linspace(-3 * t_star, 3 * t_star, 33)])
    cap_seeds = _chart_seeds(chart, n, t_vals, 0.55 * a)
    before = restricted_critical(F, 1.0, seeds=cap_seeds)
    after = restricted_critical(F2, 1.0, seeds=cap_seeds)
    born_chart = []
    for tv in (t_star, -t_star):
        u = np.zeros(n)
        u[n - 2] = tv
        born_chart.append(chart.map.apply(u[None])[0])
    born_chart = np.stack(born_chart)

    ok_old = True
    new_cps = list(after)
    for cp in before:
        d = [np.linalg.norm(c.location - cp.location) for c in new_cps]
        j = int(np.argmin(d))
        if d[j] > 1e-7 or new_cps[j].index != cp.index:
            ok_old = False
            break
        new_cps.pop(j)
    _ev(evidence, "previous restricted critical points preserved",
        ok_old and len(new_cps) == 2, n_before=len(before), n_after=len(after))

    if len(new_cps) == 2:
        new_cps.sort(key=lambda c: -np.dot(c.location, born_chart[0] - born_chart[1]))
        loc_err = max(np.linalg.norm(new_cps[k].location - born_chart[k])
                      for k in range(2))
        idx_ok = (new_cps[0].index == lam and new_cps[1].index == lam + 1)
        val_err = max(abs(new_cps[0].value - (c0 - 1.5 * eps)),
                      abs(new_cps[1].value - (c0 + 1.5 * eps)))
        sgn = "out" if sigma > 0 else "in"
        sgn_ok = all(c.radial_sign == sgn for c in new_cps)
        _ev(evidence, "restriction gains a cancelling pair of indices "
            f"({lam}, {lam + 1})", idx_ok, indices=[c.index for c in new_cps])
        _ev(evidence, "born points sit on the chart axis at t = +-3 eps",
            loc_err <= 1e-6, location_error=loc_err, t_star=t_star)
        _ev(evidence, "born values are const -+ 1.5 eps", val_err <= 1e-8,
            value_error=val_err)
        _ev(evidence, f"born radial signs are '{sgn}'", sgn_ok,
            signs=[c.radial_sign for c in new_cps])
    else:
        _ev(evidence, "restriction gains a cancelling pair", False,
        n_new=len(new_cps))

    # no interior critical points anywhere near the cap
    interior = find_critical(F2, region=changed)
    interior = [c for c in interior if F.region.contains(c.location)]
    _ev(evidence, "no interior critical points in the changed region",
        len(interior) == 0, found=len(interior))

    return _finish(F2, changed, evidence, check)


# ---------------------------------------------------------------------------
# flip

# Radial profile D(y) of the flip, y = |x| - 1.  D >= 0 below the sphere with
# D'(0) = -2 (the radial derivative at the base point shifts by -+2) and a
# single transversal solution of D'(y) = -1 at y = -0.075, where the interior
# critical point appears (|x| = 0.925).  Above the sphere D dips negative and
# returns to zero by y = 2.05*beta; the zone y > beta is excluded from the
# working region by the caller.
FLIP_D_BELOW = [(-0.16, (0.0, 0.0, 0.0)),
                (-0.15, (0.0, 0.0, 0.0)),
                (-0.1125, (0.055, 2.2, 0.0)),
                (-0.075, (0.11, -1.0, -1.4)),
                (-0.0375, (0.062, -1.35, 0.0)),
                (0.0, (0.0, -2.0, 0.0))]
FLIP_Y_STAR = -0.075

# Tangential profile C(r2) in the squared chart distance; flat plateau near 0
# (so the interior Hessian splits cleanly) and |C'| <= ~0.65 (so the cap
# cannot cancel the O(1) tangential Hessian of the restriction).
FLIP_C = [(0.0, (1.0, 0.0, 0.0)),
          (0.1, (1.0, 0.0, 0.0)),
          (0.6, (0.7, -0.63, 0.0)),
          (1.1, (0.4, -0.63, 0.0)),
          (1.75, (0.0, 0.0, 0.0))]
FLIP_C_SUP = 1.75


def flip_profiles(beta):
    above = [(0.35 * beta, (-0.48 * beta, -1.06, 0.0)),
             (beta, (-1.17 * beta, -1.06, 0.0)),
             (1.5 * beta, (-0.6 * beta, 1.5, 0.0)),
             (2.0 * beta, (0.0, 0.0, 0.0)),
             (2.05 * beta, (0.0, 0.0, 0.0))]
    knots = FLIP_D_BELOW + above
    D = make_hermite([k for k, _ in knots], [d for _, d in knots])
    C = make_hermite([k for k, _ in FLIP_C], [d for _, d in FLIP_C])
    return D, C


def flip(F, p, chart, a=0.33, rho_s=0.02, y_above=0.004, seed=0, check=True):
    """Push the boundary-restricted critical point p into the interior.

    chart is a meridian chart aligned with F: F o Theta = f(w, t) + sigma*y
    is required (checked by sampling).  For a radial-in point (the direct
    case, sigma = -1) the interior point has index p.index; for a radial-out
    point (realized as -flip(-F), sigma = +1) it has index p.index + 1.
    The sphere restriction is unchanged and the radial derivative at p is
    reversed.  `a` is the tangential scale, rho_s the meridian (t) scale,
    y_above the height of the decay face above the sphere -- the caller's
    working region must stop below 1 + y_above.
    """
    n = F.dim
    if chart.kind != "meridian":
        raise ChartMismatch(f"need a meridian chart, got {chart.kind}")
    sigma = chart.meta["sigma"]
    if p.radial_sign == "in":
        if sigma != -1.0:
            raise ChartMismatch("radial-in flip needs a sigma = -1 chart")
        s_flip, exp_index = -1.0, p.index
    elif p.radial_sign == "out":
        if sigma != 1.0:
            raise ChartMismatch("radial-out flip needs a sigma = +1 chart")
        s_flip, exp_index = 1.0, p.index + 1
    else:
        raise WrongRadialSign(f"point has radial sign {p.radial_sign!r}")

    loc = np.asarray(p.location, dtype=float)
    phat = loc / np.linalg.norm(loc)
    gr0 = float(np.dot(F.grad(loc[None])[0], phat))
    if (gr0 < 0) != (p.radial_sign == "in") or abs(gr0) < 1e-12:
        raise WrongRadialSign(
            f"radial derivative {gr0:.3g} inconsistent with '{p.radial_sign}'")

    cc = chart.map.apply_inv(loc[None])[0]
    w0, t0 = cc[:n - 2], float(cc[n - 2])
    if abs(cc[n - 1]) > 1e-9:
        raise ChartMismatch("point does not lie on the chart sphere slice")
    dom_hi = chart.map.domain.bounding_box()[1]
    w_max = float(dom_hi[0]) if n > 2 else None
    r_c = math.sqrt(FLIP_C_SUP)
    if n > 2 and float(np.max(np.abs(w0))) + r_c * a > w_max:
        raise ChartMismatch("flip cap exceeds the chart w box; shrink a")
    assert abs(t0) + 1.5 * rho_s + abs(chart.meta["cosbeta"]) < 0.3, \
        "flip cap reaches the chart poles in t; shrink rho_s"

    # normalization: F o Theta must be f(w, t) + sigma*y
    rng = np.random.default_rng(seed)
    uc = chart.map.domain.sample(400, rng)
    uc0 = uc.copy()
    uc0[:, n - 1] = 0.0
    resid = (F.value(chart.map.apply(uc)) - F.value(chart.map.apply(uc0))
             - sigma * uc[:, n - 1])
    if float(np.max(np.abs(resid))) > 1e-8:
        raise ChartMismatch(f"field is not normalized in the chart "
                            f"(max residual {np.max(np.abs(resid)):.3g})")

    # the cap must isolate p: any other restricted critical point inside it
    # would get its radial derivative shifted as well.  Seed a fine box
    # around (w0, t0) so eps-scale neighbours (e.g. a birth partner) show up.
    t_vals = np.concatenate([t0 + np.linspace(-10 * rho_s, 10 * rho_s, 41),
                             t0 + np.linspace(-2 * rho_s, 2 * rho_s, 301)])
    axes = ([w0[i] + np.linspace(-1.1 * a, 1.1 * a, 5) for i in range(n - 2)]
            + [t_vals, np.zeros(1)])
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    cap_seeds = chart.map.apply(grid)
    before = restricted_critical(F, 1.0, seeds=cap_seeds)
    for cp in before:
        if (np.linalg.norm(cp.location - loc) < 1e-9
                or float(np.dot(cp.location, phat)) < 0.42):
            continue
        cc2 = chart.map.apply_inv(cp.location[None])[0]
        rt2 = ((cc2[n - 2] - t0) ** 2 / rho_s ** 2
               + float(np.sum((cc2[:n - 2] - w0) ** 2)) / a ** 2)
        if rt2 < 2.2:
            raise ChartMismatch(
                f"another restricted critical point at distance "
                f"{np.linalg.norm(cp.location - loc):.3g} lies inside the "
                f"flip cap; shrink rho_s or a")

    beta = float(y_above)
    assert 0 < beta <= 0.02, f"y_above = {beta} out of range"
    D, C = flip_profiles(beta)

    b = FieldBuilder(n, F.region)
    z = b.coords()
    rho2 = b.sqnorm(z)
    G0 = b.profile(make_step(0.49, 0.64), rho2)             # origin mask
    y = b.rnorm(z) - 1.0
    t = b.import_field(chart.map.inv[n - 2])
    gate_t = b.profile(SmoothProfile("bump", {"t0": 1.35 * rho_s,
                                              "t1": 1.5 * rho_s}), t - t0)
    r2 = b.ipow(t - t0, 2) * (1.0 / rho_s ** 2)
    for i in range(n - 2):
        wi = b.import_field(chart.map.inv[i]) - float(w0[i])
        r2 = r2 + b.ipow(wi, 2) * (1.0 / a ** 2)
    core = b.prod(b.profile(D, y), b.profile(C, r2)) * s_flip
    # hemisphere gate against the antipodal-meridian mirror of the chart
    # inverse; its plateau covers the support, so the chart-side analysis
    # is untouched.
    u0 = phat.copy()
    u0[n - 1] = 0.0
    u0 /= np.linalg.norm(u0)
    dside = b.const(0.0)
    for i in range(n):
        if u0[i] != 0.0:
            dside = dside + z[i] * float(u0[i])
    gate_h = b.profile(make_step(0.42, 0.58), dside)
    mod = b.guarded(G0, b.guarded(gate_h, b.guarded(gate_t, core)))
    F2 = b.build(b.import_field(F) + mod)

    # changed set: tilted ribbon |w - w0| <~ r_c*a, |t - t0| <= 1.5 rho_s,
    # 0.85 <= |x| <= 1 + 2.05 beta; cover its spine numerically
    cbeta = chart.meta["cosbeta"]
    spine = []
    for r in np.linspace(0.85, 1.0 + 2.05 * beta, 25):
        for dt in (-1.5 * rho_s, 1.5 * rho_s):
            zn = t0 + dt + sigma * (r - 1.0) + cbeta
            zn = min(max(zn, -0.999 * r), 0.999 * r)
            spine.append(math.sqrt(r ** 2 - zn ** 2) * u0
                         + zn * np.eye(n)[n - 1])
    spine = np.stack(spine)
    cen = 0.5 * (spine.min(axis=0) + spine.max(axis=0))
    rad = float(np.max(np.linalg.norm(spine - cen, axis=1)))
    rad += (1.0 + 2.05 * beta) * r_c * a + 0.03
    changed = ball(cen, rad)

    evidence = []
    g1 = F2.grad(loc[None])[0]
    gr1 = float(np.dot(g1, phat))
    tan1 = float(np.linalg.norm(g1 - gr1 * phat))
    _ev(evidence, "radial derivative at the point is reversed",
        gr0 * gr1 < 0 and tan1 <= 1e-9 and abs(gr1 - (gr0 - 2 * s_flip)) <= 1e-9,
        before=gr0, after=gr1, tangential=tan1)

    pts = F.region.sample(4000, rng)
    far = np.linalg.norm(pts - cen, axis=1) > rad
    dmax = float(np.max(np.abs(F2.value(pts[far]) - F.value(pts[far])))) \
        if np.any(far) else 0.0
    _ev(evidence, "field unchanged outside the changed region", dmax <= 1e-12,
        max_diff=dmax, samples=int(np.sum(far)))

    sph = rng.normal(size=(2000, n))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    dsph = float(np.max(np.abs(F2.value(sph) - F.value(sph))))
    _ev(evidence, "sphere restriction unchanged", dsph <= 1e-12, max_diff=dsph)

    after = restricted_critical(F2, 1.0, seeds=cap_seeds)
    ok_set = len(before) == len(after)
    flipped_sign = None
    if ok_set:
        for cp in before:
            d = [np.linalg.norm(c.location - cp.location) for c in after]
            j = int(np.argmin(d))
            if d[j] > 1e-7 or after[j].index != cp.index:
                ok_set = False
                break
            if np.linalg.norm(cp.location - loc) < 1e-7:
                flipped_sign = after[j].radial_sign
            elif after[j].radial_sign != cp.radial_sign:
                ok_set = False
                break
    want = "out" if p.radial_sign == "in" else "in"
    _ev(evidence, "restricted critical points preserved, radial sign of the "
        "flipped point reversed", ok_set and flipped_sign == want,
        count=len(after), flipped_sign=flipped_sign)

    cp_exp_chart = np.concatenate([w0, [t0, FLIP_Y_STAR]])
    cp_exp = chart.map.apply(cp_exp_chart[None])[0]
    # coarse scan of the whole changed ball, plus a fine scan around the
    # expected point (whose basin is rho_s-scale, below the coarse grid)
    interior = find_critical(F2, region=changed)
    fine = find_critical(F2, region=ball(cp_exp, 5 * rho_s), grid_res=20)
    for c in fine:
        if all(np.linalg.norm(c.location - d.location) > 1e-7
               for d in interior):
            interior.append(c)
    interior = [c for c in interior if F.region.contains(c.location)]
    ok_cp = (len(interior) == 1
             and np.linalg.norm(interior[0].location - cp_exp) <= 1e-6
             and interior[0].index == exp_index)
    _ev(evidence, "exactly one interior critical point, of index "
        f"{exp_index}, at the expected location", ok_cp,
        found=len(interior),
        indices=[c.index for c in interior],
        expected_location=cp_exp,
        location_error=(float(np.linalg.norm(interior[0].location - cp_exp))
                        if interior else None))

    return _finish(F2, changed, evidence, check)


# ---------------------------------------------------------------------------
# connector on the annulus 1 <= |x| <= 2

def _connector_profiles(w1, w2):
    """(W1, s1, s2): blend weight and the two argument reparametrizations.

    W1 falls 1 -> 0 on [1, 2] with W1'(1) = W1'(2) = 0; its slope ramps up
    to -m over the width-w1 collar (shape 2t^3 - t^4, monotone) while s1 is
    still active, is exactly -m = -1/(1 - (w1+w2)/2) across the middle, and
    ramps back down over the width-w2 collar where s2 takes over.  That
    overlap keeps the ray derivative bounded below by a fixed multiple of
    the local value gap at every radius.  s1(rho) leaves 1 with unit speed
    and saturates within w1 (max excursion 0.45 w1, staying >= 1, linearly
    extended below 1); s2 approaches 1 at rho = 2 with speed 1/2, saturating
    within w2 on both sides (max excursion 0.225 w2).
    """
    m = 1.0 / (1.0 - 0.5 * (w1 + w2))
    W1 = make_hermite([1.0, 1.0 + w1, 2.0 - w2, 2.0],
                      [(1.0, 0.0, 0.0),
                       (1.0 - 0.5 * m * w1, -m, 0.0),
                       (0.5 * m * w2, -m, 0.0),
                       (0.0, 0.0, 0.0)])
    s1 = make_hermite([0.5, 1.0, 1.0 + 0.6 * w1, 1.0 + w1],
                      [(0.5, 1.0, 0.0),
                       (1.0, 1.0, 0.0),
                       (1.0 + 0.35 * w1, 0.25, 0.0),
                       (1.0 + 0.45 * w1, 0.0, 0.0)])
    s2 = make_hermite([2.0 - w2, 2.0 - 0.4 * w2, 2.0, 2.0 + 0.4 * w2, 2.0 + w2],
                      [(1.0 - 0.225 * w2, 0.0, 0.0),
                       (1.0 - 0.175 * w2, 0.25, 0.0),
                       (1.0, 0.5, 0.0),
                       (1.0 + 0.175 * w2, 0.25, 0.0),
                       (1.0 + 0.225 * w2, 0.0, 0.0)])
    return W1, s1, s2


def connect(f1, f2, V, cap_radius=None, w1=None, w2=None,
            seed=0, check=True, certify=True, cert_kwargs=None, seeds=None):
    """Field G on 1 <= |x| <= 2 with G = f1 at |x| = 1, G(2x) = f2(x),
    matching gradients at the scaled critical points, and no critical points
    in the annulus.

    f1, f2: fields near the unit sphere whose restrictions are Morse with the
    same critical points and nowhere-equal critical values; at each critical
    point the radial derivatives of both fields must share the sign of
    f2 - f1.  V: a common gradient-like tangent field for both restrictions.
    """
    n = f1.dim
    cps1 = restricted_critical(f1, 1.0, seeds=seeds)
    cps2 = restricted_critical(f2, 1.0, seeds=seeds)
    locs1 = np.stack([c.location for c in cps1])
    locs2 = np.stack([c.location for c in cps2])
    pairing = _match_sets(locs1, locs2, 1e-8)
    if pairing is None:
        raise CriticalSetMismatch(
            f"restricted critical sets differ ({len(cps1)} vs {len(cps2)})")

    v1 = f1.value(locs1)
    v2 = f2.value(locs1)
    gaps = v2 - v1
    if np.min(np.abs(gaps)) < 1e-9:
        raise ValueCollision(f"f1 = f2 at a critical point (gap "
                             f"{np.min(np.abs(gaps)):.3g})")
    gr1 = np.einsum("mi,mi->m", f1.grad(locs1), locs1)
    gr2 = np.einsum("mi,mi->m", f2.grad(locs1), locs1)
    if not np.all((np.sign(gr1) == np.sign(gaps))
                  & (np.sign(gr2) == np.sign(gaps))):
        raise SignCondition("radial derivatives must share the sign of f2 - f1 "
                            f"at every critical point (gaps {gaps}, "
                            f"dr f1 {gr1}, dr f2 {gr2})")
    if not (check_gradient_like(V, f1, 2000, critical_points=cps1, seed=seed)
            and check_gradient_like(V, f2, 2000, critical_points=cps2,
                                    seed=seed)):
        raise NoCommonGradientLikeField(
            "V is not gradient-like for both restrictions")

    # per-point cap radii: each cap extends halfway to its nearest neighbour,
    # so two nearby critical points do not force tiny caps at all the others
    if cap_radius is None:
        caps = []
        for i in range(len(cps1)):
            d_i = min((math.acos(np.clip(np.dot(locs1[i], locs1[j]), -1, 1))
                       for j in range(len(cps1)) if j != i), default=1.0)
            caps.append(min(0.5 * d_i, 0.5))
    else:
        caps = [float(cap_radius)] * len(cps1)
    c_ch = [2.0 * math.sin(min(cr, math.pi / 2) / 2.0) for cr in caps]

    # excursion budgets: argument drift must not overturn the value gaps
    A = max(1e-9, float(np.max(np.abs(np.concatenate([gr1, gr2])))))
    bud = float(np.min(np.abs(gaps))) / (8.0 * A)
    if w1 is None:
        w1 = min(0.2, bud / 0.45)
    if w2 is None:
        w2 = min(0.2, bud / 0.225)
    W1p, s1p, s2p = _connector_profiles(w1, w2)

    reg = annulus([0.0] * n, 0.9, 2.1)
    b = FieldBuilder(n, reg)
    z = b.coords()
    rho = b.rnorm(z)
    irho = b.rpow(b.sqnorm(z), -0.5)
    xhat = [b.prod(zi, irho) for zi in z]
    f1u = b.subfield(f1, xhat)
    f2u = b.subfield(f2, xhat)
    F_reg = b.prod(2.0 - rho, f1u) + b.prod(rho - 1.0, f2u)
    s1e = b.profile(s1p, rho)
    s2e = b.profile(s2p, rho)
    f1s = b.subfield(f1, [b.prod(e, s1e) for e in xhat])
    f2s = b.subfield(f2, [b.prod(e, s2e) for e in xhat])
    W1e = b.profile(W1p, rho)
    phi = b.prod(W1e, f1s) + b.prod(1.0 - W1e, f2s)
    G_e = F_reg
    for pl, cc in zip(locs1, c_ch):
        hprof = SmoothProfile("bump", {"t0": (0.5 * cc) ** 2, "t1": cc ** 2})
        d2 = b.sqnorm([e - float(pc) for e, pc in zip(xhat, pl)])
        hp = b.profile(hprof, d2)
        G_e = G_e + _gated(b, hp, phi - F_reg)
    G = b.build(G_e)

    rng = np.random.default_rng(seed)
    evidence = []
    sph = rng.normal(size=(1500, n))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    e_in = float(np.max(np.abs(G.value(sph) - f1.value(sph))))
    e_out = float(np.max(np.abs(G.value(2.0 * sph) - f2.value(sph))))
    _ev(evidence, "G equals f1 on the inner sphere", e_in <= 1e-11,
        max_err=e_in)
    _ev(evidence, "G(2x) equals f2(x) on the outer sphere", e_out <= 1e-11,
        max_err=e_out)

    off = sph[np.all(np.linalg.norm(sph[:, None, :] - locs1[None], axis=2)
                     > np.asarray(c_ch)[None, :], axis=1)]
    e_mid = float(np.max(np.abs(G.value(1.5 * off)
                                - 0.5 * (f1.value(off) + f2.value(off))))) \
        if len(off) else 0.0
    _ev(evidence, "G at |x| = 1.5 is the midpoint value away from the caps",
        e_mid <= 1e-11, max_err=e_mid, samples=len(off))

    g_in = float(np.max(np.linalg.norm(G.grad(locs1) - f1.grad(locs1), axis=1)))
    g_out = float(np.max(np.linalg.norm(2.0 * G.grad(2.0 * locs1)
                                        - f2.grad(locs1), axis=1)))
    _ev(evidence, "gradients match at the scaled critical points",
        max(g_in, g_out) <= 1e-8, inner=g_in, outer=g_out)

    rr = np.linspace(1.0, 2.0, 400)
    mono_ok = True
    mono_min = np.inf
    for k, pl in enumerate(locs1):
        ray = rr[:, None] * pl[None, :]
        dr = np.einsum("mi,i->m", G.grad(ray), pl)
        mono_ok = mono_ok and bool(np.all(np.sign(dr) == np.sign(gaps[k])))
        mono_min = min(mono_min, float(np.min(np.abs(dr))))
    _ev(evidence, "G is strictly monotone along the critical rays", mono_ok,
        min_abs_ray_derivative=mono_min)

    if certify:
        kw = dict(cert_kwargs or {})
        try:
            cert = certify_no_critical(G, annulus([0.0] * n, 1.0, 2.0), **kw)
            _ev(evidence, "no critical points in the annulus (certificate)",
                True, grad_lower_bound=cert.grad_lower_bound,
                cells=cert.stats.get("cells"))
        except CriticalError as exc:
            _ev(evidence, "no critical points in the annulus (certificate)",
                False, error=str(exc))

    return _finish(G, reg, evidence, check)


# ---------------------------------------------------------------------------
# smooth radial join

def smooth_join(F_minus, F_plus, eps, delta=None, radius=1.0,
                seed=0, check=True, certify=True, cert_kwargs=None,
                seeds=None):
    """Glue F_minus (inside) to F_plus (outside) across the sphere |x| = R.

    Preconditions: the fields agree on the sphere and their gradients agree
    at the restricted critical points.  delta is found by halving from eps/2
    until, with c the minimal full gradient norm of either field on the
    sphere, (i) radial gradient continuity |grad F(x) - grad F(x/|x|)| < c/100
    holds across the delta band, (ii) every convex tangential blend of the
    two restrictions is bounded away from zero outside small caps at the
    critical points.  The blend weight moves from 0 to 1 over a band of
    radial width delta, so |grad of the weight| < 2/delta.
    """
    n = F_minus.dim
    R = float(radius)
    rng = np.random.default_rng(seed)
    sph = rng.normal(size=(3000, n))
    sph = R * sph / np.linalg.norm(sph, axis=1, keepdims=True)
    cont = float(np.max(np.abs(F_plus.value(sph) - F_minus.value(sph))))
    if cont > 1e-9:
        raise GradientMismatchAtCP(
            f"fields disagree on the sphere (max {cont:.3g})")

    cps = restricted_critical(F_minus, R, seeds=seeds)
    locs = np.stack([c.location for c in cps])
    gmis = float(np.max(np.linalg.norm(F_plus.grad(locs) - F_minus.grad(locs),
                                       axis=1)))
    if gmis > 1e-8:
        raise GradientMismatchAtCP(
            f"gradients differ at a restricted critical point ({gmis:.3g})")

    gm = F_minus.grad(sph)
    gp = F_plus.grad(sph)
    c = float(min(np.min(np.linalg.norm(gm, axis=1)),
                  np.min(np.linalg.norm(gp, axis=1))))
    assert c > 0, "a field is critical on the sphere"

    # caps at the critical points where the two gradients are c/100-close;
    # each cap shrinks on its own, so one sharp feature does not force tiny
    # caps at every other critical point
    r_caps = np.full(len(locs), 0.2 * R)
    for k in range(len(locs)):
        for _ in range(30):
            near = sph[np.linalg.norm(sph - locs[k], axis=1) < r_caps[k]]
            if len(near) == 0 or float(np.max(np.linalg.norm(
                    F_plus.grad(near) - F_minus.grad(near),
                    axis=1))) < c / 100.0:
                break
            r_caps[k] /= 2.0
        else:
            raise DeltaSearchFailed("no caps with c/100 gradient agreement")

    def band_ok(d):
        tt = np.linspace(R - d, R + d, 5)
        for F in (F_minus, F_plus):
            for t in tt:
                dev = np.linalg.norm(F.grad(sph * (t / R)) - F.grad(sph),
                                     axis=1)
                if float(np.max(dev)) >= c / 100.0:
                    return False
        # convex tangential blends away from the caps
        far = np.all(np.linalg.norm(sph[:, None] - locs[None], axis=2)
                     > r_caps[None, :], axis=1)
        nrm = sph[far] / R
        for t in np.linspace(R - d, R + d, 3):
            q = sph[far] * (t / R)
            g_m, g_p = F_minus.grad(q), F_plus.grad(q)
            for al in np.linspace(0.0, 1.0, 5):
                g = al * g_p + (1 - al) * g_m
                gt = g - np.sum(g * nrm, axis=1, keepdims=True) * nrm
                if float(np.min(np.linalg.norm(gt, axis=1))) <= c / 50.0:
                    return False
        return True

    if delta is None:
        # sharp (but smooth) structures hugging the sphere can force a very
        # thin blend band; halve down to a machine-precision floor
        d_min = max(1e-9 * R, 1e-7 * eps)
        delta = eps / 2.0
        while delta >= d_min and not band_ok(delta):
            delta /= 2.0
        if delta < d_min:
            raise DeltaSearchFailed(
                f"no working delta in [{d_min:.3g}, {eps / 2.0:.3g}]")
    elif not band_ok(delta):
        raise DeltaSearchFailed(f"delta = {delta} fails the band conditions")

    b = FieldBuilder(n, F_minus.region)
    z = b.coords()
    # window half-width 1.04*R*delta in rho^2 units: the step kernel's max
    # slope is exactly 2, so a bare delta window would touch 2/delta
    s = 1.04 * R * delta
    wp = b.profile(make_step(R ** 2 - s, R ** 2 + s),
                   b.sqnorm(z))
    wm = 1.0 - wp
    Fj = (b.guarded(wm, b.prod(wm, b.import_field(F_minus)))
          + b.guarded(wp, b.prod(wp, b.import_field(F_plus))))
    F = b.build(Fj)
    changed = annulus([0.0] * n, math.sqrt(R ** 2 - s), math.sqrt(R ** 2 + s))

    evidence = []
    pts = F_minus.region.sample(4000, rng)
    rho = np.linalg.norm(pts, axis=1)
    inner = rho <= R - 0.6 * delta
    outer = rho >= R + 0.6 * delta
    e_in = float(np.max(np.abs(F.value(pts[inner]) - F_minus.value(pts[inner])))) \
        if np.any(inner) else 0.0
    e_out = float(np.max(np.abs(F.value(pts[outer]) - F_plus.value(pts[outer])))) \
        if np.any(outer) else 0.0
    _ev(evidence, "equals the inner field below the seam", e_in <= 1e-12,
        max_err=e_in)
    _ev(evidence, "equals the outer field above the seam", e_out <= 1e-12,
        max_err=e_out)

    band = changed.sample(3000, rng)
    gw = np.abs(wp_grad_norm(wp_profile=(R, delta), pts=band))
    _ev(evidence, "blend weight gradient below 2/delta",
        float(np.max(gw)) < 2.0 / delta, max_grad=float(np.max(gw)),
        bound=2.0 / delta)
    _ev(evidence, "positive sphere gradient floor c", c > 0, c=c,
        delta=delta, cap_radii=[float(r) for r in r_caps])

    if certify:
        kw = dict(cert_kwargs or {})
        # start from cells well below the sphere radius: a single coarse cell
        # spanning the whole box would never see the seam in its samples
        kw.setdefault("resolution", 0.35 * R)
        try:
            cert = certify_no_critical(F, annulus([0.0] * n, R - delta, R + delta),
                                       **kw)
            _ev(evidence, "no critical points in the delta band (certificate)",
                True, grad_lower_bound=cert.grad_lower_bound,
                cells=cert.stats.get("cells"))
            cert2 = certify_no_critical(
                F, annulus([0.0] * n, R - eps, R + eps), **kw)
            _ev(evidence, "no critical points in the eps band (certificate)",
                True, grad_lower_bound=cert2.grad_lower_bound,
                cells=cert2.stats.get("cells"))
        except CriticalError as exc:
            _ev(evidence, "no critical points in the joined band (certificate)",
                False, error=str(exc))

    return _finish(F, changed, evidence, check)


def wp_grad_norm(wp_profile, pts):
    """|grad| of the radial step weight step(R^2 -+ 1.04*R*d)(|x|^2)."""
    R, delta = wp_profile
    s = 1.04 * R * delta
    prof = make_step(R ** 2 - s, R ** 2 + s)
    rho = np.linalg.norm(pts, axis=1)
    _, d1, _ = prof.eval012(rho ** 2)
    return d1 * 2.0 * rho
