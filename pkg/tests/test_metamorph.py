import math

import numpy as np
import pytest
from scipy.optimize import brentq

from morsemorph.jet import FieldBuilder, ball, annulus, SmoothProfile
from morsemorph.geometry import meridian_chart
from morsemorph.critical import (
    find_critical, restricted_critical, CriticalPoint,
)
from morsemorph.flow import TangentField
from morsemorph.metamorph import (
    standard_birth, flip, connect, smooth_join,
    birth_scales, flip_profiles, FLIP_Y_STAR, FLIP_C_SUP,
    _connector_profiles, wp_grad_norm,
    MetamorphResult, PostconditionFailed, IndexOutOfRange, ChartMismatch,
    WrongRadialSign, CriticalSetMismatch, ValueCollision, SignCondition,
    NoCommonGradientLikeField, GradientMismatchAtCP, DeltaSearchFailed,
)

EPS = 0.0012


def height_field(n, r_in=0.55, r_out=1.004):
    """The n-th coordinate on an annulus around the unit sphere."""
    b = FieldBuilder(n, annulus([0.0] * n, r_in, r_out))
    return b.build(b.coords()[n - 1])


def lo_chart(n, eps=EPS):
    p = np.zeros(n)
    p[0] = 1.0
    return meridian_chart(p, n, sigma=-1.0, cosbeta=-2 * eps)


def hi_chart(n, eps=EPS):
    p = np.zeros(n)
    p[0] = 1.0
    return meridian_chart(p, n, sigma=+1.0, cosbeta=2 * eps)


@pytest.fixture(scope="module")
def birth_lo_2d():
    F = height_field(2)
    ch = lo_chart(2)
    return standard_birth(F, ch, 0, EPS, sigma=-1.0), F, ch


@pytest.fixture(scope="module")
def birth_hi_2d():
    F = height_field(2)
    ch = hi_chart(2)
    return standard_birth(F, ch, 0, EPS, sigma=+1.0), F, ch


def born_pair(field, ch, eps=EPS):
    """The two eps-scale restricted critical points near the chart base."""
    seeds = ch.map.apply(np.stack(
        [np.zeros(65), np.linspace(-0.01, 0.01, 65)], axis=1)
        if field.dim == 2 else
        np.concatenate([np.zeros((65, field.dim - 2)),
                        np.linspace(-0.01, 0.01, 65)[:, None],
                        np.zeros((65, 1))], axis=1))
    cps = restricted_critical(field, 1.0, seeds=seeds)
    near = [c for c in cps if abs(float(c.location[-1])) < 0.1
            and float(c.location[0]) > 0.9]
    assert len(near) == 2
    near.sort(key=lambda c: c.index)
    return near, cps


# ---------------------------------------------------------------------------
# model sanity: 1 - sum_{i<=lam} x_i^2 + sum_rest x_i^2 + (x_n - 1)^2 has a
# unique critical point at (0, ..., 0, 1) of index lam

@pytest.mark.parametrize("n,lam", [(2, 0), (3, 1), (4, 2)])
def test_birth_model_quadratic(n, lam):
    b = FieldBuilder(n, ball([0.0] * n, 2.5))
    xs = b.coords()
    e = b.const(1.0) + b.ipow(xs[n - 1] - b.const(1.0), 2)
    for i in range(n - 1):
        e = e + b.ipow(xs[i], 2) * (-1.0 if i < lam else 1.0)
    cps = find_critical(b.build(e))
    assert len(cps) == 1
    assert np.allclose(cps[0].location, np.eye(n)[n - 1], atol=1e-9)
    assert cps[0].index == lam
    assert abs(cps[0].value - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# standard_birth

def test_birth_creates_cancelling_pair(birth_lo_2d):
    res, F, ch = birth_lo_2d
    assert res.ok()
    pair, cps = born_pair(res.field, ch)
    assert len(cps) == len(restricted_critical(F, 1.0)) + 2
    assert [c.index for c in pair] == [0, 1]
    assert all(c.radial_sign == "in" for c in pair)


def test_birth_axis_offsets_match_cubic_oracle(birth_lo_2d):
    # the born points solve 3 eta^2 = eps1 on the chart axis
    res, F, ch = birth_lo_2d
    tau, eps1, _ = birth_scales(EPS)
    eta_star = brentq(lambda x: 3.0 * x ** 2 - eps1, 0.0, 1.0)
    t_star = eta_star ** 3 + eps1 * eta_star
    assert abs(t_star - 3 * EPS) < 1e-12
    pair, _ = born_pair(res.field, ch)
    for cp, tv in zip(pair, (t_star, -t_star)):
        u = np.zeros(2)
        u[0] = tv
        assert np.linalg.norm(cp.location - ch.map.apply(u[None])[0]) < 1e-8


def test_birth_values_straddle_base_value(birth_lo_2d):
    res, F, ch = birth_lo_2d
    pair, _ = born_pair(res.field, ch)
    c0 = -2 * EPS  # the chart base latitude, where the height is cosbeta
    assert abs(pair[0].value - (c0 - 1.5 * EPS)) < 1e-10
    assert abs(pair[1].value - (c0 + 1.5 * EPS)) < 1e-10


def test_birth_dy_exactly_sigma(birth_lo_2d):
    res, F, ch = birth_lo_2d
    rng = np.random.default_rng(7)
    uc = ch.map.domain.sample(500, rng)
    J = ch.map.jacobian(uc)
    dy = np.einsum("mi,mi->m", res.field.grad(ch.map.apply(uc)), J[:, :, -1])
    assert np.max(np.abs(dy + 1.0)) < 1e-12


def test_birth_local_outside_changed_region(birth_lo_2d):
    res, F, ch = birth_lo_2d
    rng = np.random.default_rng(8)
    pts = F.region.sample(3000, rng)
    far = ~np.array([res.changed_region.contains(p) for p in pts])
    assert np.any(far)
    assert np.max(np.abs(res.field.value(pts[far]) - F.value(pts[far]))) == 0.0


def test_birth_radial_out_branch(birth_hi_2d):
    res, F, ch = birth_hi_2d
    assert res.ok()
    pair, _ = born_pair(res.field, ch)
    assert [c.index for c in pair] == [0, 1]
    assert all(c.radial_sign == "out" for c in pair)


def test_birth_3d_middle_index():
    F = height_field(3)
    ch = lo_chart(3)
    res = standard_birth(F, ch, 1, EPS, sigma=-1.0)
    assert res.ok()
    pair, _ = born_pair(res.field, ch)
    assert [c.index for c in pair] == [1, 2]


def test_birth_index_out_of_range():
    F = height_field(2)
    with pytest.raises(IndexOutOfRange):
        standard_birth(F, lo_chart(2), 1, EPS, sigma=-1.0)


def test_birth_chart_mismatch():
    F = height_field(2)
    with pytest.raises(ChartMismatch):
        standard_birth(F, hi_chart(2), 0, EPS, sigma=-1.0)
    # un-normalized field: twice the height does not pull back to t + sigma*y
    b = FieldBuilder(2, annulus([0.0, 0.0], 0.55, 1.004))
    F2 = b.build(b.coords()[1] * 2.0)
    with pytest.raises(ChartMismatch):
        standard_birth(F2, lo_chart(2), 0, EPS, sigma=-1.0)


def test_birth_result_json(birth_lo_2d):
    res, _, _ = birth_lo_2d
    js = res.to_json()
    assert js["ok"] and {"claim", "pass", "data"} <= set(js["evidence"][0])
    assert "changed_region" in js


# ---------------------------------------------------------------------------
# flip

@pytest.fixture(scope="module")
def flip_lo_2d(birth_lo_2d):
    res, F, ch = birth_lo_2d
    pair, _ = born_pair(res.field, ch)
    q = pair[0]  # index 0, radial-in
    return flip(res.field, q, ch, rho_s=3 * EPS), res.field, ch, q


def expected_flip_location(ch, q):
    cc = ch.map.apply_inv(q.location[None])[0]
    cc[-1] = FLIP_Y_STAR
    return ch.map.apply(cc[None])[0]


def test_flip_interior_point_and_index(flip_lo_2d):
    res, F1, ch, q = flip_lo_2d
    assert res.ok()
    cps = find_critical(res.field,
                        region=ball(expected_flip_location(ch, q), 0.02),
                        grid_res=32)
    assert len(cps) == 1
    assert cps[0].index == q.index
    assert abs(np.linalg.norm(cps[0].location) - (1 + FLIP_Y_STAR)) < 1e-9
    # the restriction itself is untouched
    rng = np.random.default_rng(3)
    sph = rng.normal(size=(500, 2))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    assert np.max(np.abs(res.field.value(sph) - F1.value(sph))) < 1e-14


def test_flip_reverses_radial_derivative(flip_lo_2d):
    res, F1, ch, q = flip_lo_2d
    phat = q.location / np.linalg.norm(q.location)
    g0 = float(np.dot(F1.grad(q.location[None])[0], phat))
    g1 = float(np.dot(res.field.grad(q.location[None])[0], phat))
    assert abs(g0 + 1.0) < 1e-12 and abs(g1 - 1.0) < 1e-12


def test_flip_gradient_winding_degree(flip_lo_2d):
    # degree of grad F around a nondegenerate index-0 point is +1
    res, _, ch, q = flip_lo_2d
    cps = find_critical(res.field,
                        region=ball(expected_flip_location(ch, q), 0.02),
                        grid_res=32)
    c = cps[0].location
    th = np.linspace(0.0, 2 * math.pi, 721)
    circ = c + 0.004 * np.stack([np.cos(th), np.sin(th)], axis=1)
    g = res.field.grad(circ)
    ang = np.unwrap(np.arctan2(g[:, 1], g[:, 0]))
    deg = (ang[-1] - ang[0]) / (2 * math.pi)
    assert abs(deg - 1.0) < 1e-6


def test_flip_radial_out_branch(birth_hi_2d):
    res, F, ch = birth_hi_2d
    pair, _ = born_pair(res.field, ch)
    q = pair[1]  # index 1, radial-out
    r2 = flip(res.field, q, ch, rho_s=3 * EPS)
    assert r2.ok()
    cps = find_critical(r2.field,
                        region=ball(expected_flip_location(ch, q), 0.02),
                        grid_res=32)
    assert len(cps) == 1 and cps[0].index == q.index + 1


def test_flip_rejects_wide_cap_hitting_partner(birth_lo_2d):
    # default rho_s = 0.02 covers the partner 6*eps away: must refuse
    res, F, ch = birth_lo_2d
    pair, _ = born_pair(res.field, ch)
    with pytest.raises(ChartMismatch):
        flip(res.field, pair[0], ch, rho_s=0.02)


def test_flip_sign_mismatch_errors(birth_lo_2d):
    res, F, ch = birth_lo_2d
    pair, _ = born_pair(res.field, ch)
    with pytest.raises(ChartMismatch):
        flip(res.field, pair[0], hi_chart(2), rho_s=3 * EPS)
    bogus = CriticalPoint(pair[0].location, pair[0].kind, pair[0].index,
                          pair[0].eigenvalues, "none", pair[0].value)
    with pytest.raises(WrongRadialSign):
        flip(res.field, bogus, ch, rho_s=3 * EPS)


# ---------------------------------------------------------------------------
# flip profiles: margins frozen into the construction

def test_flip_profile_d_below_face():
    D, C = flip_profiles(0.004)
    y = np.linspace(-0.3, -0.15, 2001)
    v, d1, _ = D.eval012(y)
    assert np.max(np.abs(v)) == 0.0 and np.max(np.abs(d1)) == 0.0
    y = np.linspace(-0.15, 0.0, 4001)
    v, d1, _ = D.eval012(y)
    assert np.min(v) >= 0.0
    # 1 + D' crosses zero transversally at y* = -0.075 and nowhere else below
    v, d1, d2 = D.eval012(np.array([FLIP_Y_STAR]))
    assert abs(d1[0] + 1.0) < 1e-12 and abs(d2[0] + 1.4) < 1e-12
    lo = np.linspace(-0.1499, FLIP_Y_STAR - 1e-4, 2001)
    hi = np.linspace(FLIP_Y_STAR + 1e-4, 0.0, 2001)
    assert np.all(D.eval012(lo)[1] > -1.0)
    assert np.all(D.eval012(hi)[1] < -1.0)


def test_flip_profile_d_above_face():
    beta = 0.004
    D, C = flip_profiles(beta)
    y = np.linspace(2.05 * beta, 0.03, 2001)
    v, d1, _ = D.eval012(y)
    assert np.max(np.abs(v)) == 0.0 and np.max(np.abs(d1)) == 0.0
    # the zero of 1 + D' above the sphere stays inside (beta, 1.5 beta)
    assert np.all(D.eval012(np.linspace(0.0, beta, 1001))[1] < -1.0 + 1e-12)
    s = np.sign(1.0 + D.eval012(np.linspace(beta, 1.5 * beta, 2001))[1])
    assert np.sum(np.abs(np.diff(s)) > 0) == 1
    assert np.all(D.eval012(np.linspace(1.51 * beta, 2.0 * beta, 1001))[1]
                  > -1.0)


def test_flip_profile_c_plateau_and_margin():
    D, C = flip_profiles(0.004)
    r = np.linspace(0.0, 0.1, 501)
    v, d1, _ = C.eval012(r)
    assert np.max(np.abs(v - 1.0)) < 1e-12 and np.max(np.abs(d1)) < 1e-12
    r = np.linspace(0.0, FLIP_C_SUP + 0.5, 5001)
    v, d1, _ = C.eval012(r)
    assert np.min(v) >= -1e-12 and np.max(v) <= 1.0
    assert np.max(np.abs(d1)) <= 0.95
    assert np.max(np.abs(v[r >= FLIP_C_SUP])) < 1e-12


# ---------------------------------------------------------------------------
# connector

def radial_height(n, slope=2.0, shift=0.0, r_in=0.8, r_out=1.2):
    b = FieldBuilder(n, annulus([0.0] * n, r_in, r_out))
    z = b.coords()
    return b.build(z[n - 1] + (b.rnorm(z) - 1.0) * slope + shift)


@pytest.fixture(scope="module")
def connected_2d():
    f1 = radial_height(2)
    f2 = radial_height(2, shift=1.0)
    V = TangentField(f1, 1.0)
    return connect(f1, f2, V, cap_radius=0.3), f1, f2


def test_connect_boundary_values(connected_2d):
    res, f1, f2 = connected_2d
    assert res.ok()
    rng = np.random.default_rng(11)
    sph = rng.normal(size=(400, 2))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    G = res.field
    assert np.max(np.abs(G.value(sph) - f1.value(sph))) < 1e-12
    assert np.max(np.abs(G.value(2 * sph) - f2.value(sph))) < 1e-12


def test_connect_midpoint_value(connected_2d):
    # away from the caps G(1.5 x) is the average of the two boundary values
    res, f1, f2 = connected_2d
    th = np.linspace(0.3, 1.2, 50)  # off the polar caps
    sph = np.stack([np.cos(th), np.sin(th)], axis=1)
    mid = 0.5 * (f1.value(sph) + f2.value(sph))
    assert np.max(np.abs(res.field.value(1.5 * sph) - mid)) < 1e-12


def test_connect_gradient_matching(connected_2d):
    res, f1, f2 = connected_2d
    for cp in restricted_critical(f1, 1.0):
        p = cp.location
        assert np.linalg.norm(res.field.grad(p[None])[0]
                              - f1.grad(p[None])[0]) < 1e-10
        assert np.linalg.norm(2 * res.field.grad(2 * p[None])[0]
                              - f2.grad(p[None])[0]) < 1e-10


def test_connect_annulus_certificate(connected_2d):
    res, _, _ = connected_2d
    ev = {e["claim"]: e for e in res.evidence}
    cert = ev["no critical points in the annulus (certificate)"]
    assert cert["pass"] and cert["data"]["grad_lower_bound"] > 0


def test_connect_critical_set_mismatch():
    f1 = radial_height(2)
    b = FieldBuilder(2, annulus([0.0, 0.0], 0.8, 1.2))
    z = b.coords()
    f2 = b.build(z[0] + (b.rnorm(z) - 1.0) * 2.0)  # poles on the other axis
    with pytest.raises(CriticalSetMismatch):
        connect(f1, f2, TangentField(f1, 1.0))


def test_connect_value_collision():
    f1 = radial_height(2)
    f2 = radial_height(2, shift=0.0)
    with pytest.raises(ValueCollision):
        connect(f1, f2, TangentField(f1, 1.0))


def test_connect_sign_condition():
    # f2 < f1 while both radial derivatives point outward
    f1 = radial_height(2)
    f2 = radial_height(2, shift=-1.0)
    with pytest.raises(SignCondition):
        connect(f1, f2, TangentField(f1, 1.0))


def test_connect_needs_gradient_like_flow():
    f1 = radial_height(3)
    b = FieldBuilder(3, annulus([0.0] * 3, 0.8, 1.2))
    z = b.coords()
    f2 = b.build(z[2] + (b.rnorm(z) - 1.0) * 2.0 + 1.0)
    other = b.build if False else None
    b2 = FieldBuilder(3, annulus([0.0] * 3, 0.8, 1.2))
    z2 = b2.coords()
    unrelated = b2.build(z2[0])
    with pytest.raises(NoCommonGradientLikeField):
        connect(f1, f2, TangentField(unrelated, 1.0))


def test_connector_profiles_shapes():
    w1, w2 = 0.2, 0.2
    W1, s1, s2 = _connector_profiles(w1, w2)
    m = 1.0 / (1.0 - 0.5 * (w1 + w2))
    r = np.linspace(1.0, 2.0, 4001)
    v, d1, _ = W1.eval012(r)
    assert abs(v[0] - 1.0) < 1e-12 and abs(v[-1]) < 1e-12
    assert abs(d1[0]) < 1e-12 and abs(d1[-1]) < 1e-12
    assert np.all(d1 <= 1e-12)
    assert np.max(np.abs(d1)) <= m + 1e-12
    # exactly linear in the middle
    mid = (r > 1 + w1 + 1e-9) & (r < 2 - w2 - 1e-9)
    assert np.max(np.abs(d1[mid] + m)) < 1e-9
    # slope already past half strength while s1 is still active
    i = np.argmin(np.abs(r - (1 + 0.75 * w1)))
    assert d1[i] < -0.5 * m

    v, d1, _ = s1.eval012(r)
    assert abs(v[0] - 1.0) < 1e-12 and abs(d1[0] - 1.0) < 1e-12
    assert np.min(v) >= 1.0 - 1e-12
    assert np.max(v) <= 1.0 + 0.45 * w1 + 1e-12
    assert np.allclose(v[r >= 1 + w1], 1.0 + 0.45 * w1, atol=1e-12)

    v, d1, _ = s2.eval012(r)
    i2 = np.argmin(np.abs(r - 2.0))
    assert abs(v[i2] - 1.0) < 1e-9 and abs(d1[i2] - 0.5) < 1e-6
    assert np.max(np.abs(v - 1.0)) <= 0.225 * w2 + 2e-4  # small overshoot
    assert np.allclose(v[r <= 2 - w2], 1.0 - 0.225 * w2, atol=1e-12)


# ---------------------------------------------------------------------------
# smooth_join

def sphere_height(n, r_in=0.5, r_out=1.5):
    b = FieldBuilder(n, annulus([0.0] * n, r_in, r_out))
    return b.build(b.coords()[n - 1])


def test_smooth_join_of_equal_fields_is_identity():
    F = sphere_height(2)
    res = smooth_join(F, sphere_height(2), eps=0.1)
    assert res.ok()
    rng = np.random.default_rng(5)
    pts = F.region.sample(2000, rng)
    assert np.max(np.abs(res.field.value(pts) - F.value(pts))) < 1e-14


def test_smooth_join_positive_floor_and_blend_bound():
    F = sphere_height(2)
    res = smooth_join(F, sphere_height(2), eps=0.1)
    ev = {e["claim"]: e for e in res.evidence}
    assert ev["positive sphere gradient floor c"]["data"]["c"] > 0
    d = ev["blend weight gradient below 2/delta"]["data"]
    assert d["max_grad"] < d["bound"]
    delta = ev["positive sphere gradient floor c"]["data"]["delta"]
    rng = np.random.default_rng(6)
    pts = res.changed_region.sample(500, rng)
    assert np.max(wp_grad_norm((1.0, delta), pts)) < 2.0 / delta


def test_smooth_join_gradient_mismatch_at_cp():
    F = sphere_height(2)
    b = FieldBuilder(2, annulus([0.0, 0.0], 0.5, 1.5))
    z = b.coords()
    G = b.build(z[1] + (b.sqnorm(z) + (-1.0)) * 3.0)  # same restriction,
    with pytest.raises(GradientMismatchAtCP):        # different normal slope
        smooth_join(F, G, eps=0.1)


def test_smooth_join_delta_search_failure():
    # violent radial variation just off the sphere defeats the band check
    b = FieldBuilder(2, annulus([0.0, 0.0], 0.5, 1.5))
    z = b.coords()
    from morsemorph.jet import make_step
    F = b.build(z[1] + b.profile(make_step(1.01 ** 2, 1.03 ** 2),
                                 b.sqnorm(z)) * 5.0)
    with pytest.raises(DeltaSearchFailed):
        smooth_join(F, sphere_height(2), eps=0.1, delta=0.05)


def test_postcondition_failed_lists_claims():
    ev = [{"claim": "good", "pass": True, "data": {}},
          {"claim": "bad", "pass": False, "data": {"x": 1}}]
    res = MetamorphResult(None, None, ev)
    assert not res.ok()
    with pytest.raises(PostconditionFailed, match="bad"):
        from morsemorph.metamorph import _finish
        _finish(None, None, ev, True)
