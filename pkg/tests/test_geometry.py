import math

import numpy as np
import pytest

from morsemorph.jet import FieldBuilder, ball, box, make_bump
from morsemorph.geometry import (
    Diffeo, Chart, identity_diffeo, compose_diffeo, transport,
    meridian_chart, collar_chart, height_shift_diffeo, flow_rotation_extension,
    recentring_diffeo, equator_frame, tangent_frame,
    CapTooLarge, NotEquator, TimeTooLarge,
)


def sphere_points(n, m, rng, radius=1.0):
    v = rng.normal(size=(m, n))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def e1(n):
    v = np.zeros(n)
    v[0] = 1.0
    return v


# ---------------------------------------------------------------------------
# frames

def test_frames_orthonormal():
    rng = np.random.default_rng(0)
    for n in (2, 3, 4):
        p = sphere_points(n, 1, rng)[0]
        p[-1] = 0.0
        p /= np.linalg.norm(p)
        Q = equator_frame(p, n)
        assert Q.shape == (n - 2, n)
        if n > 2:
            assert np.allclose(Q @ Q.T, np.eye(n - 2), atol=1e-12)
            assert np.allclose(Q @ p, 0, atol=1e-12)
            assert np.allclose(Q[:, -1], 0, atol=1e-12)
        U = tangent_frame(p)
        assert np.allclose(U @ U.T, np.eye(n - 1), atol=1e-12)
        assert np.allclose(U @ p, 0, atol=1e-12)


# ---------------------------------------------------------------------------
# meridian chart

@pytest.mark.parametrize("n", [2, 3, 4])
def test_meridian_chart_basics(n):
    ch = meridian_chart(e1(n), n)
    assert np.allclose(ch.map.apply(np.zeros(n)), e1(n), atol=1e-12)
    # axis maps into the meridian arc; restricted height strictly increases
    t = np.linspace(-0.3, 0.3, 100)
    pts = np.zeros((100, n))
    pts[:, n - 2] = t
    img = ch.map.apply(pts)
    assert np.allclose(np.linalg.norm(img, axis=1), 1.0, atol=1e-12)
    h = img[:, n - 1]
    assert np.all(np.diff(h) > 0)
    assert np.allclose(h, t, atol=1e-12)  # height pulls back to t on the axis


def test_meridian_chart_2d_arc():
    ch = meridian_chart([1.0, 0.0], 2)
    img = ch.map.apply(np.array([[0.2, 0.0]]))[0]
    # arc through (1,0) toward (0,1): angle asin(t)
    assert np.allclose(img, [math.cos(math.asin(0.2)), 0.2], atol=1e-12)


def test_meridian_chart_height_normalization():
    n, sigma, cb = 3, -1.0, -0.1
    ch = meridian_chart(e1(n), n, sigma=sigma, cosbeta=cb, t_range=(-0.3, 0.3))
    rng = np.random.default_rng(1)
    pts = ch.map.domain.sample(200, rng)
    img = ch.map.apply(pts)
    t, y = pts[:, n - 2], pts[:, n - 1]
    assert np.allclose(img[:, n - 1], t + sigma * y + cb, atol=1e-12)
    assert np.allclose(np.linalg.norm(img, axis=1), 1.0 + y, atol=1e-12)


def test_meridian_roundtrip_and_jacobian():
    rng = np.random.default_rng(2)
    for n in (2, 3, 4):
        ch = meridian_chart(e1(n), n, sigma=1.0, cosbeta=0.05)
        pts = ch.map.domain.sample(1000, rng)
        assert ch.map.roundtrip_error(pts) < 1e-9
        J = ch.map.jacobian(pts)
        assert np.all(np.abs(np.linalg.det(J)) > 1e-9)


def test_meridian_not_equator():
    with pytest.raises(NotEquator):
        meridian_chart([0.0, 0.0, 1.0], 3)


# ---------------------------------------------------------------------------
# collar chart

def test_collar_chart_north_pole():
    ch = collar_chart([0.0, 1.0], a=0.3)
    assert np.allclose(ch.map.apply(np.zeros(2)), [0.0, 1.0], atol=1e-12)
    rng = np.random.default_rng(3)
    pts = ch.map.domain.sample(500, rng)
    img = ch.map.apply(pts)
    assert np.allclose(np.linalg.norm(img, axis=1), 1.0 + pts[:, -1], atol=1e-12)
    # y = -0.1 slice strictly inside the unit ball
    pts[:, -1] = -0.1
    img = ch.map.apply(pts)
    assert np.all(np.linalg.norm(img, axis=1) < 1.0)


def test_collar_chart_roundtrip():
    rng = np.random.default_rng(4)
    for n in (2, 3, 4):
        p = sphere_points(n, 1, rng)[0]
        ch = collar_chart(p, a=0.3)
        pts = ch.map.domain.sample(1000, rng)
        assert ch.map.roundtrip_error(pts) < 1e-9
        J = ch.map.jacobian(pts)
        assert np.all(np.abs(np.linalg.det(J)) > 1e-9)
    with pytest.raises(CapTooLarge):
        collar_chart(p, a=1.5)


# ---------------------------------------------------------------------------
# transport

def test_transport_identity_and_translation():
    n = 2
    r = ball([0, 0], 2)
    b = FieldBuilder(n, r)
    x, y = b.coords()
    f = b.build(b.ipow(x - 0.2, 2) + b.ipow(y, 2))
    ident = identity_diffeo(n, r)
    g = transport(f, ident, "pull")
    pts = np.random.default_rng(5).uniform(-1, 1, size=(50, 2))
    assert np.allclose(g.value(pts), f.value(pts), atol=1e-14)
    # translation by v moves the critical point by -v
    bt = FieldBuilder(n, r)
    xt, yt = bt.coords()
    v = [0.3, -0.1]
    tr = Diffeo(n, [bt.build(xt + v[0]), bt.build(yt + v[1])],
                [bt.build(xt - v[0]), bt.build(yt - v[1])], r, r)
    fg = transport(f, tr, "pull")
    j = fg.jet(np.array([0.2, 0.0]) - np.array(v))
    assert np.linalg.norm(j.grad) < 1e-12


def test_transport_rotation_gradient():
    n = 3
    r = ball([0, 0, 0], 2)
    th = 0.7
    R = np.array([[math.cos(th), -math.sin(th), 0],
                  [math.sin(th), math.cos(th), 0], [0, 0, 1.0]])
    b = FieldBuilder(n, r)
    z = b.coords()
    fwd = [b.build(b.lincomb([(float(R[i, j]), z[j]) for j in range(n)])) for i in range(n)]
    inv = [b.build(b.lincomb([(float(R[j, i]), z[j]) for j in range(n)])) for i in range(n)]
    rot = Diffeo(n, fwd, inv, r, r)
    # pull of x^n through a rotation: gradient is row n of R
    bh = FieldBuilder(n, r)
    height = bh.build(bh.coord(n - 1))
    g = transport(height, rot, "pull")
    j = g.jet([0.1, 0.2, 0.3])
    assert np.allclose(j.grad, R[n - 1, :], atol=1e-12)


def test_transport_functorial():
    n = 2
    r = ball([0, 0], 3)
    d1 = flow_rotation_extension(0.2, n, region=r)
    d2 = flow_rotation_extension(0.15, n, region=r)
    b = FieldBuilder(n, r)
    x, y = b.coords()
    f = b.build(x * y + b.ipow(x, 2))
    g12 = transport(transport(f, d1, "pull"), d2, "pull")
    comp = compose_diffeo(d1, d2)
    gc = transport(f, comp, "pull")
    rng = np.random.default_rng(6)
    pts = rng.uniform(-0.9, 0.9, size=(100, 2))
    va, ga, ha = g12.eval_batch(pts)
    vb, gb, hb = gc.eval_batch(pts)
    assert np.max(np.abs(va - vb)) < 1e-9
    assert np.max(np.abs(ga - gb)) < 1e-9
    assert np.max(np.abs(ha - hb)) < 1e-9


# ---------------------------------------------------------------------------
# flow rotation extension

@pytest.mark.parametrize("n", [2, 3])
def test_flow_rotation_extension(n):
    rng = np.random.default_rng(7)
    d0 = flow_rotation_extension(0.0, n)
    pts = rng.uniform(-1, 1, size=(100, n))
    assert np.allclose(d0.apply(pts), pts, atol=1e-14)

    d = flow_rotation_extension(0.3, n)
    # identity inside radius 1/2
    inner = 0.3 * sphere_points(n, 50, rng)
    assert np.allclose(d.apply(inner), inner, atol=1e-14)
    # poles fixed, radius preserved, round trip
    sp = sphere_points(n, 200, rng)
    img = d.apply(sp)
    assert np.allclose(np.linalg.norm(img, axis=1), 1.0, atol=1e-12)
    poles = np.zeros((2, n))
    poles[0, -1], poles[1, -1] = 1.0, -1.0
    assert np.allclose(d.apply(poles), poles, atol=1e-14)
    assert d.roundtrip_error(rng.uniform(-1, 1, size=(500, n))) < 1e-11
    # height strictly decreases off the poles (descent flow)
    assert np.all(img[:, -1] <= sp[:, -1] + 1e-15)
    with pytest.raises(TimeTooLarge):
        flow_rotation_extension(0.7, n)


def test_flow_composition_property():
    n = 3
    rng = np.random.default_rng(8)
    d1 = flow_rotation_extension(0.2, n)
    d2 = flow_rotation_extension(0.25, n)
    d12 = flow_rotation_extension(0.45, n)
    sp = sphere_points(n, 100, rng)
    assert np.max(np.abs(d1.apply(d2.apply(sp)) - d12.apply(sp))) < 1e-6


# ---------------------------------------------------------------------------
# height shift

@pytest.mark.parametrize("n", [2, 3])
def test_height_shift(n):
    eps = 0.02
    rng = np.random.default_rng(9)
    for sigma in (-1.0, 1.0):
        d = height_shift_diffeo(n, sigma, eps)
        sp = sphere_points(n, 300, rng)
        img = d.apply(sp)
        assert np.allclose(np.linalg.norm(img, axis=1), 1.0, atol=1e-12)
        h = sp[:, -1]
        chi = np.where(np.abs(h) <= 0.25, 1.0, np.where(np.abs(h) >= 0.6, 0.0, np.nan))
        ok = ~np.isnan(chi)
        assert np.allclose(img[ok, -1], h[ok] + 2 * sigma * eps * chi[ok], atol=1e-12)
        # identity near the origin and round trip everywhere
        inner = 0.3 * sphere_points(n, 50, rng)
        assert np.allclose(d.apply(inner), inner, atol=1e-14)
        assert d.roundtrip_error(rng.uniform(-0.9, 0.9, size=(400, n))) < 1e-11
        assert d.roundtrip_error(sp) < 1e-11


# ---------------------------------------------------------------------------
# recentring

@pytest.mark.parametrize("n", [2, 3])
def test_recentring(n):
    rng = np.random.default_rng(10)
    q = 0.85 * sphere_points(n, 1, rng)[0]
    d = recentring_diffeo(q)
    assert np.allclose(d.apply(np.zeros(n)), q, atol=1e-12)
    # identity near the sphere
    sp = sphere_points(n, 100, rng, radius=0.995)
    assert np.allclose(d.apply(sp), sp, atol=1e-14)
    # jacobian at 0 is the identity (plateau at every stage center)
    J = d.jacobian(np.zeros((1, n)))[0]
    assert np.allclose(J, np.eye(n), atol=1e-12)
    # diffeo: jacobian nonsingular, round trip
    pts = rng.uniform(-0.7, 0.7, size=(300, n))
    J = d.jacobian(pts)
    assert np.all(np.abs(np.linalg.det(J)) > 1e-3)
    assert d.roundtrip_error(pts) < 1e-9
