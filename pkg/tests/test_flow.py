import math

import numpy as np
import pytest

from morsemorph.jet import FieldBuilder, ball
from morsemorph.critical import restricted_critical, NotCritical
from morsemorph.flow import (
    TangentField, FlowLine, check_gradient_like, integrate_flow,
    point_on_flowline,
)


def height_field(n):
    b = FieldBuilder(n, ball([0.0] * n, 1.5))
    return b.build(b.coord(n - 1))


def test_tangent_field_orthogonality():
    f = height_field(3)
    V = TangentField(f, 1.0)
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(200, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    v = V(pts)
    assert np.max(np.abs(np.sum(v * pts, axis=1))) < 1e-10


def test_check_gradient_like():
    f = height_field(2)
    V = TangentField(f, 1.0)
    cps = restricted_critical(f, 1.0)
    assert check_gradient_like(V, f, 1000, critical_points=cps)

    class Negated(TangentField):
        def __call__(self, x):
            return -TangentField.__call__(self, x)

    assert not check_gradient_like(Negated(f, 1.0), f, 1000, critical_points=cps)

    class Rotated(TangentField):
        def __call__(self, x):
            v = TangentField.__call__(self, x)
            return np.stack([-v[..., 1], v[..., 0]], axis=-1)

    assert not check_gradient_like(Rotated(f, 1.0), f, 1000, critical_points=cps)


def test_flow_meridian_closed_form():
    # height on S^2: descent flow obeys dtheta/dt = sin(theta), i.e.
    # tan(theta/2) = tan(theta0/2) e^t along the meridian
    f = height_field(3)
    V = TangentField(f, 1.0)
    cps = restricted_critical(f, 1.0)
    x0 = np.array([1.0, 0.0, 0.0])
    line = integrate_flow(V, x0, (-30.0, 30.0), critical_points=cps)
    assert line.target is not None and line.source is not None
    assert np.allclose(line.target.location, [0, 0, -1], atol=2e-6)
    assert np.allclose(line.source.location, [0, 0, 1], atol=2e-6)
    # monotone decreasing value
    assert np.all(np.diff(line.values) < 1e-12)
    # against the closed form
    theta = 2.0 * np.arctan(np.exp(line.times))
    ref = np.stack([np.sin(theta), np.zeros_like(theta), np.cos(theta)], axis=1)
    assert np.max(np.linalg.norm(line.points - ref, axis=1)) < 1e-6


def test_flow_start_at_pole_rejected():
    f = height_field(3)
    V = TangentField(f, 1.0)
    with pytest.raises(NotCritical):
        integrate_flow(V, [0.0, 0.0, 1.0], (0.0, 1.0), critical_points=[])


def test_point_on_flowline_closed_form():
    # circle, height = second coordinate; start at (1, 0)
    f = height_field(2)
    V = TangentField(f, 1.0)
    p = np.array([1.0, 0.0])
    assert np.array_equal(point_on_flowline(V, p, 0.0), p)
    for s in (0.05, 0.3, -0.2):
        q = point_on_flowline(V, p, s)
        theta = 2.0 * math.atan(math.exp(s))   # angle from the north pole
        ref = np.array([math.sin(theta), math.cos(theta)])
        assert np.linalg.norm(q - ref) < 1e-8
    # group property
    q = point_on_flowline(V, p, -0.4)
    back = point_on_flowline(V, q, 0.4)
    assert np.linalg.norm(back - p) < 1e-8


def test_flowline_csv(tmp_path):
    f = height_field(2)
    V = TangentField(f, 1.0)
    cps = restricted_critical(f, 1.0)
    line = integrate_flow(V, [1.0, 0.0], (0.0, 2.0), critical_points=cps)
    path = tmp_path / "line.csv"
    line.to_csv(path)
    rows = path.read_text().strip().split("\n")
    assert rows[0] == "t,x1,x2,f"
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (len(line.times), 4)
    assert np.allclose(data[:, 0], line.times)
