import itertools

import numpy as np
import pytest

from morsemorph.jet import FieldBuilder, ball, annulus
from morsemorph.critical import (
    find_critical, morse_index, restricted_critical, parity_from_boundary,
    degree_of_gradient, forced_index, certify_no_critical,
    NotCritical, DegenerateCritical, GradVanishesOnBoundary,
    FormulaInconsistent, DimensionUnsupported, CertificationFailed,
)


def quadratic(coeffs, shift=None, radius=2.0):
    """Field sum_i a_i (x_i - c_i)^2 on a ball."""
    n = len(coeffs)
    b = FieldBuilder(n, ball([0.0] * n, radius))
    xs = b.coords()
    shift = shift if shift is not None else [0.0] * n
    terms = [b.ipow(x - b.const(c), 2) for x, c in zip(xs, shift)]
    return b.build(b.lincomb(list(zip(coeffs, terms))))


def test_find_critical_single_minimum():
    f = quadratic([1.0, 2.0])
    cps = find_critical(f)
    assert len(cps) == 1
    cp = cps[0]
    assert np.linalg.norm(cp.location) < 1e-10
    assert cp.index == 0 and cp.kind == "interior"
    assert np.allclose(cp.eigenvalues, [2.0, 4.0])
    assert abs(cp.value) < 1e-14


def test_find_critical_double_well():
    # (x^2 - 1)^2 + y^2: minima at (+-1, 0), saddle at origin
    b = FieldBuilder(2, ball([0.0, 0.0], 2.0))
    x, y = b.coords()
    f = b.build(b.ipow(b.ipow(x, 2) - b.const(1.0), 2) + b.ipow(y, 2))
    cps = find_critical(f)
    assert len(cps) == 3
    by_index = sorted(cps, key=lambda c: c.location[0])
    assert np.allclose(by_index[0].location, [-1, 0], atol=1e-9)
    assert np.allclose(by_index[2].location, [1, 0], atol=1e-9)
    assert [c.index for c in by_index] == [0, 1, 0]
    assert abs(by_index[1].value - 1.0) < 1e-12


def test_find_critical_shifted_3d():
    f = quadratic([1.0, -2.0, 3.0], shift=[0.3, -0.2, 0.1])
    cps = find_critical(f)
    assert len(cps) == 1
    assert np.allclose(cps[0].location, [0.3, -0.2, 0.1], atol=1e-9)
    assert cps[0].index == 1


def test_morse_index_and_not_critical():
    f = quadratic([1.0, -1.0, -2.0, 3.0])
    assert morse_index(f, [0, 0, 0, 0]) == 2
    with pytest.raises(NotCritical):
        morse_index(f, [0.5, 0, 0, 0])


def test_degenerate_detected():
    # x^3 + y^2 has a degenerate critical point at the origin
    b = FieldBuilder(2, ball([0.0, 0.0], 1.0))
    x, y = b.coords()
    f = b.build(b.ipow(x, 3) + b.ipow(y, 2))
    with pytest.raises(DegenerateCritical):
        find_critical(f)


def test_restricted_height_function():
    # restriction of z to the unit 2-sphere: poles only
    b = FieldBuilder(3, ball([0.0] * 3, 1.5))
    f = b.build(b.coord(2))
    cps = restricted_critical(f, 1.0)
    assert len(cps) == 2
    north = max(cps, key=lambda c: c.value)
    south = min(cps, key=lambda c: c.value)
    assert np.allclose(north.location, [0, 0, 1], atol=1e-8)
    assert np.allclose(south.location, [0, 0, -1], atol=1e-8)
    assert north.index == 2 and north.radial_sign == "out"
    assert south.index == 0 and south.radial_sign == "in"
    assert abs(north.value - 1.0) < 1e-10
    # neither pole forces the interior index (and indeed there is no
    # interior critical point)
    assert forced_index(cps, 3) is None


def test_restricted_diagonal_quadratic():
    # x^2 + 2y^2 - 3z^2 on the unit sphere: critical exactly at the axes
    f = quadratic([1.0, 2.0, -3.0])
    cps = restricted_critical(f, 1.0)
    assert len(cps) == 6
    for cp in cps:
        ax = int(np.argmax(np.abs(cp.location)))
        assert abs(abs(cp.location[ax]) - 1.0) < 1e-8
        expected_index = {0: 1, 1: 2, 2: 0}[ax]
        expected_sign = {0: "out", 1: "out", 2: "in"}[ax]
        assert cp.index == expected_index
        assert cp.radial_sign == expected_sign
    assert parity_from_boundary(cps, 3) == "odd"


def test_grad_vanishes_on_boundary():
    # (|x|^2 - 1)^2 has vanishing full gradient everywhere on the unit circle
    b = FieldBuilder(2, ball([0.0, 0.0], 1.5))
    f = b.build(b.ipow(b.sqnorm(b.coords()) - b.const(1.0), 2))
    with pytest.raises((GradVanishesOnBoundary, DegenerateCritical)):
        restricted_critical(f, 1.0, grid_res=8)


@pytest.mark.parametrize("n", [2, 3])
def test_parity_matches_interior_index(n):
    # [DERIVED] for perturbed diagonal quadratics with a unique interior
    # critical point of known index, both boundary formulas give its parity
    rng = np.random.default_rng(7)
    for _ in range(8):
        coeffs = rng.uniform(0.5, 3.0, n) * rng.choice([-1.0, 1.0], n)
        while len(set(np.round(np.abs(coeffs), 3))) < n:
            coeffs = rng.uniform(0.5, 3.0, n) * rng.choice([-1.0, 1.0], n)
        shift = rng.uniform(-0.1, 0.1, n)
        f = quadratic(list(coeffs), shift=list(shift))
        lam = int(np.sum(coeffs < 0))
        cps = restricted_critical(f, 1.0)
        parity = parity_from_boundary(cps, n)
        assert parity == ("even" if lam % 2 == 0 else "odd")


def test_parity_inconsistent_raises():
    f = quadratic([1.0, 2.0])
    cps = restricted_critical(f, 1.0)
    # drop one boundary point: the two formulas no longer agree
    with pytest.raises(FormulaInconsistent):
        parity_from_boundary(cps[:-1], 2)


@pytest.mark.parametrize("n", [2, 3])
def test_degree_law_all_sign_patterns(n):
    # [DERIVED] deg(normalized grad) = product of quadratic signs = (-1)^index
    for signs in itertools.product([1.0, -1.0], repeat=n):
        coeffs = [s * (1.0 + 0.5 * i) for i, s in enumerate(signs)]
        f = quadratic(coeffs)
        deg = degree_of_gradient(f, 1.0)
        lam = morse_index(f, [0.0] * n)
        assert deg == (-1) ** lam == int(np.prod(signs))


def test_degree_unsupported_dimension():
    f = quadratic([1.0, 1.0, 1.0, 1.0])
    with pytest.raises(DimensionUnsupported):
        degree_of_gradient(f, 1.0)


def test_forced_index_examples():
    # [PAPER] +-(x^2 + 2y^2): forced interior indices 0 and n
    f = quadratic([1.0, 2.0])
    cps = restricted_critical(f, 1.0)
    assert forced_index(cps, 2) == 0
    g = quadratic([-1.0, -2.0])
    cps = restricted_critical(g, 1.0)
    assert forced_index(cps, 2) == 2
    # saddle: no forcing
    h = quadratic([1.0, -2.0])
    assert forced_index(restricted_critical(h, 1.0), 2) is None


def test_certificate_on_annulus():
    f = quadratic([1.0, 2.0])
    reg = annulus([0.0, 0.0], 0.5, 1.0)
    cert = certify_no_critical(f, reg)
    assert cert.grad_lower_bound > 0
    # stated invariant between the summary numbers
    assert cert.grad_lower_bound > cert.lipschitz_bound * cert.resolution * np.sqrt(2) / 2
    # true gradient minimum on the annulus is 2 * 0.5 = 1.0
    assert cert.grad_lower_bound <= 1.0 + 1e-9


def test_certificate_fails_when_critical_inside():
    f = quadratic([1.0, 2.0])
    with pytest.raises(CertificationFailed):
        certify_no_critical(f, ball([0.0, 0.0], 0.5), max_cells=20000)


def test_certificate_with_exclusion():
    f = quadratic([1.0, -2.0, 1.5], shift=[0.1, 0.0, -0.05])
    reg = ball([0.0] * 3, 1.0)
    cert = certify_no_critical(f, reg, exclude=[(np.array([0.1, 0.0, -0.05]), 0.05)])
    assert cert.grad_lower_bound > 0
    assert cert.stats["cells"] > 0


def test_certified_region_has_no_critical_points():
    rng = np.random.default_rng(3)
    for _ in range(5):
        coeffs = rng.uniform(0.5, 2.0, 2) * rng.choice([-1.0, 1.0], 2)
        shift = rng.uniform(1.5, 1.8, 2)  # critical point outside the ball
        f = quadratic(list(coeffs), shift=list(shift), radius=3.0)
        reg = ball([0.0, 0.0], 1.0)
        certify_no_critical(f, reg)
        assert find_critical(f, reg) == []
