"""Expression-DAG scalar fields with exact second-order jet propagation.

A ScalarField is a list of primitive nodes (constants, coordinates, sums,
products, powers, univariate smooth profiles, radial norms, guarded
subexpressions, sub-field compositions) plus a root id and a Region.
Evaluation pushes (value, gradient, Hessian) triples through the DAG, so
derivatives are exact up to roundoff -- no finite differencing anywhere.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass

sys.setrecursionlimit(max(sys.getrecursionlimit(), 100000))

import numpy as np
from scipy.interpolate import BPoly, PPoly


# ---------------------------------------------------------------------------
# errors

class FieldError(Exception):
    pass


class OutOfRegion(FieldError):
    pass


class NonSmoothPoint(FieldError):
    pass


class DimMismatch(FieldError):
    pass


# ---------------------------------------------------------------------------
# regions

@dataclass(frozen=True)
class Region:
    """Evaluation domain: ball / annulus / cap / box / product(box x interval)."""
    kind: str
    params: dict

    def dim(self):
        k, p = self.kind, self.params
        if k in ("ball", "annulus"):
            return len(p["center"])
        if k == "cap":
            return len(p["apex"])
        if k == "box":
            return len(p["lo"])
        if k == "product":
            return len(p["lo"]) + 1
        raise ValueError(k)

    def contains(self, x, tol=1e-12):
        x = np.asarray(x, dtype=float)
        k, p = self.kind, self.params
        if k == "ball":
            return np.linalg.norm(x - np.asarray(p["center"])) <= p["radius"] + tol
        if k == "annulus":
            r = np.linalg.norm(x - np.asarray(p["center"]))
            return p["r_in"] - tol <= r <= p["r_out"] + tol
        if k == "cap":
            r = np.linalg.norm(x)
            if abs(r - p["radius"]) > 1e-6 + tol:
                return False
            c = float(np.dot(x / r, np.asarray(p["apex"])))
            return math.acos(min(1.0, max(-1.0, c))) <= p["angular_radius"] + tol
        if k == "box":
            lo, hi = np.asarray(p["lo"]), np.asarray(p["hi"])
            return bool(np.all(x >= lo - tol) and np.all(x <= hi + tol))
        if k == "product":
            lo = np.asarray(list(p["lo"]) + [p["t0"]])
            hi = np.asarray(list(p["hi"]) + [p["t1"]])
            return bool(np.all(x >= lo - tol) and np.all(x <= hi + tol))
        raise ValueError(k)

    def bounding_box(self):
        k, p = self.kind, self.params
        if k == "ball":
            c = np.asarray(p["center"], dtype=float)
            return c - p["radius"], c + p["radius"]
        if k == "annulus":
            c = np.asarray(p["center"], dtype=float)
            return c - p["r_out"], c + p["r_out"]
        if k == "cap":
            r = p["radius"]
            n = len(p["apex"])
            return -r * np.ones(n), r * np.ones(n)
        if k == "box":
            return np.asarray(p["lo"], dtype=float), np.asarray(p["hi"], dtype=float)
        if k == "product":
            lo = np.asarray(list(p["lo"]) + [p["t0"]], dtype=float)
            hi = np.asarray(list(p["hi"]) + [p["t1"]], dtype=float)
            return lo, hi
        raise ValueError(k)

    def sample(self, m, rng):
        """m points in the region (direct for annuli, else bounding-box rejection)."""
        if self.kind == "annulus":
            # rejection from the box is hopeless for thin shells; draw the
            # radius directly with the r^(n-1) area weight instead
            c = np.asarray(self.params["center"], dtype=float)
            n = len(c)
            r0, r1 = self.params["r_in"], self.params["r_out"]
            u = rng.uniform(r0 ** n, r1 ** n, size=(m, 1)) ** (1.0 / n)
            v = rng.normal(size=(m, n))
            return c + u * v / np.linalg.norm(v, axis=1, keepdims=True)
        lo, hi = self.bounding_box()
        n = len(lo)
        out = np.empty((m, n))
        got = 0
        while got < m:
            cand = rng.uniform(lo, hi, size=(4 * (m - got) + 16, n))
            if self.kind == "cap":
                r, apex = self.params["radius"], np.asarray(self.params["apex"])
                v = rng.normal(size=(4 * (m - got) + 16, n))
                cand = r * v / np.linalg.norm(v, axis=1, keepdims=True)
                ok = np.arccos(np.clip(cand @ apex / r, -1, 1)) <= self.params["angular_radius"]
            else:
                ok = np.array([self.contains(c) for c in cand])
            cand = cand[ok]
            take = min(len(cand), m - got)
            out[got:got + take] = cand[:take]
            got += take
        return out

    def to_json(self):
        return {"kind": self.kind, "params": _jsonify(self.params)}

    @staticmethod
    def from_json(d):
        return Region(d["kind"], d["params"])


def ball(center, radius):
    return Region("ball", {"center": list(map(float, center)), "radius": float(radius)})


def annulus(center, r_in, r_out):
    assert 0 <= r_in < r_out
    return Region("annulus", {"center": list(map(float, center)),
                              "r_in": float(r_in), "r_out": float(r_out)})


def box(lo, hi):
    return Region("box", {"lo": list(map(float, lo)), "hi": list(map(float, hi))})


def cap(radius, apex, angular_radius):
    assert 0 < angular_radius < math.pi
    return Region("cap", {"radius": float(radius), "apex": list(map(float, apex)),
                          "angular_radius": float(angular_radius)})


def product_region(lo, hi, t0, t1):
    return Region("product", {"lo": list(map(float, lo)), "hi": list(map(float, hi)),
                              "t0": float(t0), "t1": float(t1)})


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    return obj


# ---------------------------------------------------------------------------
# univariate smooth profiles

def _splice(t):
    """exp(-1/t) for t > 0, else 0 (all derivatives vanish at 0)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 1e-8
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def _step01(t):
    """Smooth monotone step: 0 for t <= 0, 1 for t >= 1, with d1, d2."""
    t = np.asarray(t, dtype=float)
    v = np.zeros_like(t)
    d1 = np.zeros_like(t)
    d2 = np.zeros_like(t)
    v[t >= 1.0] = 1.0
    mid = (t > 0.0) & (t < 1.0)
    tm = t[mid]
    a = _splice(tm)
    b = _splice(1.0 - tm)
    s = a / (a + b)
    q = 1.0 / tm ** 2 + 1.0 / (1.0 - tm) ** 2
    dq = -2.0 / tm ** 3 + 2.0 / (1.0 - tm) ** 3
    sp = s * (1.0 - s) * q
    v[mid] = s
    d1[mid] = sp
    d2[mid] = sp * (1.0 - 2.0 * s) * q + s * (1.0 - s) * dq
    return v, d1, d2


@dataclass(frozen=True)
class SmoothProfile:
    """Univariate smooth function with batched (value, d1, d2) evaluation."""
    kind: str
    params: dict

    def eval012(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k, p = self.kind, self.params
        if k == "step":
            t0, t1 = p["t0"], p["t1"]
            u, d1, d2 = _step01((t - t0) / (t1 - t0))
            s = 1.0 / (t1 - t0)
            return u, d1 * s, d2 * s * s
        if k == "bump":
            t0, t1 = p["t0"], p["t1"]  # 1 on |t|<=t0, 0 on |t|>=t1
            u, d1, d2 = _step01((t1 - np.abs(t)) / (t1 - t0))
            s = 1.0 / (t1 - t0)
            sgn = np.sign(t)
            return u, -d1 * s * sgn, d2 * s * s
        if k == "downstep":
            t0, t1 = p["t0"], p["t1"]  # 1 for t<=t0, 0 for t>=t1
            u, d1, d2 = _step01((t1 - t) / (t1 - t0))
            s = 1.0 / (t1 - t0)
            return u, -d1 * s, d2 * s * s
        if k == "stepsum":
            # c0 + a*t + sum_k amp_k * step01((t - c_k)/w_k): smooth, exact at
            # knots when the steps saturate between them
            v = p["c0"] + p["a"] * t
            d1 = np.full_like(t, p["a"])
            d2 = np.zeros_like(t)
            for c, w, amp in zip(p["centers"], p["widths"], p["amps"]):
                u, u1, u2 = _step01((t - c) / w)
                v += amp * u
                d1 += amp * u1 / w
                d2 += amp * u2 / (w * w)
            return v, d1, d2
        if k == "ppoly":
            pp, pp1, pp2 = _ppoly_cache(self)
            lo, hi = pp.x[0], pp.x[-1]
            tc = np.clip(t, lo, hi)
            v, d1, d2 = pp(tc), pp1(tc), pp2(tc)
            out = (t < lo) | (t > hi)
            if np.any(out):
                d1 = d1.copy(); d2 = d2.copy()
                d1[out] = 0.0
                d2[out] = 0.0
            return v, d1, d2
        if k == "exp":
            s = p.get("scale", 1.0)
            v = np.exp(s * t)
            return v, s * v, s * s * v
        if k == "cubicinv":
            # eta solving eta^3 + e1*eta = t  (strictly monotone, unique root)
            e1 = p["e1"]
            eta = np.cbrt(t)
            small = np.abs(t) < e1
            eta = np.where(small, t / max(e1, 1e-300), eta)
            for _ in range(60):
                f = eta ** 3 + e1 * eta - t
                eta = eta - f / (3.0 * eta ** 2 + e1)
            d1 = 1.0 / (3.0 * eta ** 2 + e1)
            d2 = -6.0 * eta * d1 ** 3
            return eta, d1, d2
        raise ValueError(k)

    def __call__(self, t):
        return self.eval012(t)[0]

    def to_json(self):
        return {"kind": self.kind, "params": _jsonify(self.params)}

    @staticmethod
    def from_json(d):
        return SmoothProfile(d["kind"], d["params"])

    def __hash__(self):
        return hash(json.dumps(self.to_json(), sort_keys=True))

    def __eq__(self, other):
        return isinstance(other, SmoothProfile) and self.to_json() == other.to_json()


_PPOLY_CACHE = {}


def _ppoly_cache(prof):
    key = json.dumps(prof.params, sort_keys=True)
    hit = _PPOLY_CACHE.get(key)
    if hit is None:
        pp = PPoly(np.asarray(prof.params["coefs"], dtype=float),
                   np.asarray(prof.params["breaks"], dtype=float))
        hit = (pp, pp.derivative(1), pp.derivative(2))
        _PPOLY_CACHE[key] = hit
    return hit


def make_bump(a):
    """Even bump: 1 on |t| <= a/4, 0 on |t| >= a/2, nonincreasing on [0, inf)."""
    assert a > 0
    return SmoothProfile("bump", {"t0": a / 4.0, "t1": a / 2.0})


def make_step(t0, t1):
    """Monotone step: 0 for t <= t0, 1 for t >= t1."""
    assert t0 < t1
    return SmoothProfile("step", {"t0": float(t0), "t1": float(t1)})


def make_downstep(t0, t1):
    """Monotone: 1 for t <= t0, 0 for t >= t1."""
    assert t0 < t1
    return SmoothProfile("downstep", {"t0": float(t0), "t1": float(t1)})


def make_stepsum(c0, a, centers, widths, amps):
    assert a > 0 and all(w > 0 for w in widths) and all(s > 0 for s in amps)
    return SmoothProfile("stepsum", {"c0": float(c0), "a": float(a),
                                     "centers": list(map(float, centers)),
                                     "widths": list(map(float, widths)),
                                     "amps": list(map(float, amps))})


def identity_reparam():
    return make_stepsum(0.0, 1.0, [], [], [])


def make_hermite(knots, data, order=2):
    """C^order piecewise-polynomial through (value, d1[, d2]) data at knots.

    Returns a 'ppoly' profile clamped to constants outside the knot range.
    """
    x = np.asarray(knots, dtype=float)
    bp = BPoly.from_derivatives(x, [list(d)[:order + 1] for d in data])
    pp = PPoly.from_bernstein_basis(bp)
    return SmoothProfile("ppoly", {"breaks": _jsonify(pp.x), "coefs": _jsonify(pp.c)})


def make_hermite_integral(knots, data, c0=0.0, order=2):
    """Antiderivative (value c0 at the left knot) of the Hermite interpolant."""
    x = np.asarray(knots, dtype=float)
    bp = BPoly.from_derivatives(x, [list(d)[:order + 1] for d in data])
    pp = PPoly.from_bernstein_basis(bp).antiderivative()
    pp.c[-1] += c0
    return SmoothProfile("ppoly", {"breaks": _jsonify(pp.x), "coefs": _jsonify(pp.c)})


def make_cubicinv(e1):
    assert e1 > 0
    return SmoothProfile("cubicinv", {"e1": float(e1)})


def make_exp(scale=1.0):
    return SmoothProfile("exp", {"scale": float(scale)})


# ---------------------------------------------------------------------------
# jets

class Jet2:
    """Value, gradient and symmetric Hessian at a point."""

    __slots__ = ("value", "grad", "hess")

    def __init__(self, value, grad, hess):
        self.value = float(value)
        self.grad = np.asarray(grad, dtype=float)
        self.hess = np.asarray(hess, dtype=float)
        self.hess = 0.5 * (self.hess + self.hess.T)

    def __repr__(self):
        return f"Jet2(value={self.value!r}, grad={self.grad!r})"


def _jzero(m, n):
    return np.zeros(m), np.zeros((m, n)), np.zeros((m, n, n))


def _chain1(p0, p1, p2, u):
    """Univariate chain rule: profile jets (p0,p1,p2) applied to jet u."""
    v, g, h = u
    gg = p1[:, None] * g
    hh = p1[:, None, None] * h + p2[:, None, None] * (g[:, :, None] * g[:, None, :])
    return p0, gg, hh


def _chain_multi(phi0, dphi, d2phi, child_jets):
    """Multivariate chain rule: phi(u_1..u_K) with dphi (m,K), d2phi (m,K,K)."""
    m = phi0.shape[0]
    n = child_jets[0][1].shape[1]
    g = np.zeros((m, n))
    h = np.zeros((m, n, n))
    G = np.stack([cj[1] for cj in child_jets], axis=1)  # (m,K,n)
    for k, (_, gk, hk) in enumerate(child_jets):
        g += dphi[:, k, None] * gk
        h += dphi[:, k, None, None] * hk
    h += np.einsum("mkl,mki,mlj->mij", d2phi, G, G)
    return phi0, g, h


# ---------------------------------------------------------------------------
# fields

class ScalarField:
    """Serializable expression DAG evaluating to a Jet2 on its region."""

    def __init__(self, dim, nodes, root, region):
        self.dim = dim
        self.nodes = nodes          # list of dicts, topologically ordered
        self.root = root
        self.region = region
        self._by_id = {nd["id"]: nd for nd in nodes}

    # -- evaluation --------------------------------------------------------

    def eval_batch(self, pts):
        """Jets at pts (m, dim) -> (v (m,), g (m,dim), h (m,dim,dim))."""
        pts = np.asarray(pts, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise DimMismatch(f"expected (m,{self.dim}) points, got {pts.shape}")
        m, n = pts.shape
        cjets = []
        for i in range(n):
            g = np.zeros((m, n))
            g[:, i] = 1.0
            cjets.append((pts[:, i].copy(), g, np.zeros((m, n, n))))
        return _eval_dag(self._by_id, self.root, cjets, (m, n))

    def jet(self, point):
        v, g, h = self.eval_batch(np.asarray(point, dtype=float)[None, :])
        return Jet2(v[0], g[0], h[0])

    def value(self, pts):
        return self.eval_batch(pts)[0]

    def grad(self, pts):
        return self.eval_batch(pts)[1]

    # -- serialization ------------------------------------------------------

    def to_json(self):
        return {"dim": self.dim, "region": self.region.to_json(),
                "nodes": self.nodes, "root": self.root}

    @staticmethod
    def from_json(d):
        return ScalarField(d["dim"], d["nodes"], d["root"], Region.from_json(d["region"]))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @staticmethod
    def load(path):
        with open(path) as f:
            return ScalarField.from_json(json.load(f))


def eval_jet(field, point):
    """Jet2 of the field at a point of its (closed) region."""
    point = np.asarray(point, dtype=float)
    if point.shape != (field.dim,):
        raise DimMismatch(f"point shape {point.shape} vs dim {field.dim}")
    if not field.region.contains(point, tol=1e-9):
        raise OutOfRegion(f"{point} outside {field.region.kind} region")
    return field.jet(point)


def _bsinv_solve(nds, w, c, v, prof):
    """Solve z + prof(|z-c|^2) v = w for z; returns z and jet data of T^-1."""
    m, n = w.shape
    z = w.copy()
    for _ in range(80):
        s = np.sum((z - c) ** 2, axis=1)
        b = prof.eval012(s)[0]
        znew = w - b[:, None] * v
        if np.max(np.abs(znew - z)) < 1e-15:
            z = znew
            break
        z = znew
    s = np.sum((z - c) ** 2, axis=1)
    b0, b1, b2 = prof.eval012(s)
    d = z - c                                       # (m,n)
    # DT = I + v (2 b1 d)^T ; rank-one, invert by Sherman-Morrison
    u = 2.0 * b1[:, None] * d                       # (m,n)
    denom = 1.0 + np.einsum("i,mi->m", v, u)        # (m,)
    # A^{-1} x = x - v (u.x)/denom
    Ainv = np.eye(n)[None] - (v[None, :, None] * u[:, None, :]) / denom[:, None, None]
    # D2T(z)[a,b] = v * (2 b1 <a,b> + 4 b2 <d,a><d,b>)
    return z, d, b1, b2, Ainv


def _eval_dag(nds, root, cjets, shape):
    m, n = shape
    cache = {}
    # per-edge reference counts over the subgraph reachable from the root,
    # so a node's jets are freed once its last consumer has taken them
    refs = {}
    stack, seen = [root], {root}
    while stack:
        for a in nds[stack.pop()].get("args", []):
            refs[a] = refs.get(a, 0) + 1
            if a not in seen:
                seen.add(a)
                stack.append(a)

    def take(nid):
        r = ev(nid)
        refs[nid] = refs.get(nid, 1) - 1
        if refs[nid] <= 0:
            cache.pop(nid, None)
        return r

    def ev(nid):
        if nid in cache:
            return cache[nid]
        nd = nds[nid]
        op = nd["op"]
        args = nd.get("args", [])
        p = nd.get("params", {})
        if op == "const":
            v = np.full(m, p["c"])
            r = (v, np.zeros((m, n)), np.zeros((m, n, n)))
        elif op == "coord":
            r = cjets[p["i"]]
        elif op == "sum":
            v, g, h = _jzero(m, n)
            v += p.get("b", 0.0)
            for w, a in zip(p["w"], args):
                av, ag, ah = take(a)
                v = v + w * av
                g = g + w * ag
                h = h + w * ah
            r = (v, g, h)
        elif op == "prod":
            av, ag, ah = take(args[0])
            bv, bg, bh = take(args[1])
            v = av * bv
            g = av[:, None] * bg + bv[:, None] * ag
            cross = ag[:, :, None] * bg[:, None, :]
            h = av[:, None, None] * bh + bv[:, None, None] * ah + cross + cross.transpose(0, 2, 1)
            r = (v, g, h)
        elif op == "ipow":
            k = p["k"]
            u = take(args[0])
            uv = u[0]
            if k == 0:
                r = (np.ones(m), np.zeros((m, n)), np.zeros((m, n, n)))
            elif k == 1:
                r = u
            else:
                d2 = k * (k - 1) * uv ** (k - 2)
                r = _chain1(uv ** k, k * uv ** (k - 1), d2, u)
        elif op == "rpow":
            q = p["p"]
            u = take(args[0])
            uv = np.maximum(u[0], 0.0)
            r = _chain1(uv ** q, q * uv ** (q - 1), q * (q - 1) * uv ** (q - 2), u)
        elif op == "profile":
            prof = SmoothProfile.from_json(p["profile"])
            u = take(args[0])
            p0, p1, p2 = prof.eval012(u[0])
            r = _chain1(p0, p1, p2, u)
        elif op == "rnorm":
            cj = [take(a) for a in args]
            U = np.stack([c[0] for c in cj], axis=1)        # (m,K)
            s = np.sqrt(np.sum(U ** 2, axis=1))
            if np.any(s == 0.0):
                raise NonSmoothPoint("radial norm evaluated at its center")
            dphi = U / s[:, None]
            K = U.shape[1]
            d2 = (np.eye(K)[None] / s[:, None, None]
                  - U[:, :, None] * U[:, None, :] / s[:, None, None] ** 3)
            r = _chain_multi(s, dphi, d2, cj)
        elif op == "guarded":
            gv = take(args[0])[0]
            mask = gv != 0.0
            v, g, h = _jzero(m, n)
            if np.any(mask):
                sub = [(c[0][mask], c[1][mask], c[2][mask]) for c in cjets]
                sv, sg, sh = _eval_dag(nds, args[1], sub, (int(mask.sum()), n))
                v[mask] = sv
                g[mask] = sg
                h[mask] = sh
            r = (v, g, h)
        elif op == "subfield":
            inner_nodes = {d_["id"]: d_ for d_ in p["nodes"]}
            inner_cjets = [take(a) for a in args]
            r = _eval_dag(inner_nodes, p["root"], inner_cjets, (m, n))
        elif op == "bsinv":
            cj = [take(a) for a in args]
            w = np.stack([c[0] for c in cj], axis=1)
            cvec = np.asarray(p["c"], dtype=float)
            vvec = np.asarray(p["v"], dtype=float)
            prof = SmoothProfile.from_json(p["profile"])
            z, d, b1, b2, Ainv = _bsinv_solve(nds, w, cvec, vvec, prof)
            j = p["comp"]
            K = w.shape[1]
            dphi = Ainv[:, j, :]                            # row j of A^{-1}
            # D2(T^-1)_j[e_k,e_l] = -(A^{-1} v)_j * (2 b1 <a_k,a_l> + 4 b2 <d,a_k><d,a_l>)
            # with a_k = A^{-1} e_k (columns of A^{-1})
            Av_j = np.einsum("mk,k->m", Ainv[:, j, :], vvec)
            AtA = np.einsum("mki,mkj->mij", Ainv, Ainv)     # <a_i,a_j>
            dA = np.einsum("mk,mki->mi", d, Ainv)           # <d, a_i>
            d2 = -Av_j[:, None, None] * (2.0 * b1[:, None, None] * AtA
                                         + 4.0 * b2[:, None, None] * dA[:, :, None] * dA[:, None, :])
            r = _chain_multi(z[:, j], dphi, d2, cj)
        elif op == "pinv":
            # component of the inverse of z -> z + P(z), P a contraction given
            # as a sub-DAG vector; solved by fixed point, jets by the implicit
            # function theorem
            cj = [take(a) for a in args]
            w = np.stack([c[0] for c in cj], axis=1)        # (m,K)
            K = w.shape[1]
            mm = w.shape[0]
            inner = {d_["id"]: d_ for d_ in p["nodes"]}
            roots = p["roots"]

            def pjets(zz, with_derivs):
                cz = []
                for i in range(K):
                    g = np.zeros((mm, K))
                    if with_derivs:
                        g[:, i] = 1.0
                    cz.append((zz[:, i].copy(), g, np.zeros((mm, K, K))))
                return [_eval_dag(inner, rt, cz, (mm, K)) for rt in roots]

            z = w.copy()
            for _ in range(400):
                Pv = np.stack([j_[0] for j_ in pjets(z, False)], axis=1)
                znew = w - Pv
                if np.max(np.abs(znew - z)) < 1e-15:
                    z = znew
                    break
                z = znew
            pj = pjets(z, True)
            DP = np.stack([j_[1] for j_ in pj], axis=1)     # (m,K,K)
            D2P = np.stack([j_[2] for j_ in pj], axis=1)    # (m,K,K,K)
            A = np.eye(K)[None] + DP
            Ainv = np.linalg.inv(A)
            j = p["comp"]
            dphi = Ainv[:, j, :]
            d2 = -np.einsum("mk,mkab,mai,mbj->mij", Ainv[:, j, :], D2P, Ainv, Ainv)
            r = _chain_multi(z[:, j], dphi, d2, cj)
        elif op == "restrict":
            r = take(args[0])
        else:
            raise ValueError(f"unknown op {op}")
        cache[nid] = r
        return r

    return ev(root)


# ---------------------------------------------------------------------------
# builder with hash-consing

class Expr:
    """Handle to a node inside a FieldBuilder, with operator overloading."""

    __slots__ = ("b", "nid")

    def __init__(self, b, nid):
        self.b = b
        self.nid = nid

    def __add__(self, other):
        return self.b.lincomb([(1.0, self), (1.0, self.b.as_expr(other))])

    __radd__ = __add__

    def __sub__(self, other):
        return self.b.lincomb([(1.0, self), (-1.0, self.b.as_expr(other))])

    def __rsub__(self, other):
        return self.b.lincomb([(-1.0, self), (1.0, self.b.as_expr(other))])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.b.lincomb([(float(other), self)])
        return self.b.node("prod", [self, other])

    __rmul__ = __mul__

    def __neg__(self):
        return self.b.lincomb([(-1.0, self)])

    def __pow__(self, k):
        assert isinstance(k, int)
        return self.b.node("ipow", [self], {"k": k})


class FieldBuilder:
    def __init__(self, dim, region):
        self.dim = dim
        self.region = region
        self.nodes = []
        self._memo = {}

    def node(self, op, args, params=None):
        params = params or {}
        arg_ids = tuple(a.nid for a in args)
        key = (op, arg_ids, json.dumps(_jsonify(params), sort_keys=True))
        nid = self._memo.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append({"id": nid, "op": op, "args": list(arg_ids),
                               "params": _jsonify(params)})
            self._memo[key] = nid
        return Expr(self, nid)

    def as_expr(self, v):
        if isinstance(v, Expr):
            assert v.b is self
            return v
        return self.const(float(v))

    def const(self, c):
        return self.node("const", [], {"c": float(c)})

    def coord(self, i):
        assert 0 <= i < self.dim
        return self.node("coord", [], {"i": i})

    def coords(self):
        return [self.coord(i) for i in range(self.dim)]

    def lincomb(self, pairs, const=0.0):
        pairs = [(float(w), e) for w, e in pairs if w != 0.0]
        if not pairs:
            return self.const(const)
        if len(pairs) == 1 and pairs[0][0] == 1.0 and const == 0.0:
            return pairs[0][1]
        return self.node("sum", [e for _, e in pairs],
                         {"w": [w for w, _ in pairs], "b": float(const)})

    def prod(self, a, b):
        return self.node("prod", [a, b])

    def ipow(self, e, k):
        return self.node("ipow", [e], {"k": int(k)})

    def rpow(self, e, p):
        return self.node("rpow", [e], {"p": float(p)})

    def profile(self, prof, e):
        return self.node("profile", [e], {"profile": prof.to_json()})

    def rnorm(self, exprs):
        return self.node("rnorm", list(exprs))

    def sqnorm(self, exprs):
        return self.lincomb([(1.0, self.ipow(e, 2)) for e in exprs])

    def guarded(self, guard, inner):
        """inner where guard != 0, exact zero jet where guard == 0.

        Valid only when inner vanishes identically (with derivatives)
        on the region where guard is zero.
        """
        return self.node("guarded", [guard, inner])

    def restrict(self, e, region):
        return self.node("restrict", [e], {"region": region.to_json()})

    def subfield(self, inner, coord_exprs):
        """Compose: evaluate field `inner` at the given coordinate expressions."""
        assert len(coord_exprs) == inner.dim
        return self.node("subfield", list(coord_exprs),
                         {"nodes": inner.nodes, "root": inner.root})

    def bsinv(self, coord_exprs, c, v, prof, comp):
        return self.node("bsinv", list(coord_exprs),
                         {"c": list(map(float, c)), "v": list(map(float, v)),
                          "profile": prof.to_json(), "comp": int(comp)})

    def pinv(self, coord_exprs, pert_fields, comp):
        """Component of the inverse of z -> z + P(z); P given as scalar fields."""
        nodes, roots = _merge_vector_dag(pert_fields)
        return self.node("pinv", list(coord_exprs),
                         {"nodes": nodes, "roots": roots, "comp": int(comp)})

    def import_field(self, f):
        """Re-add another field's DAG into this builder; returns its root Expr."""
        mapping = {}

        def add(nid):
            if nid in mapping:
                return mapping[nid]
            nd = f._by_id[nid]
            args = [Expr(self, add(a)) for a in nd.get("args", [])]
            e = self.node(nd["op"], args, nd.get("params", {}))
            mapping[nid] = e.nid
            return e.nid

        return Expr(self, add(f.root))

    def build(self, root):
        # keep only nodes reachable from the root, in topological order
        keep = set()
        stack = [root.nid]
        while stack:
            nid = stack.pop()
            if nid in keep:
                continue
            keep.add(nid)
            stack.extend(self.nodes[nid].get("args", []))
        old = sorted(keep)
        remap = {o: i for i, o in enumerate(old)}
        nodes = []
        for o in old:
            nd = self.nodes[o]
            nodes.append({"id": remap[o], "op": nd["op"],
                          "args": [remap[a] for a in nd.get("args", [])],
                          "params": nd.get("params", {})})
        return ScalarField(self.dim, nodes, remap[root.nid], self.region)


def _merge_vector_dag(fields):
    """Merge scalar fields of common dim into one node list with many roots."""
    b = FieldBuilder(fields[0].dim, fields[0].region)
    roots = [b.import_field(f).nid for f in fields]
    return b.nodes, roots


# ---------------------------------------------------------------------------
# field algebra on whole fields

def field_sum(fields, weights=None, const=0.0, region=None):
    f0 = fields[0]
    if any(f.dim != f0.dim for f in fields):
        raise DimMismatch("field dims disagree")
    weights = weights or [1.0] * len(fields)
    b = FieldBuilder(f0.dim, region or f0.region)
    roots = [b.import_field(f) for f in fields]
    return b.build(b.lincomb(list(zip(weights, roots)), const))


def field_product(f1, f2, region=None):
    if f1.dim != f2.dim:
        raise DimMismatch("field dims disagree")
    b = FieldBuilder(f1.dim, region or f1.region)
    return b.build(b.prod(b.import_field(f1), b.import_field(f2)))


def field_scale(f, c):
    return field_sum([f], [float(c)])

def field_power(f, k):
    b = FieldBuilder(f.dim, f.region)
    return b.build(b.ipow(b.import_field(f), int(k)))


def compose_profile(prof, f):
    b = FieldBuilder(f.dim, f.region)
    return b.build(b.profile(prof, b.import_field(f)))


def constant_field(dim, c, region):
    b = FieldBuilder(dim, region)
    return b.build(b.const(c))


def coordinate_field(dim, i, region):
    b = FieldBuilder(dim, region)
    return b.build(b.coord(i))
