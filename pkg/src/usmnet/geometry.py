"""Random 2-D coronary bifurcations, their patch meshes and wall landmarks.

Lengths are in millimetres.  The trunk runs along +x from the inlet at x=0
to the branching point (L0, 0); the two branches leave at half-angles
theta1 (upward) and theta2 (downward).  Walls are explicit graphs:

    top wall      y = y_top(x)     trunk wall blended into the upper branch
    bottom wall   y = y_bottom(x)  trunk wall blended into the lower branch
    front wall    x = x_front(y)   inner branch walls blended at the carina

The blends use a compactly supported smooth maximum, so each wall agrees
exactly with its straight (or stenosed) tube away from the junction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from shapely.geometry import LinearRing, Polygon

TAGS = ("in", "out", "top", "bottom", "front")


class GeometryError(ValueError):
    pass


class MeshError(RuntimeError):
    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


def smooth_max(a, b, k):
    """max(a, b) rounded over |a - b| < k; exact outside that band."""
    d = np.abs(a - b)
    return np.maximum(a, b) + np.where(d < k, (k - d) ** 2 / (4 * k), 0.0)


def smooth_min(a, b, k):
    return -smooth_max(-a, -b, k)


@dataclass(frozen=True)
class Stenosis:
    segment: str  # "trunk", "upper" or "lower"
    position: float  # mm along the segment axis
    half_length: float  # mm
    severity: float  # fractional area reduction

    def factor(self, t):
        """Radius multiplier along the axis coordinate ``t``."""
        depth = 1.0 - math.sqrt(1.0 - self.severity)
        z = (np.asarray(t, dtype=float) - self.position) / self.half_length
        bump = np.where(np.abs(z) < 1, np.cos(0.5 * np.pi * z) ** 2, 0.0)
        return 1.0 - depth * bump


@dataclass(frozen=True)
class BifurcationParams:
    r0: float = 1.5
    r1: float = 1.2
    r2: float = 1.2
    theta1: float = 35.0  # degrees
    theta2: float = 35.0
    trunk_length: float = 10.0
    branch_length: float = 10.0
    stenoses: tuple = ()
    blend: float = 0.6  # smoothing band of the wall junctions, mm

    def to_dict(self):
        d = asdict(self)
        d["stenoses"] = [asdict(s) for s in self.stenoses]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stenoses"] = tuple(Stenosis(**s) for s in d.get("stenoses", ()))
        return cls(**d)


@dataclass(frozen=True)
class ParamRanges:
    r0: tuple = (1.2, 2.0)
    r_branch: tuple = (0.8, 1.6)
    theta: tuple = (20.0, 50.0)
    severity: tuple = (0.0, 0.6)
    stenosis_probability: float = 0.5
    half_length: tuple = (1.5, 3.0)
    trunk_position: tuple = (0.3, 0.6)  # fractions of the trunk length
    branch_position: tuple = (0.35, 0.65)
    trunk_length: float = 10.0
    branch_length: float = 10.0

    def validate(self):
        for name in ("r0", "r_branch", "theta", "severity", "half_length", "trunk_position", "branch_position"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"range {name} has lo > hi")
        if self.r0[0] <= 0 or self.r_branch[0] <= 0:
            raise ValueError("radii must be positive")
        if not (0 < self.theta[0] and self.theta[1] < 80):
            raise ValueError("branch half-angles must lie in (0, 80) degrees")
        if not (0 <= self.severity[0] and self.severity[1] < 1):
            raise ValueError("stenosis severity must lie in [0, 1)")
        if not 0 <= self.stenosis_probability <= 1:
            raise ValueError("stenosis probability must lie in [0, 1]")
        return self


class _WallGeometry:
    """Shared behaviour: landmarks, ring, serialization."""

    kind = "abstract"

    def landmark_stations(self, mode):
        raise NotImplementedError

    def wall_extent(self):
        raise NotImplementedError

    def ring(self, n=400):
        raise NotImplementedError

    def polygon(self):
        return Polygon(self.ring())

    def validate(self):
        ring = LinearRing(self.ring())
        if not ring.is_simple or not Polygon(ring).is_valid:
            raise GeometryError("boundary is not a simple closed curve")
        return self


class StraightChannel(_WallGeometry):
    """Rectangular channel [0, L] x [-w, w]; the degenerate test geometry."""

    kind = "channel"

    def __init__(self, length=20.0, half_width=1.5, geometry_id="channel"):
        if length <= 0 or half_width <= 0:
            raise GeometryError("channel dimensions must be positive")
        self.length = float(length)
        self.half_width = float(half_width)
        self.id = geometry_id

    def y_top(self, x):
        return np.full(np.shape(x), self.half_width)

    def y_bottom(self, x):
        return np.full(np.shape(x), -self.half_width)

    def wall_extent(self):
        return 0.0, self.length

    def ring(self, n=4):
        L, w = self.length, self.half_width
        return np.array([[0, -w], [L, -w], [L, w], [0, w]], dtype=float)

    def landmark_stations(self, mode):
        return landmark_stations(mode, trunk_length=self.length / 2, branch_reach=self.length / 4)

    def to_dict(self):
        return {"kind": self.kind, "id": self.id, "length": self.length, "half_width": self.half_width}

    def mesh(self, target_h):
        L, w = self.length, self.half_width
        nx = max(1, math.ceil(L / target_h - 1e-9))
        ny = max(1, math.ceil(2 * w / target_h - 1e-9))
        xs = np.linspace(0, L, nx + 1)
        ys = np.linspace(-w, w, ny + 1)
        bottom = np.column_stack([xs, np.full(nx + 1, -w)])
        top = np.column_stack([xs, np.full(nx + 1, w)])
        left = np.column_stack([np.zeros(ny + 1), ys])
        right = np.column_stack([np.full(ny + 1, L), ys])
        P = _coons(bottom, top, left, right)
        b = _MeshBuilder()
        b.add_patch(P)
        b.tag(bottom, "bottom")
        b.tag(top, "top")
        b.tag(left, "in")
        b.tag(right, "out")
        return b.finish()


class BifurcationGeometry(_WallGeometry):
    kind = "bifurcation"

    def __init__(self, params: BifurcationParams, geometry_id="geometry"):
        self.params = params
        self.id = geometry_id
        p = params
        self.L0 = p.trunk_length
        self.t1, self.t2 = math.radians(p.theta1), math.radians(p.theta2)
        by_seg = {"trunk": [], "upper": [], "lower": []}
        for s in p.stenoses:
            if s.segment not in by_seg:
                raise GeometryError(f"unknown stenosis segment {s.segment!r}")
            if not 0 <= s.severity < 1 or s.half_length <= 0:
                raise GeometryError("invalid stenosis descriptor")
            by_seg[s.segment].append(s)
        self._sten = by_seg
        self._apex = None
        self._tables = {}

    # radii along the three axes
    def _radius(self, seg, t, nominal):
        r = np.full(np.shape(t), float(nominal))
        for s in self._sten[seg]:
            r = r * s.factor(t)
        return r

    def r_trunk(self, x):
        return self._radius("trunk", x, self.params.r0)

    def _branch_wall(self, branch, outer):
        """Wall of a branch at exact normal offset r(t) from its axis.

        Returns (x, y) samples along the axis coordinate; the axis extends
        behind the branching point so the junction blend has data.
        """
        key = (branch, outer)
        if key not in self._tables:
            p = self.params
            th, r = (self.t1, p.r1) if branch == "upper" else (self.t2, p.r2)
            sgn = 1.0 if branch == "upper" else -1.0
            d = np.array([math.cos(th), sgn * math.sin(th)])
            n = np.array([-sgn * math.sin(th), math.cos(th)])  # points away from the carina for upper
            # fixed step so that walls agree wherever two parameter sets agree
            t = np.unique(np.concatenate([-3 * self.L0 + 0.005 * np.arange(int((3 * self.L0 + p.branch_length + 2) / 0.005)),
                                          [p.branch_length]]))
            off = self._radius(branch, t, r) * (1.0 if outer else -1.0) * sgn
            self._tables[key] = (self.L0 + t * d[0] + off * n[0], t * d[1] + off * n[1], t)
        return self._tables[key]

    def _outer_upper(self, x):
        X, Y, _ = self._branch_wall("upper", True)
        return np.interp(x, X, Y)

    def _outer_lower(self, x):
        X, Y, _ = self._branch_wall("lower", True)
        return np.interp(x, X, Y)

    def _inner_upper(self, y):
        X, Y, _ = self._branch_wall("upper", False)
        return np.interp(y, Y, X)

    def _inner_lower(self, y):
        X, Y, _ = self._branch_wall("lower", False)
        return np.interp(y, Y[::-1], X[::-1])

    def _monotone(self):
        """Each branch wall must be a graph in the coordinate used above."""
        ok = True
        for br in ("upper", "lower"):
            X, Y, _ = self._branch_wall(br, True)
            ok &= bool(np.all(np.diff(X) > 0))
            X, Y, _ = self._branch_wall(br, False)
            dy = np.diff(Y)
            ok &= bool(np.all(dy > 0) if br == "upper" else np.all(dy < 0))
        return ok

    def y_top(self, x):
        return smooth_max(self.r_trunk(x), self._outer_upper(x), self.params.blend)

    def y_bottom(self, x):
        return smooth_min(-self.r_trunk(x), self._outer_lower(x), self.params.blend)

    def x_front(self, y):
        return smooth_max(self._inner_upper(y), self._inner_lower(y), self.params.blend)

    # key points
    def _outlet(self, branch):
        """(outer, inner) end points: the wall points at axis coordinate L_b."""
        pts = []
        for outer in (True, False):
            X, Y, t = self._branch_wall(branch, outer)
            k = int(np.searchsorted(t, self.params.branch_length))
            pts.append(np.array([X[k], Y[k]]))
        (xo, _), (_, yi) = pts
        if branch == "upper":
            return np.array([xo, float(self.y_top(xo))]), np.array([float(self.x_front(yi)), yi])
        return np.array([xo, float(self.y_bottom(xo))]), np.array([float(self.x_front(yi)), yi])

    @property
    def outlet_upper(self):
        return self._outlet("upper")

    @property
    def outlet_lower(self):
        return self._outlet("lower")

    @property
    def apex(self):
        """Left-most point of the front wall."""
        if self._apex is None and self.is_symmetric:
            self._apex = np.array([float(self.x_front(0.0)), 0.0])
        if self._apex is None:
            from scipy.optimize import minimize_scalar

            lo = self.outlet_lower[1][1]
            hi = self.outlet_upper[1][1]
            ys = np.linspace(lo, hi, 2001)
            k = int(np.argmin(self.x_front(ys)))
            a, b = ys[max(k - 1, 0)], ys[min(k + 1, len(ys) - 1)]
            res = minimize_scalar(lambda y: float(self.x_front(y)), bounds=(a, b), method="bounded",
                                  options={"xatol": 1e-12})
            self._apex = np.array([float(self.x_front(res.x)), float(res.x)])
        return self._apex

    @property
    def is_symmetric(self):
        p = self.params
        mirrored = {"upper": "lower", "lower": "upper", "trunk": "trunk"}
        st = {(x.segment, x.position, x.half_length, x.severity) for x in p.stenoses}
        mirror = {(mirrored[a], b, c, d) for a, b, c, d in st}
        return p.r1 == p.r2 and p.theta1 == p.theta2 and st == mirror

    @property
    def x_cut(self):
        """x of the trunk / branch patch interface."""
        return min(self.L0 - 0.5 * self.params.r0, self.apex[0] - 0.5 * self.params.r0)

    def wall_extent(self):
        return 0.0, float(max(self.outlet_upper[0][0], self.outlet_lower[0][0]))

    def landmark_stations(self, mode):
        return landmark_stations(mode, trunk_length=self.L0)

    def ring(self, n=400):
        (uo, ui), (lo, li) = self.outlet_upper, self.outlet_lower
        xb = np.linspace(0.0, lo[0], n)
        bottom = np.column_stack([xb, self.y_bottom(xb)])
        yf = np.linspace(li[1], ui[1], n)
        front = np.column_stack([self.x_front(yf), yf])
        xt = np.linspace(uo[0], 0.0, n)
        top = np.column_stack([xt, self.y_top(xt)])
        return np.vstack([bottom, front, top])

    def validate(self):
        p = self.params
        k = p.blend
        if not self._monotone():
            raise GeometryError("stenosis too steep for the branch angle")
        (uo, ui), (lo, li) = self.outlet_upper, self.outlet_lower
        # junction blends must be inactive at the outlets so they stay perpendicular
        if abs(float(self._outer_upper(uo[0]) - self.r_trunk(uo[0]))) <= k:
            raise GeometryError("upper outlet inside the junction blend")
        if abs(float(self._outer_lower(lo[0]) + self.r_trunk(lo[0]))) <= k:
            raise GeometryError("lower outlet inside the junction blend")
        if abs(float(self._inner_upper(ui[1]) - self._inner_lower(ui[1]))) <= k or \
                abs(float(self._inner_upper(li[1]) - self._inner_lower(li[1]))) <= k:
            raise GeometryError("outlet inside the carina blend")
        xs = np.linspace(0, self.x_cut, 200)
        if np.any(self.y_top(xs) - self.y_bottom(xs) <= 0):
            raise GeometryError("trunk walls cross")
        a = self.apex
        if not (self.y_bottom(self.x_cut) < a[1] < self.y_top(self.x_cut)):
            raise GeometryError("carina apex outside the trunk")
        if a[0] <= self.x_cut:
            raise GeometryError("carina apex upstream of the patch interface")
        return super().validate()

    def to_dict(self):
        d = {"kind": self.kind, "id": self.id, "params": self.params.to_dict()}
        d["control_points"] = {name: pts.tolist() for name, pts in self.control_points().items()}
        return d

    def control_points(self, n=41):
        """Wall samples for export; the walls themselves are analytic in the parameters."""
        (uo, ui), (lo, li) = self.outlet_upper, self.outlet_lower
        xt = np.linspace(0, uo[0], n)
        xb = np.linspace(0, lo[0], n)
        yf = np.linspace(li[1], ui[1], n)
        return {"top": np.column_stack([xt, self.y_top(xt)]),
                "bottom": np.column_stack([xb, self.y_bottom(xb)]),
                "front": np.column_stack([self.x_front(yf), yf]),
                "in": np.array([[0.0, float(self.y_bottom(0.0))], [0.0, float(self.y_top(0.0))]]),
                "out_upper": np.array([ui, uo]), "out_lower": np.array([lo, li])}

    def mesh(self, target_h):
        h = float(target_h)
        xc = self.x_cut
        A = self.apex
        C = np.array([xc, A[1]])
        (uo, ui), (lo, li) = self.outlet_upper, self.outlet_lower

        p = self.params
        n_t = max(1, math.ceil(xc / h - 1e-9))
        t_bot = _graph_nodes(self.y_bottom, 0.0, xc, n_t)
        t_top = _graph_nodes(self.y_top, 0.0, xc, n_t)
        yb, yt = t_bot[-1, 1], t_top[-1, 1]
        n_u = max(1, math.ceil(max(yt - A[1], 2 * p.r1) / h - 1e-9))
        n_l = max(1, math.ceil(max(A[1] - yb, 2 * p.r2) / h - 1e-9))

        n_ca = max(1, math.ceil((A[0] - xc) / h - 1e-9))
        ca = _segment(C, A, n_ca)
        n_fu = max(1, math.ceil(_graph_length(self.x_front, A[1], ui[1]) / h - 1e-9))
        n_fl = max(1, math.ceil(_graph_length(self.x_front, A[1], li[1]) / h - 1e-9))
        fu = _graph_nodes(self.x_front, A[1], ui[1], n_fu, swap=True)
        fl = _graph_nodes(self.x_front, A[1], li[1], n_fl, swap=True)
        fu[0], fu[-1], fl[0], fl[-1] = A, ui, A, li

        # trunk patch; the inlet is split in the same proportion as the cut
        cut = np.vstack([_segment(t_bot[-1], C, n_l), _segment(C, t_top[-1], n_u)[1:]])
        y0b, y0t = t_bot[0, 1], t_top[0, 1]
        ym = y0b + (A[1] - yb) / (yt - yb) * (y0t - y0b)
        inlet = np.vstack([_segment(t_bot[0], np.array([0.0, ym]), n_l),
                           _segment(np.array([0.0, ym]), t_top[0], n_u)[1:]])
        # upper branch patch: bottom C->A->front, top = top wall, left = cut half, right = outlet
        u_bot = np.vstack([ca, fu[1:]])
        u_top = _graph_nodes(self.y_top, xc, uo[0], len(u_bot) - 1)
        u_top[0], u_top[-1] = t_top[-1], uo
        u_left = cut[n_l:]
        u_right = _segment(ui, uo, n_u)
        # lower branch patch, mirror image of the upper construction
        l_bot = np.vstack([ca, fl[1:]])
        l_top = _graph_nodes(self.y_bottom, xc, lo[0], len(l_bot) - 1)
        l_top[0], l_top[-1] = t_bot[-1], lo
        l_left = cut[:n_l + 1][::-1]
        l_right = _segment(li, lo, n_l)

        b = _MeshBuilder()
        b.add_patch(_coons(t_bot, t_top, inlet, cut))
        b.add_patch(_coons(u_bot, u_top, u_left, u_right))
        b.add_patch(_coons(l_bot, l_top, l_left, l_right))
        b.tag(inlet, "in")
        b.tag(t_top, "top")
        b.tag(u_top, "top")
        b.tag(t_bot, "bottom")
        b.tag(l_top, "bottom")
        b.tag(fu, "front")
        b.tag(fl, "front")
        b.tag(u_right, "out")
        b.tag(l_right, "out")
        return b.finish()


def landmark_stations(mode, trunk_length=10.0, branch_reach=5.0):
    """Fixed x stations: uniform along the trunk, then along the branches."""
    if mode == 26:
        nt, nb = 7, 6
    elif mode == 6:
        nt, nb = 2, 1
    else:
        raise ValueError("landmark mode must be 26 or 6")
    trunk = trunk_length * np.arange(1, nt + 1) / (nt + 1)
    branch = trunk_length + branch_reach * np.arange(1, nb + 1) / nb
    return np.concatenate([trunk, branch])


def extract_landmarks(geometry, mode=26, stations=None) -> np.ndarray:
    """Top-wall then bottom-wall y at the landmark stations."""
    xs = geometry.landmark_stations(mode) if stations is None else np.asarray(stations, dtype=float)
    lo, hi = geometry.wall_extent()
    if np.any(xs < lo) or np.any(xs > hi):
        raise GeometryError("landmark station outside the wall extent")
    if isinstance(geometry, BifurcationGeometry):
        if np.any(xs > geometry.outlet_upper[0][0]) or np.any(xs > geometry.outlet_lower[0][0]):
            raise GeometryError("landmark station beyond an outlet")
    return np.concatenate([geometry.y_top(xs), geometry.y_bottom(xs)])


def sample_params(rng, ranges: ParamRanges) -> BifurcationParams:
    u = rng.uniform
    r0 = u(*ranges.r0)
    r1, r2 = u(*ranges.r_branch), u(*ranges.r_branch)
    th1, th2 = u(*ranges.theta), u(*ranges.theta)
    sten = []
    for seg in ("trunk", "upper", "lower"):
        if rng.random() < ranges.stenosis_probability:
            span = ranges.trunk_length if seg == "trunk" else ranges.branch_length
            frac = ranges.trunk_position if seg == "trunk" else ranges.branch_position
            sten.append(Stenosis(seg, float(u(*frac) * span), float(u(*ranges.half_length)),
                                 float(u(*ranges.severity))))
    return BifurcationParams(float(r0), float(r1), float(r2), float(th1), float(th2),
                             ranges.trunk_length, ranges.branch_length, tuple(sten))


def generate_geometry(seed, param_ranges: Optional[ParamRanges] = None, max_tries=100,
                      geometry_id=None) -> BifurcationGeometry:
    """Random valid bifurcation; invalid draws are resampled up to ``max_tries``."""
    ranges = (param_ranges or ParamRanges()).validate()
    rng = np.random.default_rng(seed)
    gid = geometry_id if geometry_id is not None else f"bif_{seed}"
    last = None
    for _ in range(max_tries):
        g = BifurcationGeometry(sample_params(rng, ranges), gid)
        try:
            return g.validate()
        except GeometryError as err:
            last = err
    raise GeometryError(f"no valid geometry after {max_tries} draws (last: {last})")


def geometry_from_dict(d):
    if d["kind"] == "channel":
        return StraightChannel(d["length"], d["half_width"], d["id"])
    if d["kind"] == "bifurcation":
        return BifurcationGeometry(BifurcationParams.from_dict(d["params"]), d["id"])
    raise ValueError(f"unknown geometry kind {d['kind']!r}")


def save_geometry(path, geometry):
    with open(path, "w") as fh:
        json.dump(geometry.to_dict(), fh, indent=1, sort_keys=True)


def load_geometry(path):
    with open(path) as fh:
        return geometry_from_dict(json.load(fh))


# curve helpers

def _graph_length(f, a, b, n=2000):
    t = np.linspace(a, b, n)
    v = f(t)
    return float(np.sum(np.hypot(np.diff(t), np.diff(v))))


def _graph_nodes(f, a, b, n, swap=False, dense=4000):
    """n+1 nodes on the graph of f over [a, b], equally spaced in arclength.

    With ``swap`` the graph is x = f(y) and nodes are returned as (f(t), t).
    """
    t = np.linspace(a, b, dense)
    v = f(t)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(t), np.diff(v)))])
    tn = np.interp(np.linspace(0, s[-1], n + 1), s, t)
    tn[0], tn[-1] = a, b
    vn = f(tn)
    return np.column_stack([vn, tn]) if swap else np.column_stack([tn, vn])


def _segment(p, q, n):
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    out = (1 - t) * p + t * q
    out[0], out[-1] = p, q
    return out


def _arc_param(P):
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(P, axis=0).T))])
    return s / s[-1]


def _along(P, sP, s):
    return np.column_stack([np.interp(s, sP, P[:, 0]), np.interp(s, sP, P[:, 1])])


def _coons(bottom, top, left, right):
    """Transfinite patch nodes (n+1, m+1, 2) from four matching node lists.

    bottom/top run left to right (m+1 nodes), left/right bottom to top (n+1).
    Boundary nodes are copied verbatim so neighbouring patches share them.
    """
    m, n = len(bottom) - 1, len(left) - 1
    if len(top) != m + 1 or len(right) != n + 1:
        raise MeshError("opposite patch sides need equal node counts")
    sB, sT, tL, tR = (_arc_param(P) for P in (bottom, top, left, right))
    P = np.empty((n + 1, m + 1, 2))
    for j in range(n + 1):
        s = (1 - tL[j]) * sB + tL[j] * sT
        t = (1 - sB) * tL[j] + sB * tR[j]
        Bs, Ts = _along(bottom, sB, s), _along(top, sT, s)
        Lt, Rt = _along(left, tL, t), _along(right, tR, t)
        s, t = s[:, None], t[:, None]
        P[j] = ((1 - t) * Bs + t * Ts + (1 - s) * Lt + s * Rt
                - ((1 - s) * (1 - t) * bottom[0] + s * (1 - t) * bottom[-1]
                   + (1 - s) * t * top[0] + s * t * top[-1]))
    P[0], P[-1], P[:, 0], P[:, -1] = bottom, top, left, right
    return P


class _MeshBuilder:
    def __init__(self):
        self.index = {}
        self.nodes = []
        self.tris = []
        self.edge_tags = {}

    def _id(self, p):
        key = (float(p[0]), float(p[1]))
        k = self.index.get(key)
        if k is None:
            k = self.index[key] = len(self.nodes)
            self.nodes.append(key)
        return k

    def add_patch(self, P):
        n1, m1 = P.shape[:2]
        ids = np.array([[self._id(P[j, i]) for i in range(m1)] for j in range(n1)])
        quads = []
        for j in range(n1 - 1):
            for i in range(m1 - 1):
                quads.append((ids[j, i], ids[j, i + 1], ids[j + 1, i + 1], ids[j + 1, i]))
        X = np.array(self.nodes)
        q = np.array(quads)
        # orientation of the patch parameterization: +1 counter-clockwise
        area = _signed_area(X, q[:, [0, 1, 2]]) + _signed_area(X, q[:, [0, 2, 3]])
        sign = 1.0 if area.sum() > 0 else -1.0
        d02 = np.hypot(*(X[q[:, 0]] - X[q[:, 2]]).T)
        d13 = np.hypot(*(X[q[:, 1]] - X[q[:, 3]]).T)
        cy = X[q].mean(axis=1)[:, 1]
        tie = np.abs(d02 - d13) <= 1e-12 * np.maximum(d02, d13)
        use02 = np.where(tie, cy * sign >= 0, d02 < d13)
        t1 = np.where(use02[:, None], q[:, [0, 1, 2]], q[:, [0, 1, 3]])
        t2 = np.where(use02[:, None], q[:, [0, 2, 3]], q[:, [1, 2, 3]])
        tris = np.vstack([t1, t2])
        a = _signed_area(X, tris) * sign
        bad = np.flatnonzero(a <= 1e-14 * np.max(np.abs(a)))
        if bad.size:
            raise MeshError(f"inverted or degenerate element {len(self.tris) + bad[0]}",
                            element=len(self.tris) + int(bad[0]))
        if sign < 0:
            tris = tris[:, [0, 2, 1]]
        self.tris.extend(map(tuple, tris))

    def tag(self, side, name):
        ids = [self.index[(float(p[0]), float(p[1]))] for p in side]
        for a, b in zip(ids[:-1], ids[1:]):
            key = (min(a, b), max(a, b))
            if key in self.edge_tags and self.edge_tags[key] != name:
                raise MeshError(f"edge {key} tagged twice")
            self.edge_tags[key] = name

    def finish(self):
        X = np.array(self.nodes)
        T = _lawson(X, np.array(self.tris), set(self.edge_tags))
        mesh = TriMesh(X, T, np.array(list(self.edge_tags), dtype=np.int64),
                       np.array([TAGS.index(v) for v in self.edge_tags.values()], dtype=np.int64))
        mesh.check()
        return mesh


def _signed_area(X, T):
    a, b, c = X[T[:, 0]], X[T[:, 1]], X[T[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def _angles(X, at, p, q):
    u, v = X[p] - X[at], X[q] - X[at]
    return np.arctan2(np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]), np.einsum("kd,kd->k", u, v))


def _edge_pairs(T):
    """Interior edges as (a, b, t1, c, t2, d) with c, d the opposite vertices."""
    m = len(T)
    e = np.sort(np.stack([T[:, [0, 1]], T[:, [1, 2]], T[:, [2, 0]]], axis=1).reshape(-1, 2), axis=1)
    opp = T[:, [2, 0, 1]].ravel()
    tid = np.repeat(np.arange(m), 3)
    order = np.lexsort((e[:, 1], e[:, 0]))
    es = e[order]
    i = np.flatnonzero(np.all(es[1:] == es[:-1], axis=1))
    f, g = order[i], order[i + 1]
    return e[f, 0], e[f, 1], tid[f], opp[f], tid[g], opp[g]


def _lawson(X, T, fixed, tol=1e-12, max_sweeps=50):
    """Flip interior edges until every one is locally Delaunay.

    With opposite angles summing to at most pi the P1 stiffness matrix has
    non-positive off-diagonals, which gives the discrete maximum principle.
    """
    T = T.copy()
    fixed_keys = {a * len(X) + b for a, b in fixed}
    for _ in range(max_sweeps):
        a, b, t1, c, t2, d = _edge_pairs(T)
        bad = _angles(X, c, a, b) + _angles(X, d, a, b) > np.pi + tol
        flipped = False
        touched = set()
        for k in np.flatnonzero(bad):
            if int(a[k]) * len(X) + int(b[k]) in fixed_keys or t1[k] in touched or t2[k] in touched:
                continue
            n1 = np.array([[c[k], a[k], d[k]], [c[k], d[k], b[k]]])
            area = _signed_area(X, n1)
            if np.any(area <= 0):
                n1 = n1[:, [0, 2, 1]]
                area = -area
            if np.any(area <= 0):
                continue  # non-convex quad, flip impossible
            T[t1[k]], T[t2[k]] = n1
            touched.update((t1[k], t2[k]))
            flipped = True
        if not flipped:
            break
    return T


@dataclass
class TriMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray  # boundary edges (e, 2)
    edge_tags: np.ndarray  # index into TAGS
    _locator: Optional[object] = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self):
        return len(self.nodes)

    def areas(self):
        return _signed_area(self.nodes, self.triangles)

    def check(self):
        """Positive orientation, conformity and one tag per boundary edge."""
        a = self.areas()
        bad = np.flatnonzero(a <= 0)
        if bad.size:
            raise MeshError(f"inverted or degenerate element {bad[0]}", element=int(bad[0]))
        T = self.triangles
        e = np.sort(np.stack([T[:, [0, 1]], T[:, [1, 2]], T[:, [2, 0]]], axis=1).reshape(-1, 2), axis=1)
        uniq, count = np.unique(e, axis=0, return_counts=True)
        if count.max() > 2:
            raise MeshError("edge shared by more than two triangles")
        boundary = {(int(p), int(q)) for p, q in uniq[count == 1]}
        tagged = {(int(p), int(q)) for p, q in self.edges}
        if boundary != tagged or len(tagged) != len(self.edges):
            raise MeshError("boundary edges and tags disagree")
        return self

    def tag_nodes(self, *names) -> np.ndarray:
        """Sorted node ids on boundary edges carrying any of ``names``."""
        codes = [TAGS.index(n) for n in names]
        sel = np.isin(self.edge_tags, codes)
        return np.unique(self.edges[sel])

    def boundary_edges(self, name):
        return self.edges[self.edge_tags == TAGS.index(name)]

    def locator(self):
        if self._locator is None:
            from .fem import PointLocator

            self._locator = PointLocator(self)
        return self._locator

    def save(self, path, extra=None):
        """Text header line (JSON) followed by little-endian arrays."""
        arrays = {"nodes": self.nodes.astype("<f8"), "triangles": self.triangles.astype("<i8"),
                  "edges": self.edges.astype("<i8"), "edge_tags": self.edge_tags.astype("<i8")}
        for k, v in (extra or {}).items():
            arrays[k] = np.asarray(v, dtype="<f8")
        header = {"format": "usmnet-mesh", "version": 1, "tags": list(TAGS),
                  "arrays": [[k, v.dtype.str, list(v.shape)] for k, v in arrays.items()]}
        with open(path, "wb") as fh:
            fh.write((json.dumps(header) + "\n").encode())
            for v in arrays.values():
                fh.write(np.ascontiguousarray(v).tobytes())

    @classmethod
    def load(cls, path, with_extra=False):
        raw = open(path, "rb").read()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl])
        if header.get("format") != "usmnet-mesh" or header.get("version") != 1:
            raise ValueError("not a version-1 mesh file")
        off = nl + 1
        arrays = {}
        for name, dt, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(shape)
            off += arr.nbytes
            arrays[name] = arr.astype(np.int64 if dt.endswith("i8") else float)
        mesh = cls(arrays.pop("nodes"), arrays.pop("triangles"), arrays.pop("edges"), arrays.pop("edge_tags"))
        return (mesh, arrays) if with_extra else mesh


def mesh(geometry, target_h) -> TriMesh:
    if target_h <= 0:
        raise ValueError("target_h must be positive")
    return geometry.mesh(target_h)


def symmetric_params(**kw) -> BifurcationParams:
    """Mirror-symmetric bifurcation with no stenoses."""
    base = BifurcationParams()
    p = replace(base, **kw)
    return replace(p, r2=p.r1, theta2=p.theta1, stenoses=())
