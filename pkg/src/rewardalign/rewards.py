"""Reward functions consumed by the alignment samplers.

Four families: linear, (concave-oriented) quadratic, low-dimensional
``f(Ax)`` with a first-order or value oracle, and log-sum-exp.  Lipschitz
constants are caller-declared and checked opportunistically, never
estimated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ValidationError

# First-order oracles must be valid slightly beyond the declared ball.
DOMAIN_SLACK = 1e-3


@dataclass
class LowDimFunction:
    """Low-dimensional function with a value oracle and an optional
    subgradient oracle.

    ``value`` accepts a single point ``(k,)`` or a batch ``(n, k)`` and
    returns a scalar / ``(n,)`` array.  ``grad`` takes a single point.
    ``lipschitz`` is the declared constant on the ball of radius
    ``radius``; oracles must remain valid on radius*(1 + 1e-3).
    """

    value: Callable[[np.ndarray], np.ndarray]
    k: int
    lipschitz: float
    radius: float
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    convex: bool = False

    def __call__(self, u):
        return self.value(np.asarray(u, dtype=float))


def first_order(f: LowDimFunction, u: np.ndarray):
    """Query the first-order oracle: returns ``(f(u), g)`` with ``g`` a
    subgradient.  Raises outside the declared domain ball (with its small
    validity margin) or when no subgradient oracle is present.
    """
    u = np.asarray(u, dtype=float)
    if f.grad is None:
        raise ValidationError("no subgradient oracle declared for this function")
    limit = f.radius * (1.0 + DOMAIN_SLACK) + 1e-12
    if np.linalg.norm(u) > limit:
        raise ValidationError(
            f"first-order query at norm {np.linalg.norm(u):.6g} outside the "
            f"declared ball of radius {f.radius:.6g}")
    val = float(f.value(u))
    g = np.asarray(f.grad(u), dtype=float)
    if f.convex and f.lipschitz > 0 and np.linalg.norm(g) > f.lipschitz * (1 + 1e-9):
        raise ValidationError(
            f"subgradient norm {np.linalg.norm(g):.6g} exceeds the declared "
            f"Lipschitz constant {f.lipschitz:.6g}")
    return val, g


def _min_norm_in_hull(vectors: np.ndarray) -> np.ndarray:
    """Exact minimum-norm point of the convex hull of a handful of vectors
    (subset enumeration of the simplex QP's KKT systems)."""
    t = vectors.shape[0]
    if t == 1:
        return vectors[0].copy()
    if t > 12:  # ties this wide only arise from degenerate inputs
        return vectors[np.argmin(np.linalg.norm(vectors, axis=1))].copy()
    best, best_sq = None, np.inf
    for mask in range(1, 1 << t):
        idx = [i for i in range(t) if mask >> i & 1]
        S = vectors[idx]
        j = len(idx)
        G = S @ S.T
        kkt = np.zeros((j + 1, j + 1))
        kkt[:j, :j] = 2.0 * G
        kkt[:j, j] = 1.0
        kkt[j, :j] = 1.0
        rhs = np.zeros(j + 1)
        rhs[j] = 1.0
        lam = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:j]
        if np.any(lam < -1e-12) or abs(lam.sum() - 1.0) > 1e-9:
            continue
        point = lam @ S
        sq = float(point @ point)
        if sq < best_sq - 1e-15:
            best_sq, best = sq, point
    return best if best is not None else vectors[0].copy()


def make_max_affine(pieces) -> LowDimFunction:
    """Convex max of affine pieces ``f(u) = max_i (<s_i, u> + c_i)``.

    The subgradient at a kink is the minimum-norm element of the convex
    hull of the maximizing slopes (so |.| at 0 yields 0), which makes runs
    reproducible.  L is ``max_i ||s_i||``.
    """
    if len(pieces) == 0:
        raise ValidationError("need at least one affine piece")
    slopes = np.atleast_2d(np.asarray([p[0] for p in pieces], dtype=float))
    offsets = np.asarray([p[1] for p in pieces], dtype=float)
    k = slopes.shape[1]
    L = float(np.max(np.linalg.norm(slopes, axis=1)))

    def value(u):
        u = np.asarray(u, dtype=float)
        vals = np.atleast_2d(u) @ slopes.T + offsets
        out = vals.max(axis=1)
        return float(out[0]) if u.ndim == 1 else out

    def grad(u):
        vals = slopes @ np.asarray(u, dtype=float) + offsets
        top = np.flatnonzero(vals >= vals.max() - 1e-12)
        if len(top) == 1:
            return slopes[top[0]].copy()
        return _min_norm_in_hull(slopes[top])

    return LowDimFunction(value=value, k=k, lipschitz=L, radius=np.inf,
                          grad=grad, convex=True)


def make_logsumexp_function(weights, slopes) -> LowDimFunction:
    """Smooth convex ``f(u) = log sum_i w_i exp(<z_i, u>)`` with exact
    gradient (softmax-weighted slope average)."""
    w = np.asarray(weights, dtype=float)
    z = np.atleast_2d(np.asarray(slopes, dtype=float))
    if np.any(w <= 0):
        raise ValidationError("log-sum-exp weights must be positive")
    logw = np.log(w)
    L = float(np.max(np.linalg.norm(z, axis=1)))

    def value(u):
        u = np.asarray(u, dtype=float)
        scores = np.atleast_2d(u) @ z.T + logw
        out = logsumexp(scores, axis=1)
        return float(out[0]) if u.ndim == 1 else out

    def grad(u):
        scores = z @ np.asarray(u, dtype=float) + logw
        return softmax(scores) @ z

    return LowDimFunction(value=value, k=z.shape[1], lipschitz=L,
                          radius=np.inf, grad=grad, convex=True)


# ---------------------------------------------------------------------------
# Reward variants
# ---------------------------------------------------------------------------

class LinearReward:
    """r(x) = <theta, x>."""

    def __init__(self, theta):
        self.theta = np.asarray(theta, dtype=float)
        self.d = self.theta.shape[0]

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.theta

    def grad(self, x):
        return self.theta.copy()

    def to_dict(self):
        return {"type": "linear", "theta": self.theta.tolist()}


class QuadraticReward:
    """r(x) = -x'Bx + b'x + c with symmetric B.

    The sign convention orients B so that a positive semidefinite B means a
    concave reward (the regime where the proximal map is a convex program).
    """

    def __init__(self, B, b, c: float = 0.0):
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        self.c = float(c)
        if not np.allclose(self.B, self.B.T, atol=1e-12):
            raise ValidationError("B must be symmetric")
        if self.B.shape[0] != self.b.shape[0]:
            raise ValidationError("B and b dimensions disagree")
        self.d = self.b.shape[0]

    @property
    def concave(self) -> bool:
        return bool(np.linalg.eigvalsh(self.B)[0] >= -1e-10)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        xb = np.atleast_2d(x)
        out = -np.einsum("ni,ij,nj->n", xb, self.B, xb) + xb @ self.b + self.c
        return float(out[0]) if x.ndim == 1 else out

    def grad(self, x):
        return -2.0 * (self.B @ np.asarray(x, dtype=float)) + self.b

    def to_dict(self):
        return {"type": "quadratic", "B": self.B.tolist(),
                "b": self.b.tolist(), "c": self.c}


class LowRankReward:
    """r(x) = f(Ax) for a wide matrix A and a low-dimensional function f."""

    def __init__(self, A, f: LowDimFunction):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.f = f
        if self.A.shape[0] != f.k:
            raise ValidationError("A row count must match f's dimension")
        self.k, self.d = self.A.shape
        if not np.all(np.isfinite(self.A)):
            raise ValidationError("A must be finite")
        self.op_norm = float(np.linalg.norm(self.A, 2))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        u = x @ self.A.T
        return self.f.value(u)

    def to_dict(self):
        raise ValidationError("black-box low-rank rewards are not serializable; "
                              "use the max-affine or logsumexp forms")


class LogSumExpReward(LowRankReward):
    """r(x) = log sum_i w_i exp(<z_i, Ax>), convex and smooth."""

    def __init__(self, weights, slopes, A):
        self.weights = np.asarray(weights, dtype=float)
        self.slopes = np.atleast_2d(np.asarray(slopes, dtype=float))
        super().__init__(A, make_logsumexp_function(weights, slopes))

    def envelope_pieces(self):
        """Exact log-sum-exp pieces (slopes, log-weights) of this reward."""
        return self.slopes.copy(), np.log(self.weights)

    def to_dict(self):
        return {"type": "logsumexp", "w": self.weights.tolist(),
                "z": self.slopes.tolist(), "A": self.A.tolist()}


class MaxAffineLowRankReward(LowRankReward):
    """Serializable low-rank reward with a max-affine f."""

    def __init__(self, A, pieces, radius=None):
        f = make_max_affine(pieces)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if radius is None:
            radius = np.inf
        f.radius = float(radius)
        super().__init__(A, f)
        self.pieces = [(np.asarray(s, dtype=float), float(c)) for s, c in pieces]

    def to_dict(self):
        return {"type": "lowrank_maxaffine", "A": self.A.tolist(),
                "pieces": [[s.tolist(), c] for s, c in self.pieces],
                "L": self.f.lipschitz, "R": self.f.radius}


def reward_from_dict(spec: dict):
    kind = spec.get("type")
    if kind == "linear":
        return LinearReward(spec["theta"])
    if kind == "quadratic":
        return QuadraticReward(spec["B"], spec["b"], spec.get("c", 0.0))
    if kind == "lowrank_maxaffine":
        pieces = [(p[0], p[1]) for p in spec["pieces"]]
        r = MaxAffineLowRankReward(spec["A"], pieces, spec.get("R"))
        if "L" in spec:
            declared = float(spec["L"])
            if declared + 1e-12 < r.f.lipschitz:
                raise ValidationError(
                    f"declared L={declared} below the max piece slope "
                    f"{r.f.lipschitz:.6g}")
            r.f.lipschitz = declared
        return r
    if kind == "logsumexp":
        return LogSumExpReward(spec["w"], spec["z"], spec["A"])
    raise ValidationError(f"unknown reward type {kind!r}")


def load_reward(path):
    with open(path) as fh:
        return reward_from_dict(json.load(fh))
