"""Base distributions with exact densities, exact samplers, and score oracles.

Two concrete base families are supported: truncated Gaussian mixtures and
finite atom sets, both confined to a Euclidean ball of known radius.  Each
provides closed-form noised scores (the law of ``sqrt(1-sigma^2) X + sigma Z``)
and an exact sampler, plus a score-oracle-only reverse-diffusion sampler for
the regime where the density is not available.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

from .errors import ConfigurationError, NumericalError, ValidationError

# Untruncated mass allowed outside the support ball at construction time.
SUPPORT_MASS_TOL = 1e-10

# Reverse-process schedule (geometric in sigma).
SIGMA_MAX = 0.995
SIGMA_MIN = 1e-3


def project_ball(x: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the centered ball of the given radius.

    Accepts a single vector ``(d,)`` or a batch ``(n, d)``.
    """
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    scale = np.where(norms > radius, radius / np.maximum(norms, 1e-300), 1.0)
    return x * scale


@dataclass(frozen=True)
class NoiseLevel:
    sigma: float

    def __post_init__(self):
        if not (0.0 < self.sigma < 1.0):
            raise ValidationError(f"sigma must be in (0,1), got {self.sigma}")

    @property
    def a(self) -> float:
        """Signal scale sqrt(1 - sigma^2)."""
        return float(np.sqrt(1.0 - self.sigma**2))


def _as_noise(sigma) -> NoiseLevel:
    return sigma if isinstance(sigma, NoiseLevel) else NoiseLevel(float(sigma))


@dataclass(frozen=True)
class SampleBatch:
    """Points produced by one sampler invocation, with provenance."""

    points: np.ndarray  # (n, d)
    seed: int
    producer: str
    d: int
    C: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.d:
            raise ValidationError("points must have shape (n, d)")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def to_csv(self, path) -> None:
        header = ",".join(f"x{i}" for i in range(self.d))
        np.savetxt(path, self.points, delimiter=",", header=header,
                   comments="", fmt="%.17e")


class GaussianMixtureModel:
    """Gaussian mixture whose untruncated mass outside the support ball is
    negligible (< 1e-10 per a chi-square tail bound).

    Closed forms (density, score, moment generating function, linear tilt)
    ignore the truncation; the construction-time mass invariant keeps the
    induced error below every test tolerance.

    Attributes:
        weights: (J,) mixture weights.
        means: (J, d) component means.
        covs: (J, d, d) symmetric positive-definite covariances.
        support_radius: ball radius C.
    """

    def __init__(self, weights, means, covs, support_radius,
                 check_support: bool = True):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None, :, :]
        self.covs = covs
        self.support_radius = float(support_radius)
        self.support_checked = bool(check_support)

        J, d = self.means.shape
        if self.weights.shape != (J,) or self.covs.shape != (J, d, d):
            raise ValidationError("inconsistent mixture shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValidationError("weights must be a probability vector (1e-12)")
        if self.support_radius <= 0:
            raise ValidationError("support_radius must be positive")
        for j in range(J):
            if not np.allclose(self.covs[j], self.covs[j].T, atol=1e-12):
                raise ValidationError(f"covariance {j} is not symmetric")
        self._eigvals = np.linalg.eigvalsh(self.covs)
        if np.any(self._eigvals <= 0):
            raise ValidationError("covariances must be positive definite")
        if check_support:
            mass = self.mass_outside_ball()
            if mass >= SUPPORT_MASS_TOL:
                raise ConfigurationError(
                    f"untruncated mass outside the support ball is {mass:.3e} "
                    f">= {SUPPORT_MASS_TOL:.0e}; enlarge C or tighten the mixture")

        self._chols = np.linalg.cholesky(self.covs)
        # log-normalizers of each component
        self._logdets = 2.0 * np.sum(
            np.log(np.diagonal(self._chols, axis1=1, axis2=2)), axis=1)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def mass_outside_ball(self) -> float:
        """Chi-square tail upper bound on the untruncated mass outside B(C)."""
        C = self.support_radius
        total = 0.0
        for j in range(self.n_components):
            mu_norm = np.linalg.norm(self.means[j])
            lam_max = self._eigvals[j, -1]
            if C <= mu_norm:
                total += self.weights[j]
                continue
            t = (C - mu_norm) / np.sqrt(lam_max)
            total += self.weights[j] * chi2.sf(t * t, df=self.d)
        return float(total)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Untruncated mixture log-density at points ``x`` of shape (n, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        logps = np.empty((n, self.n_components))
        for j in range(self.n_components):
            diff = x - self.means[j]
            sol = np.linalg.solve(self._chols[j], diff.T)  # (d, n)
            maha = np.sum(sol**2, axis=0)
            logps[:, j] = (np.log(self.weights[j]) - 0.5 * maha
                           - 0.5 * self._logdets[j]
                           - 0.5 * self.d * np.log(2.0 * np.pi))
        return logsumexp(logps, axis=1)

    def to_dict(self) -> dict:
        return {"type": "gmm", "weights": self.weights.tolist(),
                "means": self.means.tolist(), "covs": self.covs.tolist(),
                "C": self.support_radius}


class DiscreteModel:
    """Finite atom set with probabilities; every atom inside the ball."""

    def __init__(self, atoms, probs, support_radius):
        self.atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        self.probs = np.asarray(probs, dtype=float)
        self.support_radius = float(support_radius)
        n, d = self.atoms.shape
        if self.probs.shape != (n,):
            raise ValidationError("probs must match the number of atoms")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValidationError("probs must be a probability vector (1e-12)")
        norms = np.linalg.norm(self.atoms, axis=1)
        if np.any(norms > self.support_radius * (1 + 1e-12)):
            raise ValidationError("every atom must have norm <= C")

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    def to_dict(self) -> dict:
        return {"type": "discrete", "atoms": self.atoms.tolist(),
                "probs": self.probs.tolist(), "C": self.support_radius}


Model = Union[GaussianMixtureModel, DiscreteModel]


def model_from_dict(spec: dict) -> Model:
    """Build a model from its JSON document form."""
    kind = spec.get("type")
    if kind == "gmm":
        return GaussianMixtureModel(spec["weights"], spec["means"],
                                    spec["covs"], spec["C"])
    if kind == "discrete":
        return DiscreteModel(spec["atoms"], spec["probs"], spec["C"])
    raise ValidationError(f"unknown model type {kind!r}")


def load_model(path) -> Model:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Noising and closed-form scores
# ---------------------------------------------------------------------------

def noised_params(model: GaussianMixtureModel, sigma) -> GaussianMixtureModel:
    """Parameters of the noised mixture: means a*mu_j, covariances
    a^2 Sigma_j + sigma^2 I, same weights (a = sqrt(1 - sigma^2)).

    The returned model is not support-checked: noised laws are genuinely
    unbounded and only the base is required to live in B(C).
    """
    nl = _as_noise(sigma)
    a = nl.a
    eye = np.eye(model.d)
    return GaussianMixtureModel(
        model.weights, a * model.means,
        a * a * model.covs + nl.sigma**2 * eye,
        model.support_radius, check_support=False)


def _noised_discrete_logdensity(model: DiscreteModel, nl: NoiseLevel,
                                x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    a, s2 = nl.a, nl.sigma**2
    diff = x[:, None, :] - a * model.atoms[None, :, :]  # (n, m, d)
    logw = (np.log(model.probs)[None, :]
            - 0.5 * np.sum(diff**2, axis=2) / s2
            - 0.5 * model.d * np.log(2.0 * np.pi * s2))
    return logsumexp(logw, axis=1)


def score(model: Model, sigma, x: np.ndarray) -> np.ndarray:
    """Exact score of the noised model, ``grad log p_sigma(x)``.

    Accepts a single point ``(d,)`` or a batch ``(n, d)`` and mirrors the
    input shape.  Log-sum-exp stabilized; raises NumericalError if the
    responsibilities degenerate (non-finite input or overflow).
    """
    nl = _as_noise(sigma)
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    xb = np.atleast_2d(x_arr)
    if xb.shape[1] != model.d:
        raise ValidationError("dimension mismatch in score query")

    if isinstance(model, DiscreteModel):
        a, s2 = nl.a, nl.sigma**2
        diff = xb[:, None, :] - a * model.atoms[None, :, :]
        logw = np.log(model.probs)[None, :] - 0.5 * np.sum(diff**2, axis=2) / s2
        shift = logw.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(shift)):
            raise NumericalError("score query numerically unreachable")
        resp = np.exp(logw - shift)
        resp /= resp.sum(axis=1, keepdims=True)
        posterior_mean = resp @ model.atoms
        out = (a * posterior_mean - xb) / s2
    else:
        noised = noised_params(model, nl)
        n = xb.shape[0]
        J = noised.n_components
        logw = np.empty((n, J))
        kernels = np.empty((n, J, model.d))
        for j in range(J):
            diff = xb - noised.means[j]
            sol = np.linalg.solve(noised._chols[j], diff.T)
            maha = np.sum(sol**2, axis=0)
            logw[:, j] = (np.log(noised.weights[j]) - 0.5 * maha
                          - 0.5 * noised._logdets[j])
            kernels[:, j, :] = -np.linalg.solve(
                noised._chols[j].T, sol).T  # -Sigma^{-1}(x - mu)
        shift = logw.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(shift)):
            raise NumericalError("score query numerically unreachable")
        resp = np.exp(logw - shift)
        resp /= resp.sum(axis=1, keepdims=True)
        out = np.einsum("nj,njd->nd", resp, kernels)

    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite score value")
    return out[0] if single else out


def noised_log_density(model: Model, sigma, x: np.ndarray) -> np.ndarray:
    """Log-density of the noised model at ``x`` (batch)."""
    nl = _as_noise(sigma)
    if isinstance(model, DiscreteModel):
        return _noised_discrete_logdensity(model, nl, np.atleast_2d(x))
    return noised_params(model, nl).log_density(x)


@dataclass(frozen=True)
class ScoreOracle:
    """Callable contract ``(sigma, x_batch) -> score_batch`` with metadata."""

    fn: Callable[[float, np.ndarray], np.ndarray]
    d: int
    C: float
    tag: str = "closed_form"

    def __call__(self, sigma: float, x: np.ndarray) -> np.ndarray:
        return self.fn(sigma, x)


def score_oracle(model: Model) -> ScoreOracle:
    """Closed-form score oracle of a model (Gaussian mixture or atoms)."""
    def fn(sigma, xb):
        return score(model, sigma, xb)
    return ScoreOracle(fn=fn, d=model.d, C=model.support_radius,
                       tag=f"exact_{type(model).__name__}")


# ---------------------------------------------------------------------------
# Exact sampling
# ---------------------------------------------------------------------------

def _rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _sample_gmm_raw(model: GaussianMixtureModel, n: int,
                    rng: np.random.Generator) -> np.ndarray:
    comps = rng.choice(model.n_components, size=n, p=model.weights)
    z = rng.standard_normal((n, model.d))
    out = model.means[comps] + np.einsum("nij,nj->ni", model._chols[comps], z)
    return out


def sample_exact(model: Model, n: int, seed) -> SampleBatch:
    """i.i.d. exact draws.  Gaussian mixtures are rejected against the
    support ball (acceptance ~ 1 by the mass invariant); atom sets use a
    categorical draw."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = _rng_from(seed)
    C = model.support_radius

    if isinstance(model, DiscreteModel):
        idx = rng.choice(model.n_atoms, size=n, p=model.probs)
        pts = model.atoms[idx]
    else:
        pts = _sample_gmm_raw(model, n, rng)
        if model.support_checked:
            bad = np.linalg.norm(pts, axis=1) > C
            failures = 0
            while np.any(bad):
                failures += int(bad.sum())
                if failures > 10**6:
                    raise ConfigurationError(
                        "rejection against the support ball failed 1e6 times; "
                        "support radius too tight for this mixture")
                pts[bad] = _sample_gmm_raw(model, int(bad.sum()), rng)
                bad[bad] = np.linalg.norm(pts[bad], axis=1) > C

    seed_tag = seed if isinstance(seed, int) else -1
    return SampleBatch(points=pts, seed=seed_tag,
                       producer=f"sample_exact/{type(model).__name__}",
                       d=model.d, C=C)


# ---------------------------------------------------------------------------
# Score-oracle-only sampling (reverse diffusion)
# ---------------------------------------------------------------------------

def recommended_steps(eps_p: float, C: float) -> int:
    """Step count heuristic for a target W2 accuracy (validated empirically,
    not derived)."""
    if eps_p <= 0:
        raise ValidationError("eps_p must be positive")
    return max(250, int(np.ceil(50.0 * C / eps_p)))


def sample_via_diffusion(oracle: ScoreOracle, n: int = 1, steps: int = None,
                         eps_p: float = None, seed=None) -> SampleBatch:
    """Discretized reverse process from N(0, I) driven only by the score
    oracle, on a geometric sigma grid, with a final posterior-mean denoise
    and projection onto the support ball.

    Either ``steps`` or ``eps_p`` must be given; ``eps_p`` maps to a step
    count through :func:`recommended_steps`.
    """
    if steps is None:
        if eps_p is None:
            raise ValidationError("provide steps or eps_p")
        steps = recommended_steps(eps_p, oracle.C)
    if steps < 2:
        raise ValidationError("steps must be >= 2")
    rng = _rng_from(seed)
    sigmas = np.geomspace(SIGMA_MAX, SIGMA_MIN, steps)
    x = rng.standard_normal((n, oracle.d))
    for t in range(steps):
        s = sigmas[t]
        a = np.sqrt(1.0 - s * s)
        sc = np.asarray(oracle(s, x), dtype=float)
        if not np.all(np.isfinite(sc)):
            raise NumericalError(f"score oracle returned non-finite values "
                                 f"at sigma={s:.3g}")
        x0 = (x + s * s * sc) / a
        if t + 1 < steps:
            s_next = sigmas[t + 1]
            a_next = np.sqrt(1.0 - s_next * s_next)
            x = a_next * x0 + (s_next / s) * (x - a * x0)
        else:
            x = x0
    x = project_ball(x, oracle.C)
    seed_tag = seed if isinstance(seed, int) else -1
    return SampleBatch(points=x, seed=seed_tag,
                       producer=f"diffusion/{oracle.tag}/steps={steps}",
                       d=oracle.d, C=oracle.C)
