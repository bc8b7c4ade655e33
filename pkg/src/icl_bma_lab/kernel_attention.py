"""Kernel-ridge attention, softmax attention, and the Gaussian linear ICL model.

The ridge-attention map is V^T (G + lambda I)^{-1} g(q) with G the kernel Gram
matrix of the keys; it equals the posterior-mean predictor of the Gaussian
linear model under the ridge mapping lambda = sigma^2 / lambda_prior.  Gram
solves always go through a symmetrized Cholesky factorization with jitter
escalation, never an explicit inverse.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

logger = logging.getLogger(__name__)

__all__ = [
    "KernelConfig",
    "KernelScene",
    "GaussianLinearTask",
    "kernel_matrix",
    "attn_dagger",
    "softmax_attention",
    "sample_gaussian_linear",
    "MeanConceptOperator",
    "posterior_mean_concept",
    "gaussian_predictive",
    "ConvergenceCurve",
    "convergence_experiment",
    "SphereIntegralReport",
    "sphere_integral_check",
    "sphere_area",
    "save_scene",
    "load_scene",
]

_JITTERS = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class KernelConfig:
    """Kernel choice: 'linear', 'rbf' (bandwidth gamma), or 'exponential' (gamma)."""

    kind: str = "linear"
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "rbf", "exponential"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


def kernel_matrix(kernel: KernelConfig, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kernel evaluations between the rows of ``a`` and the rows of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if kernel.kind == "linear":
        return a @ b.T
    if kernel.kind == "exponential":
        return np.exp(a @ b.T / kernel.gamma)
    sq = (np.sum(a * a, axis=1)[:, None] - 2.0 * (a @ b.T)
          + np.sum(b * b, axis=1)[None, :])
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * kernel.gamma ** 2))


@dataclass
class KernelScene:
    """Keys/values/query with a kernel, a ridge weight, and a softmax scale."""

    keys: np.ndarray       # (t, d_k)
    values: np.ndarray     # (t, d_v)
    query: np.ndarray      # (d_k,)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    ridge: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.query = np.asarray(self.query, dtype=float)
        if self.keys.ndim != 2 or self.keys.shape[0] < 1:
            raise ValueError("keys must be (t, d_k) with t >= 1")
        if self.values.ndim != 2 or self.values.shape[0] != self.keys.shape[0]:
            raise ValueError("values must be (t, d_v)")
        if self.query.shape != (self.keys.shape[1],):
            raise ValueError("query must be a d_k vector")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def t(self) -> int:
        return self.keys.shape[0]


def _spd_solve(gram: np.ndarray, ridge: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (sym(gram) + ridge I) x = rhs by Cholesky with jitter escalation."""
    g = 0.5 * (gram + gram.T)
    n = g.shape[0]
    scale = max(1.0, float(np.abs(g).max()))
    for jitter in _JITTERS:
        try:
            factor = cho_factor(g + (ridge + jitter * scale) * np.eye(n), lower=True)
        except np.linalg.LinAlgError:
            continue
        if jitter > 0:
            logger.warning("Gram factorization needed jitter %.1e", jitter * scale)
        return cho_solve(factor, rhs)
    raise np.linalg.LinAlgError("Gram matrix not factorizable even with jitter")


def attn_dagger(scene: KernelScene) -> np.ndarray:
    """Ridge attention V^T (G(K,K) + ridge I)^{-1} g(K, q)."""
    if scene.ridge <= 0:
        raise ValueError("ridge must be positive")
    gram = kernel_matrix(scene.kernel, scene.keys, scene.keys)
    kq = kernel_matrix(scene.kernel, scene.keys, scene.query[None, :])[:, 0]
    if not (np.all(np.isfinite(gram)) and np.all(np.isfinite(kq))
            and np.all(np.isfinite(scene.values))):
        raise ValueError("non-finite inputs to attn_dagger")
    return scene.values.T @ _spd_solve(gram, scene.ridge, kq)


def softmax_attention(scene: KernelScene) -> np.ndarray:
    """V^T softmax(K q / temperature): a convex combination of value rows."""
    logits = scene.keys @ scene.query / scene.temperature
    logits -= logits.max()
    w = np.exp(logits)
    w /= w.sum()
    return scene.values.T @ w


@dataclass(frozen=True)
class GaussianLinearTask:
    """v = z_* phi(k) + noise, with prior z_* ~ N(0, lambda_prior I) entrywise."""

    z_star: np.ndarray           # (d_v, d_phi)
    noise_sigma: float
    prior_lambda: float
    feature_map: object = None   # callable (t, d_k) -> (t, d_phi); None = identity

    def __post_init__(self):
        object.__setattr__(self, "z_star", np.asarray(self.z_star, dtype=float))
        if self.noise_sigma <= 0 or self.prior_lambda <= 0:
            raise ValueError("noise_sigma and prior_lambda must be positive")

    def features(self, keys: np.ndarray) -> np.ndarray:
        keys = np.atleast_2d(np.asarray(keys, dtype=float))
        return keys if self.feature_map is None else np.atleast_2d(self.feature_map(keys))


def sample_gaussian_linear(task: GaussianLinearTask, keys,
                           rng: np.random.Generator) -> np.ndarray:
    """Draw values = phi(keys) z_*^T + N(0, sigma^2 I), one row per key."""
    phi = task.features(keys)
    if not np.all(np.isfinite(phi)):
        raise ValueError("non-finite keys")
    mean = phi @ task.z_star.T
    return mean + task.noise_sigma * rng.standard_normal(mean.shape)


@dataclass(frozen=True)
class MeanConceptOperator:
    """Representer form of the mean concept: apply(q) = coef @ g(K, q)."""

    coef: np.ndarray      # (d_v, t)
    keys: np.ndarray
    kernel: KernelConfig

    def apply(self, query) -> np.ndarray:
        kq = kernel_matrix(self.kernel, self.keys,
                           np.asarray(query, dtype=float)[None, :])[:, 0]
        return self.coef @ kq


def posterior_mean_concept(keys, values, ridge: float,
                           kernel: KernelConfig | None = None) -> MeanConceptOperator:
    """Mean-concept operator V^T (G + ridge I)^{-1}; applying it to a query
    reproduces the ridge attention on the same scene."""
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    kernel = kernel or KernelConfig()
    keys = np.asarray(keys, dtype=float)
    values = np.asarray(values, dtype=float)
    gram = kernel_matrix(kernel, keys, keys)
    coef = _spd_solve(gram, ridge, values).T
    return MeanConceptOperator(coef=coef, keys=keys, kernel=kernel)


def gaussian_predictive(task: GaussianLinearTask, keys, values, query):
    """Exact Bayesian predictive mean and covariance for the Gaussian linear model.

    Returns ``(mean, cov)`` with ``cov = s * I_{d_v}`` where
    ``s = sigma^2 + sigma^2 phi(q)^T (Phi^T Phi + (sigma^2/lambda_prior) I)^{-1} phi(q)``.
    With no data the covariance reduces to ``lambda_prior ||phi(q)||^2 + sigma^2``.
    """
    phi_q = task.features(query)[0]
    d_phi = phi_q.size
    d_v = task.z_star.shape[0]
    ridge = task.noise_sigma ** 2 / task.prior_lambda
    keys = np.asarray(keys, dtype=float)
    if keys.size == 0:
        s = task.prior_lambda * float(phi_q @ phi_q) + task.noise_sigma ** 2
        return np.zeros(d_v), s * np.eye(d_v)
    phi = task.features(keys)
    values = np.asarray(values, dtype=float)
    a = phi.T @ phi
    solved = _spd_solve(a, ridge, np.column_stack([phi.T @ values, phi_q]))
    mean = solved[:, :-1].T @ phi_q
    s = task.noise_sigma ** 2 * (1.0 + float(phi_q @ solved[:, -1]))
    return mean, s * np.eye(d_v)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass(frozen=True)
class ConvergenceCurve:
    T: np.ndarray
    mean_distance: np.ndarray
    stderr: np.ndarray
    fitted_c_mean: np.ndarray
    n_resampled: int

    def rows(self):
        for i in range(self.T.size):
            yield (int(self.T[i]), float(self.mean_distance[i]),
                   float(self.stderr[i]), float(self.fitted_c_mean[i]))


def _convergence_trial(t: int, d_k: int, d_v: int, gamma: float,
                       ridge: float, rng: np.random.Generator) -> tuple:
    for attempt in range(16):
        keys = _unit_rows(rng, t, d_k)
        values = _unit_rows(rng, t, d_v)
        query = _unit_rows(rng, 1, d_k)[0]
        scene = KernelScene(keys, values, query,
                            kernel=KernelConfig("rbf", gamma),
                            ridge=ridge, temperature=gamma ** 2)
        a_sm = softmax_attention(scene)
        denom = float(a_sm @ a_sm)
        if denom < 1e-24:
            continue  # degenerate softmax output; resample this trial
        a_dag = attn_dagger(scene)
        c = float(a_dag @ a_sm) / denom
        return float(np.linalg.norm(a_dag - c * a_sm)), c, attempt
    raise RuntimeError("could not draw a non-degenerate convergence trial")


def convergence_experiment(t_grid, d_k: int, d_v: int, trials: int,
                           rng: np.random.Generator, gamma: float = 1.0,
                           lambda_exponent: float = 0.75,
                           threads: int = 1) -> ConvergenceCurve:
    """Distance between ridge attention and best-scaled softmax attention.

    For each prompt length T: unit-sphere keys/values/query, RBF kernel,
    ridge T**lambda_exponent; the proportionality constant is fitted per
    trial by one-dimensional least squares before measuring the distance.
    """
    t_grid = [int(t) for t in t_grid]
    if any(t < 2 for t in t_grid):
        raise ValueError("every T in the grid must be >= 2")
    means, errs, cs = [], [], []
    n_resampled = 0
    for t in t_grid:
        ridge = float(t) ** lambda_exponent
        args = [(t, d_k, d_v, gamma, ridge, child) for child in rng.spawn(trials)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda a: _convergence_trial(*a), args))
        else:
            results = [_convergence_trial(*a) for a in args]
        dist = np.array([r[0] for r in results])
        cs_t = np.array([r[1] for r in results])
        n_resampled += sum(r[2] for r in results)
        means.append(dist.mean())
        errs.append(dist.std(ddof=1) / math.sqrt(trials) if trials > 1 else 0.0)
        cs.append(cs_t.mean())
    return ConvergenceCurve(T=np.array(t_grid), mean_distance=np.array(means),
                            stderr=np.array(errs), fitted_c_mean=np.array(cs),
                            n_resampled=n_resampled)


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere S^{d-1} in R^d."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


@dataclass(frozen=True)
class SphereIntegralReport:
    estimate: np.ndarray
    cosine: float
    c1: float
    orthogonal_fraction: float


def sphere_integral_check(b, d: int, gamma: float, n_samples: int,
                          rng: np.random.Generator) -> SphereIntegralReport:
    """Monte Carlo estimate of the sphere integral of a * exp(a.b / gamma).

    The integral is proportional to ``b``; returns the cosine between the
    estimate and ``b`` plus the estimated proportionality constant C1.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    b = np.asarray(b, dtype=float)
    if b.shape != (d,) or abs(np.linalg.norm(b) - 1.0) > 1e-9:
        raise ValueError("b must be a unit vector of length d")
    total = np.zeros(d)
    chunk = 262_144
    remaining = n_samples
    while remaining > 0:
        n = min(chunk, remaining)
        a = _unit_rows(rng, n, d)
        total += (a * np.exp(a @ b / gamma)[:, None]).sum(axis=0)
        remaining -= n
    est = total / n_samples * sphere_area(d)
    norm = float(np.linalg.norm(est))
    cosine = float(est @ b / norm) if norm > 0 else 0.0
    c1 = float(est @ b)
    orth = math.sqrt(max(0.0, 1.0 - cosine ** 2))
    return SphereIntegralReport(estimate=est, cosine=cosine, c1=c1,
                                orthogonal_fraction=orth)


_SCENE_HEADER = "icl-bma-lab-scene v1"


def save_scene(scene: KernelScene, path) -> None:
    """Plain-text scene file: header, dims, then row-major numeric blocks."""
    t, d_k = scene.keys.shape
    d_v = scene.values.shape[1]
    lines = [
        _SCENE_HEADER,
        f"{t} {d_k} {d_v}",
        f"{scene.kernel.kind} {scene.kernel.gamma!r} {scene.ridge!r} {scene.temperature!r}",
    ]
    for row in scene.keys:
        lines.append(" ".join(repr(v) for v in row))
    for row in scene.values:
        lines.append(" ".join(repr(v) for v in row))
    lines.append(" ".join(repr(v) for v in scene.query))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene(path) -> KernelScene:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if lines[0] != _SCENE_HEADER:
        raise ValueError(f"{path}: not a scene file")
    t, d_k, d_v = (int(x) for x in lines[1].split())
    kind, gamma, ridge, temp = lines[2].split()
    rows = [np.array([float(x) for x in ln.split()]) for ln in lines[3:3 + 2 * t + 1]]
    keys = np.stack(rows[:t])
    values = np.stack(rows[t:2 * t])
    query = rows[2 * t]
    if keys.shape != (t, d_k) or values.shape != (t, d_v) or query.shape != (d_k,):
        raise ValueError(f"{path}: malformed scene payload")
    return KernelScene(keys, values, query,
                       kernel=KernelConfig(kind, float(gamma)),
                       ridge=float(ridge), temperature=float(temp))
