"""Exact divergences and distances on finite distributions.

All logarithms are natural. A KL divergence of an absolutely
non-continuous pair is reported as ``math.inf``; aggregation helpers
skip and count infinite values instead of folding them into means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "validate_distribution",
    "tv",
    "kl",
    "entropy",
    "tv_kl_lemma_check",
    "TvKlReport",
    "summarize_finite",
]

_SUM_TOL = 1e-12


def validate_distribution(p, tol: float = _SUM_TOL) -> np.ndarray:
    """Return ``p`` as a float array after checking it is a distribution."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("distribution must be a nonempty vector")
    if np.any(p < 0):
        raise ValueError("distribution has negative entries")
    s = p.sum()
    if abs(s - 1.0) > max(tol, 1e-9 * p.size):
        raise ValueError(f"distribution sums to {s!r}, not 1")
    return p


def _check_pair(p, q):
    p = validate_distribution(p)
    q = validate_distribution(q)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    return p, q


def tv(p, q) -> float:
    """Total variation distance, (1/2) * sum |p_i - q_i|, in [0, 1]."""
    p, q = _check_pair(p, q)
    return 0.5 * float(np.abs(p - q).sum())


def kl(p, q) -> float:
    """KL divergence sum p_i log(p_i/q_i); inf when q has a hole p does not."""
    p, q = _check_pair(p, q)
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def entropy(p) -> float:
    """Shannon entropy -sum p_i log p_i (natural log)."""
    p = validate_distribution(p)
    mask = p > 0
    return float(-np.sum(p[mask] * np.log(p[mask])))


@dataclass(frozen=True)
class TvKlReport:
    tv: float
    kl: float
    log_ratio_sup: float
    kl_bound: float
    pinsker_bound: float
    kl_within_bound: bool
    pinsker_holds: bool

    @property
    def holds(self) -> bool:
        return self.kl_within_bound and self.pinsker_holds


def tv_kl_lemma_check(p, q, slack: float = 1e-12) -> TvKlReport:
    """Check KL(p||q) <= 2(3 + b) TV(p, q) with b = sup_x log(p/q), plus Pinsker.

    Requires q > 0 entrywise so that b is finite.
    """
    p, q = _check_pair(p, q)
    if np.any(q <= 0):
        raise ValueError("q must be entrywise positive")
    mask = p > 0
    b = float(np.max(np.log(p[mask]) - np.log(q[mask])))
    d_tv = tv(p, q)
    d_kl = kl(p, q)
    kl_bound = 2.0 * (3.0 + b) * d_tv
    pinsker = float(np.sqrt(d_kl / 2.0)) if np.isfinite(d_kl) else float("inf")
    return TvKlReport(
        tv=d_tv,
        kl=d_kl,
        log_ratio_sup=b,
        kl_bound=kl_bound,
        pinsker_bound=pinsker,
        kl_within_bound=d_kl <= kl_bound + slack,
        pinsker_holds=d_tv <= pinsker + slack,
    )


def summarize_finite(values) -> dict:
    """Mean/stderr of the finite entries of ``values`` plus a flagged count.

    Infinite entries never leak into the mean; they are skipped and counted.
    """
    arr = np.asarray(values, dtype=float)
    finite = arr[np.isfinite(arr)]
    n_flagged = int(arr.size - finite.size)
    if finite.size == 0:
        return {"mean": float("nan"), "stderr": float("nan"),
                "n_finite": 0, "n_flagged": n_flagged}
    stderr = float(finite.std(ddof=1) / np.sqrt(finite.size)) if finite.size > 1 else 0.0
    return {"mean": float(finite.mean()), "stderr": stderr,
            "n_finite": int(finite.size), "n_flagged": n_flagged}
