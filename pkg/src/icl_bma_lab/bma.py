"""Exact Bayesian model averaging over a finite concept space.

Sequential log-domain posterior updates, predictive mixtures, and the
online-regret harness.  The prediction seam is a plain callable
``tokens_so_far -> next-token distribution``; the BMA oracle, fixed-concept
oracle, uniform baseline, and the pretrained network all fit it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .concept_model import (
    LatentConceptModel,
    PairConceptModel,
    PairPrompt,
    TokenSequence,
    conditional,
    marginal_conditional,
    pair_log_likelihoods,
    sequence_log_likelihoods,
)

__all__ = [
    "PosteriorState",
    "ImpossibleObservationError",
    "init_posterior",
    "observe",
    "fold",
    "predict",
    "RegretCurve",
    "regret",
    "bma_regret_curve",
    "regret_bound",
    "BmaInequalityReport",
    "verify_bma_inequality",
    "bma_predictor",
    "concept_predictor",
    "uniform_predictor",
    "pair_log_posterior",
]


class ImpossibleObservationError(RuntimeError):
    """Observed token has probability zero under every concept."""


@dataclass(frozen=True)
class PosteriorState:
    """Log-domain posterior over concepts after ``steps`` observed tokens.

    ``log_weights`` is normalized (logsumexp 0 up to rounding);
    ``cum_loglik[z]`` is the running sum of log P(x_i | prefix, z).
    """

    log_weights: np.ndarray
    cum_loglik: np.ndarray
    steps: int

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def init_posterior(model) -> PosteriorState:
    lw = model.log_prior()
    return PosteriorState(log_weights=lw - logsumexp(lw),
                          cum_loglik=np.zeros(model.n_concepts), steps=0)


def _advance(state: PosteriorState, step_loglik: np.ndarray, n_new: int) -> PosteriorState:
    if np.all(np.isneginf(state.log_weights + step_loglik)):
        raise ImpossibleObservationError(
            "observation has probability zero under every concept")
    lw = state.log_weights + step_loglik
    return PosteriorState(log_weights=lw - logsumexp(lw),
                          cum_loglik=state.cum_loglik + step_loglik,
                          steps=state.steps + n_new)


def observe(state: PosteriorState, model: LatentConceptModel, prefix,
            next_token: int) -> PosteriorState:
    """Fold one observed token; returns a new state."""
    tokens = prefix.tokens if isinstance(prefix, TokenSequence) else np.asarray(prefix)
    if tokens.shape[0] != state.steps:
        raise ValueError(f"prefix length {tokens.shape[0]} != state.steps {state.steps}")
    with np.errstate(divide="ignore"):
        step = np.log(np.array([conditional(model, z, tokens)[next_token]
                                for z in model.concepts]))
    return _advance(state, step, 1)


def fold(state: PosteriorState, model: LatentConceptModel, prefix,
         new_tokens) -> PosteriorState:
    """Fold a contiguous block of observations in one batched update."""
    tokens = prefix.tokens if isinstance(prefix, TokenSequence) else np.asarray(prefix)
    if tokens.shape[0] != state.steps:
        raise ValueError(f"prefix length {tokens.shape[0]} != state.steps {state.steps}")
    new_tokens = np.asarray(new_tokens, dtype=np.int64)
    full = np.concatenate([tokens, new_tokens])
    loglik = sequence_log_likelihoods(model, full)[:, state.steps:]
    return _advance(state, loglik.sum(axis=1), new_tokens.size)


def predict(state: PosteriorState, model: LatentConceptModel, prefix) -> np.ndarray:
    """Posterior-weighted mixture of next-token conditionals."""
    tokens = prefix.tokens if isinstance(prefix, TokenSequence) else np.asarray(prefix)
    if tokens.shape[0] != state.steps:
        raise ValueError(f"prefix length {tokens.shape[0]} != state.steps {state.steps}")
    idx = model.context_indices(tokens)[-1]
    mix = state.weights() @ model.tables[:, idx, :]
    return mix / mix.sum()


def bma_predictor(model: LatentConceptModel):
    """Prediction stream of the exact BMA oracle."""
    return lambda tokens: marginal_conditional(model, tokens)


def concept_predictor(model: LatentConceptModel, z: int):
    """Prediction stream of the oracle that knows the concept."""
    return lambda tokens: conditional(model, z, tokens)


def uniform_predictor(alphabet_size: int):
    dist = np.full(alphabet_size, 1.0 / alphabet_size)
    return lambda tokens: dist.copy()


@dataclass(frozen=True)
class RegretCurve:
    """Per-response-step regret against the best fixed concept in hindsight."""

    t: np.ndarray                 # 1..n response count
    regret: np.ndarray            # may contain +inf (flagged, never a crash)
    bound: np.ndarray             # log(1/prior(argmax_z)) / t
    cum_loglik_pred: np.ndarray   # predictor cumulative log-likelihood
    cum_loglik_best_z: np.ndarray
    argmax_z: np.ndarray          # concept attaining the sup at each t
    infinite: np.ndarray          # bool flags for infinite-regret steps

    def rows(self):
        """Rows matching the regret-curve CSV layout."""
        for i in range(self.t.size):
            yield (int(self.t[i]), float(self.regret[i]), float(self.bound[i]),
                   float(self.cum_loglik_pred[i]), float(self.cum_loglik_best_z[i]))


def _curve_from_logliks(per_concept: np.ndarray, pred_logprob: np.ndarray,
                        log_prior: np.ndarray) -> RegretCurve:
    """Assemble a regret curve from per-concept and predictor response log-probs."""
    n = pred_logprob.size
    cum_concept = np.cumsum(per_concept, axis=1)      # (Z, n)
    cum_pred = np.cumsum(pred_logprob)
    best = np.argmax(cum_concept, axis=0)
    cum_best = cum_concept[best, np.arange(n)]
    t = np.arange(1, n + 1)
    with np.errstate(invalid="ignore"):
        reg = (cum_best - cum_pred) / t
    inf_mask = np.isneginf(cum_pred)
    reg[inf_mask] = np.inf
    bound = -log_prior[best] / t
    return RegretCurve(t=t, regret=reg, bound=bound, cum_loglik_pred=cum_pred,
                       cum_loglik_best_z=cum_best, argmax_z=best, infinite=inf_mask)


def regret(model: LatentConceptModel, trajectory: TokenSequence, predictor) -> RegretCurve:
    """ICL regret of ``predictor`` on the trajectory's response positions.

    ``predictor`` maps the token prefix to a next-token distribution.  A
    predictor that assigns probability zero to an observed response yields an
    infinite-regret flag at that and later steps.
    """
    tokens = trajectory.tokens
    positions = trajectory.response_positions
    loglik = sequence_log_likelihoods(model, tokens)[:, positions]
    pred_lp = np.empty(positions.size)
    for i, pos in enumerate(positions):
        p = float(predictor(tokens[:pos])[tokens[pos]])
        pred_lp[i] = np.log(p) if p > 0 else -np.inf
    return _curve_from_logliks(loglik, pred_lp, model.log_prior())


def bma_regret_curve(model: LatentConceptModel, trajectory) -> RegretCurve:
    """Fast exact regret curve of the BMA oracle when every position is scored.

    Uses the telescoping identity: the BMA cumulative log-likelihood after t
    tokens is log sum_z P_Z(z) P(x_1..x_t | z).
    """
    tokens = trajectory.tokens if isinstance(trajectory, TokenSequence) else np.asarray(trajectory)
    loglik = sequence_log_likelihoods(model, tokens)
    cum = np.cumsum(loglik, axis=1) + model.log_prior()[:, None]
    log_evidence = logsumexp(cum, axis=0)
    pred_lp = np.diff(np.concatenate([[0.0], log_evidence]))
    return _curve_from_logliks(loglik, pred_lp, model.log_prior())


def regret_bound(prior, z_star: int, t: int) -> float:
    """Corollary bound log(1 / prior(z*)) / t."""
    prior = np.asarray(prior, dtype=float)
    if prior[z_star] == 0:
        raise ValueError(f"prior({z_star}) = 0: regret bound is unbounded")
    if t < 1:
        raise ValueError("t must be >= 1")
    return float(np.log(1.0 / prior[z_star]) / t)


@dataclass(frozen=True)
class BmaInequalityReport:
    lhs: float
    rhs: float
    argmax_z: int
    holds: bool

    @property
    def gap(self) -> float:
        return self.lhs - self.rhs


def verify_bma_inequality(model: LatentConceptModel, trajectory, t: int,
                          slack: float = 1e-9) -> BmaInequalityReport:
    """Check t^-1 sum log P_bma(x_i | prefix) >= max_z [.. + t^-1 log prior(z)].

    The left side is evaluated by summing the BMA predictive step by step;
    the right side from per-concept likelihoods.  Reports which concept
    attains the sup rather than assuming it is the generating one.
    """
    tokens = trajectory.tokens if isinstance(trajectory, TokenSequence) else np.asarray(trajectory)
    if t < 1 or t > tokens.size:
        raise ValueError("t out of range for trajectory")
    tokens = tokens[:t]
    lhs_sum = 0.0
    for i in range(t):
        lhs_sum += float(np.log(marginal_conditional(model, tokens[:i])[tokens[i]]))
    loglik = sequence_log_likelihoods(model, tokens).sum(axis=1)
    per_z = (loglik + model.log_prior()) / t
    z_hat = int(np.argmax(per_z))
    rhs = float(per_z[z_hat])
    lhs = lhs_sum / t
    return BmaInequalityReport(lhs=lhs, rhs=rhs, argmax_z=z_hat,
                               holds=lhs >= rhs - slack)


def pair_log_posterior(model: PairConceptModel, prompt: PairPrompt) -> np.ndarray:
    """Normalized log P(z | pair prompt) for an i.i.d. example-pair model."""
    loglik = pair_log_likelihoods(model, prompt).sum(axis=1) + model.log_prior()
    return loglik - logsumexp(loglik)
