"""Finite latent-concept sequence models with exact conditionals.

Two model families:

* :class:`LatentConceptModel` -- per concept, an order-m Markov table over a
  finite token alphabet.  Prefixes shorter than m are handled by a reserved
  initial-context symbol (token id ``alphabet_size``), so the padded rows of
  the table double as the initial distribution and every conditional is an
  exact table lookup.

* :class:`PairConceptModel` -- i.i.d. covariate/response example pairs: a
  covariate law over l-token sequences plus a response table per covariate,
  per concept.  This is the structure needed for pair-level KL divergences
  and the wrong-mapping experiments.

All randomness flows through explicit ``numpy.random.Generator`` streams;
models are immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.special import logsumexp

__all__ = [
    "LatentConceptModel",
    "PairConceptModel",
    "TokenSequence",
    "PairPrompt",
    "AssumptionReport",
    "UnknownConceptError",
    "NonMixingError",
    "EnumerationCapError",
    "sample_concept",
    "generate_sequence",
    "conditional",
    "marginal_conditional",
    "sequence_log_likelihoods",
    "prefix_log_posterior",
    "kl_pair",
    "estimate_mixing_time",
    "validate_assumptions",
    "generate_pairs",
    "pair_log_likelihoods",
    "random_model",
    "random_pair_model",
    "save_model",
    "load_model",
]

_ROW_TOL = 1e-12
DEFAULT_ENUMERATION_CAP = 10_000_000


class UnknownConceptError(ValueError):
    """Concept id outside the model's concept space."""


class NonMixingError(RuntimeError):
    """Raised when a context chain is reducible, periodic, or too slow to mix."""


class EnumerationCapError(RuntimeError):
    """Raised when an exact enumeration would exceed the configured cap."""


def _check_stochastic(rows: np.ndarray, what: str) -> None:
    if np.any(rows < 0):
        raise ValueError(f"{what} has negative entries")
    sums = rows.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > _ROW_TOL * max(1, rows.shape[-1])):
        worst = float(np.abs(sums - 1.0).max())
        raise ValueError(f"{what} rows must sum to 1 (worst deviation {worst:.3e})")


@dataclass(eq=False)
class LatentConceptModel:
    """Order-m Markov sequence model per concept over a finite alphabet.

    ``tables`` has shape (n_concepts, (alphabet_size+1)**order, alphabet_size);
    the context axis is indexed base-(alphabet_size+1) over the last ``order``
    tokens, with the reserved padding symbol ``alphabet_size`` standing in for
    positions before the sequence start.
    """

    prior: np.ndarray
    order: int
    alphabet_size: int
    tables: np.ndarray
    covariate_length: int = 0
    c0: float | None = None

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=float)
        self.tables = np.asarray(self.tables, dtype=float)
        if self.prior.ndim != 1 or self.prior.size == 0:
            raise ValueError("prior must be a nonempty vector")
        if np.any(self.prior < 0) or abs(self.prior.sum() - 1.0) > _ROW_TOL * self.prior.size:
            raise ValueError("prior must be a probability vector")
        if self.order < 0 or self.alphabet_size < 1 or self.covariate_length < 0:
            raise ValueError("order, alphabet_size, covariate_length out of range")
        n_ctx = (self.alphabet_size + 1) ** self.order
        expected = (self.prior.size, n_ctx, self.alphabet_size)
        if self.tables.shape != expected:
            raise ValueError(f"tables shape {self.tables.shape}, expected {expected}")
        _check_stochastic(self.tables, "conditional table")
        if self.c0 is not None:
            if not 0 < self.c0 <= 1:
                raise ValueError("declared c0 must lie in (0, 1]")
            if self.tables.min() < self.c0 - _ROW_TOL:
                raise ValueError("model flagged c0_valid but a table entry is below c0")
        self.prior.setflags(write=False)
        self.tables.setflags(write=False)

    @property
    def n_concepts(self) -> int:
        return self.prior.size

    @property
    def concepts(self) -> range:
        return range(self.n_concepts)

    @property
    def pad_token(self) -> int:
        return self.alphabet_size

    def log_prior(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.prior)

    def context_indices(self, tokens: np.ndarray) -> np.ndarray:
        """Context index before each position of ``tokens``, plus the final one.

        Returns an array of length len(tokens)+1; entry t is the index of the
        (padded) last-m context after seeing tokens[:t].
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        m = self.order
        base = self.alphabet_size + 1
        padded = np.concatenate([np.full(m, self.pad_token, dtype=np.int64), tokens])
        weights = base ** np.arange(m - 1, -1, -1, dtype=np.int64) if m else np.zeros(0, np.int64)
        out = np.empty(tokens.size + 1, dtype=np.int64)
        for t in range(tokens.size + 1):
            out[t] = int(padded[t:t + m] @ weights) if m else 0
        return out

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LatentConceptModel)
            and self.order == other.order
            and self.alphabet_size == other.alphabet_size
            and self.covariate_length == other.covariate_length
            and self.c0 == other.c0
            and np.array_equal(self.prior, other.prior)
            and np.array_equal(self.tables, other.tables)
        )


@dataclass(eq=False)
class PairConceptModel:
    """I.i.d. example-pair model: covariate law x response table per concept.

    ``covariate_law`` has shape (n_concepts, alphabet_size**covariate_length)
    over flattened covariate token tuples; ``response_tables`` has shape
    (n_concepts, alphabet_size**covariate_length, alphabet_size).
    """

    prior: np.ndarray
    alphabet_size: int
    covariate_length: int
    covariate_law: np.ndarray
    response_tables: np.ndarray
    c0: float | None = None

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=float)
        self.covariate_law = np.asarray(self.covariate_law, dtype=float)
        self.response_tables = np.asarray(self.response_tables, dtype=float)
        if np.any(self.prior < 0) or abs(self.prior.sum() - 1.0) > _ROW_TOL * self.prior.size:
            raise ValueError("prior must be a probability vector")
        if self.covariate_length < 0 or self.alphabet_size < 1:
            raise ValueError("bad covariate_length or alphabet_size")
        n_cov = self.alphabet_size ** self.covariate_length
        z = self.prior.size
        if self.covariate_law.shape != (z, n_cov):
            raise ValueError("covariate_law shape mismatch")
        if self.response_tables.shape != (z, n_cov, self.alphabet_size):
            raise ValueError("response_tables shape mismatch")
        _check_stochastic(self.covariate_law, "covariate law")
        _check_stochastic(self.response_tables, "response table")
        for arr in (self.prior, self.covariate_law, self.response_tables):
            arr.setflags(write=False)

    @property
    def n_concepts(self) -> int:
        return self.prior.size

    @property
    def concepts(self) -> range:
        return range(self.n_concepts)

    def log_prior(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.prior)

    def covariate_index(self, covariate) -> int:
        cov = np.asarray(covariate, dtype=np.int64)
        if cov.shape != (self.covariate_length,):
            raise ValueError("covariate has wrong length")
        idx = 0
        for tok in cov:
            idx = idx * self.alphabet_size + int(tok)
        return idx

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PairConceptModel)
            and self.alphabet_size == other.alphabet_size
            and self.covariate_length == other.covariate_length
            and self.c0 == other.c0
            and np.array_equal(self.prior, other.prior)
            and np.array_equal(self.covariate_law, other.covariate_law)
            and np.array_equal(self.response_tables, other.response_tables)
        )


@dataclass(eq=False)
class TokenSequence:
    """A token sequence plus the positions that count as responses."""

    tokens: np.ndarray
    alphabet_size: int
    response_positions: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.response_positions is None:
            self.response_positions = np.arange(self.tokens.size, dtype=np.int64)
        self.response_positions = np.asarray(self.response_positions, dtype=np.int64)
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.alphabet_size):
            raise ValueError("token id outside alphabet")
        rp = self.response_positions
        if rp.size:
            if rp.min() < 0 or rp.max() >= self.tokens.size:
                raise ValueError("response position out of bounds")
            if np.any(np.diff(rp) <= 0):
                raise ValueError("response positions must be strictly increasing")

    def __len__(self) -> int:
        return self.tokens.size

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TokenSequence)
            and self.alphabet_size == other.alphabet_size
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.response_positions, other.response_positions)
        )


@dataclass(eq=False)
class PairPrompt:
    """t covariate/response example pairs (responses possibly perturbed)."""

    covariates: np.ndarray  # (t, l) token ids
    responses: np.ndarray   # (t,) token ids
    alphabet_size: int

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=np.int64)
        self.responses = np.asarray(self.responses, dtype=np.int64)
        if self.covariates.ndim != 2 or self.responses.shape != (self.covariates.shape[0],):
            raise ValueError("covariates must be (t, l) and responses (t,)")

    @property
    def t(self) -> int:
        return self.responses.size

    def tokens(self) -> np.ndarray:
        """Flatten to the token stream (c_1, r_1, ..., c_t, r_t)."""
        parts = []
        for i in range(self.t):
            parts.append(self.covariates[i])
            parts.append(self.responses[i:i + 1])
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def _tokens_of(prefix) -> np.ndarray:
    if isinstance(prefix, TokenSequence):
        return prefix.tokens
    return np.asarray(prefix, dtype=np.int64)


def sample_concept(model, rng: np.random.Generator) -> int:
    """Draw a concept id from the model prior."""
    return int(rng.choice(model.n_concepts, p=model.prior))


def generate_sequence(model: LatentConceptModel, z: int, length: int,
                      rng: np.random.Generator) -> TokenSequence:
    """Sample ``length`` tokens autoregressively from concept ``z``.

    The first ``order`` steps draw from the padded-context rows of the table,
    which play the role of the initial distribution.
    """
    if not 0 <= z < model.n_concepts:
        raise UnknownConceptError(f"concept {z} not in [0, {model.n_concepts})")
    if length < 1:
        raise ValueError("length must be >= 1")
    m, base = model.order, model.alphabet_size + 1
    weights = base ** np.arange(m - 1, -1, -1, dtype=np.int64) if m else None
    ctx = [model.pad_token] * m
    table = model.tables[z]
    out = np.empty(length, dtype=np.int64)
    for t in range(length):
        idx = int(np.dot(ctx, weights)) if m else 0
        tok = int(rng.choice(model.alphabet_size, p=table[idx]))
        out[t] = tok
        if m:
            ctx = ctx[1:] + [tok]
    return TokenSequence(out, model.alphabet_size,
                         response_positions=_response_positions(length, model.covariate_length))


def _response_positions(length: int, covariate_length: int) -> np.ndarray:
    if covariate_length == 0:
        return np.arange(length, dtype=np.int64)
    block = covariate_length + 1
    return np.arange(covariate_length, length, block, dtype=np.int64)


def conditional(model: LatentConceptModel, z: int, prefix) -> np.ndarray:
    """Exact next-token distribution P(. | prefix, z) as a table row."""
    if not 0 <= z < model.n_concepts:
        raise UnknownConceptError(f"concept {z} not in [0, {model.n_concepts})")
    tokens = _tokens_of(prefix)
    idx = model.context_indices(tokens)[-1]
    return model.tables[z, idx].copy()


def sequence_log_likelihoods(model: LatentConceptModel, prefix) -> np.ndarray:
    """Per-concept, per-position log P(x_t | x_<t, z); shape (n_concepts, T)."""
    tokens = _tokens_of(prefix)
    idx = model.context_indices(tokens)[:-1]
    with np.errstate(divide="ignore"):
        return np.log(model.tables[:, idx, tokens])


def prefix_log_posterior(model: LatentConceptModel, prefix) -> np.ndarray:
    """Normalized log P(z | prefix) computed from the full prefix likelihood."""
    loglik = sequence_log_likelihoods(model, prefix).sum(axis=1) + model.log_prior()
    return loglik - logsumexp(loglik)


def marginal_conditional(model: LatentConceptModel, prefix) -> np.ndarray:
    """Posterior-weighted mixture of per-concept next-token conditionals."""
    log_post = prefix_log_posterior(model, prefix)
    tokens = _tokens_of(prefix)
    idx = model.context_indices(tokens)[-1]
    rows = model.tables[:, idx, :]
    mix = np.exp(log_post) @ rows
    return mix / mix.sum()


def generate_pairs(model: PairConceptModel, z: int, t: int,
                   rng: np.random.Generator) -> PairPrompt:
    """Sample t i.i.d. covariate/response pairs from concept ``z``."""
    if not 0 <= z < model.n_concepts:
        raise UnknownConceptError(f"concept {z} not in [0, {model.n_concepts})")
    l, x = model.covariate_length, model.alphabet_size
    cov_idx = rng.choice(model.covariate_law.shape[1], size=t, p=model.covariate_law[z])
    covariates = np.empty((t, l), dtype=np.int64)
    rem = cov_idx.copy()
    for j in range(l - 1, -1, -1):
        covariates[:, j] = rem % x
        rem //= x
    responses = np.empty(t, dtype=np.int64)
    for i in range(t):
        responses[i] = rng.choice(x, p=model.response_tables[z, cov_idx[i]])
    return PairPrompt(covariates, responses, alphabet_size=x)


def pair_log_likelihoods(model: PairConceptModel, prompt: PairPrompt) -> np.ndarray:
    """Per-concept, per-pair log P((c_i, r_i) | z); shape (n_concepts, t)."""
    idx = np.array([model.covariate_index(c) for c in prompt.covariates], dtype=np.int64)
    with np.errstate(divide="ignore"):
        return (np.log(model.covariate_law[:, idx])
                + np.log(model.response_tables[:, idx, prompt.responses]))


def kl_pair(model: PairConceptModel, z: int, z2: int,
            cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """KL between the example-pair laws of two concepts, by exact enumeration."""
    for c in (z, z2):
        if not 0 <= c < model.n_concepts:
            raise UnknownConceptError(f"concept {c} not in [0, {model.n_concepts})")
    n_atoms = model.covariate_law.shape[1] * model.alphabet_size
    if n_atoms > cap:
        raise EnumerationCapError(
            f"pair space has {n_atoms} atoms, above the cap of {cap}")
    p = model.covariate_law[z][:, None] * model.response_tables[z]
    q = model.covariate_law[z2][:, None] * model.response_tables[z2]
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _context_chain(model: LatentConceptModel, z: int) -> np.ndarray:
    """Transition matrix of the real-token context chain for concept z."""
    m, x = model.order, model.alphabet_size
    if m == 0:
        return np.ones((1, 1))
    base = x + 1
    n = x ** m
    states = np.stack(np.unravel_index(np.arange(n), (x,) * m), axis=1)
    weights = base ** np.arange(m - 1, -1, -1, dtype=np.int64)
    table_idx = states @ weights
    p = np.zeros((n, n))
    next_weights = x ** np.arange(m - 1, -1, -1, dtype=np.int64)
    for s in range(n):
        shifted = states[s, 1:]
        for tok in range(x):
            nxt = int(np.concatenate([shifted, [tok]]) @ next_weights)
            p[s, nxt] += model.tables[z, table_idx[s], tok]
    return p


def _period(adj: np.ndarray) -> int:
    """Period of a strongly connected directed graph (gcd of cycle lengths)."""
    n = adj.shape[0]
    level = np.full(n, -1, dtype=np.int64)
    level[0] = 0
    queue = [0]
    g = 0
    while queue:
        u = queue.pop()
        for v in np.nonzero(adj[u])[0]:
            if level[v] < 0:
                level[v] = level[u] + 1
                queue.append(int(v))
            else:
                g = int(np.gcd(g, level[u] + 1 - level[v]))
    return abs(g) if g else 0


def estimate_mixing_time(model: LatentConceptModel, z: int, epsilon: float,
                         t_max: int = 100_000) -> int:
    """Smallest t with sup_x TV(P^t(x, .), pi) <= epsilon on the context chain.

    The chain runs over order-m contexts of real tokens (the padded start
    contexts are transient and excluded).  Raises :class:`NonMixingError` if
    the chain is reducible or periodic.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    p = _context_chain(model, z)
    adj = p > 0
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    if n_comp != 1:
        raise NonMixingError("context chain is reducible")
    if _period(adj) != 1:
        raise NonMixingError("context chain is periodic")
    eigval, eigvec = np.linalg.eig(p.T)
    lead = int(np.argmin(np.abs(eigval - 1.0)))
    pi = np.abs(np.real(eigvec[:, lead]))
    pi = pi / pi.sum()
    powered = np.eye(p.shape[0])
    for t in range(t_max + 1):
        d_t = 0.5 * np.abs(powered - pi).sum(axis=1).max()
        if d_t <= epsilon:
            return t
        powered = powered @ p
    raise NonMixingError(f"chain did not mix within {t_max} steps")


def _pair_token_c0(model: PairConceptModel) -> float:
    """Min per-token conditional probability implied by the pair factorization.

    Covers each covariate token conditioned on the covariate prefix (under
    every concept, over prefixes of positive probability) and every response
    entry.
    """
    x, l = model.alphabet_size, model.covariate_length
    c0 = float(model.response_tables.min())
    if l == 0:
        return c0
    for z in model.concepts:
        law = model.covariate_law[z].reshape((x,) * l)
        for j in range(l):
            # P(c_{j+1} | c_1..c_j): marginalize the tail, condition on the head.
            head = law.reshape((x ** (j + 1), -1)).sum(axis=1).reshape((x,) * j + (x,))
            prefix_mass = head.sum(axis=-1)
            ok = prefix_mass > 0
            cond = head[ok] / prefix_mass[ok][..., None]
            c0 = min(c0, float(cond.min()))
    return c0


@dataclass(frozen=True)
class AssumptionReport:
    """Observed regularity constants and distinguishability margins."""

    c0: float
    c1: float
    c0_declared: float | None
    c0_declared_holds: bool
    prior_positive: bool
    margins: tuple | None          # per-z* margin, pair models only
    distinguishable: tuple | None  # margin > 0 flags

    def to_dict(self) -> dict:
        return {
            "c0": self.c0,
            "c1": self.c1,
            "c0_declared": self.c0_declared,
            "c0_declared_holds": self.c0_declared_holds,
            "prior_positive": self.prior_positive,
            "margins": None if self.margins is None else list(self.margins),
            "distinguishable": None if self.distinguishable is None
            else list(self.distinguishable),
        }


def validate_assumptions(model) -> AssumptionReport:
    """Report c0, c1, and (for pair models) per-concept distinguishability margins.

    The margin for z* is ``min_{z != z*} KL_pair(z*, z) - 2 log(1/c0)``.
    """
    c1 = float(model.prior.min())
    if isinstance(model, PairConceptModel):
        c0 = _pair_token_c0(model)
        margins = []
        for z_star in model.concepts:
            others = [kl_pair(model, z_star, z) for z in model.concepts if z != z_star]
            worst = min(others) if others else float("inf")
            margins.append(worst - 2.0 * np.log(1.0 / c0))
        margins_t: tuple | None = tuple(margins)
        dist: tuple | None = tuple(m > 0 for m in margins)
    else:
        c0 = float(model.tables.min())
        margins_t = None
        dist = None
    declared = model.c0
    holds = True if declared is None else c0 >= declared - _ROW_TOL
    return AssumptionReport(
        c0=c0, c1=c1, c0_declared=declared, c0_declared_holds=holds,
        prior_positive=c1 > 0, margins=margins_t, distinguishable=dist,
    )


def _floored_rows(rng: np.random.Generator, shape: tuple, floor: float) -> np.ndarray:
    """Random stochastic rows with every entry >= floor."""
    k = shape[-1]
    if not 0 <= floor <= 1.0 / k:
        raise ValueError(f"floor {floor} infeasible for rows of width {k}")
    raw = rng.dirichlet(np.ones(k), size=shape[:-1])
    return floor + (1.0 - k * floor) * raw


def random_model(n_concepts: int, alphabet_size: int, order: int,
                 rng: np.random.Generator, c0: float = 0.05,
                 prior_floor: float | None = None,
                 covariate_length: int = 0) -> LatentConceptModel:
    """Random tabular model with a min-entry floor c0 on every conditional row."""
    n_ctx = (alphabet_size + 1) ** order
    tables = _floored_rows(rng, (n_concepts, n_ctx, alphabet_size), c0)
    floor = (0.5 / n_concepts) if prior_floor is None else prior_floor
    prior = _floored_rows(rng, (n_concepts,), floor)
    return LatentConceptModel(prior=prior, order=order, alphabet_size=alphabet_size,
                              tables=tables, covariate_length=covariate_length,
                              c0=c0 if c0 > 0 else None)


def random_pair_model(n_concepts: int, alphabet_size: int, covariate_length: int,
                      rng: np.random.Generator, c0: float = 0.05,
                      prior_floor: float | None = None,
                      shared_covariate_law: bool = False) -> PairConceptModel:
    """Random i.i.d.-pair model; covariate tokens drawn i.i.d. within a covariate.

    Builds the covariate law as a per-concept product of single-token
    distributions (each entry >= c0), so the implied per-token conditionals
    are exactly those distributions.
    """
    x, l = alphabet_size, covariate_length
    n_cov = x ** l
    laws = np.ones((n_concepts, n_cov))
    per_token = _floored_rows(rng, (n_concepts, x), c0)
    if shared_covariate_law:
        per_token[:] = per_token[0]
    for z in range(n_concepts):
        law = np.ones(())
        for _ in range(l):
            law = np.multiply.outer(law, per_token[z])
        laws[z] = law.reshape(-1)
    resp = _floored_rows(rng, (n_concepts, n_cov, x), c0)
    floor = (0.5 / n_concepts) if prior_floor is None else prior_floor
    prior = _floored_rows(rng, (n_concepts,), floor)
    return PairConceptModel(prior=prior, alphabet_size=x, covariate_length=l,
                            covariate_law=laws, response_tables=resp,
                            c0=c0 if c0 > 0 else None)


_FORMAT = "icl-bma-lab-model"
_VERSION = 1


def save_model(model, path) -> None:
    """Write a model file (JSON; floats round-trip bit-exactly)."""
    if isinstance(model, LatentConceptModel):
        doc = {
            "format": _FORMAT, "version": _VERSION, "kind": "markov",
            "prior": model.prior.tolist(), "order": model.order,
            "alphabet_size": model.alphabet_size,
            "covariate_length": model.covariate_length,
            "c0": model.c0, "tables": model.tables.tolist(),
        }
    elif isinstance(model, PairConceptModel):
        doc = {
            "format": _FORMAT, "version": _VERSION, "kind": "pair",
            "prior": model.prior.tolist(),
            "alphabet_size": model.alphabet_size,
            "covariate_length": model.covariate_length,
            "c0": model.c0,
            "covariate_law": model.covariate_law.tolist(),
            "response_tables": model.response_tables.tolist(),
        }
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def model_from_recipe(recipe: dict):
    """Expand a generator recipe (seeded random tables with floor c0)."""
    kind = recipe.get("kind", "markov")
    rng = np.random.default_rng(int(recipe["seed"]))
    common = dict(n_concepts=int(recipe["n_concepts"]),
                  alphabet_size=int(recipe["alphabet_size"]),
                  rng=rng, c0=float(recipe.get("c0", 0.05)))
    if recipe.get("prior_floor") is not None:
        common["prior_floor"] = float(recipe["prior_floor"])
    if kind == "markov":
        return random_model(order=int(recipe.get("order", 1)),
                            covariate_length=int(recipe.get("covariate_length", 0)),
                            **common)
    if kind == "pair":
        return random_pair_model(
            covariate_length=int(recipe["covariate_length"]),
            shared_covariate_law=bool(recipe.get("shared_covariate_law", False)),
            **common)
    raise ValueError(f"unknown recipe kind {kind!r}")


def load_model(path):
    """Load a model file; dense tables or a generator recipe."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != _FORMAT:
        raise ValueError(f"{path}: not a {_FORMAT} file")
    if doc.get("version") != _VERSION:
        raise ValueError(f"{path}: unsupported version {doc.get('version')}")
    kind = doc.get("kind")
    if kind == "recipe":
        return model_from_recipe(doc["recipe"])
    if kind == "markov":
        return LatentConceptModel(
            prior=np.array(doc["prior"], dtype=float),
            order=int(doc["order"]),
            alphabet_size=int(doc["alphabet_size"]),
            tables=np.array(doc["tables"], dtype=float),
            covariate_length=int(doc.get("covariate_length", 0)),
            c0=doc.get("c0"),
        )
    if kind == "pair":
        return PairConceptModel(
            prior=np.array(doc["prior"], dtype=float),
            alphabet_size=int(doc["alphabet_size"]),
            covariate_length=int(doc["covariate_length"]),
            covariate_law=np.array(doc["covariate_law"], dtype=float),
            response_tables=np.array(doc["response_tables"], dtype=float),
            c0=doc.get("c0"),
        )
    raise ValueError(f"{path}: unknown model kind {kind!r}")
