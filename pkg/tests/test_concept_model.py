import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icl_bma_lab import concept_model as cm


def two_concept_model(rows0, rows1, prior=(0.5, 0.5), order=0, alphabet=None):
    alphabet = alphabet or len(rows0[0])
    tables = np.stack([np.asarray(rows0, dtype=float), np.asarray(rows1, dtype=float)])
    return cm.LatentConceptModel(prior=list(prior), order=order,
                                 alphabet_size=alphabet, tables=tables)


# ---------------------------------------------------------------- sampling

def test_sample_concept_degenerate_prior():
    m = cm.LatentConceptModel(prior=[1.0, 0.0], order=0, alphabet_size=2,
                              tables=[[[0.5, 0.5]], [[0.5, 0.5]]])
    rng = np.random.default_rng(0)
    assert all(cm.sample_concept(m, rng) == 0 for _ in range(50))


@pytest.mark.parametrize("p0,lo,hi", [(0.5, 0.49, 0.51), (0.9, 0.89, 0.91)])
def test_sample_concept_frequencies(p0, lo, hi):
    m = cm.LatentConceptModel(prior=[p0, 1 - p0], order=0, alphabet_size=2,
                              tables=[[[0.5, 0.5]], [[0.5, 0.5]]])
    rng = np.random.default_rng(123)
    draws = np.array([cm.sample_concept(m, rng) for _ in range(100_000)])
    freq = np.mean(draws == 0)
    assert lo <= freq <= hi


# ---------------------------------------------------------------- generation

def test_generate_deterministic_chain_seed_independent():
    # one-hot rows: the chain is a fixed cycle regardless of the seed
    # (context ids: 0 = after token 0, 1 = after token 1, 2 = padded start)
    rows = np.zeros((3, 2))
    rows[2] = [1, 0]   # start -> token 0
    rows[0] = [0, 1]   # after 0 -> 1
    rows[1] = [1, 0]   # after 1 -> 0
    m = cm.LatentConceptModel(prior=[1.0], order=1, alphabet_size=2, tables=[rows])
    a = cm.generate_sequence(m, 0, 9, np.random.default_rng(1))
    b = cm.generate_sequence(m, 0, 9, np.random.default_rng(999))
    assert np.array_equal(a.tokens, b.tokens)
    assert list(a.tokens[:4]) == [0, 1, 0, 1]


def test_generate_length_one():
    m = two_concept_model([[0.25] * 4], [[0.25] * 4])
    seq = cm.generate_sequence(m, 0, 1, np.random.default_rng(0))
    assert len(seq) == 1 and 0 <= seq.tokens[0] < 4


def test_generate_reproducible():
    rng_model = np.random.default_rng(5)
    m = cm.random_model(3, 4, 2, rng_model, c0=0.05)
    a = cm.generate_sequence(m, 2, 100, np.random.default_rng(77))
    b = cm.generate_sequence(m, 2, 100, np.random.default_rng(77))
    assert np.array_equal(a.tokens, b.tokens)


def test_generate_unknown_concept():
    m = two_concept_model([[0.5, 0.5]], [[0.5, 0.5]])
    with pytest.raises(cm.UnknownConceptError):
        cm.generate_sequence(m, 7, 5, np.random.default_rng(0))


def test_transition_counts_match_table():
    # order-1 two-token chain: empirical transitions within 3 sigma
    rows = np.array([[0.3, 0.7], [0.8, 0.2], [0.5, 0.5]])
    m = cm.LatentConceptModel(prior=[1.0], order=1, alphabet_size=2, tables=[rows])
    seq = cm.generate_sequence(m, 0, 100_000, np.random.default_rng(11))
    toks = seq.tokens
    for prev in (0, 1):
        idx = np.nonzero(toks[:-1] == prev)[0] + 1
        n = idx.size
        p = rows[prev, 1]  # context index equals the previous token id
        freq = float(np.mean(toks[idx] == 1))
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(freq - p) <= 3 * sigma


# ---------------------------------------------------------------- conditionals

def test_conditional_uniform_table():
    m = two_concept_model([[0.25] * 4], [[0.25] * 4])
    np.testing.assert_allclose(cm.conditional(m, 0, []), [0.25] * 4)


def test_conditional_short_prefix_uses_padded_context():
    rng = np.random.default_rng(3)
    m = cm.random_model(2, 3, 2, rng, c0=0.02)
    row = cm.conditional(m, 1, [2])
    # padded context is (pad, 2); pad token id equals alphabet_size
    base = m.alphabet_size + 1
    idx = m.pad_token * base + 2
    np.testing.assert_array_equal(row, m.tables[1, idx])


def test_conditional_respects_declared_floor():
    rng = np.random.default_rng(9)
    m = cm.random_model(3, 4, 1, rng, c0=0.07)
    assert m.tables.min() >= 0.07 - 1e-12
    for z in m.concepts:
        for prefix in ([], [0], [1, 2, 3]):
            assert cm.conditional(m, z, prefix).min() >= 0.07 - 1e-12


def test_conditional_rows_sum_to_one():
    rng = np.random.default_rng(4)
    m = cm.random_model(4, 5, 1, rng, c0=0.01)
    seq = cm.generate_sequence(m, 0, 30, rng)
    for t in (0, 1, 7, 30):
        for z in m.concepts:
            row = cm.conditional(m, z, seq.tokens[:t])
            assert row.sum() == pytest.approx(1.0, abs=1e-10)
            assert row.min() >= 0


# ------------------------------------------------------- marginal conditional

def test_marginal_single_concept():
    rng = np.random.default_rng(6)
    m = cm.random_model(1, 4, 1, rng, c0=0.05)
    prefix = [1, 3, 0]
    np.testing.assert_allclose(cm.marginal_conditional(m, prefix),
                               cm.conditional(m, 0, prefix), atol=1e-15)


def test_marginal_empty_prefix_is_prior_mixture():
    m = two_concept_model([[0.7, 0.1, 0.1, 0.1]], [[0.1, 0.1, 0.1, 0.7]],
                          prior=(0.3, 0.7))
    expected = 0.3 * np.array([0.7, 0.1, 0.1, 0.1]) + 0.7 * np.array([0.1, 0.1, 0.1, 0.7])
    np.testing.assert_allclose(cm.marginal_conditional(m, []), expected, atol=1e-14)


def test_marginal_one_token_hand_bayes():
    # two order-0 concepts; after observing token 0 posterior is (0.9, 0.1)
    m = two_concept_model([[0.9, 0.1]], [[0.1, 0.9]])
    post0 = 0.5 * 0.9 / (0.5 * 0.9 + 0.5 * 0.1)
    expected = post0 * np.array([0.9, 0.1]) + (1 - post0) * np.array([0.1, 0.9])
    np.testing.assert_allclose(cm.marginal_conditional(m, [0]), expected, atol=1e-12)


def test_marginal_matches_bruteforce_mixture():
    rng = np.random.default_rng(8)
    for _ in range(20):
        m = cm.random_model(3, 3, 1, rng, c0=0.03)
        seq = cm.generate_sequence(m, 1, 6, rng)
        tokens = seq.tokens
        # brute force: posterior from full likelihood products, independently
        probs = np.ones(3)
        for i, tok in enumerate(tokens):
            for z in m.concepts:
                probs[z] *= cm.conditional(m, z, tokens[:i])[tok]
        post = probs * m.prior
        post /= post.sum()
        mix = sum(post[z] * cm.conditional(m, z, tokens) for z in m.concepts)
        np.testing.assert_allclose(cm.marginal_conditional(m, tokens), mix, atol=1e-10)


# ---------------------------------------------------------------- kl_pair

def make_pair_model(prior, cov_laws, resp_tables, l=1, alphabet=2):
    return cm.PairConceptModel(prior=prior, alphabet_size=alphabet,
                               covariate_length=l,
                               covariate_law=np.asarray(cov_laws, dtype=float),
                               response_tables=np.asarray(resp_tables, dtype=float))


def test_kl_pair_identical_concepts():
    rng = np.random.default_rng(10)
    pm = cm.random_pair_model(3, 2, 2, rng, c0=0.1)
    assert cm.kl_pair(pm, 1, 1) == 0.0


def test_kl_pair_bernoulli_closed_form():
    # shared covariate law; responses (0.9, 0.1) vs (0.1, 0.9)
    pm = make_pair_model([0.5, 0.5],
                         [[0.5, 0.5], [0.5, 0.5]],
                         [[[0.9, 0.1], [0.9, 0.1]], [[0.1, 0.9], [0.1, 0.9]]])
    expected = 0.8 * math.log(9)
    assert cm.kl_pair(pm, 0, 1) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.7578, abs=2e-4)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_kl_pair_nonnegative(seed):
    rng = np.random.default_rng(seed)
    pm = cm.random_pair_model(2, 2, 1, rng, c0=0.05)
    d = cm.kl_pair(pm, 0, 1)
    assert d >= 0
    # zero iff identical pair laws
    paw0 = pm.covariate_law[0][:, None] * pm.response_tables[0]
    paw1 = pm.covariate_law[1][:, None] * pm.response_tables[1]
    if np.abs(paw0 - paw1).max() > 1e-9:
        assert d > 0


def test_kl_pair_enumeration_cap():
    rng = np.random.default_rng(2)
    pm = cm.random_pair_model(2, 4, 3, rng, c0=0.01)
    with pytest.raises(cm.EnumerationCapError):
        cm.kl_pair(pm, 0, 1, cap=10)


# ---------------------------------------------------------------- mixing time

def test_mixing_time_flip_half_is_one():
    m = cm.LatentConceptModel(prior=[1.0], order=1, alphabet_size=2,
                              tables=[[[0.5, 0.5]] * 3])
    assert cm.estimate_mixing_time(m, 0, 0.25) == 1


def test_mixing_time_identity_chain_errors():
    rows = np.zeros((3, 2))
    rows[0] = [1.0, 0.0]   # after 0 stay at 0
    rows[1] = [0.0, 1.0]   # after 1 stay at 1
    rows[2] = [0.5, 0.5]   # padded start
    m = cm.LatentConceptModel(prior=[1.0], order=1, alphabet_size=2, tables=[rows])
    with pytest.raises(cm.NonMixingError):
        cm.estimate_mixing_time(m, 0, 0.25)


def test_mixing_time_matches_bruteforce_scan():
    # lazy chain: stay w.p. 0.9, flip w.p. 0.1
    rows = np.array([[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]])
    m = cm.LatentConceptModel(prior=[1.0], order=1, alphabet_size=2, tables=[rows])
    eps = 0.25
    got = cm.estimate_mixing_time(m, 0, eps)

    # independent oracle: explicit power iteration over the 2-state chain
    p = np.array([[0.9, 0.1], [0.1, 0.9]])
    pi = np.array([0.5, 0.5])
    power = np.eye(2)
    t = 0
    while True:
        d = 0.5 * np.abs(power - pi).sum(axis=1).max()
        if d <= eps:
            break
        power = power @ p
        t += 1
    assert got == t
    # the defining property: d(got) <= eps < d(got - 1)
    d_at = 0.5 * np.abs(np.linalg.matrix_power(p, got) - pi).sum(axis=1).max()
    d_before = 0.5 * np.abs(np.linalg.matrix_power(p, got - 1) - pi).sum(axis=1).max()
    assert d_at <= eps < d_before


def test_mixing_time_epsilon_range():
    m = cm.LatentConceptModel(prior=[1.0], order=0, alphabet_size=2,
                              tables=[[[0.5, 0.5]]])
    with pytest.raises(ValueError):
        cm.estimate_mixing_time(m, 0, 0.0)


# ---------------------------------------------------------------- assumptions

def test_validate_uniform_tables():
    m = two_concept_model([[0.25] * 4], [[0.25] * 4])
    rep = cm.validate_assumptions(m)
    assert rep.c0 == pytest.approx(0.25)
    assert rep.c1 == pytest.approx(0.5)
    assert rep.prior_positive


def test_margin_identical_concepts_negative():
    pm = make_pair_model([0.5, 0.5],
                         [[0.5, 0.5], [0.5, 0.5]],
                         [[[0.8, 0.2], [0.8, 0.2]], [[0.8, 0.2], [0.8, 0.2]]])
    rep = cm.validate_assumptions(pm)
    assert all(mgn < 0 for mgn in rep.margins)
    assert not any(rep.distinguishable)


def test_margin_matches_kl_pair_arithmetic():
    # c0 = 0.1 model: margin = 0.8 ln 9 - 2 ln 10
    pm = make_pair_model([0.5, 0.5],
                         [[0.5, 0.5], [0.5, 0.5]],
                         [[[0.9, 0.1], [0.9, 0.1]], [[0.1, 0.9], [0.1, 0.9]]])
    rep = cm.validate_assumptions(pm)
    expected = 0.8 * math.log(9) - 2 * math.log(10)
    assert rep.c0 == pytest.approx(0.1, abs=1e-12)
    assert rep.margins[0] == pytest.approx(expected, abs=1e-10)
    assert expected == pytest.approx(-2.848, abs=2e-3)


def test_pair_token_c0_covers_covariate_conditionals():
    # covariate law concentrated: per-token conditional floor below response floor
    pm = make_pair_model([1.0], [[0.95, 0.05]], [[[0.5, 0.5], [0.5, 0.5]]])
    rep = cm.validate_assumptions(pm)
    assert rep.c0 == pytest.approx(0.05, abs=1e-12)


# ---------------------------------------------------------------- model files

def test_model_file_roundtrip_markov(tmp_path):
    rng = np.random.default_rng(21)
    m = cm.random_model(3, 4, 2, rng, c0=0.02, covariate_length=1)
    path = tmp_path / "model.json"
    cm.save_model(m, path)
    again = cm.load_model(path)
    assert again == m  # bit-exact round trip


def test_model_file_roundtrip_pair(tmp_path):
    rng = np.random.default_rng(22)
    pm = cm.random_pair_model(2, 3, 2, rng, c0=0.04)
    path = tmp_path / "pair.json"
    cm.save_model(pm, path)
    assert cm.load_model(path) == pm


def test_recipe_expansion_is_seeded(tmp_path):
    recipe = {"kind": "markov", "n_concepts": 2, "alphabet_size": 3,
              "order": 1, "c0": 0.05, "seed": 13}
    a = cm.model_from_recipe(recipe)
    b = cm.model_from_recipe(recipe)
    assert a == b


def test_load_rejects_foreign_files(tmp_path):
    path = tmp_path / "junk.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        cm.load_model(path)


# ---------------------------------------------------------------- sequences

def test_token_sequence_validation():
    with pytest.raises(ValueError):
        cm.TokenSequence([0, 5], alphabet_size=4)
    with pytest.raises(ValueError):
        cm.TokenSequence([0, 1], alphabet_size=4, response_positions=[1, 0])
    with pytest.raises(ValueError):
        cm.TokenSequence([0, 1], alphabet_size=4, response_positions=[5])


def test_response_positions_for_covariate_blocks():
    rng = np.random.default_rng(30)
    m = cm.random_model(2, 3, 0, rng, c0=0.05, covariate_length=2)
    seq = cm.generate_sequence(m, 0, 8, rng)
    np.testing.assert_array_equal(seq.response_positions, [2, 5])


def test_pair_prompt_tokens_flatten():
    prompt = cm.PairPrompt(covariates=[[0, 1], [2, 0]], responses=[3, 1],
                           alphabet_size=4)
    np.testing.assert_array_equal(prompt.tokens(), [0, 1, 3, 2, 0, 1])
