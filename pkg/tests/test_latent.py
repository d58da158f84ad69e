import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from memdial.composer import Kind, compose
from memdial.errors import ConfigError, NumericError
from memdial.latent import (LatentModels, check_distribution, kl, sample,
                            temper, top_m)
from memdial.neural import score_candidates
from memdial.selfcheck import make_tiny_state, random_tiny_bundle

torch.set_num_threads(1)

probs_vectors = st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=8).map(
    lambda xs: torch.tensor(xs, dtype=torch.float64) / sum(xs))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def test_check_distribution_rejects_bad_sum():
    with pytest.raises(NumericError):
        check_distribution(torch.tensor([0.5, 0.6]))
    with pytest.raises(NumericError):
        check_distribution(torch.tensor([1.2, -0.2]))


def test_sample_point_mass():
    rng = np.random.default_rng(0)
    p = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    assert all(sample(p, rng) == 1 for _ in range(20))


def test_sample_uniform_frequencies():
    rng = np.random.default_rng(1)
    p = torch.full((4,), 0.25, dtype=torch.float64)
    draws = np.bincount([sample(p, rng) for _ in range(100_000)], minlength=4)
    assert np.allclose(draws / 100_000, 0.25, atol=0.01)


def test_sample_fixed_seed_fixed_sequence():
    p = torch.tensor([0.3, 0.3, 0.4], dtype=torch.float64)
    a = [sample(p, np.random.default_rng(42)) for _ in range(1)]
    b = [sample(p, np.random.default_rng(42)) for _ in range(1)]
    assert a == b


def test_sample_consumes_one_uniform():
    p = torch.tensor([0.5, 0.5], dtype=torch.float64)
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    sample(p, r1)
    r2.random()
    assert r1.random() == r2.random()


def test_kl_zero_at_equality():
    p = torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64)
    assert float(kl(p, p.clone())) == pytest.approx(0.0, abs=1e-12)


def test_kl_hand_value():
    v = float(kl(torch.tensor([1.0, 0.0], dtype=torch.float64),
                 torch.tensor([0.5, 0.5], dtype=torch.float64)))
    assert v == pytest.approx(np.log(2), abs=1e-12)


def test_kl_zero_q_mass_rejected():
    with pytest.raises(NumericError):
        kl(torch.tensor([0.5, 0.5]), torch.tensor([1.0, 0.0]))


def test_kl_shape_mismatch():
    with pytest.raises(ConfigError):
        kl(torch.tensor([1.0]), torch.tensor([0.5, 0.5]))


@settings(max_examples=200)
@given(probs_vectors, probs_vectors)
def test_kl_nonnegative(p, q):
    if p.shape != q.shape:
        return
    assert float(kl(p, q)) >= -1e-12


def test_temper_identity_at_one():
    p = torch.tensor([0.7, 0.2, 0.1], dtype=torch.float64)
    assert torch.allclose(temper(p, 1.0), p)


def test_temper_flattens_at_high_temperature():
    p = torch.tensor([0.9, 0.05, 0.05], dtype=torch.float64)
    flat = temper(p, 1e6)
    assert torch.allclose(flat, torch.full((3,), 1 / 3, dtype=torch.float64),
                          atol=1e-4)


def test_temper_sharpens_below_one():
    got = temper(torch.tensor([0.8, 0.2], dtype=torch.float64), 0.5)
    want = torch.tensor([0.64, 0.04], dtype=torch.float64) / 0.68
    assert torch.allclose(got, want, atol=1e-12)


def test_temper_rejects_nonpositive_temperature():
    with pytest.raises(ConfigError):
        temper(torch.tensor([0.5, 0.5]), 0.0)


def test_top_m_ties_break_low():
    p = torch.tensor([0.25, 0.25, 0.4, 0.1], dtype=torch.float64)
    assert top_m(p, 3) == [2, 0, 1]
    with pytest.raises(ConfigError):
        top_m(p, 5)


# ---------------------------------------------------------------------------
# the five distributions
# ---------------------------------------------------------------------------


def test_identical_fragments_uniform():
    state = make_tiny_state(0)
    lat = state.latent
    frags = [["t1", "t2"]] * 4
    p = lat.prior_zp([["t0"]], frags)
    assert torch.allclose(p, torch.full((4,), 0.25, dtype=torch.float64))


def test_single_fragment_probability_one():
    state = make_tiny_state(0)
    p = state.latent.post_zp([["t0"]], ["t3"], [["t1", "t2"]])
    assert float(p[0]) == pytest.approx(1.0, abs=1e-12)


def test_changing_zp_changes_prior_zk():
    state = make_tiny_state(1)
    lat = state.latent
    rng = np.random.default_rng(0)
    b = random_tiny_bundle(rng)
    with torch.no_grad():
        row0 = lat.prior_zk(b.context, 0, b.fragments, b.knowledge)
        row1 = lat.prior_zk(b.context, 1, b.fragments, b.knowledge)
    assert not torch.equal(row0, row1)


def test_posterior_equals_prior_when_params_shared_and_no_response():
    """With phi copied from theta, scoring the prior composition through the
    posterior encoder reproduces the prior distribution."""
    state = make_tiny_state(2)
    m = state.models
    m.encoder_post.load_state_dict(m.encoder_prior.state_dict())
    m.head_post_zp.load_state_dict(m.head_prior_zp.state_dict())
    rng = np.random.default_rng(1)
    b = random_tiny_bundle(rng)
    comps = state.latent.compositions(Kind.PRIOR_ZP, b.context,
                                      fragments=b.fragments)
    with torch.no_grad():
        via_phi = score_candidates(m.encoder_post, m.head_post_zp, comps)
        via_theta = state.latent.prior_zp(b.context, b.fragments)
    assert torch.allclose(via_phi, via_theta, atol=1e-12)


def test_distributions_match_manual_pipeline():
    state = make_tiny_state(3)
    lat = state.latent
    rng = np.random.default_rng(2)
    b = random_tiny_bundle(rng)
    comps = [compose(Kind.POST_ZP, lat.vocab, b.context, response=b.response,
                     memory=f, cfg=lat.ccfg) for f in b.fragments]
    with torch.no_grad():
        manual = score_candidates(state.models.encoder_post,
                                  state.models.head_post_zp, comps)
        got = lat.post_zp(b.context, b.response, b.fragments)
    assert torch.allclose(got, manual, atol=1e-12)


def test_conditional_tables_match_per_pair_scoring():
    state = make_tiny_state(4)
    lat = state.latent
    rng = np.random.default_rng(3)
    b = random_tiny_bundle(rng, n_p=4, n_k=4)
    with torch.no_grad():
        _, rows = lat.prior_tables(b.context, b.fragments, b.knowledge)
        for zp in range(4):
            row = lat.prior_zk(b.context, zp, b.fragments, b.knowledge)
            assert torch.allclose(rows[zp], row, atol=1e-12)


def test_out_of_range_conditioning_index():
    state = make_tiny_state(5)
    rng = np.random.default_rng(4)
    b = random_tiny_bundle(rng)
    with pytest.raises(IndexError):
        state.latent.prior_zk(b.context, 99, b.fragments, b.knowledge)
    with pytest.raises(IndexError):
        state.latent.aux_zp(b.context, b.response, -1, b.fragments, b.knowledge)


def test_independent_variant_ignores_fragment_choice():
    state = make_tiny_state(6)
    lat_dep = state.latent
    lat_ind = LatentModels(state.vocab, state.models, lat_dep.ccfg,
                           independent=True)
    rng = np.random.default_rng(5)
    b = random_tiny_bundle(rng)
    with torch.no_grad():
        dep0 = lat_dep.prior_zk(b.context, 0, b.fragments, b.knowledge)
        dep1 = lat_dep.prior_zk(b.context, 1, b.fragments, b.knowledge)
        ind0 = lat_ind.prior_zk(b.context, 0, b.fragments, b.knowledge)
        ind1 = lat_ind.prior_zk(b.context, 1, b.fragments, b.knowledge)
    assert torch.equal(ind0, ind1)
    assert not torch.equal(dep0, dep1)


def test_log_mode_is_log_of_probs():
    state = make_tiny_state(7)
    rng = np.random.default_rng(6)
    b = random_tiny_bundle(rng)
    with torch.no_grad():
        p = state.latent.post_zp(b.context, b.response, b.fragments)
        lp = state.latent.post_zp(b.context, b.response, b.fragments, log=True)
    assert torch.allclose(lp, torch.log(p), atol=1e-12)
