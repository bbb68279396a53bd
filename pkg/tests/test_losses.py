import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfl.core_math import make_rng
from pfl.errors import NumericError, ShapeError
from pfl.losses import (DEN_FLOOR, LossConfig, evaluate_objective, loss_gradients, total_loss, triplet_loss_normal,
                        triplet_loss_uncertainty, triplet_term)
from pfl.model import UNCERTAINTY_PARAMS, ModelConfig, ProgressiveEmbedding, init_params
from pfl.sampling import TripletSets, enumerate_triplets

from conftest import TINY_MODEL, random_params


def oracle_uncertainty(T, mu, sigma, m):
    """Loop-by-loop formula: per part mean over triplets of the hinge, then mean over parts."""
    N, S, E = mu.shape
    parts = []
    for s in range(S):
        acc = 0.0
        for a, p, n in T:
            sa, sp, sn = (float(np.mean(sigma[i, s] ** 2)) for i in (a, p, n))
            dp = float(np.sum((mu[a, s] - mu[p, s]) ** 2)) / max(sa + sp, DEN_FLOOR)
            dn = float(np.sum((mu[a, s] - mu[n, s]) ** 2)) / max(sa + sn, DEN_FLOOR)
            acc += max(dp - dn + m, 0.0)
        parts.append(acc / len(T))
    return sum(parts) / S


def random_instance(seed, n_ids=3, per_id=2, S=2, E=3):
    r = make_rng(seed)
    labels = np.repeat(np.arange(n_ids), per_id)
    T = enumerate_triplets(labels)
    mu = r.standard_normal((labels.size, S, E))
    sigma = np.abs(r.standard_normal((labels.size, S, E)))
    return labels, T, mu, sigma


def test_identical_embeddings_give_margin():
    T = enumerate_triplets(np.array([0, 0, 1]))
    x = np.ones((3, 2, 4))
    assert triplet_loss_normal(T, x, 0.2) == pytest.approx(0.2, abs=1e-15)
    assert triplet_loss_uncertainty(T, x, np.ones_like(x), 0.2) == pytest.approx(0.2, abs=1e-15)


def test_margin_satisfied_gives_zero():
    T = np.array([[0, 1, 2]])
    x = np.zeros((3, 1, 2))
    x[2, 0] = [1.0, 0.0]  # squared distance 1 > margin
    assert triplet_loss_normal(T, x, 0.2) == 0.0


def test_hand_computed_hinge():
    # d01 = 1, d02 = 0.25, d12 = 1.25; triplets (0,1,2) -> 0.95, (1,0,2) -> 0
    x = np.array([[[0.0, 0.0]], [[1.0, 0.0]], [[0.0, 0.5]]])
    T = enumerate_triplets(np.array([0, 0, 1]))
    assert triplet_loss_normal(T, x, 0.2) == pytest.approx(0.475, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_uncertainty_matches_oracle(seed):
    _, T, mu, sigma = random_instance(seed)
    assert abs(triplet_loss_uncertainty(T, mu, sigma, 0.2) - oracle_uncertainty(T, mu, sigma, 0.2)) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_half_variance_degenerates_to_normal(seed):
    _, T, mu, _ = random_instance(seed)
    s = np.full(mu.shape[:2], 0.5)
    assert triplet_term(T, mu, None, 0.2, s=s).value == triplet_loss_normal(T, mu, 0.2)
    sigma = np.full_like(mu, np.sqrt(0.5))
    assert abs(triplet_loss_uncertainty(T, mu, sigma, 0.2) - triplet_loss_normal(T, mu, 0.2)) < 1e-12
    elementwise = LossConfig(0.2, "elementwise")
    assert abs(triplet_loss_uncertainty(T, mu, sigma, elementwise) - triplet_loss_normal(T, mu, 0.2)) < 1e-12


def test_total_loss_double_degeneration():
    labels, T_c, mu_c, _ = random_instance(4, n_ids=4)
    T_v = enumerate_triplets(labels, labels < 2)
    mu_v = make_rng(5).standard_normal(mu_c.shape)
    sig = np.full_like(mu_c, np.sqrt(0.5))
    emb = ProgressiveEmbedding(mu_v, mu_c, sig, sig, e_v=mu_v, e_c=mu_c)
    b = total_loss(T_v, T_c, emb, LossConfig(0.2))
    expected = (triplet_loss_normal(T_v, mu_v) + triplet_loss_normal(T_c, mu_c)) / 2
    assert abs(b.total - expected) < 1e-12
    assert b.total == pytest.approx((b.L_tv + b.L_tc + b.L_tv_e + b.L_tc_e) / 4, abs=1e-15)


def test_total_loss_straight_line_oracle():
    labels, T_c, mu_c, sigma_c = random_instance(6, n_ids=4)
    T_v = enumerate_triplets(labels, labels < 2)
    r = make_rng(7)
    mu_v, sigma_v = r.standard_normal(mu_c.shape), np.abs(r.standard_normal(mu_c.shape))
    emb = ProgressiveEmbedding(mu_v, mu_c, sigma_v, sigma_c)
    b = total_loss(T_v, T_c, emb, LossConfig(0.2), make_rng(8))
    eps_r = make_rng(8)
    e_v = mu_v + eps_r.standard_normal(mu_v.shape) * sigma_v
    e_c = mu_c + eps_r.standard_normal(mu_c.shape) * sigma_c
    terms = [oracle_uncertainty(T_v, mu_v, sigma_v, 0.2), oracle_uncertainty(T_c, mu_c, sigma_c, 0.2),
             oracle_uncertainty(T_v, e_v, sigma_v, 0.2), oracle_uncertainty(T_c, e_c, sigma_c, 0.2)]
    assert abs(b.total - sum(terms) / 4) < 1e-12
    assert np.array_equal(emb.e_v, e_v)


def test_empty_tv_is_skipped_and_flagged():
    labels, T_c, mu, sigma = random_instance(1)
    emb = ProgressiveEmbedding(mu, mu, sigma, sigma, e_v=mu, e_c=mu)
    b = total_loss(np.zeros((0, 3), dtype=int), T_c, emb, LossConfig(0.2))
    assert b.L_tv is None and b.L_tv_e is None
    assert any("T_v empty" in f for f in b.flags)
    assert b.total == pytest.approx((b.L_tc + b.L_tc_e) / 2)
    assert triplet_loss_normal(np.zeros((0, 3), dtype=int), mu) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_terms_non_negative(seed):
    labels, T, mu, sigma = random_instance(seed)
    emb = ProgressiveEmbedding(mu, mu + 0.1, sigma, sigma)
    b = total_loss(T, T, emb, LossConfig(0.2), make_rng(seed))
    assert all(v >= 0 for v in b.terms().values())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(1.01, 10.0))
def test_anchor_scale_monotone(seed, factor):
    """Raising s_a never increases the positive-pair term of a triplet.

    The negative is placed on the anchor so the hinge argument is exactly the
    positive term plus the margin.
    """
    _, _, mu, sigma = random_instance(seed)
    mu = mu.copy()
    mu[2] = mu[0]
    T = np.array([[0, 1, 2]])
    s = (sigma ** 2).mean(axis=-1)
    s2 = s.copy()
    s2[0] *= factor
    h1 = triplet_term(T, mu, None, 0.2, s=s).hinge
    h2 = triplet_term(T, mu, None, 0.2, s=s2).hinge
    assert np.all(h2 <= h1)
    assert np.all(h1 >= 0.2)


def test_input_validation():
    T = np.array([[0, 1, 2]])
    with pytest.raises(ShapeError):
        triplet_loss_normal(T, np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        triplet_loss_normal(np.array([[0, 1, 5]]), np.zeros((3, 1, 2)))
    with pytest.raises(NumericError):
        triplet_loss_uncertainty(T, np.full((3, 1, 2), np.nan), np.ones((3, 1, 2)))
    with pytest.raises(ValueError):
        triplet_loss_uncertainty(T, np.zeros((3, 1, 2)), -np.ones((3, 1, 2)))
    with pytest.raises(ValueError):
        LossConfig(margin=0.0)


def _separated_batch():
    """Two identities whose embeddings sit far apart, positives identical."""
    cfg = ModelConfig(frame_dim=8, feature_dim=8, parts=2, embed_dim=4, head_dim=4)
    p = init_params(cfg, make_rng(0))
    p.backbone_w[:] = np.eye(8)
    p.id_cvm_w[:] = np.eye(4)
    frames = np.zeros((4, 2, 8))
    frames[:2, :, [0, 4]] = 10.0
    frames[2:, :, [1, 5]] = 10.0
    labels = np.array([0, 0, 1, 1])
    T = TripletSets(enumerate_triplets(labels, labels < 2), enumerate_triplets(labels))
    return cfg, p, frames, T


@pytest.mark.parametrize("objective", ["identity_only", "full", "baseline"])
def test_inactive_hinges_give_zero_gradients(objective):
    cfg, p, frames, T = _separated_batch()
    shape = (4, cfg.parts, cfg.embed_dim)
    eps = (np.zeros(shape), np.zeros(shape)) if objective == "full" else None
    ev = evaluate_objective(frames, T, p, cfg, LossConfig(0.2), objective=objective, eps=eps)
    assert ev.breakdown.total == 0.0
    for name, g in ev.grads.items():
        assert np.all(g == 0.0), name


def test_phase_gating_ignores_uncertainty_params(tiny_dataset):
    p = random_params(TINY_MODEL, 3)
    labels = np.repeat(np.arange(4), 2)
    T = TripletSets(enumerate_triplets(labels, labels < 2), enumerate_triplets(labels))
    frames = make_rng(4).standard_normal((8, 3, 8))
    g1 = loss_gradients(frames, T, p, TINY_MODEL, LossConfig(1.0), objective="identity_only")
    q = p.copy()
    r = make_rng(5)
    for name in UNCERTAINTY_PARAMS:
        getattr(q, name)[...] = r.standard_normal(getattr(q, name).shape)
    g2 = loss_gradients(frames, T, q, TINY_MODEL, LossConfig(1.0), objective="identity_only")
    for name, g in g1.items():
        assert np.array_equal(g, getattr(g2, name))
    for name in UNCERTAINTY_PARAMS:
        assert np.all(getattr(g1, name) == 0.0)


def test_full_objective_needs_noise_source():
    cfg, p, frames, T = _separated_batch()
    with pytest.raises(ValueError):
        evaluate_objective(frames, T, p, cfg, LossConfig(0.2), objective="full")
    with pytest.raises(ValueError):
        evaluate_objective(frames, T, p, cfg, LossConfig(0.2), objective="nope")
