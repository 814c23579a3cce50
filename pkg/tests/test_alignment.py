import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcases import micro_objective
from oracles import naive_classifier, naive_concept_loss, naive_global_loss, unit
from simzss import autodiff as ad
from simzss.alignment import (
    LOGIT_SCALE_MAX,
    ConceptBatch,
    LossConfig,
    Projection,
    assemble_concept_batch,
    build_classifier,
    clamp_logit_scale,
    concept_loss,
    dense_reindex,
    global_loss,
    new_logit_scale,
    pool_visual_concept,
    pool_visual_concepts,
    text_concept_repr,
    total_loss,
)
from simzss.autodiff import ContractError, ParameterError, ShapeError, Tensor
from simzss.encoders import TextRepr, VisionRepr
from simzss.text import Concept, TokenizedCaption


def random_batch(rng, b_tilde, k, d=6):
    q = np.concatenate([np.arange(k), rng.integers(0, k, size=b_tilde - k)])
    rng.shuffle(q)
    C = Tensor(rng.normal(size=(b_tilde, d)))
    return ConceptBatch(C, C, Tensor(rng.normal(size=(b_tilde, d))), q, k)


# ------------------------------------------------------------ loop oracles


@pytest.mark.parametrize("seed", range(10))
def test_global_loss_matches_loop(seed):
    rng = np.random.default_rng(seed)
    n, dt, dv = int(rng.integers(1, 7)), 5, 4
    zv, zt = rng.normal(size=(n, dv)), rng.normal(size=(n, dt))
    g = Projection(Tensor(rng.normal(size=(dv, dt))), Tensor(rng.normal(size=dv)))
    ls = Tensor(np.array(rng.uniform(0, 3)))
    got = global_loss(zv, Tensor(zt), g, ls).item()
    assert abs(got - naive_global_loss(zv, zt, g.weight.data, g.bias.data, ls.item())) < 1e-6


def test_scatter_classifier_bit_exact_on_100_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(1, 5))
        cb = random_batch(rng, k + int(rng.integers(0, 6)), k)
        assert np.array_equal(build_classifier(cb).data, naive_classifier(cb.C_tilde.data, cb.q, k))


@pytest.mark.parametrize("seed", range(10))
def test_concept_loss_matches_loop(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    cb = random_batch(rng, k + int(rng.integers(0, 6)), k)
    h = build_classifier(cb)
    assert abs(concept_loss(cb, h).item() - naive_concept_loss(cb.C_v.data, h.data, cb.q)) < 1e-6


def test_scatter_example():
    cb = ConceptBatch(None, Tensor(np.array([[1.0, 0], [0, 1], [2, 2]])), None, np.array([0, 1, 0]), 2)
    assert build_classifier(cb).data.tolist() == [[3, 2], [0, 1]]


def test_classifier_needs_dense_indices():
    cb = ConceptBatch(None, Tensor(np.ones((2, 2))), None, np.array([0, 2]), 3)
    with pytest.raises(ContractError):
        build_classifier(cb)


def test_dense_reindex_first_appearance():
    q, order = dense_reindex([17, 4, 17, 9])
    assert q.tolist() == [0, 1, 0, 2] and order == [17, 4, 9]


# --------------------------------------------------------------- identities


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_single_pair_global_loss_is_zero(seed):
    rng = np.random.default_rng(seed)
    g = Projection.init(5, 4, rng)
    assert global_loss(rng.normal(size=(1, 4)), Tensor(rng.normal(size=(1, 5))), g, new_logit_scale()).item() < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_single_concept_loss_is_zero(seed, b_tilde):
    cb = random_batch(np.random.default_rng(seed), b_tilde, 1)
    assert concept_loss(cb, build_classifier(cb)).item() < 1e-6


def test_lambda_zero_returns_global_loss_object():
    Lg, Ll = Tensor(np.array(1.5)), Tensor(np.array(2.0))
    assert total_loss(Lg, Ll, 0.0) is Lg
    assert total_loss(Lg, None, 0.3) is Lg
    assert total_loss(Lg, Ll, 0.5).item() == pytest.approx(2.5)
    with pytest.raises(ParameterError):
        total_loss(Lg, Ll, -0.1)


def test_loss_config_validation():
    assert LossConfig().lam == 0.05 and LossConfig().tau == 0.1
    with pytest.raises(ParameterError):
        LossConfig(tau=0.0)


def test_logit_scale_init_and_clamp():
    ls = new_logit_scale()
    assert ls.item() == pytest.approx(np.log(1 / 0.07), rel=1e-6)
    ls.data[...] = 10.0
    clamp_logit_scale(ls)
    assert ls.item() == pytest.approx(LOGIT_SCALE_MAX)


def test_projection_shapes():
    g = Projection.init(5, 3, np.random.default_rng(0), bias=False)
    assert set(g.parameters()) == {"proj.weight"}
    assert g(Tensor(np.ones(5))).shape == (3,)
    with pytest.raises(ShapeError):
        g(Tensor(np.ones((2, 4))))


# ------------------------------------------------------------------ pooling


def test_pooling_convex_hull_on_1000_draws():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, d = int(rng.integers(1, 10)), int(rng.integers(1, 6))
        z = rng.normal(size=(n, d))
        c = rng.normal(size=d)
        tau = float(np.exp(rng.uniform(np.log(1e-3), np.log(1e3))))
        out = pool_visual_concept(Tensor(z), Tensor(c), tau).data
        lo, hi = z.min(axis=0), z.max(axis=0)
        assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)


def test_pooling_large_tau_is_patch_mean():
    rng = np.random.default_rng(1)
    z, c = rng.normal(size=(16, 8)), rng.normal(size=8)
    assert np.abs(pool_visual_concept(Tensor(z), Tensor(c), 1e6).data - z.mean(axis=0)).max() < 1e-4


def test_pooling_small_tau_picks_argmax_patch():
    rng = np.random.default_rng(2)
    done = 0
    while done < 50:
        z, c = rng.normal(size=(16, 8)), rng.normal(size=8)
        sims = np.sort(z @ c)
        if sims[-1] - sims[-2] <= 0.1:
            continue
        out = pool_visual_concept(Tensor(z), Tensor(c), 1e-3).data
        best = z[np.argmax(z @ c)]
        assert unit(out) @ unit(best) > 0.999
        done += 1


def test_batched_pooling_matches_single_and_gradient():
    rng = np.random.default_rng(3)
    Z = rng.normal(size=(3, 5, 4))
    owner = [2, 0, 2]
    C = rng.normal(size=(3, 4))
    out = pool_visual_concepts(Z, owner, Tensor(C), 0.7).data
    for j, o in enumerate(owner):
        np.testing.assert_allclose(out[j], pool_visual_concept(Tensor(Z[o]), Tensor(C[j]), 0.7).data, atol=1e-12)
    w = rng.normal(size=(3, 4))
    err = ad.check_gradients(lambda c: ad.sum(ad.mul(pool_visual_concepts(Z, owner, c, 0.7), Tensor(w))), [C])
    assert err < 1e-3


def test_pooling_bad_tau():
    with pytest.raises(ParameterError):
        pool_visual_concepts(np.ones((1, 2, 2)), [0], Tensor(np.ones((1, 2))), 0.0)


# ------------------------------------------------------------------ pairing


def test_text_concept_repr_is_row_mean():
    z = Tensor(np.arange(12.0).reshape(4, 3))
    assert text_concept_repr(z, [1, 3]).data.tolist() == [6.0, 7.0, 8.0]
    with pytest.raises(ContractError):
        text_concept_repr(z, [])


def test_assemble_concept_batch_provenance():
    rng = np.random.default_rng(4)
    caps = [
        TokenizedCaption("", [1, 5, 6, 2], [(0, 1)] * 4, [Concept(9, "a", [], [1]), Concept(3, "b", [], [2])]),
        TokenizedCaption("", [1, 5, 2], [(0, 1)] * 3, []),
        TokenizedCaption("", [1, 7, 2], [(0, 1)] * 3, [Concept(9, "a", [], [1])]),
    ]
    pairs = [
        (VisionRepr(rng.normal(size=(4, 3)).astype(np.float32), np.zeros(3, np.float32), (2, 2), 1),
         TextRepr(Tensor(rng.normal(size=(c.n_tokens, 5))), None), c)
        for c in caps
    ]
    g = Projection.init(5, 3, rng)
    cb = assemble_concept_batch(pairs, g, 0.1)
    assert cb.provenance == [(0, 9), (0, 3), (2, 9)]
    assert cb.q.tolist() == [0, 1, 0] and cb.k == 2 and cb.b_tilde == 3
    np.testing.assert_allclose(cb.C_t.data[2], pairs[2][1].dense.data[1])
    assert assemble_concept_batch(pairs[1:2], g, 0.1) is None


# --------------------------------------------------------------- full graph


@pytest.mark.parametrize("seed", range(20))
def test_total_objective_finite_differences(seed):
    fn, arrays = micro_objective(np.random.default_rng(seed))
    assert ad.check_gradients(fn, arrays) < 1e-3
