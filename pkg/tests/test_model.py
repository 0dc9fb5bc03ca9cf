import numpy as np
import pytest

from damba_st.data import tiny_corpus
from damba_st.model import VIEWS, DambaST, ModelConfig
from damba_st.numerics import grad_check
from damba_st.ssm import ContractError
from damba_st.training import ObjectiveConfig, multi_domain_objective
from damba_st.verify import TINY_MODEL


@pytest.fixture(scope="module")
def corpus():
    return tiny_corpus()


def tiny(variant="damba", seed=0, n_domains=2):
    return DambaST(ModelConfig(variant=variant, **TINY_MODEL), n_domains, np.random.default_rng(seed))


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(variant="other")
    with pytest.raises(ContractError):
        ModelConfig(history=24, patch_len=12, stride=12)  # 2 patches
    with pytest.raises(ContractError):
        ModelConfig(w1=0.0)
    assert ModelConfig().n_patches == 4


@pytest.mark.parametrize("variant", ["damba", "fused"])
def test_forward_shapes_and_finiteness(corpus, variant):
    m = tiny(variant)
    b = corpus[0]
    out = m(b.train.x, b.train.ts, b.context, 0, np.random.default_rng(1))
    B, F, N = b.train.y.shape
    assert out.pred.shape == (B, F, N) and out.pred_norm.shape == (B, N, F)
    assert np.all(np.isfinite(out.pred.data))
    assert set(out.views) == set(VIEWS)


def test_zero_shot_forward_finite(corpus):
    m = tiny()
    b = corpus[1]
    out = m(b.train.x, b.train.ts, b.context, None)
    assert np.all(np.isfinite(out.pred.data))


def test_forward_rejects_wrong_shape(corpus):
    m = tiny()
    b = corpus[0]
    with pytest.raises(ContractError):
        m(b.train.x[:, :-1], b.train.ts, b.context, 0)


def test_eval_forward_is_deterministic(corpus):
    m = tiny()
    b = corpus[0]
    a = m(b.train.x, b.train.ts, b.context, 0).pred.data
    c = m(b.train.x, b.train.ts, b.context, 0).pred.data
    assert np.array_equal(a, c)


def test_denormalization_uses_main_channel_stats(corpus):
    m = tiny()
    b = corpus[0]
    # shifting only the main channel by a constant shifts every forecast by that constant
    x2 = b.train.x.copy()
    x2[..., 0] += 100.0
    p1 = m(b.train.x, b.train.ts, b.context, 0).pred.data
    p2 = m(x2, b.train.ts, b.context, 0).pred.data
    np.testing.assert_allclose(p2 - p1, 100.0, atol=1e-9)


def test_commonalities_branch_is_live(corpus):
    m = tiny()
    b = corpus[0]
    out = m(b.train.x, b.train.ts, b.context, 0)
    for v in VIEWS:
        rc = out.views[v].r_c.data
        assert np.sqrt(np.mean(rc ** 2)) > 1e-3, v


def test_full_pipeline_gradient(corpus):
    m = tiny()
    params = {k: p for k, p in m.named_parameters() if not k.startswith("delay_adj.")}
    rep = grad_check(lambda: multi_domain_objective(m, corpus, ObjectiveConfig(), None), params,
                     step=1e-5, tol=1e-4, max_entries=2, rng=np.random.default_rng(0))
    assert rep.passed, (rep.worst(), rep.max_rel_err)


def test_delay_adjuster_receives_gradient(corpus):
    from damba_st.numerics import backward

    m = tiny()
    b = corpus[0]
    out = m(b.train.x, b.train.ts, b.context, 0)
    backward(out.pred.sum())
    grads = [p.grad for p in m.delay_adj.parameters()]
    assert all(g is not None for g in grads) and any(np.any(g != 0) for g in grads)


def test_aligned_parameters_match_roles():
    m = tiny()
    d, c = m.aligned_parameters(1)
    assert len(d) == len(c) == 15
    assert all(a.shape == b.shape for a, b in zip(d, c))
    with pytest.raises(ContractError):
        tiny("fused").aligned_parameters(0)


def test_discrimination_parameters_are_disjoint():
    m = tiny()
    a, b = m.discrimination_parameters(0), m.discrimination_parameters(1)
    assert a and b and not set(a) & set(b)
    assert not {id(p) for p in a.values()} & {id(p) for p in b.values()}


def test_scatter_averages_duplicates():
    from damba_st.delay import DelayPlan
    from damba_st.numerics import Tensor

    valid = np.ones((1, 1, 2, 2), dtype=bool)
    nodes = np.array([[[[0, 1], [0, 1]]]])
    patches = np.array([[[[0, 0], [0, 1]]]])
    plan = DelayPlan(nodes, patches, valid, nodes[0, :, 0, :-1], nodes[0, :, 0, 1:])
    y = Tensor(np.array([[[[[1.0], [2.0]], [[3.0], [4.0]]]]]))
    out = DambaST._scatter_delay(y, plan, (1, 2, 2, 1)).data
    # slot (node 0, patch 0) is hit twice with 1 and 3
    assert out[0, 0, 0, 0] == 2.0 and out[0, 1, 0, 0] == 2.0 and out[0, 1, 1, 0] == 4.0
    assert out[0, 0, 1, 0] == 0.0
