import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moefier.capture import CaptureHooks, synthetic_corpus
from moefier.model import MoeBlock, Router, ToyTransformer, ToyTransformerConfig, init_moe_block, route
from moefier.policy import (CorruptFileError, LayerPolicy, RoutingProfile, compute_thresholds, decide_policies,
                            dynamic_k, load_policies, load_profile, profile_routing, quantile, save_policies,
                            save_profile, table_policy)
from moefier.tensor import Tensor2


def test_quantile_interpolates():
    assert quantile([0.5, 0.6, 0.7, 0.8], 0.5) == pytest.approx(0.65)
    assert quantile([0.8, 0.5, 0.7, 0.6], 0.5) == pytest.approx(0.65)
    assert quantile([3.0], 0.3) == 3.0


def test_quantile_endpoints_and_errors():
    xs = [4.0, 1.0, 3.0, 2.0]
    assert quantile(xs, 0) == 1.0 and quantile(xs, 1) == 4.0
    with pytest.raises(ValueError):
        quantile([], 0.5)
    with pytest.raises(ValueError):
        quantile(xs, 1.5)


def test_quartile_thresholds():
    rng = np.random.default_rng(0)
    prof = RoutingProfile(4, {0: rng.uniform(0.25, 1, 101).astype(np.float32),
                              1: rng.uniform(0.25, 1, 60).astype(np.float32)})
    th = compute_thresholds(prof, 0.25, 0.25)
    pooled = np.sort(prof.pooled().astype(np.float64))
    # n = 161, so the quartiles fall exactly on order statistics 121 and 41 (1-based)
    assert th.alpha == pytest.approx(pooled[120])
    assert th.beta == pytest.approx(pooled[40])
    assert th.alpha_i[0] == pytest.approx(np.sort(prof.samples[0].astype(np.float64))[75])


def test_dynamic_k_examples():
    assert (dynamic_k(0.9, 0.8, 0.4), dynamic_k(0.3, 0.8, 0.4), dynamic_k(0.6, 0.8, 0.4)) == (1, 3, 2)
    assert dynamic_k(0.8, 0.8, 0.4) == 1 and dynamic_k(0.4, 0.8, 0.4) == 3
    with pytest.raises(ValueError):
        dynamic_k(0.5, 0.4, 0.4)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0.01, 1), st.floats(0, 0.99))
def test_dynamic_k_range_and_monotonicity(ws, a, b):
    if not b < a:
        return
    ws = np.sort(np.array(ws))
    ks = dynamic_k(ws, a, b)
    assert set(ks.tolist()) <= {1, 2, 3}
    assert np.all(np.diff(ks) <= 0)


def test_table_cells():
    a, b = 0.7, 0.4
    assert table_policy(0.7, 0.4, a, b) == LayerPolicy.static(2)
    assert table_policy(0.6, 0.5, a, b) == LayerPolicy.static(2)
    assert table_policy(0.9, 0.5, a, b) == LayerPolicy.static(1)
    assert table_policy(0.6, 0.3, a, b) == LayerPolicy.static(3)
    assert table_policy(0.9, 0.3, a, b) == LayerPolicy.dynamic(0.9, 0.3)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_exactly_one_cell_fires(ai, bi, a, b):
    if bi >= ai:
        ai, bi = bi + 1e-3, ai  # keep alpha_i > beta_i as any real quantile pair would
    pol = table_policy(ai, bi, a, b)
    expected = {(False, False): "top2", (True, False): "top1", (False, True): "top3", (True, True): "dynamic"}
    assert pol.label == expected[(ai > a, bi < b)]


def _profile(layers):
    return RoutingProfile(4, {l: np.asarray(s, np.float32) for l, s in layers.items()})


def test_engineered_profiles_hit_each_cell():
    rng = np.random.default_rng(1)
    base = rng.uniform(0.4, 0.7, 2000)
    prof = _profile({
        0: base,                                              # same as most of the pool -> top2
        1: rng.uniform(0.55, 0.99, 2000),                     # heavy high tail, light low tail -> top1
        2: rng.uniform(0.26, 0.6, 2000),                      # mass near 1/N -> top3
        3: np.concatenate([rng.uniform(0.26, 0.3, 1000), rng.uniform(0.95, 0.99, 1000)]),  # bimodal -> dynamic
        4: base, 5: base, 6: base, 7: base,
    })
    pols, th = decide_policies(prof, 0.25, 0.25)
    assert [pols[l].label for l in range(4)] == ["top2", "top1", "top3", "dynamic"]
    assert pols[3].alpha_i == th.alpha_i[3] and pols[3].beta_i == th.beta_i[3]


def test_layer_equal_to_pool_is_top2():
    s = np.linspace(0.3, 0.9, 99)
    pols, th = decide_policies(_profile({0: s}), 0.25, 0.25)
    assert th.alpha_i[0] == th.alpha and th.beta_i[0] == th.beta
    assert pols[0].label == "top2"
    pols, _ = decide_policies(_profile({0: s, 1: s[::-1]}), 0.25, 0.25)
    assert {p.label for p in pols.values()} == {"top2"}


def test_degenerate_profile_warns_and_uses_top2(caplog):
    with caplog.at_level(logging.WARNING, logger="moefier.policy"):
        pols, th = decide_policies(_profile({0: [0.5] * 10, 1: [0.5] * 7}), 0.25, 0.25)
    assert th.alpha == th.beta == pytest.approx(0.5)
    assert all(p == LayerPolicy.static(2) for p in pols.values())
    assert "degenerate" in caplog.text


def test_decide_is_permutation_invariant():
    rng = np.random.default_rng(2)
    layers = {l: rng.uniform(0.25, 1, 300) ** (l + 1) * 0.75 + 0.25 for l in range(4)}
    a = decide_policies(_profile(layers), 0.25, 0.3)
    b = decide_policies(_profile({l: rng.permutation(s) for l, s in layers.items()}), 0.25, 0.3)
    assert a[0] == b[0] and a[1] == b[1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.25, 1, width=32), min_size=2, max_size=200, unique=True), st.floats(0.05, 0.95))
def test_pooled_alpha_tail_fraction_within_one_over_n(xs, p_u):
    # profiles hold float32 samples; interpolating them in float64 never rounds onto a neighbour
    xs = np.array(xs, np.float32)
    n = len(xs)
    alpha = quantile(xs, 1 - p_u)
    frac = np.mean(xs >= alpha)
    assert p_u - 1 / n - 1e-12 <= frac <= p_u + 1 / n + 1e-12


def test_bad_p_values():
    with pytest.raises(ValueError):
        compute_thresholds(_profile({0: [0.5, 0.6]}), 0.6, 0.6)
    with pytest.raises(ValueError):
        compute_thresholds(_profile({0: []}), 0.25, 0.25)


def test_profile_rejects_out_of_range():
    with pytest.raises(ValueError):
        RoutingProfile(4).add(0, np.array([0.1]))


# --- profiling a model ------------------------------------------------------------------

CFG = ToyTransformerConfig(n_layers=3, d_h=16, d_i=32, n_heads=2, vocab=40, seq_len=16)


def _moe_model(router_scale=None, layers=(1, 2)):
    m = ToyTransformer.random(CFG, 0)
    for l in layers:
        b = init_moe_block(m.layers[l].ffn, 4, seed=l)
        if router_scale is not None:
            b = MoeBlock(Router(Tensor2(b.router.w.data * router_scale)), b.experts, b.policy)
        m.layers[l].ffn = b
    return m


def test_zero_router_profiles_one_over_n():
    prof = profile_routing(_moe_model(router_scale=0.0), synthetic_corpus(3, 10, 40))
    for s in prof.samples.values():
        assert np.all(s == np.float32(0.25))


def test_profile_counts():
    corpus = synthetic_corpus(4, 9, 40)
    prof = profile_routing(_moe_model(), corpus)
    assert prof.counts() == {1: 36, 2: 36}
    assert prof.pooled().size == 72


def test_profile_matches_per_token_oracle():
    m = _moe_model(router_scale=100.0, layers=(2,))
    seq = synthetic_corpus(1, 12, 40, seed=5)[0]
    h = CaptureHooks([2])
    m.forward(seq, h)
    p = route(m.layers[2].ffn.router, Tensor2(h.rows(2, 16))).data
    oracle = [max(row) for row in p.tolist()]
    prof = profile_routing(m, [seq])
    assert np.array_equal(prof.samples[2], np.array(oracle, np.float32))
    assert prof.samples[2].max() > 0.5  # skewed router


def test_profile_requires_moe_layers_and_tokens():
    with pytest.raises(ValueError):
        profile_routing(ToyTransformer.random(CFG, 0), synthetic_corpus(1, 4, 40))
    with pytest.raises(ValueError):
        profile_routing(_moe_model(), [])


# --- files ----------------------------------------------------------------------------------


def test_profile_file_roundtrip(tmp_path):
    prof = RoutingProfile(4, {0: np.array([0.3, 0.9], np.float32), 5: np.array([0.5], np.float32)}, "corp")
    save_profile(tmp_path / "p.ldpr", prof)
    back = load_profile(tmp_path / "p.ldpr")
    assert back.n_experts == 4 and back.corpus_id == "corp" and back.layers == [0, 5]
    for l in prof.layers:
        assert back.samples[l].tobytes() == prof.samples[l].tobytes()


def test_profile_file_truncated(tmp_path):
    p = tmp_path / "p.ldpr"
    save_profile(p, RoutingProfile(4, {0: np.full(10, 0.5, np.float32)}))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(CorruptFileError):
        load_profile(p)


def test_policy_file_roundtrip(tmp_path):
    prof = _profile({0: np.linspace(0.3, 0.9, 50), 1: np.linspace(0.5, 0.99, 50), 2: np.linspace(0.26, 0.99, 50)})
    pols, th = decide_policies(prof, 0.25, 0.25)
    save_policies(tmp_path / "p.json", pols, th)
    assert load_policies(tmp_path / "p.json") == pols
    recs = json.loads((tmp_path / "p.json").read_text())
    for r in recs:
        assert {"layer", "policy", "alpha", "beta", "p_u", "p_e"} <= set(r)
        assert ("k" in r) != ("alpha_i" in r and "beta_i" in r)


def test_static_policy_skips_thresholds():
    assert LayerPolicy.static(3).k_per_token(np.array([0.99, 0.26])).tolist() == [3, 3]
    assert LayerPolicy.dynamic(0.8, 0.4).k_per_token(np.array([0.9, 0.6, 0.3])).tolist() == [1, 2, 3]
