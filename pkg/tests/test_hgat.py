import math

import numpy as np
import pytest

from hetero_fdl import hgat
from hetero_fdl.ehr_graph import EdgeKind, NodeKind
from hetero_fdl.features import FeatureTable, init_features
from tests.conftest import make_toy5, random_hetero_graph

KINDS = (NodeKind.PATIENT, NodeKind.DOCTOR, NodeKind.SERVICE)


def dims4():
    return {NodeKind.PATIENT: 4, NodeKind.DOCTOR: 4, NodeKind.SERVICE: 4}


def toy_config(**kw):
    base = dict(in_dims=dims4(), f_prime=6, heads=2, layers=2, d_v=3, n_specialties=2, n_services=2)
    base.update(kw)
    return hgat.ModelConfig(**base)


# ---------------------------------------------------------------------------
# independent dense re-implementation (full neighborhoods, plain loops)


def dense_node_lists(graph):
    """Global-index adjacency in the same patient/doctor/service ordering."""
    counts = [graph.count(k) for k in KINDS]
    offsets = {k: sum(counts[:i]) for i, k in enumerate(KINDS)}
    nbrs = []
    types = []
    for kind in KINDS:
        for i in range(graph.count(kind)):
            edges = graph.neighbors(graph.node(kind, i))
            glob = [offsets[e.dst.kind] + e.dst.index for e in edges]
            nbrs.append(glob if glob else [offsets[kind] + i])
            types.append(int(kind))
    return nbrs, np.array(types), offsets


def leaky(v):
    return np.where(v > 0, v, 0.2 * v)


def elu_np(v):
    return np.where(v > 0, v, np.expm1(v))


def dense_layer(graph, feats, arrays, config, layer):
    """Straight-line evaluation of one attention layer over full neighborhoods."""
    nbrs, types, offsets = dense_node_lists(graph)
    mats = [feats[k] for k in KINDS]
    H = np.concatenate(mats, axis=0)
    n = H.shape[0]
    heads = []
    for k in range(config.heads):
        if config.heterogeneous:
            q = {int(t): arrays[f"layer{layer}.head{k}.Q.{t.name.lower()}"] for t in KINDS}
            proj = np.stack([H[g] @ q[types[g]] for g in range(n)])
            a = arrays[f"layer{layer}.head{k}.a"]
            V = arrays[f"layer{layer}.head{k}.V"]
        else:
            proj = H @ arrays[f"layer{layer}.head{k}.Q"]
            a = arrays[f"layer{layer}.head{k}.a"]
            V = None
        fp = config.f_prime
        out = np.zeros((n, fp))
        for i in range(n):
            logits = []
            for j in nbrs[i]:
                stacked = [proj[i], proj[j]]
                if V is not None:
                    stacked.append(V[3 * types[i] + types[j]])
                logits.append(leaky(np.array([a @ np.concatenate(stacked)]))[0])
            logits = np.array(logits)
            e = np.exp(logits - logits.max())
            alpha = e / e.sum()
            out[i] = sum(alpha[t] * proj[j] for t, j in enumerate(nbrs[i]))
        heads.append(out)
    if config.combine == "average":
        combined = elu_np(sum(heads) / config.heads)
    else:
        combined = np.concatenate([elu_np(h) for h in heads], axis=1)
    result = {}
    pos = 0
    for kind in KINDS:
        c = graph.count(kind)
        result[kind] = combined[pos : pos + c]
        pos += c
    return result


def dense_model(graph, table, params, batch):
    config = params.config
    feats = {k: table.for_kind(k) for k in KINDS}
    for layer in range(config.layers):
        feats = dense_layer(graph, feats, params.arrays, config, layer)
    E = np.concatenate([feats[k] for k in KINDS], axis=0)
    _, _, offsets = dense_node_lists(graph)
    pd = []
    for p, d in batch.pd_pairs:
        ep = E[offsets[NodeKind.PATIENT] + p]
        if config.score_mode == "bilinear":
            ep = ep @ params.arrays["score.bilinear"]
        pd.append(ep @ E[offsets[NodeKind.DOCTOR] + d])
    ds = np.stack([E[offsets[NodeKind.DOCTOR] + d] @ params.arrays["head.specialty"] for d in batch.ds_doctors]) if len(batch.ds_doctors) else np.zeros((0, config.n_specialties))
    ss = np.stack([E[offsets[NodeKind.SERVICE] + s] @ params.arrays["head.next_service"] for s in batch.ss_services]) if len(batch.ss_services) else np.zeros((0, config.n_services))
    return np.array(pd), ds, ss


# ---------------------------------------------------------------------------
# attention op


def test_attention_singleton_and_symmetry():
    params = hgat.HgatParams.init(toy_config(), seed=0)
    h = np.array([0.3, -0.2, 0.5, 1.0])
    a1 = hgat.attention_coefficients(params, h, NodeKind.PATIENT, [h * 2], [NodeKind.DOCTOR])
    np.testing.assert_allclose(a1, [1.0])
    a2 = hgat.attention_coefficients(params, h, NodeKind.PATIENT, [h * 2, h * 2], [NodeKind.DOCTOR, NodeKind.DOCTOR])
    np.testing.assert_allclose(a2, [0.5, 0.5], atol=1e-15)


def test_attention_three_neighbor_scalar_oracle():
    """Coefficient formula re-evaluated scalar by scalar with explicit loops."""
    cfg = hgat.ModelConfig(in_dims={k: 2 for k in KINDS}, f_prime=2, heads=1, layers=1, d_v=2,
                           n_specialties=2, n_services=2)
    params = hgat.HgatParams.init(cfg, seed=3)
    h_i = np.array([0.7, -1.2])
    nbr_feats = [np.array([0.5, 0.1]), np.array([-0.4, 0.9]), np.array([1.5, -0.3])]
    nbr_types = [NodeKind.SERVICE, NodeKind.DOCTOR, NodeKind.SERVICE]
    got = hgat.attention_coefficients(params, h_i, NodeKind.PATIENT, nbr_feats, nbr_types)

    a = params.arrays["layer0.head0.a"]
    V = params.arrays["layer0.head0.V"]
    qp = params.arrays["layer0.head0.Q.patient"]
    q_by_type = {NodeKind.DOCTOR: params.arrays["layer0.head0.Q.doctor"],
                 NodeKind.SERVICE: params.arrays["layer0.head0.Q.service"]}
    zi = [sum(h_i[r] * qp[r][c] for r in range(2)) for c in range(2)]
    raw = []
    for h_j, t_j in zip(nbr_feats, nbr_types):
        q = q_by_type[t_j]
        zj = [sum(h_j[r] * q[r][c] for r in range(2)) for c in range(2)]
        pair = V[3 * int(NodeKind.PATIENT) + int(t_j)]
        full = list(zi) + list(zj) + list(pair)
        e = sum(a[t] * full[t] for t in range(len(full)))
        raw.append(e if e > 0 else 0.2 * e)
    mx = max(raw)
    exps = [math.exp(r - mx) for r in raw]
    expected = np.array([e / sum(exps) for e in exps])
    np.testing.assert_allclose(got, expected, atol=1e-12)
    np.testing.assert_allclose(got.sum(), 1.0, atol=1e-12)


def test_attention_shape_errors():
    params = hgat.HgatParams.init(toy_config(), seed=0)
    with pytest.raises(hgat.ShapeMismatch):
        hgat.attention_coefficients(params, np.zeros(3), NodeKind.PATIENT, [np.zeros(4)], [NodeKind.DOCTOR])
    with pytest.raises(hgat.ShapeMismatch):
        hgat.attention_coefficients(params, np.zeros(4), NodeKind.PATIENT, [], [])


# ---------------------------------------------------------------------------
# layer behaviour


def single_neighbor_graph():
    from hetero_fdl.ehr_graph import Edge, HeteroGraph, NodeRef, ServiceSubtype

    P = NodeRef(NodeKind.PATIENT, 0)
    S = NodeRef(NodeKind.SERVICE, 0, ServiceSubtype.DX)
    return HeteroGraph(["p"], [], ["s"], [30], [0], [0], [], [], [0], ["r"], [],
                       [Edge(P, S, EdgeKind.PATIENT_SERVICE, 4, 1.0)])


def test_layer_single_neighbor_collapses():
    g = single_neighbor_graph()
    cfg = hgat.ModelConfig(in_dims={k: 3 for k in KINDS}, f_prime=4, heads=1, layers=1,
                           n_specialties=1, n_services=1)
    params = hgat.HgatParams.init(cfg, seed=1)
    table = FeatureTable(patient=np.array([[0.2, -0.1, 0.4]]), doctor=np.zeros((0, 3)),
                         service=np.array([[1.0, 0.5, -0.7]]))
    out = hgat.layer_forward(g, table, params, sample_size=3, seed=0)
    v = table.service[0] @ params.arrays["layer0.head0.Q.service"]
    np.testing.assert_allclose(out.patient[0], np.where(v > 0, v, np.expm1(v)), atol=1e-12)


def test_layer_zero_params_zero_output(toy5):
    cfg = toy_config(layers=1)
    params = hgat.HgatParams.unflatten(np.zeros(hgat.param_count(cfg)), cfg)
    table = init_features(toy5, "gaussian", dims4(), seed=2)
    out = hgat.layer_forward(toy5, table, params, sample_size=5, seed=0)
    for kind in KINDS:
        np.testing.assert_array_equal(out.for_kind(kind), np.zeros((toy5.count(kind), 6)))


def test_layer_matches_dense_oracle_toy5(toy5):
    cfg = toy_config(layers=1)
    params = hgat.HgatParams.init(cfg, seed=5)
    table = init_features(toy5, "gaussian", dims4(), seed=6)
    got = hgat.layer_forward(toy5, table, params, sample_size=10, seed=0)
    want = dense_layer(toy5, {k: table.for_kind(k) for k in KINDS}, params.arrays, cfg, 0)
    for kind in KINDS:
        np.testing.assert_allclose(got.for_kind(kind), want[kind], atol=1e-12)


def test_model_forward_matches_dense_oracle(toy5):
    cfg = toy_config()
    params = hgat.HgatParams.init(cfg, seed=7)
    table = init_features(toy5, "gaussian", dims4(), seed=8)
    batch = hgat.TaskBatch(
        pd_pairs=np.array([[0, 0], [0, 1]]),
        ds_doctors=np.array([0, 1]),
        ss_services=np.array([0]),
    )
    got = hgat.model_forward(toy5, table, params, batch, sample_size=10, seed=0)
    pd, ds, ss = dense_model(toy5, table, params, batch)
    np.testing.assert_allclose(got.pd_scores, pd, atol=1e-10)
    np.testing.assert_allclose(got.specialty_logits, ds, atol=1e-10)
    np.testing.assert_allclose(got.next_service_logits, ss, atol=1e-10)
    assert got.pd_scores.shape == (2,)
    assert got.specialty_logits.shape == (2, 2)


def test_model_forward_deterministic(toy5):
    cfg = toy_config()
    params = hgat.HgatParams.init(cfg, seed=7)
    table = init_features(toy5, "gaussian", dims4(), seed=8)
    batch = hgat.TaskBatch(pd_pairs=np.array([[0, 0]]))
    a = hgat.model_forward(toy5, table, params, batch, sample_size=2, seed=11)
    b = hgat.model_forward(toy5, table, params, batch, sample_size=2, seed=11)
    np.testing.assert_array_equal(a.pd_scores, b.pd_scores)


def test_label_leakage(toy5):
    table = init_features(toy5, "onehot")  # specialty encoded
    cfg = hgat.ModelConfig(
        in_dims={k: table.for_kind(k).shape[1] for k in KINDS},
        f_prime=4, heads=1, layers=1, n_specialties=2, n_services=2,
    )
    params = hgat.HgatParams.init(cfg, seed=0)
    batch = hgat.TaskBatch(ds_doctors=np.array([0]))
    with pytest.raises(hgat.LabelLeakage):
        hgat.model_forward(toy5, table, params, batch, sample_size=2, seed=0)
    # inactive specialty task is fine
    hgat.model_forward(toy5, table, params, hgat.TaskBatch(pd_pairs=np.array([[0, 0]])), sample_size=2, seed=0)


def test_permuting_sampled_neighbors_keeps_output(toy5):
    cfg = toy_config(layers=1)
    params = hgat.HgatParams.init(cfg, seed=9)
    table = init_features(toy5, "gaussian", dims4(), seed=10)
    ctx = hgat.build_context(toy5, 1, 10, seed=0)
    base = hgat.layer_forward(toy5, table, params, ctx=ctx)
    plan = ctx.plans[0]
    rng = np.random.default_rng(0)
    for row in range(plan.nbr_idx.shape[0]):
        k = plan.mask[row].sum()
        perm = rng.permutation(k)
        plan.nbr_idx[row, :k] = plan.nbr_idx[row, :k][perm]
        plan.pair_idx[row, :k] = plan.pair_idx[row, :k][perm]
    permuted = hgat.layer_forward(toy5, table, params, ctx=ctx)
    for kind in KINDS:
        np.testing.assert_allclose(permuted.for_kind(kind), base.for_kind(kind), atol=1e-12)


# ---------------------------------------------------------------------------
# plain-GAT reduction


def reference_gat_layer(nbrs, H, Q, a_vec):
    z = H @ Q
    fp = Q.shape[1]
    out = np.zeros((H.shape[0], fp))
    for i in range(H.shape[0]):
        logits = np.array([leaky(np.array([a_vec @ np.concatenate([z[i], z[j]])]))[0] for j in nbrs[i]])
        e = np.exp(logits - logits.max())
        alpha = e / e.sum()
        out[i] = sum(alpha[t] * z[j] for t, j in enumerate(nbrs[i]))
    return out


def shared_gat_like_params(cfg, seed):
    """Heterogeneous parameters with tied projections and zeroed type vectors."""
    params = hgat.HgatParams.init(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for l in range(cfg.layers):
        for k in range(cfg.heads):
            q = rng.normal(size=(cfg.layer_in_dim(l, NodeKind.PATIENT), cfg.f_prime)) * 0.4
            for kind in KINDS:
                params.arrays[f"layer{l}.head{k}.Q.{kind.name.lower()}"] = q.copy()
            params.arrays[f"layer{l}.head{k}.V"] = np.zeros((9, cfg.dv))
    return params


def test_gat_reduction_on_random_graphs():
    rng = np.random.default_rng(123)
    for trial in range(100):
        g = random_hetero_graph(rng, n_p=int(rng.integers(2, 4)), n_d=int(rng.integers(2, 4)), n_s=int(rng.integers(3, 5)))
        cfg = hgat.ModelConfig(in_dims={k: 3 for k in KINDS}, f_prime=4, heads=int(rng.integers(1, 3)),
                               layers=1, d_v=2, n_specialties=2, n_services=2)
        params = shared_gat_like_params(cfg, seed=trial)
        feats = {k: rng.normal(size=(g.count(k), 3)) for k in KINDS}
        table = FeatureTable(patient=feats[NodeKind.PATIENT], doctor=feats[NodeKind.DOCTOR], service=feats[NodeKind.SERVICE])
        got = hgat.layer_forward(g, table, params, sample_size=100, seed=0)

        nbrs, _, _ = dense_node_lists(g)
        H = np.concatenate([feats[k] for k in KINDS], axis=0)
        per_head = []
        for k in range(cfg.heads):
            Q = params.arrays[f"layer0.head{k}.Q.patient"]
            a_full = params.arrays[f"layer0.head{k}.a"]
            per_head.append(reference_gat_layer(nbrs, H, Q, a_full[: 2 * cfg.f_prime]))
        # the type-pair slice of the attention vector is inert when V = 0
        want = elu_np(sum(per_head) / cfg.heads)
        got_all = np.concatenate([got.for_kind(k) for k in KINDS], axis=0)
        np.testing.assert_allclose(got_all, want, atol=1e-10)

        alpha_rows = hgat.attention_coefficients(
            params, feats[NodeKind.PATIENT][0], NodeKind.PATIENT,
            [feats[NodeKind.SERVICE][i] for i in range(g.count(NodeKind.SERVICE))],
            [NodeKind.SERVICE] * g.count(NodeKind.SERVICE),
        )
        np.testing.assert_allclose(alpha_rows.sum(), 1.0, atol=1e-12)


def test_gat_mode_matches_reference(toy5):
    cfg = toy_config(layers=1, heterogeneous=False, heads=1)
    params = hgat.HgatParams.init(cfg, seed=3)
    table = init_features(toy5, "gaussian", dims4(), seed=4)
    got = hgat.layer_forward(toy5, table, params, sample_size=50, seed=0)
    nbrs, _, _ = dense_node_lists(toy5)
    H = np.concatenate([table.for_kind(k) for k in KINDS], axis=0)
    want = elu_np(reference_gat_layer(nbrs, H, params.arrays["layer0.head0.Q"], params.arrays["layer0.head0.a"]))
    got_all = np.concatenate([got.for_kind(k) for k in KINDS], axis=0)
    np.testing.assert_allclose(got_all, want, atol=1e-10)


# ---------------------------------------------------------------------------
# flatten / unflatten / layout


def test_flatten_round_trip():
    cfg = toy_config()
    params = hgat.HgatParams.init(cfg, seed=0)
    vec = params.flatten()
    back = hgat.HgatParams.unflatten(vec, cfg)
    for name in params.arrays:
        np.testing.assert_array_equal(params.arrays[name], back.arrays[name])
    np.testing.assert_array_equal(back.flatten(), vec)
    rng = np.random.default_rng(1)
    v2 = rng.normal(size=vec.size)
    np.testing.assert_array_equal(hgat.HgatParams.unflatten(v2, cfg).flatten(), v2)


def test_param_count_enumeration_oracle():
    cfg = hgat.ModelConfig(in_dims={k: 4 for k in KINDS}, f_prime=8, heads=2, layers=1, d_v=4,
                           n_specialties=3, n_services=5)
    # enumerate from first principles: per head Q three 8x4, a 2*8+4, V 9x4
    per_head = 3 * (8 * 4) + (2 * 8 + 4) + 9 * 4
    expected = 2 * per_head + 8 * 3 + 8 * 5
    assert hgat.param_count(cfg) == expected == 368
    # bilinear adds embed_dim^2
    cfg_b = hgat.ModelConfig(in_dims={k: 4 for k in KINDS}, f_prime=8, heads=2, layers=1, d_v=4,
                             n_specialties=3, n_services=5, score_mode="bilinear")
    assert hgat.param_count(cfg_b) == expected + 64


def test_unflatten_wrong_length():
    cfg = toy_config()
    with pytest.raises(hgat.LayoutMismatch):
        hgat.HgatParams.unflatten(np.zeros(hgat.param_count(cfg) + 1), cfg)


# ---------------------------------------------------------------------------
# scoring and checkpoints


def test_score_patient_doctor_modes():
    cfg = toy_config(layers=1)
    params = hgat.HgatParams.init(cfg, seed=0)
    d = cfg.embed_dim
    assert hgat.score_patient_doctor(np.zeros(d), np.zeros(d), params) == 0.0
    e1 = np.zeros(d)
    e1[0] = 1.0
    assert hgat.score_patient_doctor(e1, e1, params) == 1.0
    cfg_b = toy_config(layers=1, score_mode="bilinear")
    params_b = hgat.HgatParams.init(cfg_b, seed=0)
    params_b.arrays["score.bilinear"] = np.eye(cfg_b.embed_dim)
    rng = np.random.default_rng(5)
    for _ in range(10):
        p, q = rng.normal(size=cfg_b.embed_dim), rng.normal(size=cfg_b.embed_dim)
        assert hgat.score_patient_doctor(p, q, params_b) == pytest.approx(float(p @ q), abs=1e-12)
    with pytest.raises(hgat.ShapeMismatch):
        hgat.score_patient_doctor(np.zeros(d + 1), np.zeros(d), params)


def test_checkpoint_round_trip(tmp_path):
    cfg = toy_config()
    params = hgat.HgatParams.init(cfg, seed=13)
    path = tmp_path / "model.ckpt"
    hgat.save_checkpoint(params, path)
    loaded = hgat.load_checkpoint(path, cfg)
    np.testing.assert_array_equal(loaded.flatten(), params.flatten())
    with pytest.raises(hgat.LayoutMismatch):
        hgat.load_checkpoint(path, toy_config(f_prime=8))
