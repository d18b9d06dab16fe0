import math

import numpy as np
import pytest

from agcrn import graph as G
from agcrn import numerics as nm
from agcrn.model import (
    VARIANTS,
    CellParams,
    ConfigError,
    ModelConfig,
    build,
    cell_step,
    count_params,
    gru_ed_forward,
    load_checkpoint,
    save_checkpoint,
)


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def path_graph(n):
    return G.PredefinedGraph(n, [(i, i + 1, 1.0) for i in range(n - 1)])


def built(variant, n=4, **kw):
    cfg = ModelConfig(n_nodes=n, hidden=kw.pop("hidden", 4), embed_dim=kw.pop("embed_dim", 2),
                      lookback=kw.pop("lookback", 3), horizon=kw.pop("horizon", 2), variant=variant, **kw)
    return build(cfg, graph=path_graph(n) if cfg.needs_graph else None)


def zero_all(model):
    for p in model.parameters():
        p.data[...] = 0.0


class TestCellStep:
    def test_scalar_hand_recurrence(self):
        ones = lambda: np.ones((1, 1, 2, 1))
        zeros = lambda: np.zeros((1, 1))
        params = CellParams(ones(), ones(), ones(), zeros(), zeros(), zeros())
        h = cell_step(np.array([[1.0]]), np.array([[1.0]]), [np.eye(1)], np.ones((1, 1)), params)
        z = sig(2.0)
        want = z * 1.0 + (1 - z) * math.tanh(1.0 + z)
        assert h.data.item() == pytest.approx(want, abs=1e-15)
        assert h.data.item() == pytest.approx(0.994584, abs=5e-7)

    def test_shared_weights_agree_with_adaptive(self):
        ones = lambda: np.ones((1, 2, 1))
        zeros = lambda: np.zeros(1)
        h = cell_step(np.array([[1.0]]), np.array([[1.0]]), [np.eye(1)], None,
                      CellParams(ones(), ones(), ones(), zeros(), zeros(), zeros()))
        assert h.data.item() == pytest.approx(0.994584, abs=5e-7)

    def test_zero_parameters_halve_state(self, rng):
        h_prev = rng.standard_normal((3, 2))
        z4, z2 = np.zeros((2, 2, 3, 2)), np.zeros((2, 2))
        supports = G.build_supports(np.full((3, 3), 1 / 3), "dagg_1")
        h = cell_step(rng.standard_normal((3, 1)), h_prev, supports, rng.standard_normal((3, 2)),
                      CellParams(z4, z4, z4, z2, z2, z2))
        np.testing.assert_array_equal(h.data, 0.5 * h_prev)
        h0 = cell_step(rng.standard_normal((3, 1)), np.zeros((3, 2)), supports, rng.standard_normal((3, 2)),
                       CellParams(z4, z4, z4, z2, z2, z2))
        assert not h0.data.any()

    def test_bounded_recurrence(self, rng):
        model = built("agcrn", n=5, hidden=6, lookback=1)
        for p in model.parameters():
            p.data[...] = 3.0 * rng.standard_normal(p.shape)
        layer = model.layers[0]
        step = layer.bind(model.supports().stacked(), model.layer_embedding(0))
        h = nm.Tensor(np.zeros((1, 5, 6)))
        for _ in range(50):
            h = step(nm.Tensor(rng.uniform(-1, 1, (1, 5, 1))), h)
            assert np.abs(h.data).max() <= 1.0


class TestForward:
    def test_zero_network_predicts_bias(self, rng):
        model = built("agcrn")
        zero_all(model)
        model.head_b.data[:] = [1.5, -2.0]
        out = model.predict(rng.standard_normal((3, 4, 1)))
        assert out.tolist() == [[1.5] * 4, [-2.0] * 4]

    def test_single_step_is_one_cell_plus_head(self, rng):
        model = built("agcrn", lookback=1, layers=1)
        x = rng.standard_normal((1, 4, 1))
        s = model.supports()
        h = cell_step(x[0], np.zeros((4, 4)), s, model.embeddings["E"], model.layers[0].cell_params())
        want = (h.data @ model.head_w.data + model.head_b.data).T
        np.testing.assert_allclose(model.predict(x), want, atol=1e-14)

    def test_batch_matches_singles(self, rng):
        model = built("agcrn")
        w = rng.standard_normal((3, 3, 4, 1))
        out = model.predict(w)
        assert out.shape == (3, 2, 4)
        for b in range(3):
            np.testing.assert_allclose(out[b], model.predict(w[b]), atol=1e-13)

    def test_window_shape_checked(self):
        with pytest.raises(nm.ShapeError, match="lookback"):
            built("agcrn").forward(np.zeros((5, 4, 1)))

    def test_permutation_equivariance(self, rng):
        model = built("agcrn", n=5)
        x = rng.standard_normal((3, 5, 1))
        base = model.predict(x)
        p = rng.permutation(5)
        e = model.embeddings["E"]
        e.data[...] = e.data[p]
        np.testing.assert_allclose(model.predict(x[:, p]), base[:, p], atol=1e-12)

    def test_tiny_gradient_check_every_class(self, tiny_config, rng):
        model = build(tiny_config)
        x = rng.standard_normal((2, 4, 5, 1))
        y = rng.standard_normal((2, 2, 5))
        loss = lambda: nm.mean_all(nm.absolute(model.forward(x) - y))
        rep = nm.finite_difference_check(loss, model.parameters(), step=1e-5, tol=1e-4)
        names = {p.name for p in rep.params}
        assert "E" in names and "head.weight" in names and "layer1.gate_h.weight_pool" in names
        assert rep.passed, rep.to_json()


class TestBuild:
    def test_same_seed_same_parameters(self, tiny_config):
        a, b = build(tiny_config), build(tiny_config)
        for p, q in zip(a.parameters(), b.parameters()):
            assert p.name == q.name and p.data.tobytes() == q.data.tobytes()

    def test_embedding_counts(self):
        assert list(built("agcrn").embeddings) == ["E"]
        assert sorted(built("agcrn_i", layers=2).embeddings) == ["E_graph", "E_layer0", "E_layer1"]
        assert built("gcgru").embeddings == {}

    def test_predefined_variant_needs_graph(self):
        with pytest.raises(ConfigError):
            build(ModelConfig(n_nodes=3, variant="gcgru"))
        with pytest.raises(ConfigError):
            build(ModelConfig(n_nodes=3, variant="gcgru"), graph=path_graph(4))

    @pytest.mark.parametrize("kw", [dict(variant="rnn"), dict(dagg_variant="cheb"), dict(hidden=0), dict(n_nodes=1)])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**{"n_nodes": 3, **kw})

    def test_init_scheme(self):
        model = built("agcrn", hidden=8, embed_dim=3)
        bound = math.sqrt(6 / (2 * (1 + 8) + 8))
        wp = model.named_parameters()["layer0.gate_z.weight_pool"]
        assert np.abs(wp.data).max() <= bound
        assert not model.named_parameters()["layer0.gate_z.bias_pool"].data.any()

    def test_gcgru_gate_uses_shared_example(self):
        # unit-weight gates on a uniform 2-node graph: the candidate conv sees
        # [I, A] applied to [x, r*h]
        model = build(ModelConfig(n_nodes=2, hidden=1, layers=1, lookback=1, horizon=1, variant="gcgru"),
                      graph=G.PredefinedGraph(2, [(0, 1, 1.0)]))
        for p in model.parameters():
            p.data[...] = 1.0 if p.name.endswith("weight") else 0.0
        out = model.predict(np.array([[[1.0], [3.0]]]))
        # with h=0: z = sig(x + A x) = sig([4, 4]), candidate tanh([4, 4])
        z = sig(4.0)
        want = (1 - z) * math.tanh(4.0) + 0.0
        np.testing.assert_allclose(out, [[want + 0.0, want]], atol=1e-14)


@pytest.mark.parametrize("variant", VARIANTS)
def test_census_equals_count(variant):
    model = built(variant, n=5, hidden=6, embed_dim=3, layers=2, horizon=3, lookback=2)
    assert model.n_parameters() == count_params(model.config)


@pytest.mark.parametrize("d,want", [(10, 748810), (2, 150386)])
def test_reference_counts(d, want):
    cfg = ModelConfig(n_nodes=307, hidden=64, layers=2, embed_dim=d, horizon=12)
    assert count_params(cfg) == want


def test_hand_count():
    assert count_params(ModelConfig(n_nodes=2, hidden=2, layers=1, embed_dim=1, horizon=1)) == 47


def test_factorization_collapse(rng):
    n = 5
    graph = G.PredefinedGraph(n, [(0, 1, 1.0), (1, 2, 0.5), (2, 3, 2.0), (3, 4, 1.0)])
    base = dict(n_nodes=n, hidden=4, layers=2, embed_dim=1, lookback=3, horizon=2, seed=3)
    napl = build(ModelConfig(variant="napl_gcgru", **base), graph=graph)
    napl.embeddings["E"].data[...] = 1.0
    napl.freeze("E")
    for p in napl.parameters():
        if p.name.endswith("bias_pool"):
            p.data[...] = rng.standard_normal(p.shape)
    shared = build(ModelConfig(variant="gcgru", **base), graph=graph)
    sp = shared.named_parameters()
    for p in napl.parameters():
        if p.name.endswith("weight_pool"):
            sp[p.name.replace("weight_pool", "weight")].data[...] = p.data[0]
        elif p.name.endswith("bias_pool"):
            sp[p.name.replace("bias_pool", "bias")].data[...] = p.data[0]
        elif p.name.startswith("head"):
            sp[p.name].data[...] = p.data
    x = rng.standard_normal((20, 3, n, 1))
    assert np.max(np.abs(napl.predict(x) - shared.predict(x))) <= 1e-12


class TestGruEd:
    def test_zero_network(self, rng):
        model = built("gru_ed")
        zero_all(model)
        model.head_b.data[:] = 0.7
        assert np.all(model.predict(rng.standard_normal((3, 4, 1))) == 0.7)

    def test_scalar_hand_computation(self):
        model = build(ModelConfig(n_nodes=1, hidden=1, layers=1, lookback=1, horizon=1, variant="gru_ed"))
        for p in model.parameters():
            p.data[...] = 1.0 if p.name.endswith("weight") else 0.0
        # encoder from h=0 with x=1
        z = sig(1.0)
        h1 = (1 - z) * math.tanh(1.0)
        # decoder input is the last observed value
        z2 = sig(1.0 + h1)
        h2 = z2 * h1 + (1 - z2) * math.tanh(1.0 + z2 * h1)
        assert model.predict(np.ones((1, 1, 1))).item() == pytest.approx(h2, abs=1e-15)

    def test_nodes_are_independent(self, rng):
        model = built("gru_ed", n=3)
        x = rng.standard_normal((3, 3, 1))
        base = model.predict(x)
        x[:, 2] += 5.0
        np.testing.assert_array_equal(model.predict(x)[:, :2], base[:, :2])

    def test_gradient_check(self, rng):
        model = built("gru_ed", n=2, hidden=3, lookback=2, horizon=2)
        x = rng.standard_normal((2, 2, 1))
        rep = nm.finite_difference_check(lambda: nm.sum_all(nm.tanh(model.forward(x))), model.parameters(), tol=1e-5)
        assert rep.passed

    def test_rejects_graph_model(self):
        with pytest.raises(ConfigError):
            gru_ed_forward(built("agcrn"), np.zeros((3, 4, 1)))


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["agcrn", "gcgru", "gru_ed"])
    def test_round_trip_bit_exact(self, tmp_path, rng, variant):
        model = built(variant)
        for p in model.parameters():
            p.data[...] = rng.standard_normal(p.shape)
        save_checkpoint(model, tmp_path / "c.json", {"note": 1})
        back, extra = load_checkpoint(tmp_path / "c.json")
        assert extra == {"note": 1}
        for p, q in zip(model.parameters(), back.parameters()):
            assert p.name == q.name and p.data.tobytes() == q.data.tobytes()
        x = rng.standard_normal((3, 4, 1))
        assert model.predict(x).tobytes() == back.predict(x).tobytes()

    def test_rejects_other_json(self, tmp_path):
        (tmp_path / "c.json").write_text('{"format": "other"}')
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "c.json")
