import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gdda.backbone import (GIN, ClassifierHead, GinConfig, check_finite, classify_head, collate, gin_forward,
                           loss_and_gradients, seeded_generator)
from gdda.data import GraphInstance, motif_adjacency
from gdda.errors import NumericError, ShapeError, UsageError
from gdda.gradcheck import numeric_gradients, relative_error


def identity_gin(d, layers=1, readout="sum", eps=0.0):
    model = GIN(GinConfig(in_dim=d, num_layers=layers, hidden_dim=d, out_dim=d, epsilon=eps, readout=readout),
                seeded_generator(0))
    with torch.no_grad():
        for mlp in model.layers:
            for fc in (mlp.fc1, mlp.fc2):
                fc.weight.copy_(torch.eye(d))
                fc.bias.zero_()
    return model


def graph(x, adj, label=0, domain=0):
    return GraphInstance(np.asarray(x, float), np.asarray(adj), label, domain, "t")


def test_triangle_identity_network_sums_all_features():
    g = graph(np.eye(3), motif_adjacency(2, 3))
    np.testing.assert_allclose(gin_forward(identity_gin(3), g), [3.0, 3.0, 3.0])


def test_isolated_node_readouts():
    g = graph([[1.0, 2.0]], [[0]])
    np.testing.assert_allclose(gin_forward(identity_gin(2), g), [1.0, 2.0])
    np.testing.assert_allclose(gin_forward(identity_gin(2, eps=0.5), g), [1.5, 3.0])


def test_mean_readout_divides_by_node_count():
    g = graph(np.eye(3), motif_adjacency(2, 3))
    np.testing.assert_allclose(gin_forward(identity_gin(3, readout="mean"), g), [1.0, 1.0, 1.0])


def test_two_layers_compose():
    # path 0-1: layer 1 gives x0+x1 on both nodes, layer 2 doubles it
    g = graph([[1.0], [2.0]], motif_adjacency(1, 2))
    np.testing.assert_allclose(gin_forward(identity_gin(1, layers=2), g), [12.0])


def test_batched_equals_single():
    gen = seeded_generator(1)
    model = GIN(GinConfig(in_dim=4, num_layers=2), gen)
    rng = np.random.default_rng(0)
    gs = [graph(rng.normal(size=(n, 4)), motif_adjacency(n % 4, n)) for n in (3, 5, 1, 7)]
    with torch.no_grad():
        batched = model(collate(gs)).numpy()
    for i, g in enumerate(gs):
        np.testing.assert_allclose(batched[i], gin_forward(model, g), rtol=1e-5, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 9), seed=st.integers(0, 10_000), readout=st.sampled_from(["sum", "mean"]))
def test_permutation_invariance(n, seed, readout):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.integers(0, 2, size=(n, n)), 1)
    g = graph(rng.normal(size=(n, 5)), upper + upper.T)
    model = GIN(GinConfig(in_dim=5, num_layers=2, readout=readout), seeded_generator(seed)).double()
    a = gin_forward(model, g)
    b = gin_forward(model, g.permuted(rng.permutation(n)))
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_feature_width_mismatch():
    model = GIN(GinConfig(in_dim=4), seeded_generator(0))
    with pytest.raises(ShapeError):
        gin_forward(model, graph(np.zeros((2, 3)), motif_adjacency(1, 2)))


def test_head_examples():
    head = ClassifierHead(2, 2, seeded_generator(0))
    with torch.no_grad():
        head.net.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        head.net.bias.copy_(torch.tensor([0.5, -0.5]))
    np.testing.assert_allclose(classify_head(head, [2.0, 3.0]), [2.5, 2.5])
    np.testing.assert_allclose(classify_head(head, [[0.0, 0.0], [1.0, -1.0]]), [[0.5, -0.5], [1.5, -1.5]])
    with pytest.raises(ShapeError):
        classify_head(head, [1.0, 2.0, 3.0])


def test_check_finite():
    check_finite("ok", torch.ones(3))
    with pytest.raises(NumericError, match="thing"):
        check_finite("thing", torch.tensor([1.0, float("nan")]))


def test_glorot_init_is_seeded_and_bounded():
    a = GIN(GinConfig(), seeded_generator(7))
    b = GIN(GinConfig(), seeded_generator(7))
    c = GIN(GinConfig(), seeded_generator(8))
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb)
    assert not torch.equal(a.layers[0].fc1.weight, c.layers[0].fc1.weight)
    w = a.layers[0].fc1.weight
    bound = np.sqrt(6.0 / sum(w.shape))
    assert w.abs().max() <= bound


def _ce_objective(model, batch):
    gin, head = model
    return torch.nn.functional.cross_entropy(head(gin(batch)), batch.labels)


def test_gradient_contract_matches_finite_differences():
    gen = seeded_generator(3)
    model = torch.nn.ModuleList([GIN(GinConfig(in_dim=3, num_layers=2, hidden_dim=6, out_dim=4), gen),
                                 ClassifierHead(4, 3, gen, hidden=5)]).double()
    with torch.no_grad():  # nonzero biases keep pre-activations off the ReLU kink
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.uniform_(-0.5, 0.5, generator=gen)
    rng = np.random.default_rng(3)
    gs = [graph(rng.normal(size=(n, 3)), motif_adjacency(k, n), label=k % 3) for k, n in enumerate((3, 4, 5, 6))]
    batch = collate(gs, dtype=torch.float64)
    loss, grads = loss_and_gradients(_ce_objective, model, batch)
    assert np.isfinite(loss) and set(grads) == {n for n, _ in model.named_parameters()}
    numeric = numeric_gradients(_ce_objective, model, batch)
    assert relative_error(grads, numeric) < 1e-6
    for name in grads:
        assert relative_error({name: grads[name]}, {name: numeric[name]}) < 1e-5, name


def test_gradient_contract_rejects_empty_batch():
    model = ClassifierHead(2, 2, seeded_generator(0))
    with pytest.raises(UsageError):
        loss_and_gradients(lambda m, b: m(b).sum(), model, torch.zeros(0, 2))


def test_gradient_contract_rejects_non_finite():
    model = ClassifierHead(2, 2, seeded_generator(0))
    with pytest.raises(NumericError):
        loss_and_gradients(lambda m, b: m(b).sum() * float("inf"), model, torch.ones(1, 2))


def _set_linear(head, w, b):
    with torch.no_grad():
        head.net.weight.copy_(torch.as_tensor(w, dtype=head.net.weight.dtype))
        head.net.bias.copy_(torch.as_tensor(b, dtype=head.net.bias.dtype))


def test_head_matrix_arithmetic():
    head = ClassifierHead(2, 2, seeded_generator(0))
    _set_linear(head, [[1.0, 0.0], [0.0, 2.0]], [0.5, 0.0])
    np.testing.assert_allclose(classify_head(head, [1.0, 2.0]), [1.5, 4.0])
    _set_linear(head, np.zeros((2, 2)), [0.0, 0.0])
    np.testing.assert_array_equal(classify_head(head, [3.0, -1.0]), [0.0, 0.0])


def test_constant_objective_has_zero_gradient():
    model = ClassifierHead(3, 2, seeded_generator(0), hidden=4)
    loss, grads = loss_and_gradients(lambda m, b: torch.tensor(2.5) + 0 * m(b).sum(), model, torch.ones(2, 3))
    assert loss == 2.5
    assert all(not g.any() for g in grads.values())


def test_quadratic_objective_gradient_is_params():
    model = ClassifierHead(3, 2, seeded_generator(0), hidden=4).double()
    half_sq = lambda m, b: 0.5 * sum((p ** 2).sum() for p in m.parameters())
    _, grads = loss_and_gradients(half_sq, model, torch.ones(1, 3))
    for name, p in model.named_parameters():
        np.testing.assert_allclose(grads[name], p.detach().numpy(), rtol=1e-12)


def test_two_class_cross_entropy_closed_form():
    head = ClassifierHead(3, 2, seeded_generator(4)).double()
    x = torch.tensor([[0.3, -1.2, 2.0]], dtype=torch.float64)
    y = torch.tensor([1])
    ce = lambda m, b: torch.nn.functional.cross_entropy(m(b), y)
    _, grads = loss_and_gradients(ce, head, x)
    with torch.no_grad():
        p = torch.softmax(head(x), -1)[0].numpy()
    delta = p - np.array([0.0, 1.0])
    np.testing.assert_allclose(grads["net.weight"], np.outer(delta, x[0].numpy()), rtol=1e-12)
    np.testing.assert_allclose(grads["net.bias"], delta, rtol=1e-12)
    numeric = numeric_gradients(ce, head, x)
    assert relative_error(grads, numeric) < 1e-8


def test_isomorphic_graphs_share_representation():
    model = GIN(GinConfig(in_dim=2, num_layers=2), seeded_generator(2))
    x = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.2, 0.1]])
    g = graph(x, motif_adjacency(3, 4))
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(gin_forward(model, g), gin_forward(model, g.permuted(perm)), rtol=1e-6)
