import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gdda.backbone import seeded_generator
from gdda.disentangle import (Disentangler, DisentanglerConfig, FactorPair, kl_softmax, phase1_losses,
                              style_resample, train_phase1, write_log_csv)
from gdda.errors import NumericError, ShapeError, UsageError


def _set_mlp(mlp, w1, w2):
    with torch.no_grad():
        mlp.fc1.weight.copy_(torch.as_tensor(w1, dtype=mlp.fc1.weight.dtype))
        mlp.fc2.weight.copy_(torch.as_tensor(w2, dtype=mlp.fc2.weight.dtype))
        mlp.fc1.bias.zero_()
        mlp.fc2.bias.zero_()


def identity_disentangler(d=4, num_classes=2, beta1=1.0, beta2=1.0):
    """Encoders select the two halves and the decoder concatenates them.

    A ReLU sits inside each MLP, so inputs are kept nonnegative in these tests.
    """
    half = d // 2
    dp = Disentangler(d, num_classes, DisentanglerConfig(half, d - half, beta1, beta2), seeded_generator(0)).double()
    eye = np.eye(d)
    _set_mlp(dp.enc_c, eye, eye[:half])
    _set_mlp(dp.enc_s, eye, eye[half:])
    _set_mlp(dp.dec, eye, eye)
    return dp


def test_identity_encode_splits_in_half():
    dp = identity_disentangler()
    h = torch.tensor([[1.0, 2.0, 3.0, 4.0]], dtype=torch.float64)
    with torch.no_grad():
        c, s = dp.encode(h)
        h_re = dp.decode(FactorPair(c, s))
    np.testing.assert_array_equal(c.numpy(), [[1.0, 2.0]])
    np.testing.assert_array_equal(s.numpy(), [[3.0, 4.0]])
    np.testing.assert_array_equal(h_re.numpy(), h.numpy())


def test_encode_is_deterministic_and_zero_maps_to_zero():
    dp = Disentangler(6, 3, DisentanglerConfig(3, 3), seeded_generator(1))
    h = torch.randn(2, 6, generator=seeded_generator(5))
    a, b = dp.encode(h), dp.encode(h)
    assert torch.equal(a.semantic, b.semantic) and torch.equal(a.style, b.style)
    c, s = dp.encode(torch.zeros(1, 6))
    assert not c.any() and not s.any()
    assert not dp.decode(FactorPair(torch.zeros(1, 3), torch.zeros(1, 3))).any()


def test_width_checks():
    with pytest.raises(ShapeError):
        Disentangler(6, 2, DisentanglerConfig(3, 2), seeded_generator(0))
    dp = Disentangler(4, 2, DisentanglerConfig(2, 2), seeded_generator(0))
    with pytest.raises(ShapeError):
        dp.encode(torch.zeros(1, 5))
    with pytest.raises(ShapeError):
        dp.decode(FactorPair(torch.zeros(1, 3), torch.zeros(1, 1)))


def test_style_resample():
    a = style_resample(4, seeded_generator(9))
    b = style_resample(4, seeded_generator(9))
    assert torch.equal(a, b) and a.shape == (4,)
    assert style_resample(1, seeded_generator(0)).shape == (1,)
    draws = style_resample(3, seeded_generator(0), n=10000, dtype=torch.float64).numpy()
    assert np.all(np.abs(draws.mean(0)) < 0.05)
    assert np.all(np.abs(draws.var(0) - 1) < 0.05)
    with pytest.raises(UsageError):
        style_resample(0, seeded_generator(0))


def test_kl_of_certain_against_uniform_is_ln2():
    p = torch.tensor([[50.0, -50.0]], dtype=torch.float64)  # softmax is [1, 0] to machine precision
    q = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    assert kl_softmax(p, q).item() == pytest.approx(math.log(2), abs=1e-10)  # floor contributes ~3e-11


def test_perfect_reconstruction_gives_zero_recon_and_sim():
    dp = identity_disentangler()
    h = torch.tensor([[1.0, 0.5, 2.0, 0.0], [0.0, 3.0, 1.0, 1.0]], dtype=torch.float64)
    _, s = dp.encode(h)
    losses = phase1_losses(dp, h, torch.tensor([0, 1]), s)
    assert losses.recon.item() == 0.0
    assert losses.sim.item() == pytest.approx(0.0, abs=1e-15)


def test_zero_weights_reduce_total_to_recon():
    dp = identity_disentangler(beta1=0.0, beta2=0.0)
    h = torch.rand(5, 4, generator=seeded_generator(2), dtype=torch.float64)
    s_prime = torch.randn(5, 2, generator=seeded_generator(3), dtype=torch.float64)
    losses = phase1_losses(dp, h, torch.zeros(5, dtype=torch.long), s_prime)
    assert losses.total.item() == losses.recon.item()


def test_total_is_weighted_sum():
    dp = Disentangler(4, 3, DisentanglerConfig(2, 2, beta1=0.3, beta2=2.0), seeded_generator(4)).double()
    h = torch.randn(6, 4, generator=seeded_generator(1), dtype=torch.float64)
    s_prime = torch.randn(6, 2, generator=seeded_generator(2), dtype=torch.float64)
    r, sim, cls, tot = phase1_losses(dp, h, torch.tensor([0, 1, 2, 0, 1, 2]), s_prime)
    assert tot.item() == pytest.approx(r.item() + 0.3 * sim.item() + 2.0 * cls.item(), rel=1e-14)
    assert sim.item() >= 0 and r.item() >= 0


def test_non_finite_input_names_term():
    dp = Disentangler(4, 2, DisentanglerConfig(2, 2), seeded_generator(0))
    h = torch.full((1, 4), float("nan"))
    with pytest.raises(NumericError, match="h_re"):
        phase1_losses(dp, h, torch.tensor([0]), torch.zeros(1, 2))


def _separable(n=40, seed=0):
    gen = seeded_generator(seed)
    y = torch.arange(n) % 2
    h = torch.randn(n, 4, generator=gen) * 0.3
    h[:, 0] += 2.0 * y - 1.0
    return h, y


def test_zero_epochs_leaves_parameters_unchanged():
    dp = Disentangler(4, 2, DisentanglerConfig(2, 2), seeded_generator(0))
    before = {k: v.clone() for k, v in dp.state_dict().items()}
    assert train_phase1(dp, _separable(), 0, seeded_generator(1)) == []
    for k, v in dp.state_dict().items():
        assert torch.equal(v, before[k])


def test_training_reduces_classification_loss_and_is_seeded():
    runs = []
    for _ in range(2):
        dp = Disentangler(4, 2, DisentanglerConfig(2, 2), seeded_generator(0))
        log = train_phase1(dp, _separable(), 200, seeded_generator(1), lr=1e-2)
        runs.append((dp, log))
    log = runs[0][1]
    assert log[-1]["L_cls"] < log[0]["L_cls"]
    for (ka, va), (kb, vb) in zip(runs[0][0].state_dict().items(), runs[1][0].state_dict().items()):
        assert torch.equal(va, vb), ka


def test_log_csv(tmp_path):
    path = tmp_path / "log.csv"
    write_log_csv([{"epoch": 0, "L_total": 1.5, "extra": 2}], path, ["epoch", "L_total"])
    assert path.read_text().splitlines() == ["epoch,L_total", "0,1.5"]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kl_is_nonnegative_and_zero_on_self(seed):
    gen = seeded_generator(seed)
    p = torch.randn(3, 5, generator=gen, dtype=torch.float64) * 4
    q = torch.randn(3, 5, generator=gen, dtype=torch.float64) * 4
    assert torch.all(kl_softmax(p, q) >= -1e-12)
    assert torch.allclose(kl_softmax(p, p), torch.zeros(3, dtype=torch.float64), atol=1e-12)
