import json

import numpy as np
import pytest

from gradcheck import check, rel_err
from nxb.device import DeviceModel
from nxb.nn import (SGD, Adam, DenseLayer, LossConfig, Network, TrainingDiverged, backward,
                    cross_entropy, energy_penalty, forward, loss_with_energy_reg, make_optimizer,
                    reference_read_counts, train_step)
from nxb.crossbar import EnergyLedger
from nxb.rng import stream


def small_net(kappa=0.2, mode="noisy_original", sizes=(6, 5, 3), seed=0, **kw):
    kw.setdefault("act_bits", None)
    kw.setdefault("weight_bits", None)
    return Network.mlp(list(sizes), stream(seed, "init"), DeviceModel(kappa=kappa), rho=0.8, mode=mode, **kw)


def batch(n=8, d=6, c=3, seed=1):
    g = stream(seed, "batch")
    return g.random((n, d)), g.integers(0, c, n)


def test_identity_network_passes_input_through():
    layer = DenseLayer(np.eye(3), np.zeros(3), np.array(0.0), "identity")
    net = Network([layer], DeviceModel(), "ideal", act_bits=None, weight_bits=None)
    x = np.array([[0.2, 0.0, 0.9]])
    logits, _ = forward(net, x)
    assert np.allclose(logits, x)


@pytest.mark.parametrize("mode", ["noisy_original", "noisy_decomposed"])
def test_zero_kappa_matches_ideal_bitwise(mode):
    net = small_net(kappa=0.0, mode=mode, act_bits=8, weight_bits=8)
    x, y = batch()
    ideal, t_ideal = forward(net, x, mode="ideal")
    noisy, t_noisy = forward(net, x, stream(3), mode=mode)
    assert np.array_equal(ideal, noisy)
    g_ideal = backward(net, t_ideal, cross_entropy(ideal, y)[1])
    g_noisy = backward(net, t_noisy, cross_entropy(noisy, y)[1])
    for k in g_ideal:
        assert np.array_equal(g_ideal[k], g_noisy[k]), k


def test_noisy_forward_is_deterministic_per_stream():
    net = small_net()
    x, _ = batch()
    a, _ = forward(net, x, stream(5))
    b, _ = forward(net, x, stream(5))
    c, _ = forward(net, x, stream(6))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_forward_errors():
    net = small_net()
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 4)), stream(0))
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 6)))
    with pytest.raises(ValueError):
        forward(net, -np.ones((2, 6)), stream(0))
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 6)), stream(0), mode="noisy_decomposed")


def test_adjacent_layers_must_conform():
    l0 = DenseLayer(np.zeros((4, 3)), np.zeros(4), np.array(0.0))
    l1 = DenseLayer(np.zeros((2, 5)), np.zeros(2), np.array(0.0), "identity", "layer1")
    with pytest.raises(ValueError):
        Network([l0, l1])


def test_softmax_gradient_is_softmax_minus_onehot():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    y = np.array([1, 2])
    loss, g = cross_entropy(logits, y)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    onehot = np.eye(3)[y]
    assert np.allclose(g * 2, p - onehot, atol=1e-15)
    assert loss == pytest.approx(-np.mean(np.log(p[[0, 1], y])))


def test_loss_examples():
    layer = DenseLayer(np.array([[2.0]]), np.zeros(1), np.array(np.log(0.5)), "identity")
    net = Network([layer], DeviceModel(), "ideal", act_bits=None, weight_bits=None)
    cfg = LossConfig(1.0, {"layer0": np.array([[3.0]])})
    assert energy_penalty(net, cfg) == pytest.approx(3.0)
    layer.weight[...] = -2.0
    assert energy_penalty(net, cfg) == pytest.approx(3.0)
    logits, y = np.array([[0.3, -0.1]]), np.array([0])
    assert loss_with_energy_reg(logits, y, net, LossConfig(0.0)) == cross_entropy(logits, y)[0]
    with pytest.raises(ValueError):
        LossConfig(-1.0)


def test_reference_read_counts_follow_planes():
    net = small_net(act_bits=8)
    counts = reference_read_counts(net, "noisy_original")
    assert all(np.all(v == 1) for v in counts.values())
    counts = reference_read_counts(net, "noisy_decomposed")
    assert all(np.all(v == 8) for v in counts.values())
    assert counts["layer0"].shape == net.layers[0].weight.shape


def test_ledger_charges_every_layer():
    net = small_net(act_bits=4, mode="noisy_decomposed")
    led = EnergyLedger()
    forward(net, batch()[0], stream(0), led)
    assert sorted(led.energy) == ["layer0", "layer1"]
    assert led.reads("layer0") == 8 * 4 * net.layers[0].weight.size


@pytest.mark.parametrize("mode,act_bits", [("ideal", None), ("noisy_original", None), ("noisy_decomposed", 8)])
def test_gradients_match_finite_differences(mode, act_bits):
    sizes = (6, 5, 3) if mode != "noisy_decomposed" else (6, 3)
    net = small_net(kappa=0.3, mode=mode, sizes=sizes, act_bits=act_bits)
    x, y = batch()
    cfg = LossConfig(1e-2, reference_read_counts(net))
    results = check(net, x, y, cfg, seed=4, mode=mode, coords_per_param=12, rng=np.random.default_rng(0))
    errs = [rel_err(a, n) for _, _, a, n in results]
    assert max(errs) <= 1e-4, max(zip(errs, results))


def test_zero_kappa_gradient_is_standard_backprop():
    net = small_net(kappa=0.0, sizes=(4, 2), act_bits=None)
    x, y = batch(d=4, c=2)
    logits, tape = forward(net, x, stream(0))
    _, d = cross_entropy(logits, y)
    g = backward(net, tape, d)
    assert np.allclose(g["layer0.weight"], d.T @ x)
    assert np.allclose(g["layer0.bias"], d.sum(axis=0))
    assert float(g["layer0.theta"]) == 0.0


def test_regularizer_gradient_sign_at_zero_weights():
    layer = DenseLayer(np.zeros((2, 2)), np.zeros(2), np.array(0.0), "identity")
    net = Network([layer], DeviceModel(), "ideal", act_bits=None, weight_bits=None)
    logits, tape = forward(net, np.ones((1, 2)))
    g = backward(net, tape, np.zeros_like(logits), LossConfig(1.0, {"layer0": np.ones((2, 2))}))
    assert np.array_equal(g["layer0.weight"], np.zeros((2, 2)))


def test_regularizer_pushes_rho_down():
    net = small_net(kappa=0.0)
    x, y = batch()
    logits, tape = forward(net, x, stream(0))
    g = backward(net, tape, np.zeros_like(logits), LossConfig(1e-3, reference_read_counts(net)))
    assert all(float(g[f"layer{i}.theta"]) > 0 for i in range(2))


def test_stale_tape_rejected():
    net = small_net()
    x, y = batch()
    opt = SGD(0.01, 0.0)
    _, tape = forward(net, x, stream(0))
    train_step(net, opt, x, y, LossConfig(), stream(1))
    with pytest.raises(RuntimeError):
        backward(net, tape, np.zeros((len(y), 3)))


def test_sgd_examples():
    p = {"w": np.array(0.0)}
    SGD(0.1, 0.0).step(p, {"w": np.array(1.0)})
    assert float(p["w"]) == pytest.approx(-0.1)
    p = {"w": np.array(0.0)}
    opt = SGD(0.1, 0.9)
    opt.step(p, {"w": np.array(1.0)})
    before = float(p["w"])
    opt.step(p, {"w": np.array(1.0)})
    assert before - float(p["w"]) == pytest.approx(0.19)


def test_adam_zero_gradient_leaves_parameter():
    p = {"w": np.array([1.5, -2.0])}
    Adam(0.1).step(p, {"w": np.zeros(2)})
    assert p["w"].tolist() == [1.5, -2.0]


def test_adam_first_step_is_lr_sized():
    p = {"w": np.array(0.0)}
    Adam(0.01).step(p, {"w": np.array(5.0)})
    assert float(p["w"]) == pytest.approx(-0.01, rel=1e-6)


def test_non_finite_gradient_aborts():
    for opt in (SGD(), Adam()):
        with pytest.raises(TrainingDiverged):
            opt.step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])})


def test_make_optimizer_kinds():
    assert make_optimizer("sgd", 0.1).kind == "sgd"
    assert make_optimizer("adam", 0.1).kind == "adam"
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", 0.1)


def test_optimizer_state_covers_theta():
    net = small_net()
    x, y = batch()
    opt = Adam()
    train_step(net, opt, x, y, LossConfig(1e-3, reference_read_counts(net)), stream(0), train_rho=True)
    assert {"layer0.theta", "layer1.theta"} <= set(opt.state_dict()["m"])
    json.dumps(opt.state_dict())


def test_training_reduces_loss():
    net = small_net(kappa=0.1, act_bits=8, weight_bits=8)
    x, _ = batch(64)
    y = (x[:, 0] > x[:, 1]).astype(int)
    opt = Adam(0.01)
    rng = stream(0, "train")
    losses = [train_step(net, opt, x, y, LossConfig(), rng) for _ in range(60)]
    assert losses[-1] < 0.7 * losses[0]


def test_rho_frozen_when_not_trained():
    net = small_net()
    x, y = batch()
    before = net.rho_values()
    train_step(net, SGD(0.1), x, y, LossConfig(1e-2, reference_read_counts(net)), stream(0), train_rho=False)
    assert net.rho_values() == before


def test_shared_rho_is_one_parameter():
    net = small_net(shared_rho=True)
    assert "shared.theta" in net.parameters(True)
    net.layers[0].theta[...] = 0.5
    assert net.layers[1].rho == net.layers[0].rho
    back = Network.from_dict(net.to_dict())
    back.layers[0].theta[...] = 0.1
    assert back.layers[1].rho == back.layers[0].rho


def test_checkpoint_round_trip_preserves_outputs():
    net = small_net(act_bits=8, weight_bits=6)
    x, _ = batch()
    forward(net, x, stream(0), training=True)
    back = Network.from_dict(json.loads(net.to_json()))
    assert np.array_equal(forward(net, x, stream(1))[0], forward(back, x, stream(1))[0])
    d = net.to_dict()
    assert d["layers"][0]["codes"] and max(abs(c) for row in d["layers"][0]["codes"] for c in row) <= 31
    with pytest.raises(ValueError):
        Network.from_dict({"format": "other"})


def test_hold_states_shares_draw_across_batch():
    net = small_net(sizes=(3, 2), kappa=0.5)
    x = np.tile(np.array([[0.2, 0.5, 0.9]]), (5, 1))
    held, _ = forward(net, x, stream(0), hold_states=True)
    fresh, _ = forward(net, x, stream(0))
    assert np.allclose(held, held[0])
    assert not np.allclose(fresh, fresh[0])
