"""Loss, optimizer, and training-loop behavior."""

import math

import numpy as np
import pytest

from thermoseg.nets import NetConfig, build_network
from thermoseg.rng import Rng
from thermoseg.tensor import ShapeMismatchError, Tensor, backward, grad_check
from thermoseg.trainer import (BCE_CLAMP, AdamState, TrainConfig, adam_step,
                               bce_loss, train)


def test_bce_perfect_prediction_is_clamp_small():
    y = np.array([[0.0, 1.0], [1.0, 0.0]])
    loss = bce_loss(Tensor(y), y)
    assert 0.0 <= loss.item() <= -math.log(1.0 - BCE_CLAMP) + 1e-12


def test_bce_half_prediction_is_ln2():
    pred = Tensor(np.full((1, 1, 4, 4), 0.5))
    target = (Rng(1).uniform((1, 1, 4, 4)) > 0.3).astype(float)
    assert bce_loss(pred, target).item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_bce_matches_direct_formula():
    p = Rng(2).uniform((1, 1, 4, 4), 0.05, 0.95)
    y = (Rng(3).uniform((1, 1, 4, 4)) > 0.5).astype(float)
    expected = float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))
    assert bce_loss(Tensor(p), y).item() == pytest.approx(expected, rel=1e-12)


def test_bce_gradient_matches_finite_differences():
    x = Tensor(Rng(4).uniform((1, 1, 4, 4), 0.1, 0.9), requires_grad=True)
    y = (Rng(5).uniform((1, 1, 4, 4)) > 0.5).astype(float)
    assert grad_check(lambda t: bce_loss(t, y), x, eps=1e-5) < 1e-4


def test_bce_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        bce_loss(Tensor(np.zeros((1, 2))), np.zeros((2, 1)))


def test_bce_is_nonnegative():
    for seed in range(10):
        p = Rng(seed).uniform((8,), 0.0, 1.0)
        y = (Rng(seed + 100).uniform((8,)) > 0.5).astype(float)
        assert bce_loss(Tensor(p), y).item() >= 0.0


# ---------------------------------------------------------------------------
# Adam


def _param(value):
    return {"p": Tensor(np.array([value]), requires_grad=True)}


def test_adam_zero_gradient_is_fixed_point():
    params = _param(1.5)
    params["p"].grad = np.zeros(1)
    state = AdamState.for_params(params)
    adam_step(params, state, TrainConfig())
    assert params["p"].data[0] == 1.5
    assert np.all(state.m["p"] == 0.0) and np.all(state.v["p"] == 0.0)


def test_adam_first_step_is_minus_lr():
    cfg = TrainConfig(learning_rate=1e-3)
    for g in (0.5, 3.0, -2.0):
        params = _param(1.0)
        params["p"].grad = np.array([g])
        adam_step(params, AdamState.for_params(params), cfg)
        expected = 1.0 - cfg.learning_rate * g / (abs(g) + cfg.eps)
        assert params["p"].data[0] == pytest.approx(expected, rel=1e-9)


def test_adam_minimizes_quadratic_monotonically():
    params = _param(1.0)
    state = AdamState.for_params(params)
    cfg = TrainConfig(learning_rate=1e-2)
    values = []
    for _ in range(100):
        params["p"].grad = 2.0 * params["p"].data  # d/dp p^2
        adam_step(params, state, cfg)
        values.append(abs(float(params["p"].data[0])))
    # monotone while well away from the optimum (Adam may ring once it arrives)
    assert all(a > b for a, b in zip(values[1:60], values[2:61]))
    assert values[-1] < 0.5
    assert np.all(np.isfinite(params["p"].data))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0).validate()
    TrainConfig(learning_rate=0.0).validate()  # explicit no-op optimizer allowed


# ---------------------------------------------------------------------------
# training loop


def _toy_pair(hw=16, seed=0):
    """Smooth blob image with its own threshold as the mask."""
    y, x = np.mgrid[0:hw, 0:hw]
    cx = hw / 2 + (seed % 3) - 1
    blob = np.exp(-((x - cx) ** 2 + (y - hw / 2) ** 2) / (0.08 * hw * hw))
    image = np.clip(255.0 * blob, 0, 255).astype(np.uint8)
    mask = np.where(image >= 128, 255, 0).astype(np.uint8)
    return image, mask


def _toy_graph(hw=16, seed=0):
    return build_network(NetConfig(arch="multiresunet", depth=2, base_width=6,
                                   input_hw=hw, seed=seed))


def test_train_lr_zero_is_a_noop():
    graph = _toy_graph()
    before = {n: p.data.copy() for n, p in graph.named_params()}
    history = train(graph, [_toy_pair()], TrainConfig(epochs=3, learning_rate=0.0))
    for name, p in graph.named_params():
        assert np.array_equal(p.data, before[name])
    assert len(set(history.losses)) == 1  # loss constant across epochs


def test_train_overfits_single_pair():
    graph = _toy_graph()
    history = train(graph, [_toy_pair()], TrainConfig(epochs=100, seed=1))
    assert history.losses[-1] < 0.1
    assert len(history.losses) == 100
    assert len(history.seconds) == 100


def test_train_is_deterministic():
    h1 = train(_toy_graph(seed=3), [_toy_pair(), _toy_pair(seed=1)],
               TrainConfig(epochs=2, seed=7))
    g2 = _toy_graph(seed=3)
    h2 = train(g2, [_toy_pair(), _toy_pair(seed=1)], TrainConfig(epochs=2, seed=7))
    assert h1.losses == h2.losses
    g3 = _toy_graph(seed=3)
    train(g3, [_toy_pair(), _toy_pair(seed=1)], TrainConfig(epochs=2, seed=7))
    for (na, pa), (nb, pb) in zip(g2.named_params(), g3.named_params()):
        assert na == nb
        assert pa.data.tobytes() == pb.data.tobytes()


def test_train_rejects_empty_or_mismatched_data():
    graph = _toy_graph()
    with pytest.raises(ValueError):
        train(graph, [], TrainConfig())
    with pytest.raises(ShapeMismatchError):
        train(graph, [_toy_pair(hw=8)], TrainConfig())


def test_history_csv(tmp_path):
    graph = _toy_graph()
    history = train(graph, [_toy_pair()], TrainConfig(epochs=2))
    path = tmp_path / "hist.csv"
    history.save_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,loss,seconds"
    assert len(lines) == 3
