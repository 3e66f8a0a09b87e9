import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fingat import autodiff as ad
from fingat.autodiff import Tensor
from fingat.checkpoint import load_checkpoint
from fingat.market import DatasetSplit
from fingat.model import ModelConfig
from fingat.training import (Adam, TrainConfig, TrainingError, adam_step, move_loss, move_loss_from_logits,
                             mse_loss, rank_loss, total_loss, train)


def brute_rank(pred, true):
    total = 0.0
    for q, k in itertools.permutations(range(len(pred)), 2):
        total += max(0.0, -(pred[q] - pred[k]) * (true[q] - true[k]))
    return total


# --- rank loss ------------------------------------------------------------

def test_rank_loss_hand_example():
    assert rank_loss(Tensor([0.2, 0.1]), [0.1, 0.3]).item() == pytest.approx(0.04, abs=1e-15)


def test_rank_loss_concordant_is_zero():
    assert rank_loss(Tensor([0.1, 0.5, 0.9]), [1.0, 2.0, 3.0]).item() == 0.0


def test_rank_loss_brute_force_six():
    rng = np.random.default_rng(0)
    p, y = rng.standard_normal(6), rng.standard_normal(6)
    assert rank_loss(Tensor(p), y).item() == pytest.approx(brute_rank(p, y), abs=1e-12)


def test_rank_loss_length_mismatch():
    with pytest.raises(ad.ShapeError):
        rank_loss(Tensor([1.0, 2.0]), [1.0])


def test_rank_loss_pairs_stay_within_days():
    rng = np.random.default_rng(1)
    p, y = rng.standard_normal(7), rng.standard_normal(7)
    day = np.array([0, 0, 0, 1, 1, 1, 1])
    expected = brute_rank(p[:3], y[:3]) + brute_rank(p[3:], y[3:])
    assert rank_loss(Tensor(p), y, day).item() == pytest.approx(expected, abs=1e-12)


vec = arrays(np.float64, 5, elements=st.floats(-1, 1, allow_nan=False))


@given(vec, vec, st.floats(-10, 10))
@settings(max_examples=100, deadline=None)
def test_rank_loss_translation_invariant(p, y, c):
    a = rank_loss(Tensor(p), y).item()
    b = rank_loss(Tensor(p + c), y).item()
    assert b == pytest.approx(a, abs=1e-9)


@given(st.integers(1, 8).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.sampled_from([-1.0, 0.0, 0.5, 1.0, 2.0])),
    arrays(np.float64, n, elements=st.sampled_from([-1.0, 0.0, 0.5, 1.0, 2.0])))))
@settings(max_examples=200, deadline=None)
def test_rank_loss_zero_iff_no_discordant_pair(pair):
    p, y = pair
    discordant = any((p[q] - p[k]) * (y[q] - y[k]) < 0 for q in range(len(p)) for k in range(len(p)))
    assert (rank_loss(Tensor(p), y).item() == 0.0) == (not discordant)


def test_rank_loss_gradient():
    rng = np.random.default_rng(2)
    p = Tensor(rng.standard_normal(6), requires_grad=True)
    y = rng.standard_normal(6)
    assert ad.finite_diff_check(lambda t: rank_loss(t, y), p) < 1e-4


# --- move / mse -----------------------------------------------------------

def test_move_loss_examples():
    assert move_loss(Tensor([0.5]), [1]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert move_loss(Tensor([0.999999]), [1]).item() == pytest.approx(1e-6, rel=1e-5)


def test_move_loss_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.01, 0.99, 10)
    y = rng.integers(0, 2, 10)
    expected = -sum(math.log(pi) if yi else math.log(1 - pi) for pi, yi in zip(p, y))
    assert move_loss(Tensor(p), y).item() == pytest.approx(expected, abs=1e-12)
    logits = np.log(p / (1 - p))
    assert move_loss_from_logits(Tensor(logits), y).item() == pytest.approx(expected, abs=1e-12)


def test_move_loss_domain():
    with pytest.raises(ad.DomainError):
        move_loss(Tensor([0.0, 0.5]), [0, 1])
    with pytest.raises(ad.DomainError):
        move_loss(Tensor([1.0]), [1])


def test_mse_examples():
    assert mse_loss(Tensor([0.3, 0.2]), [0.3, 0.2]).item() == 0.0
    assert mse_loss(Tensor([1.0, 0.0]), [0.0, 0.0]).item() == 1.0
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal(8), rng.standard_normal(8)
    assert mse_loss(Tensor(a), b).item() == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, b)), abs=1e-12)
    with pytest.raises(ad.ShapeError):
        mse_loss(Tensor([1.0]), [1.0, 2.0])


def test_total_loss():
    assert total_loss(0.04, 0.6931, 2.0, 0.0, 1e-4) == pytest.approx(0.04 + 2e-4)
    assert total_loss(0.04, 0.6931, 2.0, 1.0, 1e-4) == pytest.approx(0.6931 + 2e-4)
    assert total_loss(0.04, 0.6931, 2.0, 0.01, 1e-4) == pytest.approx(0.046731, abs=1e-12)


# --- Adam -----------------------------------------------------------------

def test_adam_first_step_magnitude_is_lr():
    x = Tensor([1.0], requires_grad=True)
    opt = Adam([("x", x)], lr=0.1)
    x.grad = 2 * x.data
    opt.step()
    assert x.data[0] == pytest.approx(0.9, abs=1e-7)


def test_adam_zero_gradient_keeps_params():
    x = Tensor([1.5, -2.0], requires_grad=True)
    opt = Adam([("x", x)], lr=0.1)
    x.grad = np.zeros(2)
    opt.step()
    assert x.data.tolist() == [1.5, -2.0]


def test_adam_missing_gradient_names_param():
    opt = Adam([("layer.w", Tensor([1.0], requires_grad=True))])
    with pytest.raises(TrainingError, match="layer.w"):
        opt.step()


def test_adam_quadratic_matches_scalar_recurrence():
    x = Tensor([1.0], requires_grad=True)
    opt = Adam([("x", x)], lr=0.05)
    # independent scalar recurrence
    xs, m, v = 1.0, 0.0, 0.0
    losses = []
    for t in range(1, 101):
        x.grad = 2 * x.data
        opt.step()
        g = 2 * xs
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        xs -= 0.05 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert x.data[0] == pytest.approx(xs, abs=1e-12)
        losses.append(xs * xs)
    assert abs(xs) < 0.05
    warm = losses[:20]
    assert all(b < a for a, b in zip(warm, warm[1:]))


def test_adam_step_function_in_place():
    p, g = np.array([1.0]), np.array([0.5])
    m, v = np.zeros(1), np.zeros(1)
    adam_step([p], [g], [m], [v], 1, 0.01)
    assert p[0] == pytest.approx(0.99, abs=1e-7)


# --- configs --------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"delta": -0.1}, {"delta": 1.5}, {"l2": -1}, {"batch_size": 0}])
def test_train_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# --- training loop --------------------------------------------------------

def small_split(synth_market, n_train=12, n_val=4):
    s = synth_market["split"]
    return DatasetSplit(s.train[:n_train], s.validation[:n_val], s.test[:n_val], s.mean, s.std,
                        s.feature_names)


def test_train_reconciles_loss_every_epoch(synth_market, tmp_path):
    split = small_split(synth_market)
    cfg = TrainConfig(max_epochs=4, batch_size=5, patience=10)
    _, rep = train(split, synth_market["catalog"], ModelConfig(hidden_dim=8), cfg, tmp_path)
    for e in rep.epochs:
        assert abs(e.total - ((1 - e.delta) * e.rank + e.delta * e.move + e.lam * e.l2)) <= 1e-9
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "epoch_4.ckpt").exists()
    assert (tmp_path / "report.json").exists()
    _, meta = load_checkpoint(tmp_path / "best.ckpt")
    assert meta["epoch"] == rep.best_epoch and meta["model"]["hidden_dim"] == 8


def test_delta_zero_still_logs_move(synth_market):
    split = small_split(synth_market)
    _, rep = train(split, synth_market["catalog"], ModelConfig(hidden_dim=4),
                   TrainConfig(max_epochs=1, delta=0.0))
    e = rep.epochs[0]
    assert e.move > 0 and e.total == pytest.approx(e.rank + e.lam * e.l2, abs=1e-9)


def test_no_mtl_is_rank_only(synth_market):
    _, rep = train(small_split(synth_market), synth_market["catalog"], ModelConfig(hidden_dim=4, variant="no_mtl"),
                   TrainConfig(max_epochs=1))
    assert rep.objective == "rank" and rep.epochs[0].move == 0.0 and rep.epochs[0].delta == 0.0


def test_same_seed_bit_identical(synth_market):
    args = (small_split(synth_market), synth_market["catalog"], ModelConfig(hidden_dim=4))
    _, a = train(*args, TrainConfig(max_epochs=3, batch_size=4))
    _, b = train(*args, TrainConfig(max_epochs=3, batch_size=4))
    assert [e.total for e in a.epochs] == [e.total for e in b.epochs]
    assert a.best_epoch == b.best_epoch


def test_chunking_does_not_change_losses(synth_market):
    args = (small_split(synth_market), synth_market["catalog"], ModelConfig(hidden_dim=4))
    _, a = train(*args, TrainConfig(max_epochs=2, batch_size=6))
    _, b = train(*args, TrainConfig(max_epochs=2, batch_size=6, max_rows=24))
    for x, y in zip(a.epochs, b.epochs):
        assert y.total == pytest.approx(x.total, rel=1e-12)


def test_early_stopping(synth_market):
    _, rep = train(small_split(synth_market), synth_market["catalog"], ModelConfig(hidden_dim=4),
                   TrainConfig(max_epochs=50, patience=2, learning_rate=0.0005))
    assert rep.stopped_early and len(rep.epochs) == rep.best_epoch + 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_epoch(synth_market, monkeypatch):
    import fingat.training as tr
    real = tr.objective_terms

    def broken(model, out, instances, delta):
        task, rank, move = real(model, out, instances, delta)
        return task * 1e308 * 1e308, rank, move

    monkeypatch.setattr(tr, "objective_terms", broken)
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(small_split(synth_market), synth_market["catalog"], ModelConfig(hidden_dim=4),
              TrainConfig(max_epochs=1))


def test_empty_split_rejected(synth_market):
    s = small_split(synth_market)
    with pytest.raises(TrainingError):
        train(DatasetSplit(s.train, [], s.test, s.mean, s.std, s.feature_names), synth_market["catalog"],
              ModelConfig(hidden_dim=4), TrainConfig(max_epochs=1))
