import math

import numpy as np
import pytest

from vitae.config import preset
from vitae.data import MNIST_MEAN, MNIST_STD, Dataset, load_mnist, normalize
from vitae.errors import NumericError, ShapeError
from vitae.model import build
from vitae.nn import Module
from vitae.tensor import Tensor
from vitae.training import AdamW, OptimConfig, OptimState, adamw_step, cosine_lr, evaluate, fit, scaled_lr

import oracles


class Holder(Module):
    def __init__(self, **tensors):
        super().__init__()
        for k, v in tensors.items():
            setattr(self, k, Tensor(np.asarray(v, dtype=np.float64), requires_grad=True))


def test_first_adam_step_moves_by_lr(rng):
    p = rng.standard_normal(5)
    g = rng.standard_normal(5) * 10
    state = OptimState.for_params([p], weight_decay=0.0)
    q = p.copy()
    adamw_step([q], [g], state, 1e-2)
    np.testing.assert_allclose(np.abs(q - p), 1e-2, rtol=1e-6)
    assert np.all(np.sign(p - q) == np.sign(g))


def test_zero_gradient_step_is_pure_decay(rng):
    p = rng.standard_normal((3, 3))
    state = OptimState.for_params([p], weight_decay=0.1)
    q = p.copy()
    adamw_step([q], [np.zeros_like(q)], state, 0.01)
    np.testing.assert_array_equal(q, p * (1 - 0.01 * 0.1))


def test_missing_gradient_counts_as_zero(rng):
    p = rng.standard_normal(4)
    state = OptimState.for_params([p], weight_decay=0.0)
    q = p.copy()
    adamw_step([q], [None], state, 0.1)
    np.testing.assert_array_equal(q, p)


def test_adam_matches_textbook_reference(rng):
    p0 = rng.standard_normal(6)
    grads = [rng.standard_normal(6) for _ in range(25)]
    state = OptimState.for_params([p0], weight_decay=0.0)
    p = p0.copy()
    for g in grads:
        adamw_step([p], [g], state, 3e-3)
    np.testing.assert_allclose(p, oracles.adam_reference(p0, grads, 3e-3), atol=1e-10)


def test_decay_skips_vectors_by_default():
    h = Holder(w=np.ones((2, 2)), b=np.ones(2))
    opt = AdamW(h, lr=0.1, weight_decay=0.5)
    opt.step()
    np.testing.assert_allclose(h.w.data, 0.95)
    np.testing.assert_array_equal(h.b.data, 1.0)


def test_optimizer_rejects_bad_inputs(rng):
    p = rng.standard_normal(3)
    state = OptimState.for_params([p])
    with pytest.raises(ValueError):
        adamw_step([p], [p], state, 0.0)
    with pytest.raises(ShapeError):
        adamw_step([p], [np.zeros(4)], state, 0.1)


def test_lr_scaling():
    assert scaled_lr(512) == 5e-4
    assert scaled_lr(64) == 5e-4 / 8


@pytest.mark.parametrize("step,want", [(0, 1.0), (50, 0.5), (100, 0.0), (25, 0.5 * (1 + math.cos(math.pi / 4)))])
def test_cosine_values(step, want):
    assert cosine_lr(step, 100, 1.0) == pytest.approx(want, abs=1e-12)


def test_cosine_warmup_and_continuity():
    lrs = [cosine_lr(s, 200, 1e-3, 1e-6, 20) for s in range(201)]
    assert lrs[0] == pytest.approx(1e-3 / 21)
    assert lrs[20] == pytest.approx(1e-3)
    assert lrs[-1] == pytest.approx(1e-6)
    assert all(a < b for a, b in zip(lrs[:20], lrs[1:21]))
    assert all(a >= b for a, b in zip(lrs[20:], lrs[21:]))
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) < 1e-3 / 20


def test_cosine_rejects_degenerate_schedule():
    with pytest.raises(ValueError):
        cosine_lr(0, 10, 1e-3, warmup_steps=10)


def test_fit_is_deterministic(overfit_run):
    a, b = overfit_run
    assert a.losses == b.losses


def test_overfit_reaches_low_loss(overfit_run):
    losses = overfit_run[0].losses
    assert len(losses) == 500
    assert min(losses) < 0.05 and losses[-1] < 0.05


def test_overfit_moving_average_is_non_increasing(overfit_run):
    losses = np.array(overfit_run[0].losses)
    avg = np.convolve(losses, np.ones(20) / 20, mode="valid")
    rises = np.flatnonzero(np.diff(avg) > 0)
    assert rises.size == 0, f"moving average rises at steps {rises[:10].tolist()}"


def test_fit_rejects_empty_and_mismatched_data():
    m = build("tiny-desk")
    empty = Dataset(np.zeros((0, 3, 32, 32), dtype=np.float32), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        fit(m, empty, 1)
    small = Dataset(np.zeros((2, 3, 28, 28), dtype=np.float32), np.zeros(2, dtype=np.int64))
    with pytest.raises(ShapeError):
        fit(m, small, 1)


def test_fit_stops_on_non_finite_loss():
    m = build("tiny-desk")
    ds = Dataset(np.full((4, 3, 32, 32), np.nan, dtype=np.float32), np.zeros(4, dtype=np.int64))
    with pytest.raises(NumericError):
        fit(m, ds, 1, optim=OptimConfig(batch_size=4))


def test_fit_log_records(tmp_path):
    g = np.random.default_rng(0)
    ds = Dataset(g.standard_normal((8, 3, 32, 32)).astype(np.float32), g.integers(0, 10, 8))
    seen = []
    log = fit(build("tiny-desk"), ds, 2, optim=OptimConfig(batch_size=4), eval_set=ds,
              log_path=tmp_path / "log.jsonl", on_record=seen.append)
    assert [r["step"] for r in log.records if "loss" in r] == [0, 1, 2, 3]
    assert len(log.accuracies) == 2
    assert seen == log.records
    assert (tmp_path / "log.jsonl").read_text() == log.to_jsonl()


def test_mnist_smoke(mnist_dir):
    train = load_mnist(mnist_dir, "train").subset(slice(0, 2048))
    test = load_mnist(mnist_dir, "test").subset(slice(0, 1000))
    train = Dataset(normalize(train.images, MNIST_MEAN, MNIST_STD), train.labels)
    test = Dataset(normalize(test.images, MNIST_MEAN, MNIST_STD), test.labels)
    m = build(preset("tiny-desk", in_chans=1), seed=0)
    fit(m, train, 2, optim=OptimConfig(lr=1e-3, batch_size=64))
    assert evaluate(m, test) > 0.2
