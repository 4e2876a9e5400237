import itertools

import numpy as np
import pytest

from clhpo.clmethods import (
    ESMER_CONSISTENCY_WEIGHT,
    Method,
    StateError,
    StreamError,
    Trainer,
    TrainSettings,
    batch_loss_derpp,
    batch_loss_er,
    batch_loss_er_ace,
    batch_loss_esmer,
    esmer_weights,
    herding_select,
    steps_per_task,
    train_plain_sgd,
)
from clhpo.hpo import CostLedger, HyperparamConfig
from clhpo.neural import MLP, features, forward, init_mlp, loss_and_grad, mse_logit_loss_and_grad, per_example_ce
from clhpo.streamgen import build_split_stream, make_stream, synth_gaussian

SETTINGS = TrainSettings(epochs=2, batch_size=8, buffer_capacity=30, hidden=(6,))


def _params_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def _grads_close(a, b, atol):
    return all(np.allclose(x, y, rtol=0, atol=atol) for x, y in zip(a.parameters(), b.parameters()))


def _hp(method, lr=0.05):
    return {
        Method.DERPP: HyperparamConfig(lr, alpha=0.5, beta=0.5),
        Method.ESMER: HyperparamConfig(lr, loss_margin=1.2),
    }.get(method, HyperparamConfig(lr))


@pytest.fixture(scope="module")
def one_task():
    return make_stream(synth_gaussian(3, 4, 20, 3.0, seed=0), seed=1, n_tasks=1)[0]


@pytest.fixture(scope="module")
def two_tasks():
    return make_stream(synth_gaussian(4, 4, 20, 3.0, seed=0), seed=1, n_tasks=2)


def test_degeneracy_chain(one_task):
    """One task: ER == ER-ACE == DER++(0, 0) == plain SGD, bit for bit."""
    init_seed, train_seed = 7, 99
    models = []
    for method, hp in [
        (Method.ER, HyperparamConfig(0.1)),
        (Method.ER_ACE, HyperparamConfig(0.1)),
        (Method.DERPP, HyperparamConfig(0.1, alpha=0.0, beta=0.0)),
    ]:
        tr = Trainer(method, 4, 3, SETTINGS, seed=init_seed)
        tr.train_task(0, one_task.classes, one_task.train, hp, seed=train_seed)
        models.append(tr.model)
    plain = train_plain_sgd(
        init_mlp([4, 6, 3], init_seed), one_task.train.X, one_task.train.y, 0.1,
        SETTINGS.epochs, SETTINGS.batch_size, train_seed,
    )
    for m in models:
        assert _params_equal(m, plain)


def test_derpp_zero_coefficients_match_finetuning_on_later_task(two_tasks):
    """With a non-empty buffer, alpha=beta=0 still leaves the trajectory untouched."""
    tr = Trainer(Method.DERPP, 4, 4, SETTINGS, seed=3)
    t0, t1 = two_tasks
    tr.train_task(0, t0.classes, t0.train, HyperparamConfig(0.1, alpha=1.0, beta=1.0), seed=5)
    start = tr.model.copy()
    tr.train_task(1, t1.classes, t1.train, HyperparamConfig(0.1, alpha=0.0, beta=0.0), seed=6)
    plain = train_plain_sgd(start, t1.train.X, t1.train.y, 0.1, SETTINGS.epochs, SETTINGS.batch_size, 6)
    assert _params_equal(tr.model, plain)


def test_er_first_task_has_no_replay(one_task):
    seen = []
    tr = Trainer(Method.ER, 4, 3, SETTINGS, seed=0)
    tr.hook = lambda ev: seen.append(len(ev.replay_ids))
    tr.train_task(0, one_task.classes, one_task.train, HyperparamConfig(0.1), seed=0)
    assert seen and not any(seen)
    assert len(seen) == steps_per_task(len(one_task.train), SETTINGS)


def test_er_concatenation_oracle(rng):
    m = init_mlp([3, 5, 4], 0)
    cX, cy = rng.normal(size=(6, 3)), rng.integers(0, 4, 6)
    rX, ry = rng.normal(size=(5, 3)), rng.integers(0, 4, 5)
    l, g = batch_loss_er(m, cX, cy, rX, ry)
    lo, go = loss_and_grad(m, np.vstack([cX, rX]), np.hstack([cy, ry]))
    assert l == lo and _params_equal(g, go)


def test_er_degenerate_batches(rng):
    m = init_mlp([3, 4], 0)
    X, y = rng.normal(size=(4, 3)), rng.integers(0, 4, 4)
    e = np.empty((0, 3)), np.empty(0, dtype=int)
    assert batch_loss_er(m, X, y, *e)[0] == loss_and_grad(m, X, y)[0]
    assert batch_loss_er(m, *e, X, y)[0] == loss_and_grad(m, X, y)[0]


def test_er_ace_per_term_oracle(rng):
    m = init_mlp([3, 5, 6], 1)
    cur = [4, 5]
    seen = [0, 1, 2, 3, 4, 5]
    cX, cy = rng.normal(size=(6, 3)), rng.choice(cur, 6)
    rX, ry = rng.normal(size=(5, 3)), rng.choice([0, 1, 2, 3], 5)
    l, g = batch_loss_er_ace(m, cX, cy, rX, ry, set(cur), set(seen))
    # independent masked CE: log-softmax over the allowed columns only
    def masked_ce(X, y, allowed):
        z = forward(m, X)[:, allowed]
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        col = {c: i for i, c in enumerate(allowed)}
        return -np.mean([logp[i, col[c]] for i, c in enumerate(y)])
    assert l == pytest.approx(masked_ce(cX, cy, cur) + masked_ce(rX, ry, seen), abs=1e-12)
    g_ref = loss_and_grad(m, cX, cy, class_mask=set(cur))[1] + loss_and_grad(m, rX, ry, class_mask=set(seen))[1]
    assert _grads_close(g, g_ref, 1e-12)


def test_er_ace_equals_er_when_masks_are_full(rng):
    m = init_mlp([3, 4], 2)
    X, y = rng.normal(size=(5, 3)), rng.integers(0, 4, 5)
    e = np.empty((0, 3)), np.empty(0, dtype=int)
    assert batch_loss_er_ace(m, X, y, *e, set(range(4)), set(range(4)))[0] == batch_loss_er(m, X, y, *e)[0]


def test_derpp_three_term_oracle(rng):
    m = init_mlp([3, 5, 4], 3)
    cX, cy = rng.normal(size=(6, 3)), rng.integers(0, 4, 6)
    r1X, r1z = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    r2X, r2y = rng.normal(size=(4, 3)), rng.integers(0, 4, 4)
    l, g = batch_loss_derpp(m, cX, cy, r1X, r1z, r2X, r2y, 1.0, 1.0)
    terms = [loss_and_grad(m, cX, cy), mse_logit_loss_and_grad(m, r1X, r1z), loss_and_grad(m, r2X, r2y)]
    ce_ref = -np.mean(np.log(np.exp(forward(m, cX))[np.arange(6), cy] / np.exp(forward(m, cX)).sum(1)))
    assert terms[0][0] == pytest.approx(ce_ref, abs=1e-12)
    assert terms[1][0] == pytest.approx(np.mean((forward(m, r1X) - r1z) ** 2), abs=1e-12)
    assert l == pytest.approx(sum(t[0] for t in terms), abs=1e-12)
    assert _grads_close(g, terms[0][1] + terms[1][1] + terms[2][1], 1e-12)


def test_derpp_zero_coefficients_current_only(rng):
    m = init_mlp([3, 4], 0)
    cX, cy = rng.normal(size=(4, 3)), rng.integers(0, 4, 4)
    l, _ = batch_loss_derpp(m, cX, cy, cX, np.zeros((4, 4)), cX, cy, 0.0, 0.0)
    assert l == loss_and_grad(m, cX, cy)[0]


def test_derpp_live_logits_zero_mse(rng):
    m = init_mlp([3, 4], 0)
    X, y = rng.normal(size=(4, 3)), rng.integers(0, 4, 4)
    e = np.empty((0, 3)), np.empty(0, dtype=int)
    l, _ = batch_loss_derpp(m, X, y, X, forward(m, X), *e, 1.0, 0.0)
    assert l == loss_and_grad(m, X, y)[0]


def test_derpp_missing_logits_state_error(rng):
    m = init_mlp([3, 4], 0)
    X, y = rng.normal(size=(2, 3)), np.array([0, 1])
    with pytest.raises(StateError):
        batch_loss_derpp(m, X, y, X, np.full((2, 4), np.nan), X, y, 1.0, 1.0)


def test_derpp_buffer_stores_logits(two_tasks):
    t0 = two_tasks[0]
    tr = Trainer(Method.DERPP, 4, 4, SETTINGS, seed=0)
    tr.train_task(0, t0.classes, t0.train, _hp(Method.DERPP), seed=0)
    slots = np.arange(len(tr.buffer))
    assert tr.buffer.has_logits[slots].all()
    np.testing.assert_array_equal(tr.buffer.logits[slots], forward(tr.model, tr.buffer.X[slots]))


def test_esmer_gating_inactive():
    losses = np.array([0.5, 0.9, 1.0])
    assert esmer_weights(losses, 1.0, 1.2).tolist() == [1.0, 1.0, 1.0]
    assert esmer_weights(np.array([1e6]), 1.0, np.inf).tolist() == [1.0]
    assert esmer_weights(np.array([5.0]), None, 1.0).tolist() == [1.0]


def test_esmer_outlier_scaled_by_margin_mean_over_loss():
    """Two examples through a bias-only 2-class model, one an outlier."""
    m = MLP([np.zeros((2, 1))], [np.array([0.0, 4.0])])
    X = np.zeros((2, 1))
    y = np.array([1, 0])  # losses: log(1+e^-4) and log(1+e^4)
    l_small, l_big = np.log1p(np.exp(-4.0)), np.log1p(np.exp(4.0))
    mu, margin = 1.0, 1.5
    factor = margin * mu / l_big
    assert esmer_weights(np.array([l_small, l_big]), mu, margin) == pytest.approx([1.0, factor])
    e = np.empty((0, 1)), np.empty(0, dtype=int)
    loss, grads, batch_mean = batch_loss_esmer(m, m.copy(), X, y, *e, margin, mu)
    # hand computation: d loss_i / d bias = softmax - onehot; average of the weighted pair
    p = np.exp([0.0, 4.0]) / np.exp([0.0, 4.0]).sum()
    g_small = p - np.array([0.0, 1.0])
    g_big = p - np.array([1.0, 0.0])
    np.testing.assert_allclose(grads.biases[0], (g_small + factor * g_big) / 2, atol=1e-14)
    assert loss == pytest.approx((l_small + factor * l_big) / 2, abs=1e-14)
    assert batch_mean == pytest.approx((l_small + l_big) / 2, abs=1e-14)


def test_esmer_consistency_term(rng):
    m, stable = init_mlp([3, 4], 0), init_mlp([3, 4], 1)
    cX, cy = rng.normal(size=(3, 3)), rng.integers(0, 4, 3)
    rX, ry = rng.normal(size=(2, 3)), rng.integers(0, 4, 2)
    loss, _, _ = batch_loss_esmer(m, stable, cX, cy, rX, ry, 1e9, 1.0)
    ce = loss_and_grad(m, np.vstack([cX, rX]), np.hstack([cy, ry]))[0]
    mse = np.mean((forward(m, rX) - forward(stable, rX)) ** 2)
    assert loss == pytest.approx(ce + ESMER_CONSISTENCY_WEIGHT * mse, abs=1e-12)


def test_esmer_tracks_loss_mean_and_stable_model(two_tasks):
    t0 = two_tasks[0]
    tr = Trainer(Method.ESMER, 4, 4, SETTINGS, seed=0)
    start = tr.stable.copy()
    tr.train_task(0, t0.classes, t0.train, _hp(Method.ESMER), seed=0)
    assert tr.loss_mean is not None and tr.loss_mean > 0
    assert not _params_equal(tr.stable, start)
    assert not _params_equal(tr.stable, tr.model)


def test_herding_m_one_is_closest_to_mean(rng):
    for _ in range(20):
        feats = rng.normal(size=(15, 3))
        brute = int(np.argmin(np.linalg.norm(feats - feats.mean(0), axis=1)))
        assert herding_select(feats, 1).tolist() == [brute]


def test_herding_greedy_matches_brute_force_small(rng):
    feats = rng.normal(size=(6, 2))
    picks = herding_select(feats, 3)
    mu = feats.mean(0)
    chosen = []
    for k in range(1, 4):
        best = min(
            (i for i in range(6) if i not in chosen),
            key=lambda i: np.linalg.norm(feats[chosen + [i]].mean(0) - mu),
        )
        chosen.append(best)
    assert picks.tolist() == chosen


def test_herding_full_class_mean_exact(rng):
    feats = rng.normal(size=(9, 4))
    picks = herding_select(feats, 9)
    assert sorted(picks.tolist()) == list(range(9))
    np.testing.assert_allclose(feats[picks].mean(0), feats.mean(0), atol=1e-15)


def test_nme_separates_two_classes():
    ds = synth_gaussian(2, 3, 40, 12.0, seed=2)
    stream = build_split_stream(ds, 1, seed=0)
    t = stream[0]
    tr = Trainer(Method.ICARL, 3, 2, TrainSettings(epochs=3, batch_size=8, buffer_capacity=200, hidden=(8,)), seed=0)
    tr.train_task(0, t.classes, t.train, HyperparamConfig(0.05), seed=0)
    assert len(tr.buffer) == len(t.train)  # capacity holds every example
    assert np.mean(tr.nme_predict(t.train.X) == t.train.y) == 1.0


def test_icarl_buffer_balanced_and_rebuilt(two_tasks):
    tr = Trainer(Method.ICARL, 4, 4, SETTINGS, seed=0)
    available = {}
    for t in two_tasks:
        available.update({c: int((t.train.y == c).sum()) for c in t.classes})
        tr.train_task(t.task_id, t.classes, t.train, HyperparamConfig(0.05), seed=t.task_id)
        per_class = SETTINGS.buffer_capacity // len(tr.seen_classes)
        counts = np.bincount(tr.buffer.y[:len(tr.buffer)], minlength=4)
        assert all(counts[c] == min(per_class, available[c]) for c in tr.seen_classes)
    assert per_class < max(available.values())  # the second rebuild really shrank old classes
    assert set(tr.predict(two_tasks[1].test.X).tolist()) <= tr.seen_classes


def test_icarl_unseen_class_rejected(two_tasks):
    t0 = two_tasks[0]
    tr = Trainer(Method.ICARL, 4, 4, SETTINGS, seed=0)
    tr.train_task(0, t0.classes, t0.train, HyperparamConfig(0.05), seed=0)
    unseen = next(c for c in range(4) if c not in t0.classes)
    with pytest.raises(ValueError):
        tr.nme_predict(t0.test.X, class_mask={unseen})


def test_class_overlap_is_stream_error(two_tasks):
    t0 = two_tasks[0]
    tr = Trainer(Method.ER, 4, 4, SETTINGS, seed=0)
    tr.train_task(0, t0.classes, t0.train, HyperparamConfig(0.05), seed=0)
    with pytest.raises(StreamError):
        tr.train_task(1, t0.classes, t0.train, HyperparamConfig(0.05), seed=0)


@pytest.mark.parametrize("method", list(Method))
def test_each_train_task_adds_one_unit(method, two_tasks):
    ledger = CostLedger()
    tr = Trainer(method, 4, 4, SETTINGS, seed=0)
    for k, t in enumerate(two_tasks, start=1):
        tr.train_task(t.task_id, t.classes, t.train, _hp(method), seed=k, ledger=ledger, phase="retrain")
        assert ledger.total == k
    assert tr.seen_classes == set(itertools.chain.from_iterable(t.classes for t in two_tasks))


@pytest.mark.parametrize("method", list(Method))
def test_training_never_touches_val_test_or_held_out(method, two_tasks):
    forbidden = set()
    for t in two_tasks:
        forbidden |= set(t.val.ids.tolist()) | set(t.test.ids.tolist())
    tr = Trainer(method, 4, 4, SETTINGS, seed=0)
    events = []
    tr.hook = events.append
    t0, t1 = two_tasks
    tr.train_task(0, t0.classes, t0.train, _hp(method), seed=0)
    tr.buffer.holdout_proportional(0.3, np.random.default_rng(0))
    tr.train_task(1, t1.classes, t1.train, _hp(method), seed=1)
    assert events
    for ev in events:
        assert not set(ev.current_ids.tolist()) & forbidden
        assert not set(ev.replay_ids.tolist()) & forbidden
        assert not set(ev.replay_uids.tolist()) & ev.held_out
    assert any(len(ev.replay_ids) for ev in events)


@pytest.mark.parametrize("method", list(Method))
def test_trainer_deterministic(method, two_tasks):
    models = []
    for _ in range(2):
        tr = Trainer(method, 4, 4, SETTINGS, seed=4)
        for t in two_tasks:
            tr.train_task(t.task_id, t.classes, t.train, _hp(method), seed=t.task_id + 10)
        models.append(tr.model)
    assert _params_equal(*models)


def test_hyperparameter_validation(one_task):
    tr = Trainer(Method.DERPP, 4, 3, SETTINGS, seed=0)
    with pytest.raises(ValueError):
        tr.train_task(0, one_task.classes, one_task.train, HyperparamConfig(0.1), seed=0)
    tr = Trainer(Method.ER, 4, 3, SETTINGS, seed=0)
    with pytest.raises(ValueError):
        tr.train_task(0, one_task.classes, one_task.train, HyperparamConfig(0.1, loss_margin=1.0), seed=0)


def test_snapshot_is_independent(two_tasks):
    t0, t1 = two_tasks
    tr = Trainer(Method.ER, 4, 4, SETTINGS, seed=0)
    tr.hook = lambda ev: None
    tr.train_task(0, t0.classes, t0.train, HyperparamConfig(0.1), seed=0)
    snap = tr.snapshot()
    assert snap.hook is tr.hook
    snap.train_task(1, t1.classes, t1.train, HyperparamConfig(0.1), seed=1)
    assert tr.seen_classes == set(t0.classes)
    assert len(tr.buffer) != len(snap.buffer) or not _params_equal(tr.model, snap.model)


def test_features_are_penultimate():
    m = init_mlp([3, 5, 2], 0)
    X = np.ones((2, 3))
    np.testing.assert_array_equal(features(m, X), np.maximum(X @ m.weights[0].T + m.biases[0], 0))
    assert per_example_ce(forward(m, X), np.array([0, 1]))[0].shape == (2,)


def _trajectory(method, hp, task, init_seed, train_seed):
    tr = Trainer(method, 4, 3, SETTINGS, seed=init_seed)
    steps = []
    tr.hook = lambda ev: steps.append([p.copy() for p in tr.model.parameters()])
    tr.train_task(0, task.classes, task.train, hp, seed=train_seed)
    return steps


def test_degeneracy_chain_step_by_step(one_task):
    er = _trajectory(Method.ER, HyperparamConfig(0.1), one_task, 2, 8)
    derpp = _trajectory(Method.DERPP, HyperparamConfig(0.1, alpha=0.0, beta=0.0), one_task, 2, 8)
    plain = []
    train_plain_sgd(
        init_mlp([4, 6, 3], 2), one_task.train.X, one_task.train.y, 0.1, SETTINGS.epochs, SETTINGS.batch_size, 8,
        on_step=lambda m: plain.append([p.copy() for p in m.parameters()]),
    )
    assert len(er) == len(derpp) == len(plain) == steps_per_task(len(one_task.train), SETTINGS)
    for a, b, c in zip(er, derpp, plain):
        assert all(np.array_equal(x, y) and np.array_equal(x, z) for x, y, z in zip(a, b, c))
