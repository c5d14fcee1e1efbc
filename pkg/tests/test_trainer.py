import math

import numpy as np
import pytest

from ttlm.checkpoint import read_checkpoint
from ttlm.corpus import build_vocabulary, tokenize_lines
from ttlm.errors import ConfigError, NonFiniteError, TrainingDiverged
from ttlm.evaluation import masked_perplexity
from ttlm.model import ModelParams, init_params
from ttlm.trainer import (
    ASGD,
    SGD,
    OptimizerState,
    PlateauHalving,
    TrainConfig,
    asgd_accumulate,
    clip_gradients,
    global_norm,
    maybe_trigger_asgd,
    read_epoch_log,
    sgd_step,
    train,
)

from synthetic import cyclic_lines


def norm_of(params):
    return math.sqrt(sum(float((t ** 2).sum()) for t in params.tensors()))


def random_grads(rng, scale=1.0):
    g = init_params(6, 3, 2, seed=int(rng.integers(1000)))
    for t in g.tensors():
        t[...] = rng.normal(0, scale, t.shape)
    return g


def test_clip_scales_to_threshold():
    g = random_grads(np.random.default_rng(0))
    g = g.map(lambda t: t / norm_of(g))
    clipped, before = clip_gradients(g, 0.25)
    assert before == pytest.approx(1.0)
    for a, b in zip(clipped.tensors(), g.tensors()):
        assert np.allclose(a, 0.25 * b, rtol=1e-14, atol=0)


def test_clip_leaves_small_gradients():
    g = random_grads(np.random.default_rng(1))
    g = g.map(lambda t: t * 0.1 / norm_of(g))
    clipped, _ = clip_gradients(g, 0.25)
    assert all(a is b for a, b in zip(clipped.tensors(), g.tensors()))


@pytest.mark.parametrize("seed", range(20))
def test_clip_norm_property(seed):
    rng = np.random.default_rng(seed)
    g = random_grads(rng, scale=10 ** rng.uniform(-3, 1))
    original = norm_of(g)
    clipped, _ = clip_gradients(g, 0.25)
    assert abs(norm_of(clipped) - min(original, 0.25)) <= 1e-12


def test_clip_rejects_non_finite():
    g = random_grads(np.random.default_rng(2))
    g.w_hidden[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="w_hidden"):
        clip_gradients(g, 0.25)
    with pytest.raises(ConfigError):
        clip_gradients(random_grads(np.random.default_rng(2)), 0.0)


def test_global_norm():
    g = random_grads(np.random.default_rng(3))
    flat = np.concatenate([t.ravel() for t in g.tensors()])
    assert global_norm(g) == pytest.approx(np.linalg.norm(flat), rel=1e-14)


def _filled(value):
    p = init_params(1, 1, 1)
    return p.map(lambda t: np.full_like(t, value))


def test_sgd_step_arithmetic():
    p = sgd_step(_filled(1.0), _filled(0.5), 2.0)
    assert all((t == 0).all() for t in p.tensors())
    q = _filled(1.0)
    sgd_step(q, _filled(0.5), 0.0)
    assert all((t == 1).all() for t in q.tensors())


def test_sgd_linearity():
    rng = np.random.default_rng(4)
    g1, g2 = random_grads(rng), random_grads(rng)
    a = random_grads(rng)
    b = a.copy()
    sgd_step(sgd_step(a, g1, 0.3), g2, 0.3)
    sgd_step(b, ModelParams(*(x + y for x, y in zip(g1.tensors(), g2.tensors()))), 0.3)
    for x, y in zip(a.tensors(), b.tensors()):
        assert np.allclose(x, y, atol=1e-14)


def test_sgd_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        sgd_step(_filled(1.0), _filled(np.inf), 1.0)


def test_asgd_mean_of_two_and_one():
    rng = np.random.default_rng(5)
    a, b = random_grads(rng), random_grads(rng)
    opt = OptimizerState()
    opt.start_averaging(a)
    for x, y in zip(opt.averaged.tensors(), a.tensors()):
        assert np.array_equal(x, y)
    asgd_accumulate(opt, b)
    for avg, x, y in zip(opt.averaged.tensors(), a.tensors(), b.tensors()):
        assert np.allclose(avg, (x + y) / 2, atol=1e-15)
    assert opt.steps_averaged == 2


def test_asgd_running_mean_matches_batch_mean():
    rng = np.random.default_rng(6)
    values = rng.normal(size=100)
    snapshots = [_filled(v) for v in values]
    opt = OptimizerState()
    opt.start_averaging(snapshots[0])
    for s in snapshots[1:]:
        asgd_accumulate(opt, s)
    assert abs(opt.averaged.bias_out[0] - values.mean()) <= 1e-12


def test_asgd_requires_averaging_mode():
    with pytest.raises(ValueError):
        asgd_accumulate(OptimizerState(), _filled(1.0))


def _trigger_epoch(history, nonmono):
    opt = OptimizerState()
    for epoch, v in enumerate(history, 1):
        maybe_trigger_asgd(opt, v, _filled(0.0), nonmono)
        if opt.mode == ASGD:
            return epoch
    return None


def test_trigger_never_on_steady_improvement():
    assert _trigger_epoch([10 - 0.5 * k for k in range(15)], 5) is None


def test_trigger_on_plateau():
    # prior five NLLs at epoch 6 are [5, 4, 3, 3, 3]; 3 does not beat their minimum
    assert _trigger_epoch([5, 4, 3, 3, 3, 3, 3, 3], 5) == 6


def test_trigger_degenerate_window():
    assert _trigger_epoch([5, 5], 0) == 2
    assert _trigger_epoch([5, 4, 4], 0) == 3


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(layers=2).validate()
    with pytest.raises(ConfigError):
        TrainConfig(clip_norm=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(hidden=8, embed=4, tie_weights=True).validate()
    TrainConfig().validate()


@pytest.fixture(scope="module")
def cyclic():
    tokens = tokenize_lines(cyclic_lines(2000))
    vocab = build_vocabulary(tokens)
    train_ids = vocab.encode(tokens)
    valid_ids = vocab.encode(tokenize_lines(cyclic_lines(200)))
    return vocab, train_ids, valid_ids


def small_config(**kw):
    base = dict(bptt_len=16, batch_lanes=4, hidden=16, embed=16, max_epochs=10, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_cyclic_corpus_memorized(cyclic):
    vocab, tr, va = cyclic
    params, history = train(small_config(max_epochs=50), tr, va, len(vocab))
    assert history[-1].valid_ppl < 1.05
    assert masked_perplexity(params, va).perplexity < 1.05
    train_nll = [h.train_nll for h in history[:10]]
    assert all(b <= a + 1e-3 for a, b in zip(train_nll, train_nll[1:]))


def test_zero_learning_rate_keeps_loss(cyclic):
    vocab, tr, va = cyclic
    _, history = train(small_config(learn_rate=0.0, max_epochs=4), tr, va, len(vocab))
    assert len({h.train_nll for h in history}) == 1
    assert len({h.valid_ppl for h in history}) == 1


def test_training_is_deterministic(cyclic, tmp_path):
    vocab, tr, va = cyclic
    p1, h1 = train(small_config(max_epochs=3), tr, va, len(vocab), log_path=tmp_path / "a.csv")
    p2, h2 = train(small_config(max_epochs=3), tr, va, len(vocab), log_path=tmp_path / "b.csv")
    assert [(h.train_nll, h.valid_ppl, h.lr, h.mode) for h in h1] == [(h.train_nll, h.valid_ppl, h.lr, h.mode) for h in h2]
    for a, b in zip(p1.tensors(), p2.tensors()):
        assert a.tobytes() == b.tobytes()


def test_epoch_log_and_checkpoint(cyclic, tmp_path):
    vocab, tr, va = cyclic
    ckpt = tmp_path / "best.ttlm"
    _, history = train(small_config(max_epochs=3, thinking_n=1), tr, va, len(vocab), checkpoint_path=ckpt,
                       log_path=tmp_path / "log.csv", vocab_hash=vocab.hash)
    rows = read_epoch_log(tmp_path / "log.csv")
    assert list(rows[0]) == ["epoch", "train_nll", "valid_ppl", "lr", "mode", "seconds"]
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert float(rows[-1]["valid_ppl"]) == history[-1].valid_ppl
    params, info = read_checkpoint(ckpt)
    assert info.vocab_hash == vocab.hash and info.thinking_n == 1
    from ttlm.injector import ThinkingTokenConfig, inject
    best = min(h.valid_ppl for h in history)
    assert masked_perplexity(params, inject(va, ThinkingTokenConfig(1))).perplexity == pytest.approx(best, rel=1e-12)


def test_fixed_asgd_start_epoch(cyclic):
    vocab, tr, va = cyclic
    _, history = train(small_config(max_epochs=4, asgd_start_epoch=2), tr, va, len(vocab))
    assert [h.mode for h in history] == [SGD, SGD, ASGD, ASGD]


def test_lr_halves_after_two_bad_epochs():
    schedule = PlateauHalving(2.0, patience=2)
    lrs = []
    for v in [5.0, 4.0, 4.5, 4.2, 3.0, 3.0, 3.0, 3.0, 3.0]:
        schedule.update(v)
        lrs.append(schedule.lr)
    assert lrs == [2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.25]


def test_masked_training_option(cyclic):
    vocab, tr, va = cyclic
    _, plain = train(small_config(max_epochs=2, thinking_n=1), tr, va, len(vocab))
    _, masked = train(small_config(max_epochs=2, thinking_n=1, train_mask_thinking=True), tr, va, len(vocab))
    assert plain[0].train_nll != masked[0].train_nll


def test_divergence_aborts():
    rng = np.random.default_rng(0)
    tr, va = rng.integers(3, 50, 3000), rng.integers(3, 50, 300)
    with pytest.raises(TrainingDiverged, match="3x initial"):
        train(small_config(learn_rate=1e3, clip_norm=1e6, max_epochs=3), tr, va, 50)
