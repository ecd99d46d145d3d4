import numpy as np
import pytest

from distant_rationales.corpus import Instance, SyntheticConfig, generate_synthetic
from distant_rationales.losses import ConfigError
from distant_rationales.model import ModelConfig, TextCNN, Vocabulary
from distant_rationales.optim import Adam
from distant_rationales.autograd import Tensor
from distant_rationales.trainer import (
    ALL_RATIONALE,
    RunRecord,
    TrainConfig,
    classification_metrics,
    encode,
    make_optimizer,
    train_run,
    train_step,
)

SMALL = {"embedding_dim": 8, "kernel_widths": (2, 3), "kernels_per_width": 4, "hidden_dim": 8}


def test_adam_single_step_matches_hand_computation():
    p = Tensor(np.array([0.5]))
    opt = Adam([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    opt.step([np.array([2.0])])
    # m = 0.2, v = 0.004; bias-corrected m_hat = 2, v_hat = 4
    expected = 0.5 - 0.1 * (2.0 / (2.0 + 1e-8) + 0.01 * 0.5)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    opt.step([np.array([-1.0])])
    m = 0.9 * 0.2 + 0.1 * -1.0
    v = 0.999 * 0.004 + 0.001 * 1.0
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    expected2 = expected - 0.1 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * expected)
    assert p.data[0] == pytest.approx(expected2, abs=1e-14)


def test_embedding_is_not_decayed():
    model = TextCNN(ModelConfig(vocab_size=10, **SMALL))
    opt = make_optimizer(model, TrainConfig())
    flags = dict(zip([n for n, _ in model.named_parameters()], opt.decay))
    assert flags["embedding"] is False and all(v for k, v in flags.items() if k != "embedding")


def test_metrics_examples():
    m = classification_metrics([1, 0, 1], [1, 0, 1])
    assert m["accuracy"] == 1.0 and m["f1"] == 1.0
    # TP=2, FP=1, FN=1
    m = classification_metrics([1, 1, 1, 0, 0], [1, 1, 0, 1, 0])
    assert m["precision"] == pytest.approx(2 / 3) and m["recall"] == pytest.approx(2 / 3)
    assert m["f1"] == pytest.approx(2 / 3)
    m = classification_metrics([0, 0], [0, 0])
    assert m["f1"] == 0.0 and m["accuracy"] == 1.0


def test_train_config_validation():
    with pytest.raises(ConfigError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError, match="lr"):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError, match="method"):
        TrainConfig(method="nope")


@pytest.fixture(scope="module")
def corpora():
    train, valid, test, _ = generate_synthetic(SyntheticConfig(n_train=120, n_valid=40, n_test=60, seed=1))
    return train, valid, test


def _step_params(corpora, method, lam, masks=None):
    train = corpora[0][:16]
    if masks is not None:
        train = [Instance(i.id, i.tokens, i.label, [0] * len(i.tokens), i.tags) for i in train]
    vocab = Vocabulary.build(i.tokens for i in corpora[0])
    model = TextCNN(ModelConfig(vocab_size=len(vocab), seed=3, **SMALL))
    cfg = TrainConfig(method=method, lam=lam, seed=5)
    opt = make_optimizer(model, cfg)
    metrics = train_step(encode(train, vocab), model, opt, cfg, step=0)
    return model.get_state(), metrics


def test_lambda_zero_update_is_bit_identical_to_none(corpora):
    a, _ = _step_params(corpora, "none", 1.0)
    b, _ = _step_params(corpora, "base", 0.0)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_batch_without_rationales_updates_like_none(corpora):
    a, _ = _step_params(corpora, "none", 1.0, masks="zero")
    for m in ("base", "order", "gate"):
        b, metrics = _step_params(corpora, m, 2.0, masks="zero")
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_gate_rate_recorded_in_unit_interval(corpora):
    _, metrics = _step_params(corpora, "gate", 1.0)
    assert 0.0 <= metrics["gate_rate"] <= 1.0


def test_step_salience_groups_are_probabilities(corpora):
    _, metrics = _step_params(corpora, "order", 1.0)
    for v in metrics["salience"].values():
        assert v is None or 0.0 <= v <= 1.0


def test_epochs_zero_scores_initial_model(corpora):
    rec, model, vocab = train_run(*corpora, TrainConfig(epochs=0, seed=2), SMALL)
    assert rec.steps == [] and "test" in rec.final
    fresh = TextCNN(ModelConfig(vocab_size=len(vocab), seed=model.config.seed, **SMALL))
    for k in fresh.params:
        np.testing.assert_array_equal(fresh.params[k].data, model.params[k].data)


def test_rejects_empty_training_corpus(corpora):
    with pytest.raises(ValueError):
        train_run([], corpora[1], corpora[2], TrainConfig(epochs=1))


def test_same_seed_same_record(corpora, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=32, method="gate", seed=7)
    r1, _, _ = train_run(*corpora, cfg, SMALL)
    r2, _, _ = train_run(*corpora, cfg, SMALL)
    assert r1 == r2
    r1.save(tmp_path / "r.jsonl")
    assert RunRecord.load(tmp_path / "r.jsonl") == r1
    assert len(r1.trace(ALL_RATIONALE)) == len(r1.steps) == 2 * 4


def test_loss_decreases_on_separable_corpus():
    train, valid, test, _ = generate_synthetic(SyntheticConfig(n_train=200, n_valid=50, n_test=50,
                                                               coverage=1.0, seed=2))
    for method in ("none", "base", "order", "gate", "gate_order", "soft_gate", "marginal_gate", "sl"):
        rec, _, _ = train_run(train, valid, test,
                              TrainConfig(epochs=5, batch_size=16, lr=3e-3, method=method, seed=1), SMALL)
        assert rec.epochs[4]["train_ce"] < rec.epochs[0]["train_ce"], method


def test_baseline_is_accurate_on_fully_covered_corpus():
    train, valid, test, _ = generate_synthetic(SyntheticConfig(n_train=600, n_valid=200, n_test=300,
                                                               coverage=1.0, seed=0))
    model = {"embedding_dim": 32, "kernels_per_width": 8, "hidden_dim": 32}
    rec, _, _ = train_run(train, valid, test, TrainConfig(epochs=20, batch_size=32, seed=0,
                                                          track_salience=False), model)
    assert rec.final["test"]["accuracy"] > 0.95
