import copy
import math

import numpy as np
import pytest
import torch

from kyoto_shift_bench.config import ModelConfig, RunConfig, config_hash
from kyoto_shift_bench.errors import (
    ArtifactMismatch,
    ConfigMismatch,
    EmptyMask,
    InvalidConfig,
    VocabularyMismatch,
)
from kyoto_shift_bench.maskedmodel import (
    STRATEGIES,
    aggregate_scores,
    anomaly_score,
    apply_mask,
    distill_loss,
    expected_parameter_count,
    init_model,
    load_checkpoint,
    mlm_loss,
    parameter_count,
    predict_proba,
    read_checkpoint,
    row_masks,
    run_strategies,
    save_checkpoint,
    score_sequences,
    train_distill,
    train_finetune,
    train_iid,
    true_token_probs,
)
from kyoto_shift_bench.tokenize import MASK_ID, Vocabulary, encode_all, token_matrix


@pytest.fixture
def train_tokens(splits, vocab):
    return token_matrix(encode_all(splits.train_records, vocab))


def _uniform(model):
    with torch.no_grad():
        model.decoder.weight.zero_()
        model.decoder.bias.zero_()
    return model


def _same_weights(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


@pytest.mark.parametrize("vocab_size", [5, 1000])
def test_parameter_count_closed_form(vocab_size, toy_model_config):
    for config in (ModelConfig(), toy_model_config):
        model = init_model(config, vocab_size, seed=0)
        assert parameter_count(model) == expected_parameter_count(config, vocab_size)


def test_forward_gives_log_probabilities(toy_model_config):
    model = init_model(toy_model_config, 20, seed=0)
    tokens = torch.randint(0, 20, (3, 14), generator=torch.Generator().manual_seed(0))
    out = model(tokens)
    assert out.shape == (3, 14, 20)
    np.testing.assert_allclose(out.exp().sum(-1).detach().numpy(), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        model(tokens[:, :5])


def test_init_model_is_seeded(toy_model_config):
    assert _same_weights(init_model(toy_model_config, 30, 4), init_model(toy_model_config, 30, 4))
    assert not _same_weights(init_model(toy_model_config, 30, 4),
                             init_model(toy_model_config, 30, 5))
    with pytest.raises(InvalidConfig):
        init_model(toy_model_config, MASK_ID, 0)


def test_apply_mask_rate_and_replacement():
    rng = np.random.default_rng(0)
    tokens = rng.integers(3, 50, size=(400, 100))
    sample = apply_mask(tokens, 0.15, rng)
    assert abs(sample.mask.mean() - 0.15) < 0.01
    assert (sample.masked[sample.mask] == MASK_ID).all()
    np.testing.assert_array_equal(sample.masked[~sample.mask], tokens[~sample.mask])


def test_apply_mask_never_leaves_a_row_empty():
    rng = np.random.default_rng(1)
    sample = apply_mask(np.full((5000, 3), 7), 0.01, rng)
    assert sample.mask.any(axis=1).all()
    single = apply_mask(np.arange(3, 17), 0.15, rng)
    assert single.mask.shape == (14,)
    with pytest.raises(ValueError):
        apply_mask(np.arange(14), 1.0, rng)


def test_mlm_loss_hand_evaluation():
    log_probs = torch.log(torch.tensor([[[0.5, 0.25, 0.25], [0.1, 0.8, 0.1]]],
                                       dtype=torch.float64))
    targets = torch.tensor([[0, 1]])
    loss = mlm_loss(log_probs, targets, torch.tensor([[True, True]]))
    assert math.isclose(loss.item(), -(math.log(0.5) + math.log(0.8)) / 2)
    only_first = mlm_loss(log_probs, targets, torch.tensor([[True, False]]))
    assert math.isclose(only_first.item(), -math.log(0.5))
    with pytest.raises(EmptyMask):
        mlm_loss(log_probs, targets, torch.tensor([[False, False]]))


def test_mlm_gradient_matches_finite_differences():
    config = ModelConfig(n_layers=1, hidden=8, intermediate=16, n_heads=1, seq_len=4,
                         dropout=0.0, attention_dropout=0.0, init_std=0.5,
                         show_progress=False)
    model = init_model(config, 7, seed=3)
    model.eval()
    g = torch.Generator().manual_seed(3)
    with torch.no_grad():
        # move LayerNorm and bias terms off their 1/0 initial values
        for name, param in model.named_parameters():
            if name.endswith("bias") or "norm" in name:
                param.add_(0.1 * torch.randn(param.shape, generator=g, dtype=param.dtype))
    tokens = torch.tensor([[3, 4, 5, 6], [6, 5, 4, 3]])
    mask = torch.tensor([[True, False, True, False], [False, True, False, True]])
    masked = torch.where(mask, MASK_ID, tokens)

    def loss():
        return mlm_loss(model(masked), tokens, mask).item()

    model.zero_grad()
    mlm_loss(model(masked), tokens, mask).backward()
    h = 1e-6
    checked = 0
    for name, param in model.named_parameters():
        flat, grad = param.data.view(-1), param.grad.view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + h
            up = loss()
            flat[i] = original - h
            down = loss()
            flat[i] = original
            numeric = (up - down) / (2 * h)
            assert math.isclose(grad[i].item(), numeric, rel_tol=1e-4, abs_tol=1e-8), \
                f"{name}[{i}]"
            checked += 1
    assert checked == parameter_count(model)


def test_distill_loss():
    g = torch.Generator().manual_seed(0)
    student = torch.log_softmax(torch.randn(2, 3, 5, generator=g, dtype=torch.float64), -1)
    teacher = torch.log_softmax(torch.randn(2, 3, 5, generator=g, dtype=torch.float64), -1)
    mask = torch.tensor([[True, False, True], [False, False, True]])
    assert distill_loss(student, student, mask).item() == pytest.approx(0.0, abs=1e-12)
    p, q = teacher[mask].exp(), student[mask].exp()
    manual = (p * (p.log() - q.log())).sum(-1).mean().item()
    assert math.isclose(distill_loss(student, teacher, mask).item(), manual, rel_tol=1e-9)
    with pytest.raises(EmptyMask):
        distill_loss(student, teacher, torch.zeros(2, 3, dtype=torch.bool))


def test_aggregate_scores_ignore_unmasked_positions():
    V = 10
    masks = np.zeros((2, 1, 14), dtype=bool)
    masks[0, 0, :3] = True
    masks[1, 0, :5] = True
    probs = np.full((2, 1, 14), 1.0 / V)
    scores = aggregate_scores(probs, masks)
    assert math.isclose(scores[0], 4 * (1 - 1 / V))
    probs[:, :, 10:] = 0.0
    assert math.isclose(aggregate_scores(probs, masks)[0], 4 * (1 - 1 / V))
    assert math.isclose(aggregate_scores(probs, masks, True)[0], 1 - 1 / V)


def test_uniform_model_scores_masked_count(toy_model_config, train_tokens):
    V = int(train_tokens.max()) + 1
    model = _uniform(init_model(toy_model_config, V, seed=0))
    probs = predict_proba(model, train_tokens[:2])
    np.testing.assert_allclose(probs, 1.0 / V, rtol=1e-12)
    normalized = score_sequences(model, train_tokens[:20], 0.15, 5, seed=1,
                                 normalize_by_mask_count=True)
    np.testing.assert_allclose(normalized, 1 - 1 / V, rtol=1e-12)
    raw = score_sequences(model, train_tokens[:20], 0.15, 5, seed=1)
    assert (raw >= 1 - 1 / V - 1e-12).all()


@pytest.mark.parametrize("m", [1, 3, 14])
def test_uniform_model_with_fixed_masks(toy_model_config, train_tokens, m):
    V = int(train_tokens.max()) + 1
    model = _uniform(init_model(toy_model_config, V, seed=0))
    tokens = train_tokens[:10]
    rng = np.random.default_rng(m)
    masks = np.zeros((4, *tokens.shape), dtype=bool)
    for k in range(4):
        for row in masks[k]:
            row[rng.choice(tokens.shape[1], size=m, replace=False)] = True
    probs = np.stack([true_token_probs(model, tokens, masks[k]) for k in range(4)])
    np.testing.assert_allclose(aggregate_scores(probs, masks), m * (1 - 1 / V), rtol=1e-12)


def test_oracle_model_scores_zero(toy_model_config):
    V, token = 9, 5
    model = _uniform(init_model(toy_model_config, V, seed=0))
    with torch.no_grad():
        model.decoder.bias[token] = 1e3
    tokens = np.full((6, toy_model_config.seq_len), token)
    assert (score_sequences(model, tokens, 0.5, 4, seed=0) == 0.0).all()
    assert anomaly_score(model, tokens[0], 0.15, 3, seed=2) == 0.0


def test_score_bounds_over_fuzzed_inputs(toy_model_config):
    rng = np.random.default_rng(11)
    T = toy_model_config.seq_len
    for trial in range(20):
        V = int(rng.integers(4, 40))
        model = init_model(toy_model_config.model_copy(update={"init_std": 1.0}), V, trial)
        tokens = rng.integers(0, V, size=(int(rng.integers(1, 30)), T))
        p = float(rng.uniform(0.05, 0.95))
        scores = score_sequences(model, tokens, p, int(rng.integers(1, 4)), seed=trial)
        assert ((scores >= 0) & (scores <= T)).all()


def test_score_ignores_batch_company(toy_model_config, vocab, train_tokens):
    model = init_model(toy_model_config, vocab.size, seed=0)
    a = train_tokens[0]
    b = next(row for row in train_tokens if not np.array_equal(row, a))

    def score(rows):
        return score_sequences(model, np.stack(rows), 0.15, 3, seed=0)

    alone = score([a])[0]
    assert math.isclose(score([a, b])[0], alone, rel_tol=1e-12)
    assert math.isclose(score([b, a])[1], alone, rel_tol=1e-12)
    assert math.isclose(score([b, a, a])[2], alone, rel_tol=1e-12)
    assert math.isclose(anomaly_score(model, a, 0.15, 3, seed=0), alone, rel_tol=1e-12)


def test_row_masks_are_keyed_on_row_and_seed():
    row = np.arange(3, 17)
    np.testing.assert_array_equal(row_masks(row, 0.3, 5, 0), row_masks(row.copy(), 0.3, 5, 0))
    assert row_masks(row, 0.3, 5, 0).shape == (5, 14)
    assert not np.array_equal(row_masks(row, 0.3, 5, 0), row_masks(row, 0.3, 5, 1))


def test_forward_is_equivariant_to_position_swaps(toy_model_config):
    model = init_model(toy_model_config.model_copy(update={"init_std": 0.5}), 20, seed=1)
    model.eval()
    tokens = torch.randint(0, 20, (2, 14), generator=torch.Generator().manual_seed(1))
    i, j = 2, 9
    order = list(range(14))
    order[i], order[j] = j, i
    swapped = copy.deepcopy(model)
    with torch.no_grad():
        swapped.position_embedding.weight.copy_(model.position_embedding.weight[order])
        out = model(tokens)
        out_swapped = swapped(tokens[:, order])
        again = model(tokens)
    torch.testing.assert_close(out_swapped, out[:, order], rtol=1e-10, atol=1e-12)
    assert torch.equal(out, again)


def test_scoring_is_seeded(toy_model_config, vocab, train_tokens):
    model = init_model(toy_model_config, vocab.size, seed=0)
    a = score_sequences(model, train_tokens[:30], 0.15, 3, seed=9)
    b = score_sequences(model, train_tokens[:30], 0.15, 3, seed=9)
    np.testing.assert_array_equal(a, b)
    one = anomaly_score(model, train_tokens[0], 0.15, 3, seed=9)
    assert math.isclose(one, score_sequences(model, train_tokens[:1], 0.15, 3, seed=9)[0])
    assert score_sequences(model, np.zeros((0, 14), dtype=int), 0.15, 3, 0).shape == (0,)


def test_training_lowers_the_loss(toy_model_config, vocab, train_tokens):
    config = toy_model_config.model_copy(update={"epochs": 6, "learning_rate": 1e-2})
    result = train_iid([train_tokens], config, vocab.size, seed=0)
    losses = result.epoch_losses[0]
    assert len(losses) == 6
    assert losses[-1] < losses[0]


def test_iid_and_finetune_agree_on_one_set(toy_model_config, vocab, train_tokens):
    iid = train_iid([train_tokens], toy_model_config, vocab.size, seed=2)
    start = init_model(toy_model_config, vocab.size, seed=2)
    finetuned = train_finetune(start, [train_tokens], toy_model_config, seed=2)
    assert _same_weights(iid.model, finetuned.model)
    assert iid.epoch_losses == finetuned.epoch_losses
    # the starting weights are left alone
    assert _same_weights(start, init_model(toy_model_config, vocab.size, seed=2))


def test_training_is_reproducible(toy_model_config, vocab, train_tokens):
    sets = [train_tokens[:120], train_tokens[120:]]
    a = train_finetune(init_model(toy_model_config, vocab.size, 0), sets, toy_model_config, 1)
    b = train_finetune(init_model(toy_model_config, vocab.size, 0), sets, toy_model_config, 1)
    assert _same_weights(a.model, b.model)
    assert len(a.epoch_losses) == 2


def test_distill_chain(toy_model_config, vocab, train_tokens):
    sets = [train_tokens[:120], train_tokens[120:]]
    result = train_distill(None, sets, toy_model_config, vocab.size, seed=0)
    assert len(result.epoch_losses) == 2
    teacher = result.model
    again = train_distill(teacher, sets[:1], toy_model_config, vocab.size, seed=0)
    assert again.model is not teacher
    wider = toy_model_config.model_copy(update={"hidden": 16})
    with pytest.raises(ConfigMismatch):
        train_distill(teacher, sets, wider, vocab.size, seed=0)
    with pytest.raises(ConfigMismatch):
        train_distill(teacher, sets, toy_model_config, vocab.size + 1, seed=0)


def test_run_strategies_rows(toy_model_config, vocab, splits, train_tokens):
    config = toy_model_config.model_copy(update={"epochs": 1})
    yearly_train = [(2006, train_tokens[:80]), (2007, train_tokens[80:160])]
    far = splits.far[0]
    yearly_test = {
        ("far", far.year): (
            token_matrix(encode_all(far.records, vocab)),
            np.array([r.label.is_anomaly for r in far.records]),
        )
    }
    rows = run_strategies(yearly_train, yearly_test, config, vocab.size, seed=0)
    assert len(rows) == len(STRATEGIES) * 2
    assert [r.strategy for r in rows[:2]] == ["iid", "iid"]
    assert {(r.stage, r.last_train_year) for r in rows} == {(0, 2006), (1, 2007)}
    assert all(0.0 <= r.roc_auc <= 1.0 for r in rows)
    with pytest.raises(InvalidConfig):
        run_strategies(yearly_train, yearly_test, config, vocab.size, 0, ["replay"])


def test_checkpoint_round_trip(tmp_path, toy_model_config, vocab, train_tokens):
    model = init_model(toy_model_config, vocab.size, seed=0)
    run = RunConfig(seed=5)
    path = save_checkpoint(model, vocab, tmp_path / "model.pt", run, seed=5)
    blob = read_checkpoint(path)
    assert blob["config_hash"] == config_hash(run)
    assert blob["seed"] == 5
    loaded = load_checkpoint(path, vocab)
    assert _same_weights(model, loaded)
    np.testing.assert_array_equal(predict_proba(model, train_tokens[:4]),
                                  predict_proba(loaded, train_tokens[:4]))


def test_checkpoint_vocabulary_checks(tmp_path, toy_model_config, vocab):
    model = init_model(toy_model_config, vocab.size, seed=0)
    path = save_checkpoint(model, vocab, tmp_path / "model.pt")
    other = Vocabulary.from_ordered([*vocab.id_to_token[:-1], "f13:ZZZ"])
    with pytest.raises(VocabularyMismatch):
        load_checkpoint(path, other)
    with pytest.raises(VocabularyMismatch):
        save_checkpoint(init_model(toy_model_config, vocab.size + 1, 0), vocab,
                        tmp_path / "bad.pt")


def test_read_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "foreign.pt"
    torch.save({"weights": torch.zeros(2)}, path)
    with pytest.raises(ArtifactMismatch):
        read_checkpoint(path)
