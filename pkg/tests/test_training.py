"""
Tests for staged training and checkpoint files.
"""

import os
import struct

import numpy as np
import pytest

from pipmm.core.optim import Optimizer, OptimizerState
from pipmm.core.tensor import Tensor
from pipmm.errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from pipmm.models.pipeline import PIPModel
from pipmm.models.text_model import BOS, EOS, LMConfig, TextModel
from pipmm.training.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from pipmm.training.harness import METRICS_COLUMNS, FreezeSpec, TrainConfig, Trainer, \
    TrainingSample, answer_loss, freeze_for_stage, train, trainable_fraction, write_metrics


def tiny_samples(rng, n=4):
    answers = ['red', 'blue', 'green', 'cyan']
    return [TrainingSample(rng.random((32, 32, 3)), 'what color?', answers[i % 4])
            for i in range(n)]


class TestAnswerLoss:
    """Test the answer-only negative log-likelihood."""

    def test_matches_manual_nll(self, rng):
        logits = Tensor(rng.normal(size=(5, 4)))
        targets, positions = [1, 3], [2, 4]
        data = logits.data
        expected = 0.0
        for t, p in zip(targets, positions):
            row = data[p] - data[p].max()
            expected -= row[t] - np.log(np.exp(row).sum())
        assert answer_loss(logits, targets, positions).item() == pytest.approx(expected)

    def test_other_rows_get_zero_gradient(self, rng):
        logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        answer_loss(logits, [1, 3], [2, 4]).backward()
        np.testing.assert_array_equal(logits.grad[[0, 1, 3]], 0.0)
        assert np.abs(logits.grad[2]).sum() > 0

    def test_uniform_logits_cost_log_vocab_per_token(self):
        logits = Tensor(np.zeros((7, 256)))
        loss = answer_loss(logits, [5, 17, 200], [4, 5, 6]).item()
        assert abs(loss - 3 * np.log(256)) <= 1e-9

    def test_confident_correct_logits_cost_nothing(self):
        logits = np.zeros((3, 4))
        logits[2, 1] = 20.0
        assert answer_loss(Tensor(logits), [1], [2]).item() < 1e-8

    def test_non_answer_rows_leave_loss_unchanged(self, rng):
        data = rng.normal(size=(6, 5))
        targets, positions = [0, 4], [3, 5]
        base = answer_loss(Tensor(data), targets, positions).item()
        perturbed = data.copy()
        perturbed[[0, 1, 2, 4]] += rng.normal(scale=10.0, size=(4, 5))
        assert answer_loss(Tensor(perturbed), targets, positions).item() == base

    def test_empty_and_mismatched(self, rng):
        logits = Tensor(rng.normal(size=(5, 4)))
        with pytest.raises(ContractError):
            answer_loss(logits, [], [])
        with pytest.raises(ContractError):
            answer_loss(logits, [1], [2, 3])


class TestFreezing:
    """Test stage parameter groups."""

    def test_pretrain_trains_bridge_only(self, pip_model):
        freeze_for_stage(pip_model, FreezeSpec.for_stage('pretrain'))
        flags = {name: module.parameters()[0].requires_grad
                 for name, module in pip_model.named_children()}
        assert flags == {'llm': False, 'vit': False, 'bridge': True, 'visual_adapter': False}
        assert not pip_model.use_image_class
        assert 0 < trainable_fraction(pip_model) < 0.5

    def test_finetune_adds_adapter(self, pip_model):
        freeze_for_stage(pip_model, FreezeSpec.for_stage('finetune'))
        assert all(p.requires_grad for p in pip_model.visual_adapter.parameters())
        assert not any(p.requires_grad for p in pip_model.llm.parameters())

    def test_backbone_uses_image_class(self, pip_model):
        freeze_for_stage(pip_model, FreezeSpec.for_stage('backbone'))
        assert pip_model.use_image_class
        assert not any(p.requires_grad for p in pip_model.bridge.parameters())

    def test_unknown_stage(self):
        with pytest.raises(ConfigError):
            FreezeSpec.for_stage('warmup')

    def test_unknown_group(self, pip_model):
        with pytest.raises(ConfigError):
            freeze_for_stage(pip_model, FreezeSpec('pretrain', frozenset({'decoder'})))


class TestTrainer:
    """Test the training loop."""

    def test_frozen_groups_unchanged(self, pip_model, rng):
        before = {n: p.data.copy() for n, p in pip_model.named_parameters()}
        Trainer(pip_model, TrainConfig(stage='pretrain', epochs=1, batch_size=2)).train(
            tiny_samples(rng))
        for name, p in pip_model.named_parameters():
            if name.startswith('bridge.'):
                continue
            np.testing.assert_array_equal(p.data, before[name], err_msg=name)
        assert not np.array_equal(pip_model.bridge.layers[0].weight.data,
                                  before['bridge.layers.0.weight'])

    def test_finetune_step_touches_bridge_and_adapter_only(self, pip_model, rng):
        before = {n: p.data.copy() for n, p in pip_model.named_parameters()}
        Trainer(pip_model, TrainConfig(stage='finetune', epochs=1)).train_step(
            tiny_samples(rng, 2))
        changed = set()
        for name, p in pip_model.named_parameters():
            if name.startswith(('llm.', 'vit.')):
                np.testing.assert_array_equal(p.data, before[name], err_msg=name)
            elif not np.array_equal(p.data, before[name]):
                changed.add(name.split('.')[0])
        assert changed == {'bridge', 'visual_adapter'}
        assert not np.array_equal(pip_model.visual_adapter.proj.weight.data,
                                  before['visual_adapter.proj.weight'])

    def test_exact_match_spreads_over_split(self, pip_model, rng, monkeypatch):
        samples = tiny_samples(rng, 8)
        seen = []
        monkeypatch.setattr(pip_model, 'answer', lambda s: seen.append(s) or s.answer)
        trainer = Trainer(pip_model, TrainConfig(stage='finetune', epochs=1, eval_limit=4))
        assert trainer.exact_match(samples) == 1.0
        assert [id(s) for s in seen] == [id(s) for s in samples[::2]]

    def test_history_rows(self, pip_model, rng, vocab):
        rows = train(pip_model, tiny_samples(rng), 'finetune', epochs=2, seed=0, batch_size=2)
        assert [r.step for r in rows] == [2, 4]
        assert all(r.stage == 'finetune' for r in rows)
        assert rows[0].seq_len_mean == 16 + len(vocab.tokenize('what color?'))
        assert 0.0 <= rows[-1].exact_match <= 1.0

    def test_loss_decreases_on_one_sample(self, pip_model, rng):
        sample = tiny_samples(rng, 1)
        trainer = Trainer(pip_model, TrainConfig(stage='backbone', epochs=1, lr=1e-2,
                                                 batch_size=1))
        first, _ = trainer.train_step(sample)
        for _ in range(10):
            last, _ = trainer.train_step(sample)
        assert last < first

    def test_same_seed_same_weights(self, vocab, make_pip_config, rng):
        samples = tiny_samples(rng)
        results = []
        for _ in range(2):
            model = PIPModel(make_pip_config(vocab), vocab, seed=1)
            train(model, samples, 'pretrain', epochs=1, seed=5, batch_size=2)
            results.append(model.bridge.layers[0].weight.data.copy())
        np.testing.assert_array_equal(results[0], results[1])

    def test_divergence_reports_step(self, pip_model, rng):
        pip_model.llm.head.bias.data[:] = np.nan
        trainer = Trainer(pip_model, TrainConfig(stage='pretrain', epochs=1))
        with pytest.raises(NumericError) as info:
            trainer.train(tiny_samples(rng, 2))
        assert info.value.details['step'] == 1
        assert info.value.details['stage'] == 'pretrain'

    def test_empty_dataset(self, pip_model):
        with pytest.raises(ContractError):
            Trainer(pip_model, TrainConfig(epochs=1)).train([])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1.0).validate()
        assert TrainConfig(stage='backbone').learning_rate == 2e-3

    def test_empty_answer_rejected(self, rng):
        with pytest.raises(ContractError):
            TrainingSample(rng.random((32, 32, 3)), 'what?', '')

    def test_write_metrics(self, temp_dir, pip_model, rng):
        rows = train(pip_model, tiny_samples(rng, 2), 'pretrain', epochs=1, seed=0)
        path = os.path.join(temp_dir, 'metrics.csv')
        write_metrics(path, rows)
        write_metrics(path, rows, append=True)
        with open(path, encoding='utf-8') as f:
            lines = f.read().splitlines()
        assert lines[0] == ','.join(METRICS_COLUMNS)
        assert len(lines) == 3


@pytest.mark.slow
class TestCopyTask:
    """Teacher-forced decoder training on answers that repeat the prompt."""

    PROMPTS = ('ab', 'ba', 'abc', 'cab')

    @pytest.fixture
    def model(self, vocab):
        config = LMConfig(vocab_size=vocab.size, d_llm=32, n_layers=2, n_heads=2, max_seq_len=16)
        return TextModel(config, np.random.default_rng(0))

    @staticmethod
    def copy_loss(model, vocab, text):
        prompt = vocab.tokenize(text)
        answer = vocab.encode(text)
        logits, _ = model.lm_forward(prompt + [BOS] + answer)
        positions = list(range(len(prompt), len(prompt) + len(answer) + 1))
        return answer_loss(logits, answer + [EOS], positions)

    def fit(self, model, vocab, epochs):
        optimizer = Optimizer(model.named_parameters(), lr=5e-3)
        means = []
        for _ in range(epochs):
            losses = []
            for text in self.PROMPTS:
                optimizer.zero_grad()
                loss = self.copy_loss(model, vocab, text)
                losses.append(loss.item())
                loss.backward()
                optimizer.step()
            means.append(float(np.mean(losses)))
        return means

    def test_loss_falls_within_five_epochs(self, model, vocab):
        means = self.fit(model, vocab, 5)
        assert means[4] < means[0]

    def test_prompts_are_reproduced(self, model, vocab):
        self.fit(model, vocab, 200)
        for text in self.PROMPTS:
            prefix = model.embed(vocab.tokenize(text) + [BOS])
            ids = model.generate(prefix, len(text) + 2)
            assert ids == vocab.encode(text) + [EOS], text


class TestCheckpoint:
    """Test checkpoint save/load."""

    def test_round_trip(self, temp_dir, pip_model, vocab, make_pip_config, rng):
        trainer = Trainer(pip_model, TrainConfig(stage='pretrain', epochs=1, batch_size=2))
        trainer.train(tiny_samples(rng, 2))
        path = os.path.join(temp_dir, 'model.ckpt')
        generator = np.random.default_rng(9)
        save_checkpoint(pip_model, path, {'seed': 0}, trainer.optimizer.state, generator,
                        step=trainer.step)

        fresh = PIPModel(make_pip_config(vocab), vocab, seed=3)
        checkpoint = load_checkpoint(path, fresh)
        for (name, p), (_, q) in zip(pip_model.named_parameters(), fresh.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data, err_msg=name)
            assert p.requires_grad == q.requires_grad
        assert checkpoint.config == {'seed': 0}
        assert checkpoint.step == trainer.step
        assert checkpoint.optimizer.step == trainer.optimizer.state.step
        assert set(checkpoint.optimizer.m) == set(trainer.optimizer.state.m)
        assert checkpoint.rng().integers(1000) == np.random.default_rng(9).integers(1000)

    def test_no_temp_file_left(self, temp_dir, pip_model):
        path = os.path.join(temp_dir, 'model.ckpt')
        save_checkpoint(pip_model, path)
        assert os.listdir(temp_dir) == ['model.ckpt']

    def test_bad_magic(self, temp_dir):
        path = os.path.join(temp_dir, 'bad.ckpt')
        with open(path, 'wb') as f:
            f.write(b'NOTPIP' + struct.pack('<H', 1))
        with pytest.raises(FormatError) as info:
            load_checkpoint(path)
        assert info.value.details['offset'] == 0

    def test_bad_version(self, temp_dir):
        path = os.path.join(temp_dir, 'bad.ckpt')
        with open(path, 'wb') as f:
            f.write(MAGIC + struct.pack('<H', 9))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_file_leaves_model_untouched(self, temp_dir, pip_model, vocab,
                                                    make_pip_config):
        path = os.path.join(temp_dir, 'model.ckpt')
        save_checkpoint(pip_model, path)
        with open(path, 'rb') as f:
            data = f.read()
        with open(path, 'wb') as f:
            f.write(data[:len(data) // 2])
        fresh = PIPModel(make_pip_config(vocab), vocab, seed=3)
        before = fresh.state_dict()
        with pytest.raises(FormatError):
            load_checkpoint(path, fresh)
        for name, p in fresh.named_parameters():
            np.testing.assert_array_equal(p.data, before[name])

    def test_trailing_bytes(self, temp_dir, pip_model):
        path = os.path.join(temp_dir, 'model.ckpt')
        save_checkpoint(pip_model, path)
        with open(path, 'ab') as f:
            f.write(b'\0')
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_shape_mismatch(self, temp_dir, pip_model, vocab, make_pip_config):
        path = os.path.join(temp_dir, 'model.ckpt')
        save_checkpoint(pip_model, path)
        other = PIPModel(make_pip_config(vocab, max_seq_len=80), vocab, seed=0)
        with pytest.raises(ShapeError):
            load_checkpoint(path, other)

    def test_unknown_optimizer_field(self, temp_dir, pip_model):
        path = os.path.join(temp_dir, 'model.ckpt')
        save_checkpoint(pip_model, path, optimizer=OptimizerState(lr=1e-3))
        with open(path, 'rb') as f:
            data = f.read()
        start = data.index(b'{"beta1"') - 4
        with open(path, 'wb') as f:
            f.write(data.replace(b'"beta1"', b'"gamma"', 1))
        with pytest.raises(FormatError) as info:
            load_checkpoint(path)
        assert info.value.details['offset'] == start

    def test_optimizer_fields_must_be_an_object(self, temp_dir, pip_model):
        path = os.path.join(temp_dir, 'model.ckpt')
        save_checkpoint(pip_model, path, optimizer=OptimizerState(lr=1e-3))
        with open(path, 'rb') as f:
            data = f.read()
        start = data.index(b'{"beta1"')
        end = data.index(b'}', start) + 1
        blob = b'[' + b' ' * (end - start - 2) + b']'
        with open(path, 'wb') as f:
            f.write(data[:start] + blob + data[end:])
        with pytest.raises(FormatError) as info:
            load_checkpoint(path)
        assert info.value.details['offset'] == start - 4
