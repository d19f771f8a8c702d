"""
Tests for visual adapters, compression and the composed PIPModel.
"""

import numpy as np
import pytest

from pipmm.core.tensor import Tensor
from pipmm.errors import ConfigError, ContractError, ShapeError
from pipmm.models.adapter import AdapterConfig, VisualTokens, build_adapter, compress, \
    project_linear, resample, select_topk
from pipmm.models.bridge import BridgeConfig
from pipmm.models.pipeline import PIPModel, build_llm_input, encode_prompt_aware
from pipmm.models.text_model import EOS
from pipmm.training.harness import TrainingSample


def make_sample(rng, prompt='what color?', answer='red'):
    return TrainingSample(rng.random((32, 32, 3)), prompt, answer)


class TestAdapters:
    """Test linear projector and query resampler."""

    def test_linear_projector_keeps_provenance(self, rng):
        adapter = build_adapter(AdapterConfig(d_vis=8, d_llm=6), rng)
        tokens = adapter(Tensor(rng.normal(size=(4, 8))))
        assert tokens.tokens.shape == (4, 6)
        assert tokens.provenance == (0, 1, 2, 3)

    def test_resampler_shapes(self, rng):
        config = AdapterConfig(kind='query_resampler', d_vis=8, d_llm=6, num_queries=3, heads=2)
        tokens = build_adapter(config, rng)(Tensor(rng.normal(size=(4, 8))))
        assert len(tokens) == 3
        assert tokens.attention.shape == (3, 4)
        np.testing.assert_allclose(tokens.attention.sum(axis=-1), np.ones(3))

    def test_resampler_query_limits(self, rng):
        config = AdapterConfig(kind='query_resampler', d_vis=8, d_llm=6, num_queries=2, heads=2)
        adapter = build_adapter(config, rng)
        z = Tensor(rng.normal(size=(4, 8)))
        with pytest.raises(ConfigError):
            adapter(z, Tensor(np.zeros((0, 8))))
        with pytest.raises(ContractError):
            adapter(z, Tensor(np.zeros((3, 8))))

    def test_functional_helpers(self, rng):
        z = Tensor(rng.normal(size=(4, 8)))
        projector = build_adapter(AdapterConfig(d_vis=8, d_llm=6), rng)
        np.testing.assert_array_equal(project_linear(projector, z).tokens.data,
                                      projector(z).tokens.data)
        config = AdapterConfig(kind='query_resampler', d_vis=8, d_llm=6, num_queries=3, heads=2)
        resampler = build_adapter(config, rng)
        assert len(resample(resampler, z)) == 3
        assert len(resample(resampler, z, resampler.queries[:1])) == 1

    def test_resampler_single_patch_broadcasts_its_value(self, rng):
        """With one key every query reads that patch's value projection."""
        config = AdapterConfig(kind='query_resampler', d_vis=8, d_llm=6, num_queries=3, heads=2)
        adapter = build_adapter(config, rng)
        z = Tensor(rng.normal(size=(1, 8)))
        tokens = adapter(z)
        np.testing.assert_array_equal(tokens.attention, np.ones((3, 1)))
        layer = adapter.layers[0]
        expected = adapter.proj(layer.out(z @ layer.w_v)).data[0]
        for row in tokens.tokens.data:
            np.testing.assert_allclose(row, expected, rtol=0, atol=1e-12)

    def test_resampler_duplicated_patches(self, rng):
        """Identical patches draw uniform attention and identical outputs for every query."""
        config = AdapterConfig(kind='query_resampler', d_vis=8, d_llm=6, num_queries=3, heads=2)
        adapter = build_adapter(config, rng)
        patch = rng.normal(size=(1, 8))
        single = adapter(Tensor(patch)).tokens.data
        repeated = adapter(Tensor(np.repeat(patch, 4, axis=0)))
        np.testing.assert_array_equal(repeated.attention, np.full((3, 4), 0.25))
        for row in repeated.tokens.data[1:]:
            np.testing.assert_array_equal(row, repeated.tokens.data[0])
        np.testing.assert_allclose(repeated.tokens.data, single, rtol=0, atol=1e-12)

    def test_feature_width_checked(self, rng):
        adapter = build_adapter(AdapterConfig(d_vis=8, d_llm=6), rng)
        with pytest.raises(ShapeError):
            adapter(Tensor(np.zeros((4, 7))))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            AdapterConfig(kind='pooling').validate()


class TestCompression:
    """Test attention top-k and query halving."""

    def test_select_topk_ties_prefer_lower_index(self):
        np.testing.assert_array_equal(select_topk(np.array([0.2, 0.5, 0.5, 0.1]), 2), [1, 2])
        np.testing.assert_array_equal(select_topk(np.array([0.5, 0.1, 0.5, 0.5]), 2), [0, 2])

    def test_topk_keeps_highest_attention(self, rng):
        adapter = build_adapter(AdapterConfig(d_vis=8, d_llm=6), rng)
        z = Tensor(rng.normal(size=(4, 8)))
        scores = np.array([0.1, 0.4, 0.3, 0.2])
        kept = compress(z, 'attn_topk', 2, scores, adapter)
        assert kept.provenance == (1, 2)
        full = adapter(z)
        np.testing.assert_allclose(kept.tokens.data, full.tokens.data[[1, 2]])

    def test_topk_on_tokens_matches_features(self, rng):
        adapter = build_adapter(AdapterConfig(d_vis=8, d_llm=6), rng)
        z = Tensor(rng.normal(size=(4, 8)))
        scores = np.array([0.4, 0.1, 0.3, 0.2])
        a = compress(adapter(z), 'attn_topk', 3, scores)
        b = compress(z, 'attn_topk', 3, scores, adapter)
        assert a.provenance == b.provenance == (0, 2, 3)
        np.testing.assert_allclose(a.tokens.data, b.tokens.data)

    def test_full_keep_is_identity(self, rng):
        adapter = build_adapter(AdapterConfig(d_vis=8, d_llm=6), rng)
        tokens = adapter(Tensor(rng.normal(size=(4, 8))))
        kept = compress(tokens, 'attn_topk', 4, np.array([0.1, 0.4, 0.3, 0.2]))
        np.testing.assert_allclose(kept.tokens.data, tokens.tokens.data)

    def test_resampler_tokens_ranked_by_attention(self, rng):
        tokens = VisualTokens(Tensor(np.eye(3)), (0, 1, 2), 'query_resampler',
                              attention=np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
        kept = compress(tokens, 'attn_topk', 1, np.array([0.1, 0.9]))
        assert kept.provenance == (1,)
        assert kept.attention.shape == (1, 2)

    def test_query_halving_uses_leading_queries(self, rng):
        config = AdapterConfig(kind='query_resampler', d_vis=8, d_llm=6, num_queries=4, heads=2)
        adapter = build_adapter(config, rng)
        z = Tensor(rng.normal(size=(5, 8)))
        kept = compress(z, 'query_halving', 2, adapter=adapter)
        assert len(kept) == 2
        full = adapter(z)
        # queries attend independently, so the leading rows agree
        np.testing.assert_allclose(kept.tokens.data, full.tokens.data[:2])

    def test_query_halving_needs_resampler(self, rng):
        adapter = build_adapter(AdapterConfig(d_vis=8, d_llm=6), rng)
        with pytest.raises(ContractError):
            compress(Tensor(np.zeros((4, 8))), 'query_halving', 2, adapter=adapter)

    @pytest.mark.parametrize('keep', [0, 5])
    def test_keep_range(self, rng, keep):
        adapter = build_adapter(AdapterConfig(d_vis=8, d_llm=6), rng)
        with pytest.raises(ContractError):
            compress(Tensor(np.zeros((4, 8))), 'attn_topk', keep, np.ones(4), adapter)

    def test_unknown_strategy(self):
        with pytest.raises(ContractError):
            compress(Tensor(np.zeros((4, 8))), 'random', 2, np.ones(4))


class TestLLMInput:
    """Test Q = [V; embed(prompt)]."""

    def test_concatenates_visual_first(self):
        visual = Tensor(np.ones((2, 3)))
        prompt = Tensor(np.zeros((4, 3)))
        q = build_llm_input(visual, prompt)
        assert q.shape == (6, 3)
        np.testing.assert_array_equal(q.data[:2], 1.0)

    def test_missing_visual_tokens(self):
        prompt = Tensor(np.zeros((4, 3)))
        assert build_llm_input(None, prompt).shape == (4, 3)
        assert build_llm_input(Tensor(np.zeros((0, 3))), prompt).shape == (4, 3)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            build_llm_input(Tensor(np.ones((2, 5))), Tensor(np.zeros((4, 3))))


class TestPIPModel:
    """Test the composed prompt-aware model."""

    def test_warm_start_matches_image_class(self, pip_model, rng):
        """A zero prompt summary reproduces I_class in the class slot."""
        bridge = pip_model.bridge
        out = bridge(Tensor(np.zeros(bridge.config.d_in)))
        np.testing.assert_allclose(out.data, pip_model.vit.i_class.data)

    @pytest.mark.parametrize('bridge_kind', ['static', 'mlp'])
    def test_class_slot_equal_to_image_class_is_exact(self, vocab, rng, make_pip_config,
                                                      bridge_kind):
        """T_class == I_class reproduces the plain ViT encoding bit for bit."""
        model = PIPModel(make_pip_config(vocab, bridge_kind=bridge_kind), vocab, seed=0)
        i_class = model.vit.i_class.data
        if bridge_kind == 'static':
            model.bridge.vector.data[...] = i_class
        else:
            last = model.bridge.layers[-1]
            last.weight.data[...] = 0.0
            last.bias.data[...] = i_class
        image = rng.random((32, 32, 3))
        aware = encode_prompt_aware(image, 'what color is the small circle?', model)
        plain = model.vit.forward(image)
        np.testing.assert_array_equal(aware.z.data, plain.z.data)
        assert len(aware.attn) == len(plain.attn) == model.config.vit.layers
        for a, b in zip(aware.attn, plain.attn):
            np.testing.assert_array_equal(a, b)

    def test_prompt_changes_encoding(self, pip_model, rng):
        image = rng.random((32, 32, 3))
        a = pip_model.encode(image, 'what color is the big square?')
        b = pip_model.encode(image, 'what color is the big circle?')
        assert not np.allclose(a.z.data, b.z.data)

    def test_static_bridge_ignores_prompt(self, vocab, rng, make_pip_config):
        model = PIPModel(make_pip_config(vocab, bridge_kind='static'), vocab, seed=0)
        image = rng.random((32, 32, 3))
        a = model.encode(image, 'what color is the big square?')
        b = model.encode(image, 'what color is the big circle?')
        np.testing.assert_allclose(a.z.data, b.z.data)
        assert not model.prompt_aware

    def test_image_class_path(self, pip_model, rng):
        image = rng.random((32, 32, 3))
        pip_model.use_image_class = True
        a = pip_model.encode(image, 'abc')
        np.testing.assert_allclose(a.z.data, pip_model.vit.forward(image).z.data)
        with pytest.raises(ContractError):
            encode_prompt_aware(image, 'abc', pip_model)

    def test_teacher_forced_layout(self, pip_model, rng, vocab):
        sample = make_sample(rng)
        forced = pip_model.teacher_forced(sample)
        q_len = 16 + len(vocab.tokenize(sample.prompt))
        assert forced.input_length == q_len
        assert forced.answer_positions == list(range(q_len, q_len + 4))
        assert forced.targets == vocab.encode('red') + [EOS]
        assert forced.logits.shape == (q_len + 4, vocab.size)

    def test_teacher_forced_without_image(self, pip_model, rng, vocab):
        forced = pip_model.teacher_forced(make_sample(rng), with_image=False)
        assert forced.input_length == len(vocab.tokenize('what color?'))

    def test_compressed_input_length(self, pip_model, rng):
        sample = make_sample(rng)
        assert pip_model.teacher_forced(sample, keep=8).input_length == \
            pip_model.llm_input_length(sample, 8)

    def test_answer_is_deterministic(self, pip_model, rng):
        sample = make_sample(rng)
        first = pip_model.answer(sample)
        assert first == pip_model.answer(sample)
        assert len(first) <= pip_model.config.max_answer_len

    def test_generate_ids_budget(self, pip_model, rng):
        ids = pip_model.generate_ids(make_sample(rng), max_new=3, stop_at_eos=False)
        assert len(ids) == 3

    def test_resampler_model(self, resampler_model, rng):
        sample = make_sample(rng)
        assert resampler_model.config.full_visual_tokens == 4
        assert resampler_model.teacher_forced(sample).input_length == \
            4 + len(resampler_model.vocab.tokenize(sample.prompt))
        tokens = resampler_model.visual_tokens(resampler_model.encoder_output(sample), keep=2)
        assert len(tokens) == 2

    def test_query_halving_model(self, vocab, rng, make_pip_config):
        model = PIPModel(make_pip_config(vocab, 'query_resampler', compression='query_halving'),
                         vocab, seed=0)
        out = model.encoder_output(make_sample(rng))
        tokens = model.visual_tokens(out, keep=2)
        assert tokens.provenance == (0, 1)

    def test_config_dimension_check(self, vocab, make_pip_config):
        config = make_pip_config(vocab)
        bad = type(config)(lm=config.lm, vit=config.vit,
                           bridge=BridgeConfig(depth=2, d_in=8, d_out=16),
                           adapter=config.adapter)
        with pytest.raises(ShapeError):
            bad.validate()

    def test_config_dict_round_trip(self, pip_model):
        config = pip_model.config
        assert type(config).from_dict(config.to_dict()) == config

    def test_same_seed_same_model(self, vocab, make_pip_config):
        a = PIPModel(make_pip_config(vocab), vocab, seed=4)
        b = PIPModel(make_pip_config(vocab), vocab, seed=4)
        for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data, err_msg=name)
