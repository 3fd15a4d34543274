"""
Testes do TabTransformer: formas, contagem de parâmetros, gradientes e pesos
"""

import numpy as np
import pytest

from src.data_utils import fit_bins, fit_encoders, transform
from src.model_utils import (
    CONSTANT_TOKEN,
    VARIANTS,
    BuildError,
    ModelConfig,
    ModelError,
    TabTransformer,
    WeightsError,
    backbone_forward,
    count_parameters,
    dense_numeric,
    load_weights,
    save_weights,
    tokens_binned,
    tokens_vanilla,
)
from src.numerics_utils import ConfigurationError, finite_difference_gradient, relative_error


@pytest.fixture
def adult_encoded(adult_table, adult_descriptor):
    schema = fit_encoders(adult_table, adult_descriptor)
    dataset = transform(adult_table, schema)
    return dataset, fit_bins(dataset, 'quantile', 4)


@pytest.fixture
def cancer_encoded(cancer_table, cancer_descriptor):
    schema = fit_encoders(cancer_table, cancer_descriptor)
    dataset = transform(cancer_table, schema)
    return dataset, fit_bins(dataset, 'quantile', 4)


def make_model(tiny_config, encoded, variant, seed=0, **kwargs):
    dataset, bins = encoded
    return TabTransformer.create(tiny_config(variant), dataset.schema, seed, bins=bins, **kwargs)


class TestShapes:

    @pytest.mark.parametrize('variant,tokens,width', [
        ('vanilla', 3, 3 * 8 + 2),
        ('binned', 5, 5 * 8),
        ('vanilla-mlp', 3, 3 * 8 + 8),
        ('mlp-based', 5, 5 * 8),
    ])
    def test_tokens_and_feature_width(self, tiny_config, adult_encoded, variant, tokens, width):
        model = make_model(tiny_config, adult_encoded, variant)
        dataset, _ = adult_encoded
        out, _ = model.features_forward(model.inputs(dataset.take(range(6))))
        assert model.n_tokens == tokens
        assert model.feature_width == width
        assert out.tokens.shape == (6, tokens, 8)
        assert out.features.shape == (6, width)

    @pytest.mark.parametrize('variant', VARIANTS)
    def test_count_parameters_matches_store(self, tiny_config, adult_encoded, variant):
        dataset, bins = adult_encoded
        config = tiny_config(variant)
        model = make_model(tiny_config, adult_encoded, variant, with_reconstruction=True)
        expected = count_parameters(config, dataset.schema, bins, with_reconstruction=True)
        assert model.params.count() == expected

    def test_heads_output_shapes(self, tiny_config, adult_encoded):
        model = make_model(tiny_config, adult_encoded, 'vanilla', with_reconstruction=True)
        dataset, _ = adult_encoded
        inp = model.inputs(dataset.take(range(5)))
        assert model.forward(inp, 'predict')[0].shape == (5,)
        assert model.forward(inp, 'reconstruct')[0].shape == (5, dataset.schema.n_features)

    def test_token_columns_follow_schema_order(self, tiny_config, adult_encoded):
        model = make_model(tiny_config, adult_encoded, 'binned')
        assert model.token_columns == ('workclass', 'education', 'sex', 'age', 'hours-per-week')

    def test_operation_helpers(self, tiny_config, adult_encoded):
        dataset, _ = adult_encoded
        vanilla = make_model(tiny_config, adult_encoded, 'vanilla')
        binned = make_model(tiny_config, adult_encoded, 'binned')
        dense = make_model(tiny_config, adult_encoded, 'vanilla-mlp')
        batch = dataset.take(range(4))

        tokens = tokens_vanilla(vanilla, vanilla.inputs(batch))
        assert tokens.tokens.shape == (4, 3, 8)
        assert backbone_forward(vanilla, tokens).shape == (4, 3, 8)
        assert tokens_binned(binned, binned.inputs(batch)).tokens.shape == (4, 5, 8)
        assert dense_numeric(dense, dense.inputs(batch)).shape == (4, 8)
        with pytest.raises(ModelError):
            tokens_binned(vanilla, vanilla.inputs(batch))
        with pytest.raises(ModelError):
            dense_numeric(vanilla, vanilla.inputs(batch))

    def test_same_seed_same_weights(self, tiny_config, adult_encoded):
        a = make_model(tiny_config, adult_encoded, 'mlp-based', seed=5)
        b = make_model(tiny_config, adult_encoded, 'mlp-based', seed=5)
        assert a.params.names() == b.params.names()
        for name in a.params.names():
            np.testing.assert_array_equal(a.params[name], b.params[name])


class TestTokenOrder:

    def _model(self, tiny_model_settings, adult_encoded, column_embedding):
        config = ModelConfig.for_variant('mlp-based', column_embedding=column_embedding, **tiny_model_settings)
        dataset, _ = adult_encoded
        return TabTransformer.create(config, dataset.schema, 2), dataset

    def test_encoder_is_permutation_equivariant(self, tiny_model_settings, adult_encoded):
        model, dataset = self._model(tiny_model_settings, adult_encoded, column_embedding=False)
        tokens = model.tokens(model.inputs(dataset.take(range(4)))).tokens
        perm = np.array([3, 0, 4, 2, 1])
        permuted, _ = model.backbone_forward(tokens[:, perm])
        original, _ = model.backbone_forward(tokens)
        np.testing.assert_allclose(permuted, original[:, perm], atol=1e-12)

    def test_column_embedding_breaks_equivariance(self, tiny_model_settings, adult_encoded):
        model, dataset = self._model(tiny_model_settings, adult_encoded, column_embedding=True)
        column = model.params['embed.column'][None]
        raw = model.tokens(model.inputs(dataset.take(range(4)))).tokens - column
        perm = np.array([3, 0, 4, 2, 1])
        permuted, _ = model.backbone_forward(raw[:, perm] + column)
        original, _ = model.backbone_forward(raw + column)
        assert not np.allclose(permuted, original[:, perm], atol=1e-6)


class TestMaskIndicators:

    def test_only_reconstruction_head_reads_indicators(self, tiny_config, adult_encoded):
        dataset, _ = adult_encoded
        model = make_model(tiny_config, adult_encoded, 'vanilla', with_reconstruction=True)
        inp = model.inputs(dataset.take(range(5)))
        flagged = inp.take(range(5))
        flagged.num_mask = np.ones_like(flagged.num_mask)
        np.testing.assert_array_equal(model.forward(inp, 'predict')[0], model.forward(flagged, 'predict')[0])
        assert not np.allclose(model.forward(inp, 'reconstruct')[0], model.forward(flagged, 'reconstruct')[0])
        assert model.params['head.predict.layer0.weight'].shape[0] == model.feature_width
        n_num = len(dataset.schema.continuous)
        assert model.params['head.reconstruct.layer0.weight'].shape[0] == model.feature_width + n_num


class TestOnlyContinuous:

    def test_vanilla_uses_constant_token(self, tiny_config, cancer_encoded):
        model = make_model(tiny_config, cancer_encoded, 'vanilla')
        dataset, _ = cancer_encoded
        assert model.n_tokens == 1
        assert model.token_columns == (CONSTANT_TOKEN,)
        assert 'embed.constant' in model.params
        assert model.predict_dataset(dataset).shape == (len(dataset),)

    def test_mlp_based_has_one_token_per_column(self, tiny_config, cancer_encoded):
        model = make_model(tiny_config, cancer_encoded, 'mlp-based')
        assert model.n_tokens == 2
        assert 'embed.constant' not in model.params


class TestValidation:

    def test_heads_must_divide_d_model(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(d_model=10, n_heads=4)

    def test_numeric_hidden_depends_on_variant(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(variant='vanilla', numeric_hidden=(8,))
        with pytest.raises(ConfigurationError):
            ModelConfig(variant='mlp-based')
        assert ModelConfig.for_variant('mlp-based').numeric_hidden == (16,)

    def test_binned_requires_bins(self, tiny_config, adult_encoded):
        dataset, _ = adult_encoded
        with pytest.raises(BuildError):
            TabTransformer.create(tiny_config('binned'), dataset.schema, 0)

    def test_index_out_of_range(self, tiny_config, adult_encoded):
        model = make_model(tiny_config, adult_encoded, 'vanilla')
        dataset, _ = adult_encoded
        inp = model.inputs(dataset.take(range(3)))
        inp.cat = inp.cat.copy()
        inp.cat[0, 0] = dataset.schema.categorical[0].vocab_size + 2
        with pytest.raises(ModelError, match='workclass'):
            model.forward(inp)

    def test_mask_index_is_valid(self, tiny_config, adult_encoded):
        model = make_model(tiny_config, adult_encoded, 'vanilla')
        dataset, _ = adult_encoded
        inp = model.inputs(dataset.take(range(3)))
        inp.cat = np.array([[c.vocab_size + 1 for c in dataset.schema.categorical]] * 3)
        assert np.all(np.isfinite(model.forward(inp)[0]))

    def test_missing_reconstruction_head(self, tiny_config, adult_encoded):
        model = make_model(tiny_config, adult_encoded, 'vanilla')
        dataset, _ = adult_encoded
        with pytest.raises(ModelError):
            model.forward(model.inputs(dataset.take(range(2))), 'reconstruct')

    def test_dropout_inactive_in_eval(self, tiny_model_settings, adult_encoded):
        dataset, bins = adult_encoded
        config = ModelConfig.for_variant('vanilla', **{**tiny_model_settings, 'dropout': 0.5})
        model = TabTransformer.create(config, dataset.schema, 0, bins=bins)
        inp = model.inputs(dataset.take(range(4)))
        np.testing.assert_array_equal(model.forward(inp)[0], model.forward(inp)[0])


class TestGradients:

    @pytest.mark.parametrize('variant,head,names', [
        ('vanilla', 'predict', ['embed.cat.1', 'encoder.block0.attn.w_q', 'head.predict.layer0.weight']),
        ('binned', 'reconstruct', ['embed.bin.0', 'embed.column', 'encoder.block0.ff.w1']),
        ('vanilla-mlp', 'predict', ['numeric.mlp.layer0.weight', 'numeric.norm.gain', 'encoder.final_norm.bias']),
        ('mlp-based', 'reconstruct', ['numeric.token.layer0.weight', 'numeric.token.mask', 'encoder.block0.norm1.gain']),
    ])
    def test_backward_matches_finite_differences(self, tiny_config, adult_encoded, variant, head, names):
        dataset, _ = adult_encoded
        model = make_model(tiny_config, adult_encoded, variant, seed=1, with_reconstruction=True)
        inp = model.inputs(dataset.take(range(5)))
        inp.num_mask = np.zeros_like(inp.num_mask)
        inp.num_mask[0, 1] = 1.0
        inp.num = np.where(inp.num_mask > 0, 0.0, inp.num)
        upstream = np.random.default_rng(0).normal(size=model.forward(inp, head)[0].shape)

        def loss():
            return float(np.sum(model.forward(inp, head)[0] * upstream))

        model.params.zero_grad()
        out, cache = model.forward(inp, head)
        model.backward(upstream, cache)
        for name in names:
            numeric = finite_difference_gradient(loss, model.params[name])
            assert relative_error(model.params.grad(name), numeric) < 1e-4, name

    @pytest.mark.parametrize('seed', range(20))
    def test_end_to_end_gradients_across_seeds(self, tiny_config, adult_encoded, seed):
        dataset, _ = adult_encoded
        variant = ('vanilla', 'binned', 'vanilla-mlp', 'mlp-based')[seed % 4]
        model = make_model(tiny_config, adult_encoded, variant, seed=seed)
        inp = model.inputs(dataset.take(range(seed, seed + 3)))
        upstream = np.random.default_rng(seed).normal(size=3)

        def loss():
            return float(np.sum(model.forward(inp, 'predict')[0] * upstream))

        model.params.zero_grad()
        out, cache = model.forward(inp, 'predict')
        model.backward(upstream, cache)
        for name in ('encoder.block0.attn.b_o', 'embed.cat.2', 'head.predict.layer1.bias'):
            numeric = finite_difference_gradient(loss, model.params[name])
            assert relative_error(model.params.grad(name), numeric) < 1e-3, name


class TestWeights:

    def test_save_and_load(self, tiny_config, adult_encoded, tmp_path):
        source = make_model(tiny_config, adult_encoded, 'binned', seed=1)
        target = make_model(tiny_config, adult_encoded, 'binned', seed=2)
        save_weights(source, tmp_path / 'w.npz')
        load_weights(target, tmp_path / 'w.npz')
        for name in source.params.names():
            np.testing.assert_array_equal(source.params[name], target.params[name])

    def test_files_are_byte_identical(self, tiny_config, adult_encoded, tmp_path):
        model = make_model(tiny_config, adult_encoded, 'vanilla', seed=1)
        first = save_weights(model, tmp_path / 'a.npz').read_bytes()
        second = save_weights(model, tmp_path / 'b.npz').read_bytes()
        assert first == second

    def test_backbone_only_keeps_heads(self, tiny_config, adult_encoded, tmp_path):
        source = make_model(tiny_config, adult_encoded, 'vanilla', seed=1, with_reconstruction=True)
        target = make_model(tiny_config, adult_encoded, 'vanilla', seed=2)
        head_before = target.params['head.predict.layer0.weight'].copy()
        save_weights(source, tmp_path / 'backbone.npz', backbone_only=True)
        load_weights(target, tmp_path / 'backbone.npz', backbone_only=True)
        np.testing.assert_array_equal(target.params['encoder.block0.attn.w_v'],
                                      source.params['encoder.block0.attn.w_v'])
        np.testing.assert_array_equal(target.params['head.predict.layer0.weight'], head_before)

    def test_variant_mismatch(self, tiny_config, adult_encoded, tmp_path):
        save_weights(make_model(tiny_config, adult_encoded, 'vanilla'), tmp_path / 'w.npz')
        with pytest.raises(WeightsError, match='Variante'):
            load_weights(make_model(tiny_config, adult_encoded, 'vanilla-mlp'), tmp_path / 'w.npz')

    def test_schema_mismatch(self, tiny_config, adult_encoded, cancer_encoded, tmp_path):
        save_weights(make_model(tiny_config, adult_encoded, 'mlp-based'), tmp_path / 'w.npz')
        with pytest.raises(WeightsError, match='schema'):
            load_weights(make_model(tiny_config, cancer_encoded, 'mlp-based'), tmp_path / 'w.npz')

    def test_unreadable_file(self, tiny_config, adult_encoded, tmp_path):
        path = tmp_path / 'broken.npz'
        path.write_text('não é um zip')
        with pytest.raises(WeightsError):
            load_weights(make_model(tiny_config, adult_encoded, 'vanilla'), path)
