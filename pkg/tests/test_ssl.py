"""
Testes do pré-treino por mascaramento
"""

import logging

import numpy as np
import pandas as pd
import pytest

from src.data_utils import apply_bins, fit_bins, fit_encoders, transform
from src.model_utils import TabTransformer, WeightsError
from src.numerics_utils import ConfigurationError
from src.ssl_utils import (
    MASKED_CATEGORICAL,
    MaskedBatch,
    PretrainConfig,
    apply_mask,
    draw_mask,
    load_backbone,
    pretrain,
    reconstruction_loss,
    reconstruction_loss_and_grad,
    save_backbone,
    save_history,
)


@pytest.fixture
def encoded(adult_table, adult_descriptor):
    schema = fit_encoders(adult_table, adult_descriptor)
    dataset = transform(adult_table, schema)
    return dataset, fit_bins(dataset, 'quantile', 4)


class TestMasking:

    def test_draw_mask_rate(self):
        mask = draw_mask(2000, 10, 0.2, np.random.default_rng(0), min_one_mask=False)
        assert mask.shape == (2000, 10)
        assert abs(mask.mean() - 0.2) < 0.02

    @pytest.mark.parametrize('seed', range(50))
    def test_mask_rate_band(self, seed):
        mask = draw_mask(1000, 10, 0.2, np.random.default_rng(seed))
        assert 0.18 <= mask.mean() <= 0.22
        assert mask.any(axis=1).all()

    def test_min_one_mask(self):
        mask = draw_mask(500, 3, 0.01, np.random.default_rng(1), min_one_mask=True)
        assert mask.any(axis=1).all()

    def test_without_min_one_mask_rows_can_be_clean(self):
        mask = draw_mask(500, 3, 0.01, np.random.default_rng(1), min_one_mask=False)
        assert not mask.any(axis=1).all()

    def test_apply_mask_semantics(self, encoded):
        dataset, bins = encoded
        schema = dataset.schema
        batch = apply_bins(dataset.take(range(50)), bins)
        masked = apply_mask(batch, PretrainConfig(mask_rate=0.5, seed=0), np.random.default_rng(3), bins)

        cat_mask = masked.mask[:, schema.cat_positions]
        num_mask = masked.mask[:, schema.num_positions]
        cat_cells = masked.corrupted[:, schema.cat_positions]
        num_cells = masked.corrupted[:, schema.num_positions]
        assert np.all(cat_cells[cat_mask] == MASKED_CATEGORICAL)
        assert np.all(num_cells[num_mask] == 0.0)
        np.testing.assert_array_equal(masked.corrupted[~masked.mask], batch.cells[~masked.mask])
        np.testing.assert_array_equal(masked.targets, batch.cells)

        mask_codes = np.array(schema.vocab_sizes) + 1
        expected_cat = np.where(cat_mask, mask_codes[None, :], batch.codes)
        np.testing.assert_array_equal(masked.inputs.cat, expected_cat)
        np.testing.assert_array_equal(masked.inputs.num_mask, num_mask.astype(float))
        mask_bins = np.array([bins.bin_count(c.name) for c in schema.continuous])
        np.testing.assert_array_equal(masked.inputs.bins, np.where(num_mask, mask_bins[None, :], batch.bin_codes))

    def test_apply_mask_does_not_touch_batch(self, encoded):
        dataset, _ = encoded
        batch = dataset.take(range(20))
        before = batch.cells.copy()
        apply_mask(batch, PretrainConfig(mask_rate=0.5), np.random.default_rng(0))
        np.testing.assert_array_equal(batch.cells, before)

    def test_invalid_mask_rate(self):
        with pytest.raises(ConfigurationError):
            PretrainConfig(mask_rate=1.0)
        with pytest.raises(ConfigurationError):
            PretrainConfig(mask_rate=0.0)


class TestReconstructionLoss:

    def _batch(self, mask):
        mask = np.asarray(mask, dtype=bool)
        targets = np.array([[0.0, 1.0], [0.5, 0.5]])
        return MaskedBatch(corrupted=targets.copy(), mask=mask, targets=targets, inputs=None)

    def test_loss_only_on_masked_cells(self):
        masked = self._batch([[True, False], [False, True]])
        predictions = np.array([[1.0, 100.0], [-100.0, 0.0]])
        loss, grad = reconstruction_loss_and_grad(predictions, masked)
        assert loss == pytest.approx((1.0 + 0.25) / 2)
        np.testing.assert_allclose(grad, [[1.0, 0.0], [0.0, -0.5]])
        assert reconstruction_loss(predictions, masked) == loss

    @pytest.mark.parametrize('seed', range(10))
    def test_loss_matches_cell_loop(self, seed):
        rng = np.random.default_rng(seed)
        targets, predictions = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
        mask = rng.random((8, 5)) < 0.3
        mask[0, 0] = True
        masked = MaskedBatch(corrupted=targets.copy(), mask=mask, targets=targets, inputs=None)
        total, count = 0.0, 0
        for i in range(8):
            for j in range(5):
                if mask[i, j]:
                    total += (predictions[i, j] - targets[i, j]) ** 2
                    count += 1
        loss, grad = reconstruction_loss_and_grad(predictions, masked)
        assert loss == pytest.approx(total / count, rel=1e-12)
        np.testing.assert_array_equal(grad[~mask], 0.0)
        np.testing.assert_allclose(grad[mask], 2.0 * (predictions - targets)[mask] / count)

    def test_zero_mask_warns(self, caplog):
        masked = self._batch([[False, False], [False, False]])
        with caplog.at_level(logging.WARNING, logger='src.ssl_utils'):
            loss, grad = reconstruction_loss_and_grad(np.ones((2, 2)), masked)
        assert loss == 0.0
        assert not grad.any()
        assert 'sem células mascaradas' in caplog.text

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            reconstruction_loss(np.ones((2, 3)), self._batch([[True, True], [True, True]]))


class TestPretrain:

    @pytest.mark.parametrize('variant', ['vanilla', 'binned', 'vanilla-mlp', 'mlp-based'])
    def test_loss_decreases(self, tiny_config, encoded, variant):
        dataset, bins = encoded
        model = TabTransformer.create(tiny_config(variant), dataset.schema, 0, bins=bins, with_reconstruction=True)
        cfg = PretrainConfig(epochs=10, batch_size=32, seed=0, optimizer={'initial_lr': 0.01})
        result = pretrain(model, dataset, cfg)
        assert len(result.history) == 10
        assert [row.epoch for row in result.history] == list(range(1, 11))
        assert result.losses[-1] < result.losses[0]
        assert all(np.isfinite(result.losses))

    def test_same_seed_same_history(self, tiny_config, encoded):
        dataset, _ = encoded
        cfg = PretrainConfig(epochs=2, batch_size=64, seed=4)
        runs = []
        for _ in range(2):
            model = TabTransformer.create(tiny_config('vanilla'), dataset.schema, 0, with_reconstruction=True)
            runs.append(pretrain(model, dataset, cfg).losses)
        assert runs[0] == runs[1]

    def test_learning_rate_decays(self, tiny_config, encoded):
        dataset, _ = encoded
        model = TabTransformer.create(tiny_config('vanilla'), dataset.schema, 0, with_reconstruction=True)
        history = pretrain(model, dataset, PretrainConfig(epochs=3, batch_size=64)).history
        lrs = [row.lr for row in history]
        assert lrs == sorted(lrs, reverse=True)
        assert lrs[0] < 1e-3

    def test_history_csv(self, tiny_config, encoded, tmp_path):
        dataset, _ = encoded
        model = TabTransformer.create(tiny_config('vanilla'), dataset.schema, 0, with_reconstruction=True)
        result = pretrain(model, dataset, PretrainConfig(epochs=2, batch_size=128))
        frame = pd.read_csv(save_history(result.history, tmp_path / 'history.csv'))
        assert list(frame.columns) == ['epoch', 'mean_loss', 'lr']
        assert frame['epoch'].tolist() == [1, 2]

    def test_backbone_round_trip(self, tiny_config, encoded, tmp_path):
        dataset, bins = encoded
        source = TabTransformer.create(tiny_config('binned'), dataset.schema, 0, bins=bins, with_reconstruction=True)
        pretrain(source, dataset, PretrainConfig(epochs=1, batch_size=128))
        path = save_backbone(source, tmp_path / 'backbone.npz')

        target = TabTransformer.create(tiny_config('binned'), dataset.schema, 9, bins=bins)
        load_backbone(path, target)
        for name in target.backbone_names():
            np.testing.assert_array_equal(target.params[name], source.params[name])
        assert 'head.reconstruct.layer0.weight' not in target.params

    def test_backbone_needs_same_bins(self, tiny_config, encoded, tmp_path):
        dataset, bins = encoded
        source = TabTransformer.create(tiny_config('binned'), dataset.schema, 0, bins=bins)
        path = save_backbone(source, tmp_path / 'backbone.npz')
        other_bins = fit_bins(dataset, 'equal-width', 4)
        with pytest.raises(WeightsError):
            load_backbone(path, TabTransformer.create(tiny_config('binned'), dataset.schema, 0, bins=other_bins))
