"""
Pré-treino auto-supervisionado por mascaramento de células (estilo MLM):
corrupção, perda de reconstrução e laço de pré-treino.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .data_utils import BinSpec, EncodedDataset, apply_bins
from .model_utils import ModelInput, TabTransformer, load_weights, save_weights
from .numerics_utils import (
    ConfigurationError,
    OptimizerConfig,
    TrainingError,
    _known_keys,
    adamw_step,
    cosine_decay_lr,
)

# Configurar logging
logger = logging.getLogger(__name__)

# Representação escalarizada de uma célula categórica mascarada
MASKED_CATEGORICAL = -1.0


@dataclass
class PretrainConfig:
    """Configuração do pré-treino por mascaramento"""
    mask_rate: float = 0.20
    epochs: int = 30
    batch_size: int = 256
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 42
    min_one_mask: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig.from_dict(self.optimizer)
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigurationError(f"mask_rate deve estar em (0,1), recebido {self.mask_rate}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs deve ser >= 1, recebido {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size deve ser >= 1, recebido {self.batch_size}")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'PretrainConfig':
        return cls(**_known_keys(cls, values))

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data['optimizer'] = {f.name: getattr(self.optimizer, f.name) for f in fields(self.optimizer)}
        return data


@dataclass
class MaskedBatch:
    """
    Lote corrompido.

    corrupted: células com as mascaradas substituídas (categóricas por -1,
    contínuas por 0); mask: True = mascarada; targets: células originais;
    inputs: entrada do modelo com índices [MASK] e indicadores.
    """
    corrupted: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    inputs: ModelInput

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


@dataclass
class HistoryRow:
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class PretrainResult:
    model: TabTransformer
    history: List[HistoryRow]

    @property
    def losses(self) -> List[float]:
        return [row.mean_loss for row in self.history]


def draw_mask(
    n_rows: int,
    n_features: int,
    mask_rate: float,
    rng: np.random.Generator,
    min_one_mask: bool = True
) -> np.ndarray:
    """Bernoulli independente por célula; opcionalmente força uma célula por linha."""
    mask = rng.random((n_rows, n_features)) < mask_rate
    if min_one_mask and n_features:
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            mask[empty, rng.integers(0, n_features, size=empty.size)] = True
    return mask


def apply_mask(
    batch: EncodedDataset,
    cfg: PretrainConfig,
    rng: np.random.Generator,
    bins: Optional[BinSpec] = None
) -> MaskedBatch:
    """
    Mascara células de um lote codificado

    Categóricas recebem o índice reservado [MASK] (V+1); contínuas viram 0 com
    indicador 1 (variantes em que contornam o transformer) e, quando há bins,
    recebem o bin reservado [MASK] (B).

    Args:
        batch: Lote codificado
        cfg: Configuração (mask_rate, min_one_mask)
        rng: Gerador com semente
        bins: BinSpec para mascarar os códigos de bins

    Returns:
        MaskedBatch
    """
    schema = batch.schema
    n, n_features = batch.cells.shape
    mask = draw_mask(n, n_features, cfg.mask_rate, rng, cfg.min_one_mask)

    corrupted = batch.cells.copy()
    cat_mask = mask[:, schema.cat_positions]
    num_mask = mask[:, schema.num_positions]
    corrupted[:, schema.cat_positions] = np.where(cat_mask, MASKED_CATEGORICAL, batch.cells[:, schema.cat_positions])
    corrupted[:, schema.num_positions] = np.where(num_mask, 0.0, batch.cells[:, schema.num_positions])

    mask_codes = np.asarray(schema.vocab_sizes, dtype=np.int64) + 1
    cat = np.where(cat_mask, mask_codes[None, :], batch.codes)

    bin_codes = None
    if bins is not None and schema.continuous:
        if batch.bin_codes is None:
            batch = apply_bins(batch, bins)
        mask_bins = np.asarray([bins.bin_count(c.name) for c in schema.continuous], dtype=np.int64)
        bin_codes = np.where(num_mask, mask_bins[None, :], batch.bin_codes)

    inputs = ModelInput(
        cat=cat,
        num=corrupted[:, schema.num_positions],
        num_mask=num_mask.astype(np.float64),
        bins=bin_codes,
    )
    return MaskedBatch(corrupted=corrupted, mask=mask, targets=batch.cells.copy(), inputs=inputs)


def reconstruction_loss_and_grad(predictions: np.ndarray, masked: MaskedBatch) -> tuple:
    """
    MSE apenas nas células mascaradas e seu gradiente em relação às predições

    Returns:
        Tupla (perda, gradiente com a forma de ``predictions``)
    """
    if predictions.shape != masked.targets.shape:
        raise ConfigurationError(
            f"Predições {predictions.shape} incompatíveis com alvos {masked.targets.shape}"
        )
    count = masked.n_masked
    if count == 0:
        logger.warning("Lote sem células mascaradas; perda de reconstrução = 0")
        return 0.0, np.zeros_like(predictions)
    diff = np.where(masked.mask, predictions - masked.targets, 0.0)
    loss = float((diff ** 2).sum() / count)
    return loss, 2.0 * diff / count


def reconstruction_loss(predictions: np.ndarray, masked: MaskedBatch) -> float:
    """Média do erro quadrático sobre as células mascaradas."""
    return reconstruction_loss_and_grad(predictions, masked)[0]


def pretrain(
    model: TabTransformer,
    dataset: EncodedDataset,
    cfg: PretrainConfig,
    progress: bool = False
) -> PretrainResult:
    """
    Laço de pré-treino: embaralha, mascara, reconstrói e atualiza com AdamW
    e decaimento por cosseno sobre epochs·ceil(n/batch_size) passos

    Args:
        model: Modelo com cabeça de reconstrução
        dataset: Split de pré-treino codificado
        cfg: Configuração do pré-treino
        progress: Exibe barra de progresso (tqdm)

    Returns:
        PretrainResult com o modelo treinado e o histórico por época

    Raises:
        TrainingError: Se a perda ficar NaN/Inf
    """
    n = len(dataset)
    if n == 0:
        raise TrainingError("Split de pré-treino vazio")
    if model.config.variant == 'binned' and model.schema.continuous and dataset.bin_codes is None:
        dataset = apply_bins(dataset, model.bins)
    bins = model.bins if model.config.variant == 'binned' else None

    batches_per_epoch = math.ceil(n / cfg.batch_size)
    optimizer = cfg.optimizer.with_total_steps(cfg.epochs * batches_per_epoch)
    rng = np.random.default_rng(cfg.seed)
    history: List[HistoryRow] = []
    step = 0
    lr = optimizer.initial_lr

    logger.info("Pré-treino %s: %s linhas, %s épocas, %s passos",
                model.config.variant, f"{n:,}", cfg.epochs, optimizer.total_steps)
    for epoch in tqdm(range(1, cfg.epochs + 1), desc='pretrain', disable=not progress):
        order = rng.permutation(n)
        losses = []
        for b in range(batches_per_epoch):
            batch = dataset.take(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            masked = apply_mask(batch, cfg, rng, bins)
            predictions, cache = model.forward(masked.inputs, 'reconstruct', train_mode=True, rng=rng)
            loss, grad = reconstruction_loss_and_grad(predictions, masked)
            lr = cosine_decay_lr(optimizer, step)
            step += 1
            if not np.isfinite(loss):
                raise TrainingError(f"Perda não finita na época {epoch}, lote {b} (lr={lr:.3g})")
            model.backward(grad, cache)
            adamw_step(model.params, optimizer, step, lr)
            losses.append(loss)
            logger.debug("época %s lote %s perda %.6f", epoch, b, loss)
        row = HistoryRow(epoch=epoch, mean_loss=float(np.mean(losses)), lr=lr)
        history.append(row)
        logger.info("Época %s/%s: perda média %.6f (lr=%.3g)", epoch, cfg.epochs, row.mean_loss, lr)
    return PretrainResult(model=model, history=history)


def save_history(history: List[HistoryRow], path: Union[str, Path]) -> Path:
    """Salva o histórico de perdas em CSV (epoch, mean_loss, lr)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([(r.epoch, r.mean_loss, r.lr) for r in history], columns=['epoch', 'mean_loss', 'lr'])
    frame.to_csv(path, index=False)
    logger.info("Histórico salvo em %s", path)
    return path


def save_backbone(model: TabTransformer, path: Union[str, Path]) -> Path:
    """Salva embeddings, transformer e projeção numérica (sem cabeças)."""
    return save_weights(model, path, backbone_only=True)


def load_backbone(path: Union[str, Path], model: TabTransformer) -> TabTransformer:
    """
    Sobrescreve o backbone de ``model`` com os pesos salvos; as cabeças
    continuam com a inicialização fresca

    Raises:
        WeightsError: Hash de schema, variante ou forma incompatíveis
    """
    return load_weights(model, path, backbone_only=True)
