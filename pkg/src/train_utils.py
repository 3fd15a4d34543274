"""
Fine-tuning supervisionado, baselines (MLP e TabTransformer supervisionado),
métricas e validação cruzada.
"""

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import special
from tqdm import tqdm

from .data_utils import (
    BINARY_CLASSIFICATION,
    REGRESSION,
    TASKS,
    BinningConfig,
    DatasetDescriptor,
    EncodedDataset,
    RawTable,
    SplitIndices,
    SplitSpec,
    apply_bins,
    fit_bins,
    fit_encoders,
    kfold,
    transform,
)
from .model_utils import ModelConfig, ModelInput, TabTransformer, _add_mlp, _mlp_backward, _mlp_forward
from .numerics_utils import (
    ConfigurationError,
    DimensionError,
    OptimizerConfig,
    ParameterStore,
    TrainingError,
    _known_keys,
    adamw_step,
    cosine_decay_lr,
)
from .ssl_utils import HistoryRow, PretrainConfig, load_backbone, pretrain
from .stats_utils import aggregate_reports

# Configurar logging
logger = logging.getLogger(__name__)

SL_TRAIN_OPTIONS = ('pretrain_only', 'pretrain_plus_finetune')


@dataclass
class FinetuneConfig:
    """Configuração do treino supervisionado"""
    task: str = BINARY_CLASSIFICATION
    epochs: int = 100
    batch_size: int = 256
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 42
    freeze_backbone: bool = False
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig.from_dict(self.optimizer)
        if self.task not in TASKS:
            raise ConfigurationError(f"Tarefa inválida '{self.task}'. Use uma de {TASKS}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs deve ser >= 1, recebido {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size deve ser >= 1, recebido {self.batch_size}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError(f"threshold deve estar em (0,1), recebido {self.threshold}")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'FinetuneConfig':
        return cls(**_known_keys(cls, values))

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data['optimizer'] = {f.name: getattr(self.optimizer, f.name) for f in fields(self.optimizer)}
        return data


@dataclass
class MetricReport:
    """Métricas de avaliação dependentes da tarefa"""
    task: str
    n_samples: int
    threshold: Optional[float] = None
    binary_accuracy: Optional[float] = None
    bce_loss: Optional[float] = None
    mse: Optional[float] = None
    mae: Optional[float] = None
    rmse: Optional[float] = None

    def metrics_dict(self) -> Dict[str, float]:
        if self.task == BINARY_CLASSIFICATION:
            return {'binary_accuracy': self.binary_accuracy, 'bce_loss': self.bce_loss}
        return {'mse': self.mse, 'mae': self.mae, 'rmse': self.rmse}

    def to_dict(self) -> Dict[str, Any]:
        data = {'task': self.task, 'n_samples': self.n_samples}
        if self.task == BINARY_CLASSIFICATION:
            data['threshold'] = self.threshold
        data.update(self.metrics_dict())
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MetricReport':
        return cls(**{k: v for k, v in data.items() if k in {f.name for f in fields(cls)}})


# =============================================================================
# Perdas e métricas
# =============================================================================

def _check_aligned(predictions: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if predictions.size == 0:
        raise DimensionError("Predições vazias")
    if predictions.shape != labels.shape:
        raise DimensionError(f"Predições {predictions.shape} e rótulos {labels.shape} desalinhados")
    return predictions, labels


def bce_loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Entropia cruzada binária na forma estável max(z,0) − z·y + log(1 + e^−|z|)

    Returns:
        Tupla (perda média, gradiente (σ(z) − y)/n)
    """
    z, y = _check_aligned(logits, labels)
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (special.expit(z) - y) / z.size
    return float(losses.mean()), grad


def bce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    return bce_loss_and_grad(logits, labels)[0]


def mse_loss_and_grad(predictions: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Erro quadrático médio e gradiente 2·(ŷ − y)/n."""
    p, y = _check_aligned(predictions, targets)
    diff = p - y
    return float(np.mean(diff ** 2)), 2.0 * diff / p.size


def mse_loss(predictions: np.ndarray, targets: np.ndarray) -> float:
    return mse_loss_and_grad(predictions, targets)[0]


def metrics(
    predictions: np.ndarray,
    labels: np.ndarray,
    task: str,
    threshold: float = 0.5
) -> MetricReport:
    """
    Calcula as métricas de avaliação

    Args:
        predictions: Logits (classificação) ou valores previstos (regressão)
        labels: Rótulos {0,1} ou alvos escalados
        task: 'binary-classification' ou 'regression'
        threshold: Limiar aplicado a σ(z)

    Returns:
        MetricReport

    Raises:
        DimensionError: Entradas vazias ou desalinhadas
    """
    p, y = _check_aligned(predictions, labels)
    if task == BINARY_CLASSIFICATION:
        predicted = (special.expit(p) >= threshold).astype(np.float64)
        return MetricReport(
            task=task,
            n_samples=int(p.size),
            threshold=threshold,
            binary_accuracy=float(np.mean(predicted == y)),
            bce_loss=bce_loss(p, y),
        )
    if task == REGRESSION:
        mse = float(np.mean((p - y) ** 2))
        return MetricReport(
            task=task,
            n_samples=int(p.size),
            mse=mse,
            mae=float(np.mean(np.abs(p - y))),
            rmse=math.sqrt(mse),
        )
    raise ConfigurationError(f"Tarefa inválida '{task}'")


# =============================================================================
# Modelos e laço supervisionado
# =============================================================================

class MLPBaseline:
    """MLP simples sobre o vetor de células escalarizadas"""

    def __init__(self, n_features: int, hidden: Sequence[int] = (64, 32), seed: int = 42, activation: str = 'relu'):
        self.activation = activation
        self.params = ParameterStore()
        _add_mlp(self.params, np.random.default_rng(seed), 'head.predict', [n_features, *hidden, 1])

    def inputs(self, dataset: EncodedDataset) -> np.ndarray:
        return dataset.cells

    def forward(
        self,
        x: np.ndarray,
        head: str = 'predict',
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None
    ) -> Tuple[np.ndarray, Any]:
        y, cache = _mlp_forward(x, self.params, 'head.predict', self.activation)
        return y[:, 0], cache

    def backward(self, grad_out: np.ndarray, cache: Any) -> None:
        _mlp_backward(grad_out[:, None], self.params, 'head.predict', cache, self.activation)


Trainable = Union[TabTransformer, MLPBaseline]


def _take(inputs: Union[ModelInput, np.ndarray], rows: np.ndarray) -> Union[ModelInput, np.ndarray]:
    if isinstance(inputs, ModelInput):
        return inputs.take(rows)
    return inputs[rows]


def _loss_fn(task: str) -> Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]:
    return bce_loss_and_grad if task == BINARY_CLASSIFICATION else mse_loss_and_grad


def fit_supervised(
    model: Trainable,
    dataset: EncodedDataset,
    cfg: FinetuneConfig,
    progress: bool = False
) -> List[float]:
    """
    Laço supervisionado com AdamW e decaimento por cosseno

    Returns:
        Perda média por época

    Raises:
        TrainingError: Dataset vazio ou perda NaN/Inf
    """
    n = len(dataset)
    if n == 0:
        raise TrainingError("Split de treino vazio")
    inputs = model.inputs(dataset)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    optimizer = cfg.optimizer.with_total_steps(cfg.epochs * batches_per_epoch)
    rng = np.random.default_rng(cfg.seed)
    loss_fn = _loss_fn(cfg.task)
    history = []
    step = 0
    for epoch in tqdm(range(1, cfg.epochs + 1), desc='finetune', disable=not progress):
        order = rng.permutation(n)
        losses = []
        for b in range(batches_per_epoch):
            rows = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            outputs, cache = model.forward(_take(inputs, rows), 'predict', train_mode=True, rng=rng)
            loss, grad = loss_fn(outputs, dataset.target[rows])
            lr = cosine_decay_lr(optimizer, step)
            step += 1
            if not np.isfinite(loss):
                raise TrainingError(f"Perda não finita na época {epoch}, lote {b} (lr={lr:.3g})")
            model.backward(grad, cache)
            adamw_step(model.params, optimizer, step, lr)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        logger.debug("Época %s/%s: perda média %.6f", epoch, cfg.epochs, history[-1])
    logger.info("Treino supervisionado: %s épocas, perda final %.6f", cfg.epochs, history[-1])
    return history


def predict_outputs(model: Trainable, dataset: EncodedDataset, batch_size: int = 1024) -> np.ndarray:
    """Saídas do modelo em modo de avaliação, por lotes."""
    inputs = model.inputs(dataset)
    outputs = []
    for start in range(0, len(dataset), batch_size):
        rows = np.arange(start, min(start + batch_size, len(dataset)))
        outputs.append(model.forward(_take(inputs, rows), 'predict', train_mode=False)[0])
    return np.concatenate(outputs)


def evaluate(model: Trainable, dataset: EncodedDataset, task: str, threshold: float = 0.5) -> MetricReport:
    return metrics(predict_outputs(model, dataset), dataset.target, task, threshold)


@dataclass
class TrainResult:
    model: Trainable
    report: MetricReport
    history: List[float]


def _copy_backbone(source: TabTransformer, target: TabTransformer) -> None:
    if source.config.variant != target.config.variant or source.schema_hash() != target.schema_hash():
        raise ConfigurationError("Backbone pré-treinado incompatível com o modelo de fine-tuning")
    for name in target.backbone_names():
        target.params.set_value(name, source.params[name])


def finetune(
    config: ModelConfig,
    train_ds: EncodedDataset,
    eval_ds: EncodedDataset,
    cfg: FinetuneConfig,
    backbone: Union[None, str, Path, TabTransformer] = None,
    progress: bool = False
) -> TrainResult:
    """
    Anexa uma cabeça de tarefa nova, treina e avalia

    Args:
        config: Configuração da arquitetura
        train_ds: Split rotulado de treino
        eval_ds: Split de avaliação
        cfg: Configuração do fine-tuning
        backbone: None (treino do zero), caminho de pesos ou modelo pré-treinado
        progress: Exibe barra de progresso

    Returns:
        TrainResult com o modelo, o relatório no split de avaliação e o histórico
    """
    schema = train_ds.schema
    if cfg.task != schema.task:
        raise ConfigurationError(f"Tarefa '{cfg.task}' não corresponde ao alvo do schema ('{schema.task}')")
    bins = train_ds.bins
    if isinstance(backbone, TabTransformer) and backbone.bins is not None:
        bins = backbone.bins
    model = TabTransformer.create(config, schema, cfg.seed, bins=bins, with_prediction=True)
    if isinstance(backbone, TabTransformer):
        _copy_backbone(backbone, model)
    elif backbone is not None:
        load_backbone(backbone, model)
    if cfg.freeze_backbone:
        model.params.freeze(model.backbone_names())

    history = fit_supervised(model, train_ds, cfg, progress)
    report = evaluate(model, eval_ds, cfg.task, cfg.threshold)
    logger.info("Fine-tuning %s: %s", config.variant, report.metrics_dict())
    return TrainResult(model=model, report=report, history=history)


def mlp_baseline(
    hidden: Sequence[int],
    train_ds: EncodedDataset,
    eval_ds: EncodedDataset,
    cfg: FinetuneConfig,
    progress: bool = False
) -> TrainResult:
    """Baseline MLP supervisionado sobre as células escalarizadas."""
    model = MLPBaseline(train_ds.schema.n_features, hidden, seed=cfg.seed)
    history = fit_supervised(model, train_ds, cfg, progress)
    report = evaluate(model, eval_ds, cfg.task, cfg.threshold)
    logger.info("Baseline MLP: %s", report.metrics_dict())
    return TrainResult(model=model, report=report, history=history)


# =============================================================================
# Regimes
# =============================================================================

@dataclass(frozen=True)
class Regime:
    """Receita completa: SSL (pré-treino + fine-tuning) ou SL (supervisionado)"""
    mode: str
    model: str

    VARIANT_LABELS = {'vanilla': 'V-TT', 'binned': 'B-TT', 'vanilla-mlp': 'VM-TT', 'mlp-based': 'MLP-TT'}

    @property
    def name(self) -> str:
        return f"{self.mode} ({self.model})"

    @property
    def variant(self) -> Optional[str]:
        if self.model == 'MLP':
            return None
        if self.model == 'TT':
            return 'vanilla'
        return {label: v for v, label in self.VARIANT_LABELS.items()}[self.model]

    @classmethod
    def from_name(cls, name: str) -> 'Regime':
        """Ex.: 'SSL (MLP-TT)', 'SL (TT)', 'SL (MLP)'."""
        text = name.strip()
        mode, _, rest = text.partition(' ')
        model = rest.strip().strip('()')
        regime = cls(mode, model)
        if regime.name not in REGIMES:
            raise ConfigurationError(f"Regime desconhecido '{name}'. Use um de {list(REGIMES)}")
        return regime


REGIMES = ('SSL (V-TT)', 'SSL (B-TT)', 'SSL (VM-TT)', 'SSL (MLP-TT)', 'SL (TT)', 'SL (MLP)')


@dataclass
class RunSettings:
    """Configurações compartilhadas pelos regimes de um experimento"""
    model: Dict[str, Any] = field(default_factory=dict)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    binning: BinningConfig = field(default_factory=BinningConfig)
    sl_train: str = 'pretrain_only'
    seed: int = 42
    progress: bool = False

    def __post_init__(self) -> None:
        if isinstance(self.pretrain, dict):
            self.pretrain = PretrainConfig.from_dict(self.pretrain)
        if isinstance(self.finetune, dict):
            self.finetune = FinetuneConfig.from_dict(self.finetune)
        if isinstance(self.binning, dict):
            self.binning = BinningConfig.from_dict(self.binning)
        if self.sl_train not in SL_TRAIN_OPTIONS:
            raise ConfigurationError(f"sl_train inválido '{self.sl_train}'. Use um de {SL_TRAIN_OPTIONS}")
        # valida as chaves de modelo já na construção
        ModelConfig.from_dict(self.model)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'RunSettings':
        return cls(**_known_keys(cls, values))

    def model_config(self, variant: str) -> ModelConfig:
        values = {k: v for k, v in self.model.items() if k != 'variant'}
        return ModelConfig.for_variant(variant, **values)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'model': dict(sorted(self.model.items())),
            'pretrain': self.pretrain.to_dict(),
            'finetune': self.finetune.to_dict(),
            'binning': {'strategy': self.binning.strategy, 'n_bins': self.binning.n_bins},
            'sl_train': self.sl_train,
            'seed': self.seed,
        }


@dataclass
class RegimeResult:
    regime: Regime
    report: MetricReport
    pretrain_history: List[HistoryRow]
    n_parameters: int
    pretrained: Optional[TabTransformer] = None

    @property
    def pretrain_losses(self) -> List[float]:
        return [row.mean_loss for row in self.pretrain_history]


def check_disjoint(train_rows: np.ndarray, test_rows: np.ndarray) -> None:
    """
    Raises:
        TrainingError: Se alguma linha de teste estiver no treino
    """
    overlap = np.intersect1d(train_rows, test_rows)
    if overlap.size:
        raise TrainingError(f"{overlap.size} linhas de teste presentes no treino (ex.: {int(overlap[0])})")


@dataclass
class EncodedSplit:
    """Partições codificadas com o schema ajustado no pré-treino"""
    pretrain: EncodedDataset
    finetune: Optional[EncodedDataset]
    test: EncodedDataset


def encode_split(table: RawTable, descriptor: DatasetDescriptor, split: SplitIndices) -> EncodedSplit:
    """Ajusta os codificadores nas linhas de pré-treino e codifica as três partições."""
    pretrain_rows = table.take(split.pretrain)
    schema = fit_encoders(pretrain_rows, descriptor)
    return EncodedSplit(
        pretrain=transform(pretrain_rows, schema, clip=False),
        finetune=transform(table.take(split.finetune), schema) if len(split.finetune) else None,
        test=transform(table.take(split.test), schema),
    )


def pretrain_backbone(
    regime: Regime,
    encoded: EncodedSplit,
    settings: RunSettings
) -> Tuple[TabTransformer, List[HistoryRow]]:
    """Constrói o modelo com cabeça de reconstrução e pré-treina no split de pré-treino."""
    config = settings.model_config(regime.variant)
    pretrain_ds = encoded.pretrain
    bins = None
    if regime.variant == 'binned':
        bins = fit_bins(pretrain_ds, settings.binning.strategy, settings.binning.n_bins)
        pretrain_ds = apply_bins(pretrain_ds, bins)
    model = TabTransformer.create(config, pretrain_ds.schema, settings.seed, bins=bins,
                                  with_reconstruction=True, with_prediction=False)
    result = pretrain(model, pretrain_ds, replace(settings.pretrain, seed=settings.seed), settings.progress)
    return result.model, result.history


def run_regime(
    regime: Regime,
    table: RawTable,
    descriptor: DatasetDescriptor,
    split: SplitIndices,
    settings: RunSettings,
    pretrained: Optional[TabTransformer] = None
) -> RegimeResult:
    """
    Executa um regime completo em um split

    Codificadores (e bins) são ajustados nas linhas de pré-treino; regimes SSL
    pré-treinam no split de pré-treino e fazem fine-tuning no split de
    fine-tuning; regimes SL treinam no pré-treino (ou pré-treino ∪
    fine-tuning, conforme ``sl_train``). Todos avaliam no split de teste.

    Args:
        regime: Regime a executar
        table: Tabela limpa
        descriptor: Descritor do dataset
        split: Índices das partições
        settings: Configurações
        pretrained: Backbone já pré-treinado (reuso entre folds)

    Returns:
        RegimeResult
    """
    finetune_cfg = replace(settings.finetune, seed=settings.seed, task=descriptor.task)
    encoded = encode_split(table, descriptor, split)
    test_ds = encoded.test

    if regime.mode == 'SL':
        train_ds = encoded.pretrain
        train_rows = split.pretrain
        if settings.sl_train == 'pretrain_plus_finetune' and encoded.finetune is not None:
            train_rows = np.concatenate([split.pretrain, split.finetune])
            train_ds = transform(table.take(train_rows), encoded.pretrain.schema)
        check_disjoint(train_rows, split.test)
        if regime.model == 'MLP':
            hidden = settings.model.get('mlp_hidden', ModelConfig().mlp_hidden)
            result = mlp_baseline(hidden, train_ds, test_ds, finetune_cfg, settings.progress)
        else:
            result = finetune(settings.model_config(regime.variant), train_ds, test_ds, finetune_cfg,
                              None, settings.progress)
        return RegimeResult(regime, result.report, [], result.model.params.count())

    if encoded.finetune is None:
        raise TrainingError("Split de fine-tuning vazio para um regime SSL")
    check_disjoint(np.concatenate([split.pretrain, split.finetune]), split.test)
    history: List[HistoryRow] = []
    if pretrained is None:
        pretrained, history = pretrain_backbone(regime, encoded, settings)
    finetune_ds = encoded.finetune
    if pretrained.bins is not None:
        finetune_ds = apply_bins(finetune_ds, pretrained.bins)
        test_ds = apply_bins(test_ds, pretrained.bins)
    result = finetune(pretrained.config, finetune_ds, test_ds, finetune_cfg, pretrained, settings.progress)
    return RegimeResult(regime, result.report, history, result.model.params.count(), pretrained)


# =============================================================================
# Validação cruzada
# =============================================================================

@dataclass
class CVResult:
    regime: Regime
    reports: List[MetricReport]
    aggregate: Dict[str, Dict[str, float]]


def cv_splits(table: RawTable, spec: SplitSpec, k: int = 5) -> List[SplitIndices]:
    """
    Splits por fold. Aleatório: o treino do fold é dividido, por permutação
    com semente, em fine-tuning e pré-treino disjuntos. Domínio: a origem é
    sempre o pré-treino e os folds percorrem o pool do domínio alvo.
    """
    fraction_rng = np.random.default_rng(spec.seed)
    splits = []
    if spec.mode == 'random':
        share = spec.finetune_fraction / (spec.pretrain_fraction + spec.finetune_fraction)
        for train_rows, val_rows in kfold(len(table), k, spec.seed):
            n_ft = min(max(1, int(round(share * train_rows.size))), train_rows.size - 1)
            perm = fraction_rng.permutation(train_rows)
            splits.append(SplitIndices(np.sort(perm[n_ft:]), np.sort(perm[:n_ft]), np.sort(val_rows), spec))
        return splits

    values = table.frame[spec.domain_column].to_numpy(dtype=str)
    source = np.flatnonzero(np.isin(values, list(spec.source_values)))
    target_mask = np.isin(values, list(spec.target_values)) if spec.target_values else ~np.isin(values, list(spec.source_values))
    pool = np.flatnonzero(target_mask)
    n_ft = max(1, int(round(spec.target_finetune_fraction * pool.size)))
    for train_pos, val_pos in kfold(pool.size, k, spec.seed):
        held_in = pool[train_pos]
        finetune_rows = np.sort(fraction_rng.choice(held_in, size=min(n_ft, held_in.size), replace=False))
        splits.append(SplitIndices(source, finetune_rows, np.sort(pool[val_pos]), spec))
    return splits


def cross_validate(
    regime: Regime,
    table: RawTable,
    descriptor: DatasetDescriptor,
    spec: SplitSpec,
    settings: RunSettings,
    k: int = 5,
    n_jobs: int = 1
) -> CVResult:
    """
    Executa o regime em cada fold e agrega as métricas (média, desvio)

    No split por domínio o pré-treino na origem roda uma única vez e é
    reutilizado por todos os folds.

    Args:
        regime: Regime
        table: Tabela limpa
        descriptor: Descritor
        spec: Protocolo de split (semente dos folds)
        settings: Configurações
        k: Número de folds
        n_jobs: Folds em paralelo (joblib)

    Returns:
        CVResult com exatamente k relatórios em ordem de fold
    """
    splits = cv_splits(table, spec, k)
    pretrained = None
    if spec.mode == 'domain' and regime.mode == 'SSL':
        pretrained, _ = pretrain_backbone(regime, encode_split(table, descriptor, splits[0]), settings)

    results = Parallel(n_jobs=n_jobs)(
        delayed(run_regime)(regime, table, descriptor, split, settings, pretrained) for split in splits
    )
    reports = [r.report for r in results]
    aggregate = aggregate_reports(reports)
    logger.info("CV %s (k=%s): %s", regime.name, k,
                {m: round(v['mean'], 6) for m, v in aggregate.items()})
    return CVResult(regime=regime, reports=reports, aggregate=aggregate)
