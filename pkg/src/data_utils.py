"""
Utilitários para ingestão, codificação e particionamento de dados tabulares
"""

import csv
import hashlib
import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import KFold
from sklearn.preprocessing import KBinsDiscretizer, LabelEncoder, MinMaxScaler

from .numerics_utils import ConfigurationError, _known_keys

# Configurar logging
logger = logging.getLogger(__name__)

CATEGORICAL = 'categorical'
CONTINUOUS = 'continuous'
COLUMN_KINDS = (CATEGORICAL, CONTINUOUS)
BINARY_CLASSIFICATION = 'binary-classification'
REGRESSION = 'regression'
TASKS = (BINARY_CLASSIFICATION, REGRESSION)
MISSING_SENTINELS = ('?', '')
BIN_STRATEGIES = {'quantile': 'quantile', 'equal-width': 'uniform'}
# Valor escalarizado das categorias não vistas no treino
UNKNOWN_SCALAR = 0.5


class DataError(Exception):
    """Exceção base para erros de dados"""


class IngestionError(DataError):
    """Falha ao ler ou validar um arquivo CSV"""


class TransformError(DataError):
    """Falha ao codificar valores com um schema ajustado"""


class SplitError(DataError):
    """Particionamento impossível com os parâmetros pedidos"""


# =============================================================================
# Descritores e tabelas brutas
# =============================================================================

@dataclass(frozen=True)
class DatasetDescriptor:
    """
    Descritor de dataset (JSON): colunas, tipos, alvo, tarefa e domínio.
    """
    name: str
    path: str
    columns: Tuple[Tuple[str, str], ...]
    target: str
    task: str
    positive_label: Optional[str] = None
    domain_column: Optional[str] = None
    expected_rows: Optional[int] = None
    missing_values: Tuple[str, ...] = MISSING_SENTINELS
    drop_columns: Tuple[str, ...] = ()
    source_url: Optional[str] = None
    source_has_header: bool = True
    source_columns: Tuple[str, ...] = ()
    batch_size: Optional[int] = None
    base_dir: str = '.'

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise DataError(f"Tarefa inválida '{self.task}'. Use uma de {TASKS}")
        names = [name for name, _ in self.columns]
        if len(set(names)) != len(names):
            raise DataError(f"Nomes de colunas duplicados no descritor '{self.name}'")
        for name, kind in self.columns:
            if kind not in COLUMN_KINDS:
                raise DataError(f"Tipo inválido '{kind}' para coluna '{name}'")
        if self.target in names:
            raise DataError(f"A coluna alvo '{self.target}' não pode ser uma feature")
        if self.task == BINARY_CLASSIFICATION and self.positive_label is None:
            raise DataError(f"Descritor '{self.name}' de classificação requer 'positive_label'")
        if self.domain_column is not None and dict(self.columns).get(self.domain_column) != CATEGORICAL:
            raise DataError(f"Coluna de domínio '{self.domain_column}' deve ser uma feature categórica")

    @property
    def feature_names(self) -> List[str]:
        return [name for name, _ in self.columns]

    @property
    def header(self) -> List[str]:
        """Cabeçalho esperado do CSV (features, alvo e colunas descartadas)."""
        return self.feature_names + [self.target] + list(self.drop_columns)

    @property
    def data_path(self) -> Path:
        path = Path(self.path)
        if path.is_absolute() or path.exists():
            return path
        return Path(self.base_dir) / path

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'path': self.path,
            'columns': [{'name': n, 'kind': k} for n, k in self.columns],
            'target': self.target,
            'task': self.task,
            'positive_label': self.positive_label,
            'domain_column': self.domain_column,
            'expected_rows': self.expected_rows,
            'missing_values': list(self.missing_values),
            'drop_columns': list(self.drop_columns),
            'source_url': self.source_url,
            'source_has_header': self.source_has_header,
            'source_columns': list(self.source_columns),
            'batch_size': self.batch_size,
        }


def load_descriptor(path: Union[str, Path]) -> DatasetDescriptor:
    """
    Carrega um descritor de dataset em JSON

    Args:
        path: Caminho do arquivo .json

    Returns:
        DatasetDescriptor validado

    Raises:
        IngestionError: Se o arquivo não existir ou não for JSON válido
    """
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"Não foi possível ler o descritor '{path}': {exc}") from exc

    try:
        return DatasetDescriptor(
            name=raw['name'],
            path=raw['path'],
            columns=tuple((c['name'], c['kind']) for c in raw['columns']),
            target=raw['target'],
            task=raw['task'],
            positive_label=raw.get('positive_label'),
            domain_column=raw.get('domain_column'),
            expected_rows=raw.get('expected_rows'),
            missing_values=tuple(raw.get('missing_values', MISSING_SENTINELS)),
            drop_columns=tuple(raw.get('drop_columns', ())),
            source_url=raw.get('source_url'),
            source_has_header=raw.get('source_has_header', True),
            source_columns=tuple(raw.get('source_columns', ())),
            batch_size=raw.get('batch_size'),
            # descritores ficam em config/datasets; caminhos relativos partem da raiz
            base_dir=str(path.resolve().parent.parent.parent),
        )
    except KeyError as exc:
        raise IngestionError(f"Descritor '{path}' sem a chave obrigatória {exc}") from exc


@dataclass
class RawTable:
    """Tabela bruta (strings) com máscara de valores ausentes por célula"""
    frame: pd.DataFrame
    missing: pd.DataFrame
    raw_index: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.frame)

    def take(self, rows: Sequence[int]) -> 'RawTable':
        rows = np.asarray(rows, dtype=int)
        return RawTable(
            frame=self.frame.iloc[rows].reset_index(drop=True),
            missing=self.missing.iloc[rows].reset_index(drop=True),
            raw_index=self.raw_index[rows],
        )


_LINE_PATTERN = re.compile(r'line (\d+)')


def _short_line(path: Path, n_columns: int) -> Optional[int]:
    """Primeira linha (base 1) com menos campos que o cabeçalho, ou None."""
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f, skipinitialspace=True)
        for row in reader:
            if row and len(row) < n_columns:
                return reader.line_num
    return None


def load_csv(path: Union[str, Path], descriptor: DatasetDescriptor) -> RawTable:
    """
    Lê um CSV com cabeçalho e registra as sentinelas de ausência por célula

    Args:
        path: Caminho do CSV
        descriptor: Descritor com os nomes esperados das colunas

    Returns:
        RawTable com colunas na ordem do descritor

    Raises:
        IngestionError: Arquivo ilegível, cabeçalho divergente ou linha irregular
    """
    path = Path(path)
    try:
        frame = pd.read_csv(
            path,
            dtype=str,
            keep_default_na=False,
            na_filter=False,
            skipinitialspace=True,
            on_bad_lines='error',
        )
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        raise IngestionError(f"Não foi possível ler '{path}': {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise IngestionError(f"Arquivo '{path}' sem linha de cabeçalho") from exc
    except pd.errors.ParserError as exc:
        match = _LINE_PATTERN.search(str(exc))
        line = match.group(1) if match else '?'
        raise IngestionError(f"Linha {line} de '{path}' com número de colunas inválido: {exc}") from exc

    frame.columns = [str(c).strip() for c in frame.columns]
    expected = set(descriptor.header)
    found = set(frame.columns)
    if expected != found:
        raise IngestionError(
            f"Cabeçalho de '{path}' não confere com o descritor '{descriptor.name}'. "
            f"Faltando: {sorted(expected - found)}; inesperadas: {sorted(found - expected)}"
        )

    # o pandas completa linhas curtas com vazios; a contagem é feita no texto
    line = _short_line(path, len(frame.columns))
    if line is not None:
        raise IngestionError(f"Linha {line} de '{path}' com número de colunas inválido")

    frame = frame[descriptor.header].apply(lambda s: s.str.strip())
    missing = frame.isin(list(descriptor.missing_values))
    raw_index = np.arange(len(frame), dtype=np.int64) + 2
    logger.info("Carregadas %s linhas de %s", f"{len(frame):,}", path)
    return RawTable(frame=frame.reset_index(drop=True), missing=missing.reset_index(drop=True), raw_index=raw_index)


def drop_nulls(table: RawTable) -> RawTable:
    """
    Remove linhas que contenham qualquer sentinela de ausência

    Args:
        table: Tabela bruta

    Returns:
        Nova RawTable; ``dropped`` contém o número de linhas removidas
    """
    keep = ~table.missing.any(axis=1).to_numpy()
    cleaned = table.take(np.flatnonzero(keep))
    cleaned.dropped = int((~keep).sum())
    total = len(table)
    if total:
        logger.info("✓ Removidas %s linhas com valores ausentes de %s (%.1f%%)",
                    f"{cleaned.dropped:,}", f"{total:,}", cleaned.dropped / total * 100)
    return cleaned


# =============================================================================
# Schema e codificação
# =============================================================================

@dataclass(frozen=True)
class ColumnSpec:
    """Coluna de feature com o estado do codificador ajustado"""
    name: str
    kind: str
    vocabulary: Tuple[str, ...] = ()
    minimum: float = 0.0
    maximum: float = 0.0

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    @property
    def constant(self) -> bool:
        return self.kind == CONTINUOUS and self.minimum == self.maximum


@dataclass(frozen=True)
class TableSchema:
    """
    Colunas de feature ordenadas, alvo e coluna de domínio opcional.

    Vocabulários categóricos são ordenados lexicograficamente e não vazios;
    colunas contínuas guardam mínimo <= máximo observados no treino.
    """
    columns: Tuple[ColumnSpec, ...]
    target: str
    task: str
    domain_column: Optional[str] = None
    positive_label: Optional[str] = None
    target_min: float = 0.0
    target_max: float = 1.0

    def __post_init__(self) -> None:
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError("Nomes de colunas duplicados no schema")
        if self.target in names:
            raise DataError(f"A coluna alvo '{self.target}' não pode ser uma feature")
        if self.task not in TASKS:
            raise DataError(f"Tarefa inválida '{self.task}'")
        for col in self.columns:
            if col.kind == CATEGORICAL:
                if not col.vocabulary:
                    raise DataError(f"Vocabulário vazio para a coluna '{col.name}'")
                if list(col.vocabulary) != sorted(col.vocabulary):
                    raise DataError(f"Vocabulário da coluna '{col.name}' não está ordenado")
            elif col.minimum > col.maximum:
                raise DataError(f"Coluna '{col.name}' com mínimo > máximo")
        if self.domain_column is not None:
            kinds = {c.name: c.kind for c in self.columns}
            if kinds.get(self.domain_column) != CATEGORICAL:
                raise DataError(f"Coluna de domínio '{self.domain_column}' deve ser categórica")

    @property
    def feature_names(self) -> List[str]:
        return [c.name for c in self.columns]

    @property
    def n_features(self) -> int:
        return len(self.columns)

    @property
    def categorical(self) -> List[ColumnSpec]:
        return [c for c in self.columns if c.kind == CATEGORICAL]

    @property
    def continuous(self) -> List[ColumnSpec]:
        return [c for c in self.columns if c.kind == CONTINUOUS]

    @property
    def cat_positions(self) -> List[int]:
        return [i for i, c in enumerate(self.columns) if c.kind == CATEGORICAL]

    @property
    def num_positions(self) -> List[int]:
        return [i for i, c in enumerate(self.columns) if c.kind == CONTINUOUS]

    @property
    def vocab_sizes(self) -> List[int]:
        return [c.vocab_size for c in self.categorical]

    def column(self, name: str) -> ColumnSpec:
        for col in self.columns:
            if col.name == name:
                return col
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'columns': [
                {'name': c.name, 'kind': c.kind, 'vocabulary': list(c.vocabulary),
                 'minimum': c.minimum, 'maximum': c.maximum}
                for c in self.columns
            ],
            'target': self.target,
            'task': self.task,
            'domain_column': self.domain_column,
            'positive_label': self.positive_label,
            'target_min': self.target_min,
            'target_max': self.target_max,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TableSchema':
        return cls(
            columns=tuple(
                ColumnSpec(c['name'], c['kind'], tuple(c.get('vocabulary', ())),
                           float(c.get('minimum', 0.0)), float(c.get('maximum', 0.0)))
                for c in data['columns']
            ),
            target=data['target'],
            task=data['task'],
            domain_column=data.get('domain_column'),
            positive_label=data.get('positive_label'),
            target_min=float(data.get('target_min', 0.0)),
            target_max=float(data.get('target_max', 1.0)),
        )


def content_hash(payload: Any) -> str:
    """Hash sha256 do JSON canônico de ``payload``."""
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def schema_hash(schema: TableSchema, bins: Optional['BinSpec'] = None) -> str:
    payload = {'schema': schema.to_dict(), 'bins': bins.to_dict() if bins is not None else None}
    return content_hash(payload)


def _to_float(series: pd.Series, column: str) -> np.ndarray:
    try:
        return pd.to_numeric(series, errors='raise').to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise TransformError(f"Coluna contínua '{column}' com valor não numérico: {exc}") from exc


def fit_encoders(table: RawTable, descriptor: DatasetDescriptor) -> TableSchema:
    """
    Ajusta vocabulários (LabelEncoder) e mínimos/máximos (MinMaxScaler).

    Deve ser chamado apenas com as linhas de pré-treino.

    Args:
        table: Tabela bruta sem ausências
        descriptor: Descritor do dataset

    Returns:
        TableSchema ajustado

    Raises:
        DataError: Se a tabela estiver vazia
    """
    if len(table) == 0:
        raise DataError("Não é possível ajustar codificadores em uma tabela vazia")

    columns = []
    for name, kind in descriptor.columns:
        series = table.frame[name]
        if kind == CATEGORICAL:
            encoder = LabelEncoder().fit(series.to_numpy(dtype=str))
            columns.append(ColumnSpec(name, kind, vocabulary=tuple(str(v) for v in encoder.classes_)))
        else:
            values = _to_float(series, name).reshape(-1, 1)
            scaler = MinMaxScaler().fit(values)
            lo, hi = float(scaler.data_min_[0]), float(scaler.data_max_[0])
            if lo == hi:
                logger.warning("Coluna contínua constante '%s' (valor %s); escalada para 0", name, lo)
            columns.append(ColumnSpec(name, kind, minimum=lo, maximum=hi))

    target_min, target_max = 0.0, 1.0
    if descriptor.task == REGRESSION:
        target = _to_float(table.frame[descriptor.target], descriptor.target)
        target_min, target_max = float(target.min()), float(target.max())

    schema = TableSchema(
        columns=tuple(columns),
        target=descriptor.target,
        task=descriptor.task,
        domain_column=descriptor.domain_column,
        positive_label=descriptor.positive_label,
        target_min=target_min,
        target_max=target_max,
    )
    logger.info("Codificadores ajustados em %s linhas: %s categóricas, %s contínuas",
                f"{len(table):,}", len(schema.categorical), len(schema.continuous))
    return schema


@dataclass
class EncodedDataset:
    """
    Matriz de células escalarizadas (n × n_features) e alvo.

    ``codes`` guarda os índices inteiros das colunas categóricas (vocabulário
    + índice reservado ``vocab_size`` para desconhecidos); ``bin_codes`` guarda
    os bins das colunas contínuas quando houver um BinSpec aplicado.
    """
    schema: TableSchema
    cells: np.ndarray
    codes: np.ndarray
    target: np.ndarray
    raw_index: Optional[np.ndarray] = None
    bins: Optional['BinSpec'] = None
    bin_codes: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.cells.shape[0])

    @property
    def continuous(self) -> np.ndarray:
        return self.cells[:, self.schema.num_positions]

    def take(self, rows: Sequence[int]) -> 'EncodedDataset':
        rows = np.asarray(rows, dtype=int)
        return EncodedDataset(
            schema=self.schema,
            cells=self.cells[rows],
            codes=self.codes[rows],
            target=self.target[rows],
            raw_index=None if self.raw_index is None else self.raw_index[rows],
            bins=self.bins,
            bin_codes=None if self.bin_codes is None else self.bin_codes[rows],
        )

    def with_target(self, target: np.ndarray) -> 'EncodedDataset':
        clone = self.take(np.arange(len(self)))
        clone.target = np.asarray(target, dtype=np.float64)
        return clone


def _scale_codes(codes: np.ndarray, vocab_size: int) -> np.ndarray:
    scaled = codes / (vocab_size - 1) if vocab_size > 1 else np.zeros(len(codes))
    return np.where(codes >= vocab_size, UNKNOWN_SCALAR, scaled)


def transform(
    table: RawTable,
    schema: TableSchema,
    clip: bool = True,
    allow_unknown: bool = True
) -> EncodedDataset:
    """
    Codifica uma tabela bruta com um schema ajustado

    Args:
        table: Tabela bruta sem ausências
        schema: Schema ajustado no pré-treino
        clip: Se True, limita contínuas fora do intervalo de treino a [0,1]
        allow_unknown: Se True, categorias não vistas vão para o índice reservado

    Returns:
        EncodedDataset

    Raises:
        TransformError: Categoria não vista (sem mapeamento) ou valor fora do intervalo (sem clip)
    """
    n = len(table)
    cells = np.zeros((n, schema.n_features), dtype=np.float64)
    codes = np.zeros((n, len(schema.categorical)), dtype=np.int64)
    cat_j = 0
    for pos, col in enumerate(schema.columns):
        series = table.frame[col.name]
        if col.kind == CATEGORICAL:
            vocab = np.asarray(col.vocabulary, dtype=str)
            values = series.to_numpy(dtype=str)
            idx = np.searchsorted(vocab, values)
            found = (idx < len(vocab)) & (vocab[np.minimum(idx, len(vocab) - 1)] == values)
            if not found.all():
                unseen = sorted(set(values[~found]))
                if not allow_unknown:
                    raise TransformError(f"Categoria não vista na coluna '{col.name}': '{unseen[0]}'")
                logger.warning("Coluna '%s': %s linhas com categorias não vistas %s mapeadas para desconhecido",
                               col.name, int((~found).sum()), unseen[:5])
            idx = np.where(found, idx, len(vocab))
            codes[:, cat_j] = idx
            cells[:, pos] = _scale_codes(idx, len(vocab))
            cat_j += 1
        else:
            values = _to_float(series, col.name)
            if col.constant:
                scaled = np.zeros(n)
            else:
                scaled = (values - col.minimum) / (col.maximum - col.minimum)
            outside = (scaled < 0.0) | (scaled > 1.0)
            if outside.any():
                if not clip:
                    bad = values[outside][0]
                    raise TransformError(f"Valor {bad} fora do intervalo de treino na coluna '{col.name}'")
                logger.warning("Coluna '%s': %s valores fora do intervalo de treino limitados a [0,1]",
                               col.name, int(outside.sum()))
                scaled = np.clip(scaled, 0.0, 1.0)
            cells[:, pos] = scaled

    raw_target = table.frame[schema.target]
    if schema.task == BINARY_CLASSIFICATION:
        target = (raw_target.to_numpy(dtype=str) == schema.positive_label).astype(np.float64)
    else:
        values = _to_float(raw_target, schema.target)
        span = schema.target_max - schema.target_min
        target = (values - schema.target_min) / span if span > 0 else np.zeros(n)

    return EncodedDataset(schema=schema, cells=cells, codes=codes, target=target,
                          raw_index=np.asarray(table.raw_index).copy())


def inverse_transform(dataset: EncodedDataset) -> pd.DataFrame:
    """
    Decodifica um EncodedDataset de volta para valores brutos

    Returns:
        DataFrame com categóricas como strings (None para desconhecidas) e
        contínuas no intervalo original
    """
    schema = dataset.schema
    data: Dict[str, Any] = {}
    cat_j = 0
    for pos, col in enumerate(schema.columns):
        if col.kind == CATEGORICAL:
            idx = dataset.codes[:, cat_j]
            vocab = np.asarray(col.vocabulary, dtype=object)
            data[col.name] = np.where(idx < len(vocab), vocab[np.minimum(idx, len(vocab) - 1)], None)
            cat_j += 1
        else:
            data[col.name] = dataset.cells[:, pos] * (col.maximum - col.minimum) + col.minimum
    return pd.DataFrame(data, columns=schema.feature_names)


# =============================================================================
# Discretização de contínuas
# =============================================================================

@dataclass
class BinSpec:
    """
    Bordas de bins por coluna contínua, no espaço escalado [0,1], ajustadas
    no pré-treino. Intervalos fechados à esquerda; o último também à direita.
    """
    strategy: str
    n_bins: int
    edges: Dict[str, Tuple[float, ...]] = field(default_factory=dict)

    def bin_count(self, column: str) -> int:
        return len(self.edges[column]) - 1

    def raw_edges(self, schema: TableSchema, column: str) -> np.ndarray:
        """Bordas convertidas para as unidades originais da coluna."""
        col = schema.column(column)
        return np.asarray(self.edges[column]) * (col.maximum - col.minimum) + col.minimum

    def to_dict(self) -> Dict[str, Any]:
        return {'strategy': self.strategy, 'n_bins': self.n_bins,
                'edges': {k: list(v) for k, v in sorted(self.edges.items())}}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BinSpec':
        return cls(data['strategy'], int(data['n_bins']),
                   {k: tuple(float(x) for x in v) for k, v in data['edges'].items()})


@dataclass
class BinningConfig:
    """Estratégia e número de bins da variante binned"""
    strategy: str = 'quantile'
    n_bins: int = 10

    def __post_init__(self) -> None:
        if self.strategy not in BIN_STRATEGIES:
            raise ConfigurationError(f"Estratégia de bins inválida '{self.strategy}'. Use uma de {list(BIN_STRATEGIES)}")
        if self.n_bins < 2:
            raise ConfigurationError(f"n_bins deve ser >= 2, recebido {self.n_bins}")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'BinningConfig':
        return cls(**_known_keys(cls, values))


def fit_bins(dataset: EncodedDataset, strategy: str = 'quantile', n_bins: int = 10) -> BinSpec:
    """
    Ajusta bordas de bins (KBinsDiscretizer) para cada coluna contínua

    Args:
        dataset: Split de pré-treino codificado
        strategy: 'quantile' ou 'equal-width'
        n_bins: Número de bins pedido (B >= 2)

    Returns:
        BinSpec com bordas estritamente crescentes
    """
    if strategy not in BIN_STRATEGIES:
        raise DataError(f"Estratégia de bins inválida '{strategy}'. Use uma de {list(BIN_STRATEGIES)}")
    if n_bins < 2:
        raise DataError(f"n_bins deve ser >= 2, recebido {n_bins}")

    spec = BinSpec(strategy=strategy, n_bins=n_bins)
    for pos, col in zip(dataset.schema.num_positions, dataset.schema.continuous):
        values = dataset.cells[:, pos]
        if np.unique(values).size < 2:
            logger.warning("Coluna '%s' com menos de 2 valores distintos: bin único", col.name)
            spec.edges[col.name] = (0.0, 1.0)
            continue
        discretizer = KBinsDiscretizer(n_bins=n_bins, encode='ordinal',
                                       strategy=BIN_STRATEGIES[strategy], subsample=None)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            discretizer.fit(values.reshape(-1, 1))
        for w in caught:
            if issubclass(w.category, UserWarning) and not issubclass(w.category, FutureWarning):
                logger.warning("Coluna '%s': %s", col.name, w.message)
        edges = np.unique(discretizer.bin_edges_[0])
        spec.edges[col.name] = tuple(float(e) for e in edges)
    return spec


def assign_bins(values: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    """Índice do bin de cada valor; valores fora das bordas vão ao bin extremo."""
    inner = np.asarray(edges[1:-1], dtype=np.float64)
    return np.searchsorted(inner, values, side='right').astype(np.int64)


def apply_bins(dataset: EncodedDataset, spec: BinSpec) -> EncodedDataset:
    """
    Atribui bins às colunas contínuas, que passam a ser tratadas como
    categóricas pelo tokenizador (``bin_codes``)
    """
    binned = dataset.take(np.arange(len(dataset)))
    codes = np.zeros((len(dataset), len(dataset.schema.continuous)), dtype=np.int64)
    for j, (pos, col) in enumerate(zip(dataset.schema.num_positions, dataset.schema.continuous)):
        if col.name not in spec.edges:
            raise DataError(f"BinSpec sem bordas para a coluna '{col.name}'")
        codes[:, j] = assign_bins(dataset.cells[:, pos], spec.edges[col.name])
    binned.bins = spec
    binned.bin_codes = codes
    return binned


# =============================================================================
# Particionamento
# =============================================================================

SPLIT_MODES = ('random', 'domain')


@dataclass(frozen=True)
class SplitSpec:
    """Protocolo de particionamento (aleatório 60/10/30 ou por domínio)"""
    mode: str = 'random'
    seed: int = 42
    pretrain_fraction: float = 0.60
    finetune_fraction: float = 0.10
    test_fraction: float = 0.30
    domain_column: Optional[str] = None
    source_values: Tuple[str, ...] = ()
    target_values: Tuple[str, ...] = ()
    target_finetune_fraction: float = 0.10

    def __post_init__(self) -> None:
        if self.mode not in SPLIT_MODES:
            raise SplitError(f"Modo de split inválido '{self.mode}'. Use um de {SPLIT_MODES}")
        total = self.pretrain_fraction + self.finetune_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-12:
            raise SplitError(f"Frações devem somar 1, somam {total}")
        if set(self.source_values) & set(self.target_values):
            raise SplitError("Conjuntos de domínio de origem e alvo devem ser disjuntos")
        if self.mode == 'domain' and (not self.domain_column or not self.source_values):
            raise SplitError("Split por domínio requer 'domain_column' e 'source_values'")
        if not 0.0 < self.target_finetune_fraction < 1.0:
            raise SplitError("target_finetune_fraction deve estar em (0,1)")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode, 'seed': self.seed,
            'pretrain_fraction': self.pretrain_fraction,
            'finetune_fraction': self.finetune_fraction,
            'test_fraction': self.test_fraction,
            'domain_column': self.domain_column,
            'source_values': list(self.source_values),
            'target_values': list(self.target_values),
            'target_finetune_fraction': self.target_finetune_fraction,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SplitSpec':
        data = dict(_known_keys(cls, data))
        for key in ('source_values', 'target_values'):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class SplitIndices:
    """Índices de linha (posições na tabela limpa) de cada partição"""
    pretrain: np.ndarray
    finetune: np.ndarray
    test: np.ndarray
    spec: SplitSpec

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.pretrain), len(self.finetune), len(self.test)

    def to_manifest(self) -> Dict[str, Any]:
        return {
            'seed': self.spec.seed,
            'mode': self.spec.mode,
            'spec': self.spec.to_dict(),
            'pretrain': [int(i) for i in self.pretrain],
            'finetune': [int(i) for i in self.finetune],
            'test': [int(i) for i in self.test],
        }

    @classmethod
    def from_manifest(cls, data: Dict[str, Any]) -> 'SplitIndices':
        return cls(
            pretrain=np.asarray(data['pretrain'], dtype=np.int64),
            finetune=np.asarray(data['finetune'], dtype=np.int64),
            test=np.asarray(data['test'], dtype=np.int64),
            spec=SplitSpec.from_dict(data['spec']),
        )


def split_random(dataset: Union[RawTable, EncodedDataset], spec: SplitSpec) -> SplitIndices:
    """
    Embaralha (semente fixa) e fatia em pré-treino / fine-tuning / teste

    Raises:
        SplitError: Se n < 10
    """
    n = len(dataset)
    if n < 10:
        raise SplitError(f"São necessárias ao menos 10 linhas para o split aleatório, recebido {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_pretrain = int(round(spec.pretrain_fraction * n))
    n_finetune = int(round(spec.finetune_fraction * n))
    split = SplitIndices(
        pretrain=np.sort(perm[:n_pretrain]),
        finetune=np.sort(perm[n_pretrain:n_pretrain + n_finetune]),
        test=np.sort(perm[n_pretrain + n_finetune:]),
        spec=spec,
    )
    logger.info("Split aleatório (seed=%s): %s", spec.seed, split.sizes())
    return split


def _column_values(dataset: Union[RawTable, EncodedDataset], column: str) -> np.ndarray:
    if isinstance(dataset, RawTable):
        if column not in dataset.frame.columns:
            raise SplitError(f"Coluna de domínio '{column}' inexistente")
        return dataset.frame[column].to_numpy(dtype=str)
    try:
        decoded = inverse_transform(dataset)[column]
    except KeyError as exc:
        raise SplitError(f"Coluna de domínio '{column}' inexistente") from exc
    return decoded.to_numpy(dtype=object)


def split_domain(dataset: Union[RawTable, EncodedDataset], spec: SplitSpec) -> SplitIndices:
    """
    Pré-treino = linhas do domínio de origem; domínio alvo dividido 10/90
    (fine-tuning / teste) por embaralhamento com semente

    Raises:
        SplitError: Se origem, alvo, fine-tuning ou teste ficarem vazios
    """
    values = _column_values(dataset, spec.domain_column)
    source_mask = np.isin(values, list(spec.source_values))
    if spec.target_values:
        target_mask = np.isin(values, list(spec.target_values))
    else:
        target_mask = ~source_mask
    source = np.flatnonzero(source_mask)
    target = np.flatnonzero(target_mask)
    if source.size == 0:
        raise SplitError(f"Domínio de origem {list(spec.source_values)} vazio na coluna '{spec.domain_column}'")
    if target.size == 0:
        raise SplitError(f"Domínio alvo vazio na coluna '{spec.domain_column}'")

    perm = np.random.default_rng(spec.seed).permutation(target)
    n_finetune = int(round(spec.target_finetune_fraction * target.size))
    if n_finetune == 0 or n_finetune == target.size:
        raise SplitError(
            f"Domínio alvo com {target.size} linhas não comporta fine-tuning e teste "
            f"(fração {spec.target_finetune_fraction})"
        )
    split = SplitIndices(
        pretrain=source,
        finetune=np.sort(perm[:n_finetune]),
        test=np.sort(perm[n_finetune:]),
        spec=spec,
    )
    logger.info("Split por domínio '%s' (origem=%s): %s",
                spec.domain_column, list(spec.source_values), split.sizes())
    return split


def make_split(dataset: Union[RawTable, EncodedDataset], spec: SplitSpec) -> SplitIndices:
    """Despacha para ``split_random`` ou ``split_domain`` conforme o modo."""
    if spec.mode == 'domain':
        return split_domain(dataset, spec)
    return split_random(dataset, spec)


def kfold(n_rows: Union[int, RawTable, EncodedDataset], k: int = 5, seed: int = 42) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Partições de validação cruzada: a porção i (após embaralhar) é a
    validação do fold i

    Args:
        n_rows: Número de linhas ou dataset
        k: Número de folds (>= 2)
        seed: Semente do embaralhamento

    Returns:
        Lista de k tuplas (índices de treino, índices de validação)
    """
    n = n_rows if isinstance(n_rows, int) else len(n_rows)
    if k < 2:
        raise SplitError(f"k deve ser >= 2, recebido {k}")
    if n < k:
        raise SplitError(f"São necessárias ao menos k={k} linhas, recebido {n}")
    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    return [(np.asarray(tr, dtype=np.int64), np.asarray(va, dtype=np.int64))
            for tr, va in splitter.split(np.zeros((n, 1)))]


# =============================================================================
# Manifestos
# =============================================================================

def save_manifest(split: SplitIndices, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Salva os índices de um split em JSON

    Args:
        split: Split a salvar
        path: Arquivo de destino
        extra: Campos adicionais (ex.: hash do dataset)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = split.to_manifest()
    if extra:
        payload.update(extra)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    logger.info("Manifesto salvo em %s", path)
    return path


def load_manifest(path: Union[str, Path]) -> Tuple[SplitIndices, Dict[str, Any]]:
    """Carrega um manifesto; retorna (split, payload completo)."""
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"Não foi possível ler o manifesto '{path}': {exc}") from exc
    return SplitIndices.from_manifest(payload), payload


PARTITIONS = ('pretrain', 'finetune', 'test')


def save_partition_manifests(
    split: SplitIndices,
    directory: Union[str, Path],
    prefix: str,
    extra: Optional[Dict[str, Any]] = None
) -> List[Path]:
    """
    Salva um manifesto por partição (``<prefix>_<partição>.json``)

    Returns:
        Caminhos dos três arquivos
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for partition in PARTITIONS:
        payload = {
            'partition': partition,
            'seed': split.spec.seed,
            'mode': split.spec.mode,
            'spec': split.spec.to_dict(),
            'indices': [int(i) for i in getattr(split, partition)],
        }
        if extra:
            payload.update(extra)
        path = directory / f'{prefix}_{partition}.json'
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        paths.append(path)
    logger.info("Manifestos salvos em %s: %s", directory, split.sizes())
    return paths


def load_partition_manifests(directory: Union[str, Path], prefix: str) -> SplitIndices:
    """Reconstrói o split a partir dos três manifestos por partição."""
    directory = Path(directory)
    indices: Dict[str, np.ndarray] = {}
    spec = None
    for partition in PARTITIONS:
        path = directory / f'{prefix}_{partition}.json'
        try:
            with open(path, 'r', encoding='utf-8') as f:
                payload = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestionError(f"Não foi possível ler o manifesto '{path}': {exc}") from exc
        indices[partition] = np.asarray(payload['indices'], dtype=np.int64)
        spec = SplitSpec.from_dict(payload['spec'])
    return SplitIndices(spec=spec, **indices)


def load_clean_table(descriptor: DatasetDescriptor) -> RawTable:
    """Carrega o CSV do descritor e remove linhas com valores ausentes."""
    return drop_nulls(load_csv(descriptor.data_path, descriptor))
