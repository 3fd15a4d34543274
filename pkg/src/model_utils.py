"""
TabTransformer: backbone transformer compartilhado, construtores de entrada
das quatro variantes e cabeças de predição e reconstrução.

Variantes:
    vanilla      tokens só das categóricas; contínuas contornam o transformer
    binned       contínuas discretizadas viram tokens categóricos
    vanilla-mlp  contínuas passam por um MLP denso e são concatenadas depois
    mlp-based    cada contínua vira um token via MLP por coluna

Índices categóricos: 0..V-1 vocabulário, V desconhecido, V+1 [MASK].
Índices de bins: 0..B-1 bins, B [MASK].
"""

import io
import json
import logging
import zipfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data_utils import BinSpec, EncodedDataset, TableSchema, apply_bins, schema_hash
from .numerics_utils import (
    ACTIVATIONS,
    ConfigurationError,
    DEFAULT_DTYPE,
    ParameterStore,
    _known_keys,
    activation_backward,
    activation_forward,
    check_heads,
    dropout_backward,
    dropout_forward,
    feed_forward_backward,
    feed_forward_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear,
    linear_backward,
    multi_head_attention_backward,
    multi_head_attention_forward,
)

# Configurar logging
logger = logging.getLogger(__name__)

VARIANTS = ('vanilla', 'binned', 'vanilla-mlp', 'mlp-based')
NUMERIC_MLP_VARIANTS = ('vanilla-mlp', 'mlp-based')
HEAD_PREFIX = 'head.'
WEIGHTS_FORMAT_VERSION = 1
CONSTANT_TOKEN = '__constant__'
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class ModelError(Exception):
    """Exceção base para erros do modelo"""


class BuildError(ModelError):
    """Configuração incompatível com o schema"""


class WeightsError(ModelError):
    """Arquivo de pesos inválido ou incompatível"""


@dataclass
class ModelConfig:
    """Hiperparâmetros da arquitetura"""
    variant: str = 'vanilla'
    d_model: int = 32
    n_heads: int = 8
    n_blocks: int = 6
    ff_hidden: int = 64
    mlp_hidden: Tuple[int, ...] = (64, 32)
    numeric_hidden: Optional[Tuple[int, ...]] = None
    recon_hidden: int = 64
    dropout: float = 0.1
    column_embedding: bool = True
    activation: str = 'gelu'
    head_activation: str = 'relu'

    def __post_init__(self) -> None:
        self.mlp_hidden = tuple(int(w) for w in self.mlp_hidden)
        if self.numeric_hidden is not None:
            self.numeric_hidden = tuple(int(w) for w in self.numeric_hidden)
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"Variante inválida '{self.variant}'. Use uma de {VARIANTS}")
        check_heads(self.d_model, self.n_heads)
        if self.n_blocks < 1:
            raise ConfigurationError(f"n_blocks deve ser >= 1, recebido {self.n_blocks}")
        if self.ff_hidden < 1 or self.recon_hidden < 1 or any(w < 1 for w in self.mlp_hidden):
            raise ConfigurationError("Larguras ocultas devem ser >= 1")
        needs_numeric = self.variant in NUMERIC_MLP_VARIANTS
        if needs_numeric and self.numeric_hidden is None:
            raise ConfigurationError(f"Variante '{self.variant}' requer 'numeric_hidden'")
        if not needs_numeric and self.numeric_hidden is not None:
            raise ConfigurationError(f"Variante '{self.variant}' não usa 'numeric_hidden'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout deve estar em [0,1), recebido {self.dropout}")
        for act in (self.activation, self.head_activation):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"Ativação inválida '{act}'. Use uma de {ACTIVATIONS}")

    @classmethod
    def for_variant(cls, variant: str, **overrides: Any) -> 'ModelConfig':
        """Cria a configuração preenchendo ``numeric_hidden`` conforme a variante."""
        values = dict(overrides)
        if variant in NUMERIC_MLP_VARIANTS:
            values.setdefault('numeric_hidden', (16,))
            if values['numeric_hidden'] is None:
                values['numeric_hidden'] = (16,)
        else:
            values['numeric_hidden'] = None
        return cls(variant=variant, **values)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'ModelConfig':
        values = dict(_known_keys(cls, values))
        variant = values.pop('variant', 'vanilla')
        return cls.for_variant(variant, **values)

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data['mlp_hidden'] = list(self.mlp_hidden)
        data['numeric_hidden'] = None if self.numeric_hidden is None else list(self.numeric_hidden)
        return data


@dataclass
class ModelInput:
    """
    Lote pronto para o modelo.

    cat: códigos categóricos (n, n_cat); num: contínuas escaladas (n, n_num);
    num_mask: indicadores de máscara das contínuas (n, n_num);
    bins: códigos de bins (n, n_num), apenas na variante binned.
    """
    cat: np.ndarray
    num: np.ndarray
    num_mask: np.ndarray
    bins: Optional[np.ndarray] = None

    @property
    def n_rows(self) -> int:
        return int(max(self.cat.shape[0], self.num.shape[0]))

    def take(self, rows: Sequence[int]) -> 'ModelInput':
        rows = np.asarray(rows, dtype=int)
        return ModelInput(self.cat[rows], self.num[rows], self.num_mask[rows],
                          None if self.bins is None else self.bins[rows])


@dataclass
class TokenSet:
    """Tokens (n, T, d) e a identidade de coluna de cada token"""
    tokens: np.ndarray
    columns: Tuple[str, ...]


@dataclass
class BackboneOutput:
    """Tokens contextuais (n, T, d) e vetor achatado para a cabeça de predição"""
    tokens: np.ndarray
    features: np.ndarray
    indicators: np.ndarray


# =============================================================================
# Formas e contagem de parâmetros
# =============================================================================

def _needs_constant_token(config: ModelConfig, schema: TableSchema) -> bool:
    return config.variant in ('vanilla', 'vanilla-mlp') and not schema.categorical


def n_tokens(config: ModelConfig, schema: TableSchema) -> int:
    """Número de tokens do transformer para (schema, variante)."""
    n_cat, n_num = len(schema.categorical), len(schema.continuous)
    if config.variant in ('binned', 'mlp-based'):
        return n_cat + n_num
    return max(n_cat, 1)


def feature_width(config: ModelConfig, schema: TableSchema) -> int:
    """Largura do vetor achatado que entra no MLP de predição."""
    width = n_tokens(config, schema) * config.d_model
    if config.variant == 'vanilla':
        width += len(schema.continuous)
    elif config.variant == 'vanilla-mlp':
        width += config.d_model
    return width


def reconstruction_width(config: ModelConfig, schema: TableSchema) -> int:
    """Entrada da cabeça de reconstrução (vanilla recebe também os indicadores)."""
    width = feature_width(config, schema)
    if config.variant == 'vanilla':
        width += len(schema.continuous)
    return width


def _mlp_count(dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def count_parameters(
    config: ModelConfig,
    schema: TableSchema,
    bins: Optional[BinSpec] = None,
    with_reconstruction: bool = False,
    with_prediction: bool = True
) -> int:
    """
    Contagem fechada de escalares treináveis.

    Embeddings: Σ (V+2)·d das categóricas (+ Σ (B+1)·d dos bins) + T·d das
    embeddings de coluna. Cada bloco: 4·d² + d (atenção) + 4·d (normas) +
    2·d·ff + ff + d (feed-forward).
    """
    d = config.d_model
    n_num = len(schema.continuous)
    t = n_tokens(config, schema)
    total = sum((v + 2) * d for v in schema.vocab_sizes)
    if config.variant == 'binned':
        total += sum((bins.bin_count(c.name) + 1) * d for c in schema.continuous)
    if config.column_embedding:
        total += t * d
    if _needs_constant_token(config, schema):
        total += d
    if config.variant == 'vanilla-mlp':
        total += _mlp_count([2 * n_num, *config.numeric_hidden, d]) + 2 * d
    elif config.variant == 'mlp-based':
        total += n_num * _mlp_count([1, *config.numeric_hidden, d]) + n_num * d
    block = 4 * d * d + d + 4 * d + 2 * d * config.ff_hidden + config.ff_hidden + d
    total += config.n_blocks * block + 2 * d
    if with_prediction:
        total += _mlp_count([feature_width(config, schema), *config.mlp_hidden, 1])
    if with_reconstruction:
        total += _mlp_count([reconstruction_width(config, schema), config.recon_hidden, schema.n_features])
    return total


# =============================================================================
# Construção
# =============================================================================

def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


def _add_mlp(store: ParameterStore, rng: np.random.Generator, prefix: str, dims: Sequence[int]) -> None:
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        store.add(f'{prefix}.layer{i}.weight', _uniform(rng, (fan_in, fan_out), fan_in))
        store.add(f'{prefix}.layer{i}.bias', np.zeros(fan_out))


def _add_norm(store: ParameterStore, prefix: str, d: int) -> None:
    store.add(f'{prefix}.gain', np.ones(d))
    store.add(f'{prefix}.bias', np.zeros(d))


def _check_compatible(config: ModelConfig, schema: TableSchema, bins: Optional[BinSpec]) -> None:
    if schema.n_features == 0:
        raise BuildError("Schema sem colunas de feature")
    n_num = len(schema.continuous)
    if config.variant == 'binned' and n_num:
        if bins is None:
            raise BuildError("Variante binned requer um BinSpec ajustado")
        missing = [c.name for c in schema.continuous if c.name not in bins.edges]
        if missing:
            raise BuildError(f"BinSpec sem bordas para as colunas {missing}")
    if config.variant == 'vanilla-mlp' and n_num == 0:
        raise BuildError("Variante vanilla-mlp requer ao menos uma coluna contínua")


def build(
    config: ModelConfig,
    schema: TableSchema,
    seed: int,
    bins: Optional[BinSpec] = None,
    with_reconstruction: bool = False,
    with_prediction: bool = True
) -> ParameterStore:
    """
    Aloca e inicializa todos os pesos do modelo

    Args:
        config: Configuração da arquitetura
        schema: Schema ajustado
        seed: Semente da inicialização
        bins: BinSpec (obrigatório para a variante binned)
        with_reconstruction: Inclui a cabeça de reconstrução (pré-treino)
        with_prediction: Inclui a cabeça de predição

    Returns:
        ParameterStore inicializado

    Raises:
        BuildError: Configuração incompatível com o schema
    """
    _check_compatible(config, schema, bins)
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    d = config.d_model
    n_num = len(schema.continuous)

    for j, col in enumerate(schema.categorical):
        store.add(f'embed.cat.{j}', _uniform(rng, (col.vocab_size + 2, d), d))
    if config.variant == 'binned':
        for j, col in enumerate(schema.continuous):
            store.add(f'embed.bin.{j}', _uniform(rng, (bins.bin_count(col.name) + 1, d), d))
    if _needs_constant_token(config, schema):
        store.add('embed.constant', _uniform(rng, (1, d), d))
    if config.column_embedding:
        store.add('embed.column', _uniform(rng, (n_tokens(config, schema), d), d))

    if config.variant == 'vanilla-mlp':
        _add_mlp(store, rng, 'numeric.mlp', [2 * n_num, *config.numeric_hidden, d])
        _add_norm(store, 'numeric.norm', d)
    elif config.variant == 'mlp-based':
        dims = [1, *config.numeric_hidden, d]
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            store.add(f'numeric.token.layer{i}.weight', _uniform(rng, (n_num, fan_in, fan_out), fan_in))
            store.add(f'numeric.token.layer{i}.bias', np.zeros((n_num, fan_out)))
        store.add('numeric.token.mask', _uniform(rng, (n_num, d), d))

    for k in range(config.n_blocks):
        prefix = f'encoder.block{k}'
        for name in ('w_q', 'w_k', 'w_v', 'w_o'):
            store.add(f'{prefix}.attn.{name}', _uniform(rng, (d, d), d))
        store.add(f'{prefix}.attn.b_o', np.zeros(d))
        _add_norm(store, f'{prefix}.norm1', d)
        _add_norm(store, f'{prefix}.norm2', d)
        store.add(f'{prefix}.ff.w1', _uniform(rng, (d, config.ff_hidden), d))
        store.add(f'{prefix}.ff.b1', np.zeros(config.ff_hidden))
        store.add(f'{prefix}.ff.w2', _uniform(rng, (config.ff_hidden, d), config.ff_hidden))
        store.add(f'{prefix}.ff.b2', np.zeros(d))
    _add_norm(store, 'encoder.final_norm', d)

    if with_prediction:
        _add_mlp(store, rng, 'head.predict', [feature_width(config, schema), *config.mlp_hidden, 1])
    if with_reconstruction:
        _add_mlp(store, rng, 'head.reconstruct',
                 [reconstruction_width(config, schema), config.recon_hidden, schema.n_features])

    logger.info("Modelo %s construído: %s tokens, %s parâmetros",
                config.variant, n_tokens(config, schema), f"{store.count():,}")
    return store


# =============================================================================
# MLPs auxiliares
# =============================================================================

def _mlp_layers(params: ParameterStore, prefix: str) -> int:
    return len(params.names(f'{prefix}.layer')) // 2


def _mlp_forward(
    x: np.ndarray,
    params: ParameterStore,
    prefix: str,
    activation: str
) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray]]]:
    n_layers = _mlp_layers(params, prefix)
    caches = []
    h = x
    for i in range(n_layers):
        pre = linear(h, params[f'{prefix}.layer{i}.weight'], params[f'{prefix}.layer{i}.bias'])
        caches.append((h, pre))
        h = pre if i == n_layers - 1 else activation_forward(pre, activation)
    return h, caches


def _mlp_backward(
    grad: np.ndarray,
    params: ParameterStore,
    prefix: str,
    caches: List[Tuple[np.ndarray, np.ndarray]],
    activation: str
) -> np.ndarray:
    for i in reversed(range(len(caches))):
        h_in, pre = caches[i]
        if i != len(caches) - 1:
            grad = activation_backward(grad, pre, activation)
        weight = params[f'{prefix}.layer{i}.weight']
        grad, grad_w, grad_b = linear_backward(grad, h_in, weight)
        params.accumulate(f'{prefix}.layer{i}.weight', grad_w)
        params.accumulate(f'{prefix}.layer{i}.bias', grad_b)
    return grad


# =============================================================================
# Modelo
# =============================================================================

class TabTransformer:
    """
    Pesos (ParameterStore) mais as regras de forward/backward da variante.

    O forward retorna um cache; ``backward`` acumula gradientes no store.
    """

    def __init__(
        self,
        config: ModelConfig,
        schema: TableSchema,
        params: ParameterStore,
        bins: Optional[BinSpec] = None
    ):
        _check_compatible(config, schema, bins)
        self.config = config
        self.schema = schema
        self.params = params
        self.bins = bins

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        schema: TableSchema,
        seed: int,
        bins: Optional[BinSpec] = None,
        with_reconstruction: bool = False,
        with_prediction: bool = True
    ) -> 'TabTransformer':
        params = build(config, schema, seed, bins, with_reconstruction, with_prediction)
        return cls(config, schema, params, bins)

    @property
    def n_tokens(self) -> int:
        return n_tokens(self.config, self.schema)

    @property
    def feature_width(self) -> int:
        return feature_width(self.config, self.schema)

    @property
    def token_columns(self) -> Tuple[str, ...]:
        names = [c.name for c in self.schema.categorical]
        if _needs_constant_token(self.config, self.schema):
            names = [CONSTANT_TOKEN]
        if self.config.variant in ('binned', 'mlp-based'):
            names += [c.name for c in self.schema.continuous]
        return tuple(names)

    def schema_hash(self) -> str:
        return schema_hash(self.schema, self.bins if self.config.variant == 'binned' else None)

    def backbone_names(self) -> List[str]:
        return [n for n in self.params.names() if not n.startswith(HEAD_PREFIX)]

    def inputs(self, dataset: EncodedDataset) -> ModelInput:
        """Converte um EncodedDataset em ModelInput sem máscaras."""
        bins = None
        if self.config.variant == 'binned' and self.schema.continuous:
            if dataset.bin_codes is None or dataset.bins is not self.bins:
                dataset = apply_bins(dataset, self.bins)
            bins = dataset.bin_codes
        num = dataset.continuous
        return ModelInput(cat=dataset.codes, num=num, num_mask=np.zeros_like(num), bins=bins)

    # ------------------------------------------------------------------ tokens

    def _lookup(self, name: str, idx: np.ndarray, column: str) -> np.ndarray:
        table = self.params[name]
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            bad = idx[(idx < 0) | (idx >= table.shape[0])][0]
            raise ModelError(f"Índice {bad} fora da tabela de embeddings da coluna '{column}' ({table.shape[0]} linhas)")
        return table[idx]

    def _numeric_tokens_forward(self, inp: ModelInput) -> Tuple[np.ndarray, Dict[str, Any]]:
        prefix = 'numeric.token'
        act = self.config.head_activation
        n_layers = _mlp_layers(self.params, prefix)
        h = inp.num[:, :, None]
        caches = []
        for i in range(n_layers):
            pre = np.einsum('nci,cio->nco', h, self.params[f'{prefix}.layer{i}.weight'])
            pre = pre + self.params[f'{prefix}.layer{i}.bias'][None]
            caches.append((h, pre))
            h = pre if i == n_layers - 1 else activation_forward(pre, act)
        masked = inp.num_mask[:, :, None] > 0
        tokens = np.where(masked, self.params[f'{prefix}.mask'][None], h)
        return tokens, {'layers': caches, 'masked': masked}

    def _numeric_tokens_backward(self, grad: np.ndarray, cache: Dict[str, Any]) -> None:
        prefix = 'numeric.token'
        masked = cache['masked']
        self.params.accumulate(f'{prefix}.mask', np.where(masked, grad, 0.0).sum(axis=0))
        grad = np.where(masked, 0.0, grad)
        caches = cache['layers']
        for i in reversed(range(len(caches))):
            h_in, pre = caches[i]
            if i != len(caches) - 1:
                grad = activation_backward(grad, pre, self.config.head_activation)
            weight = self.params[f'{prefix}.layer{i}.weight']
            self.params.accumulate(f'{prefix}.layer{i}.weight', np.einsum('nci,nco->cio', h_in, grad))
            self.params.accumulate(f'{prefix}.layer{i}.bias', grad.sum(axis=0))
            grad = np.einsum('nco,cio->nci', grad, weight)

    def _dense_numeric_forward(self, inp: ModelInput) -> Tuple[np.ndarray, Dict[str, Any]]:
        x = np.concatenate([inp.num, inp.num_mask], axis=1)
        hidden, mlp_cache = _mlp_forward(x, self.params, 'numeric.mlp', self.config.head_activation)
        dense, norm_cache = layer_norm_forward(hidden, self.params['numeric.norm.gain'], self.params['numeric.norm.bias'])
        return dense, {'mlp': mlp_cache, 'norm': norm_cache}

    def _dense_numeric_backward(self, grad: np.ndarray, cache: Dict[str, Any]) -> None:
        grad, g_gain, g_bias = layer_norm_backward(grad, cache['norm'])
        self.params.accumulate('numeric.norm.gain', g_gain)
        self.params.accumulate('numeric.norm.bias', g_bias)
        _mlp_backward(grad, self.params, 'numeric.mlp', cache['mlp'], self.config.head_activation)

    def dense_numeric(self, inp: ModelInput) -> np.ndarray:
        """VM-TT: vetor denso normalizado (n, d). MLP-TT: tokens numéricos (n, n_num, d)."""
        if self.config.variant == 'vanilla-mlp':
            return self._dense_numeric_forward(inp)[0]
        if self.config.variant == 'mlp-based':
            return self._numeric_tokens_forward(inp)[0]
        raise ModelError(f"Variante '{self.config.variant}' não possui projeção numérica")

    def _embed_forward(self, inp: ModelInput) -> Tuple[np.ndarray, Dict[str, Any]]:
        n = inp.n_rows
        parts = []
        cache: Dict[str, Any] = {'n': n}
        for j, col in enumerate(self.schema.categorical):
            parts.append(self._lookup(f'embed.cat.{j}', inp.cat[:, j], col.name)[:, None, :])
        if _needs_constant_token(self.config, self.schema):
            parts.append(np.broadcast_to(self.params['embed.constant'], (n, 1, self.config.d_model)))
        if self.config.variant == 'binned':
            for j, col in enumerate(self.schema.continuous):
                parts.append(self._lookup(f'embed.bin.{j}', inp.bins[:, j], col.name)[:, None, :])
        elif self.config.variant == 'mlp-based' and self.schema.continuous:
            numeric, cache['numeric'] = self._numeric_tokens_forward(inp)
            parts.append(numeric)
        tokens = np.concatenate(parts, axis=1)
        if self.config.column_embedding:
            tokens = tokens + self.params['embed.column'][None]
        return tokens, cache

    def _embed_backward(self, grad: np.ndarray, inp: ModelInput, cache: Dict[str, Any]) -> None:
        if self.config.column_embedding:
            self.params.accumulate('embed.column', grad.sum(axis=0))
        t = 0
        for j, _ in enumerate(self.schema.categorical):
            name = f'embed.cat.{j}'
            g = np.zeros_like(self.params[name])
            np.add.at(g, inp.cat[:, j], grad[:, t])
            self.params.accumulate(name, g)
            t += 1
        if _needs_constant_token(self.config, self.schema):
            self.params.accumulate('embed.constant', grad[:, t].sum(axis=0, keepdims=True))
            t += 1
        if self.config.variant == 'binned':
            for j, _ in enumerate(self.schema.continuous):
                name = f'embed.bin.{j}'
                g = np.zeros_like(self.params[name])
                np.add.at(g, inp.bins[:, j], grad[:, t])
                self.params.accumulate(name, g)
                t += 1
        elif 'numeric' in cache:
            self._numeric_tokens_backward(grad[:, t:], cache['numeric'])

    def tokens(self, inp: ModelInput) -> TokenSet:
        return TokenSet(self._embed_forward(inp)[0], self.token_columns)

    # ---------------------------------------------------------------- backbone

    def _block_params(self, k: int, group: str) -> Dict[str, np.ndarray]:
        prefix = f'encoder.block{k}.{group}.'
        return {n[len(prefix):]: self.params[n] for n in self.params.names(prefix)}

    def backbone_forward(
        self,
        tokens: np.ndarray,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None
    ) -> Tuple[np.ndarray, Dict[str, Any]]:
        """
        N blocos pré-norma: x + drop(MHA(LN(x))) e depois + drop(FFN(LN(·))),
        seguidos de uma normalização final.

        Raises:
            ModelError: Se algum bloco produzir NaN/Inf
        """
        cfg = self.config
        x = tokens
        blocks = []
        for k in range(cfg.n_blocks):
            p = f'encoder.block{k}'
            ln1, c_ln1 = layer_norm_forward(x, self.params[f'{p}.norm1.gain'], self.params[f'{p}.norm1.bias'])
            att, c_att = multi_head_attention_forward(ln1, self._block_params(k, 'attn'), cfg.n_heads)
            att, keep1 = dropout_forward(att, cfg.dropout, rng, train_mode)
            x1 = x + att
            ln2, c_ln2 = layer_norm_forward(x1, self.params[f'{p}.norm2.gain'], self.params[f'{p}.norm2.bias'])
            ff, c_ff = feed_forward_forward(ln2, self.params[f'{p}.ff.w1'], self.params[f'{p}.ff.b1'],
                                            self.params[f'{p}.ff.w2'], self.params[f'{p}.ff.b2'], cfg.activation)
            ff, keep2 = dropout_forward(ff, cfg.dropout, rng, train_mode)
            x = x1 + ff
            if not np.all(np.isfinite(x)):
                raise ModelError(f"Valores não finitos na saída do bloco {k}")
            blocks.append((c_ln1, c_att, keep1, c_ln2, c_ff, keep2))
        out, c_final = layer_norm_forward(x, self.params['encoder.final_norm.gain'],
                                          self.params['encoder.final_norm.bias'])
        return out, {'blocks': blocks, 'final': c_final}

    def _backbone_backward(self, grad: np.ndarray, cache: Dict[str, Any]) -> np.ndarray:
        grad, g_gain, g_bias = layer_norm_backward(grad, cache['final'])
        self.params.accumulate('encoder.final_norm.gain', g_gain)
        self.params.accumulate('encoder.final_norm.bias', g_bias)
        for k in reversed(range(len(cache['blocks']))):
            p = f'encoder.block{k}'
            c_ln1, c_att, keep1, c_ln2, c_ff, keep2 = cache['blocks'][k]
            g_ff = dropout_backward(grad, keep2)
            g_ln2, ff_grads = feed_forward_backward(g_ff, c_ff)
            for name, g in ff_grads.items():
                self.params.accumulate(f'{p}.ff.{name}', g)
            g_x1, g_gain, g_bias = layer_norm_backward(g_ln2, c_ln2)
            self.params.accumulate(f'{p}.norm2.gain', g_gain)
            self.params.accumulate(f'{p}.norm2.bias', g_bias)
            g_x1 = grad + g_x1
            g_att = dropout_backward(g_x1, keep1)
            g_ln1, att_grads = multi_head_attention_backward(g_att, self._block_params(k, 'attn'), c_att)
            for name, g in att_grads.items():
                self.params.accumulate(f'{p}.attn.{name}', g)
            g_x, g_gain, g_bias = layer_norm_backward(g_ln1, c_ln1)
            self.params.accumulate(f'{p}.norm1.gain', g_gain)
            self.params.accumulate(f'{p}.norm1.bias', g_bias)
            grad = g_x1 + g_x
        return grad

    def features_forward(
        self,
        inp: ModelInput,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None
    ) -> Tuple[BackboneOutput, Dict[str, Any]]:
        """Tokens → transformer → vetor achatado (+ contínuas ou vetor denso)."""
        tokens, c_embed = self._embed_forward(inp)
        contextual, c_backbone = self.backbone_forward(tokens, train_mode, rng)
        n = inp.n_rows
        parts = [contextual.reshape(n, -1)]
        cache: Dict[str, Any] = {'inp': inp, 'embed': c_embed, 'backbone': c_backbone}
        if self.config.variant == 'vanilla':
            parts.append(inp.num)
        elif self.config.variant == 'vanilla-mlp':
            dense, cache['dense'] = self._dense_numeric_forward(inp)
            parts.append(dense)
        features = np.concatenate(parts, axis=1)
        return BackboneOutput(contextual, features, inp.num_mask), cache

    def _features_backward(self, grad: np.ndarray, cache: Dict[str, Any]) -> None:
        n = grad.shape[0]
        flat = self.n_tokens * self.config.d_model
        if 'dense' in cache:
            self._dense_numeric_backward(grad[:, flat:], cache['dense'])
        g_tokens = grad[:, :flat].reshape(n, self.n_tokens, self.config.d_model)
        g_tokens = self._backbone_backward(g_tokens, cache['backbone'])
        self._embed_backward(g_tokens, cache['inp'], cache['embed'])

    # ------------------------------------------------------------------- heads

    def _head_input(self, head: str, out: BackboneOutput) -> np.ndarray:
        if head == 'reconstruct' and self.config.variant == 'vanilla':
            return np.concatenate([out.features, out.indicators], axis=1)
        return out.features

    def predict(self, out: BackboneOutput) -> np.ndarray:
        """Um logit (classificação) ou um real (regressão) por linha."""
        y, _ = _mlp_forward(out.features, self.params, 'head.predict', self.config.head_activation)
        return y[:, 0]

    def reconstruct(self, out: BackboneOutput) -> np.ndarray:
        """Uma estimativa escalarizada por coluna de feature, (n, n_features)."""
        if not self.params.names('head.reconstruct'):
            raise ModelError("Cabeça de reconstrução não construída")
        x = self._head_input('reconstruct', out)
        return _mlp_forward(x, self.params, 'head.reconstruct', self.config.head_activation)[0]

    def forward(
        self,
        inp: ModelInput,
        head: str = 'predict',
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None
    ) -> Tuple[np.ndarray, Dict[str, Any]]:
        """
        Forward completo até a cabeça pedida ('predict' ou 'reconstruct').

        Returns:
            Tupla (saída, cache para ``backward``)
        """
        if head not in ('predict', 'reconstruct'):
            raise ModelError(f"Cabeça inválida '{head}'")
        prefix = f'head.{head}'
        if not self.params.names(prefix):
            raise ModelError(f"Cabeça '{head}' não construída")
        out, c_features = self.features_forward(inp, train_mode, rng)
        y, c_head = _mlp_forward(self._head_input(head, out), self.params, prefix, self.config.head_activation)
        if head == 'predict':
            y = y[:, 0]
        return y, {'features': c_features, 'head': c_head, 'name': head}

    def backward(self, grad_out: np.ndarray, cache: Dict[str, Any]) -> None:
        """Propaga o gradiente da saída e acumula nos parâmetros."""
        head = cache['name']
        if head == 'predict':
            grad_out = grad_out[:, None]
        grad = _mlp_backward(grad_out, self.params, f'head.{head}', cache['head'], self.config.head_activation)
        self._features_backward(grad[:, :self.feature_width], cache['features'])

    def predict_dataset(self, dataset: EncodedDataset, batch_size: int = 1024) -> np.ndarray:
        """Predições em modo de avaliação, por lotes."""
        inp = self.inputs(dataset)
        outputs = []
        for start in range(0, len(dataset), batch_size):
            batch = inp.take(np.arange(start, min(start + batch_size, len(dataset))))
            outputs.append(self.forward(batch, 'predict', train_mode=False)[0])
        return np.concatenate(outputs) if outputs else np.zeros(0)


# =============================================================================
# Funções de conveniência por operação
# =============================================================================

def tokens_vanilla(model: TabTransformer, inp: ModelInput) -> TokenSet:
    """Um token por coluna categórica (lookup + embedding de coluna)."""
    if model.config.variant not in ('vanilla', 'vanilla-mlp'):
        raise ModelError(f"tokens_vanilla não se aplica à variante '{model.config.variant}'")
    return model.tokens(inp)


def tokens_binned(model: TabTransformer, inp: ModelInput) -> TokenSet:
    """Tokens categóricos seguidos de um token por coluna contínua discretizada."""
    if model.config.variant != 'binned':
        raise ModelError(f"tokens_binned não se aplica à variante '{model.config.variant}'")
    return model.tokens(inp)


def dense_numeric(model: TabTransformer, inp: ModelInput) -> np.ndarray:
    return model.dense_numeric(inp)


def backbone_forward(
    model: TabTransformer,
    tokens: TokenSet,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    return model.backbone_forward(tokens.tokens, train_mode, rng)[0]


def predict(model: TabTransformer, features: BackboneOutput) -> np.ndarray:
    return model.predict(features)


def reconstruct(model: TabTransformer, features: BackboneOutput) -> np.ndarray:
    return model.reconstruct(features)


# =============================================================================
# Persistência de pesos
# =============================================================================

def _write_npz(path: Path, arrays: Dict[str, np.ndarray]) -> None:
    """npz com datas fixas nas entradas do zip (saída byte a byte reprodutível)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, 'w', compression=zipfile.ZIP_STORED) as zf:
        for key, arr in arrays.items():
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f'{key}.npy', date_time=_ZIP_EPOCH), buffer.getvalue())


def save_weights(model: TabTransformer, path: Union[str, Path], backbone_only: bool = False) -> Path:
    """
    Salva os pesos em um contêiner .npz versionado

    Args:
        model: Modelo
        path: Arquivo de destino
        backbone_only: Se True, omite parâmetros das cabeças

    Returns:
        Caminho escrito
    """
    path = Path(path)
    names = model.backbone_names() if backbone_only else model.params.names()
    meta = {
        'format_version': WEIGHTS_FORMAT_VERSION,
        'config': model.config.to_dict(),
        'schema_hash': model.schema_hash(),
        'parameters': [[n, list(model.params[n].shape)] for n in names],
    }
    arrays = {'__meta__': np.array(json.dumps(meta, sort_keys=True))}
    for name in names:
        arrays[name] = model.params[name].astype('<f8')
    _write_npz(path, arrays)
    logger.info("Pesos salvos em %s (%s parâmetros)", path, len(names))
    return path


def load_weights(model: TabTransformer, path: Union[str, Path], backbone_only: bool = False) -> TabTransformer:
    """
    Carrega pesos sobre um modelo já construído

    Args:
        model: Modelo destino (pesos frescos)
        path: Arquivo .npz
        backbone_only: Se True, carrega só parâmetros fora de ``head.``

    Returns:
        O próprio modelo, com os valores sobrescritos

    Raises:
        WeightsError: Versão, variante, hash de schema ou forma incompatíveis
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data['__meta__']))
            stored = {name: data[name] for name, _ in meta['parameters']}
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise WeightsError(f"Não foi possível ler pesos de '{path}': {exc}") from exc

    if meta.get('format_version') != WEIGHTS_FORMAT_VERSION:
        raise WeightsError(f"Versão de formato não suportada: {meta.get('format_version')}")
    variant = meta['config'].get('variant')
    if variant != model.config.variant:
        raise WeightsError(f"Variante divergente: arquivo '{variant}', modelo '{model.config.variant}'")
    if meta['schema_hash'] != model.schema_hash():
        raise WeightsError(f"Hash de schema divergente para '{path}'")

    targets = model.backbone_names() if backbone_only else model.params.names()
    for name in targets:
        if name not in stored:
            raise WeightsError(f"Parâmetro '{name}' ausente em '{path}'")
        if stored[name].shape != model.params[name].shape:
            raise WeightsError(
                f"Forma divergente para '{name}': arquivo {stored[name].shape}, modelo {model.params[name].shape}"
            )
    for name in targets:
        model.params.set_value(name, stored[name])
    logger.info("Pesos carregados de %s (%s parâmetros)", path, len(targets))
    return model
