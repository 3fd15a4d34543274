"""
Utilitários numéricos: primitivas de atenção, normalização e feed-forward
com gradientes derivados à mão, além do otimizador AdamW e do agendamento
de taxa de aprendizado por cosseno.

Cada primitiva diferenciável segue o par ``*_forward`` (retorna saída e cache)
e ``*_backward`` (recebe o gradiente da saída e o cache). As funções públicas
sem sufixo retornam apenas a saída.
"""

import logging
import math
from dataclasses import dataclass, fields
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

# Configurar logging
logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
ACTIVATIONS = ('relu', 'gelu')


class NumericsError(Exception):
    """Exceção base para erros numéricos"""


class DimensionError(NumericsError, ValueError):
    """Formas incompatíveis entre tensores"""


class ConfigurationError(NumericsError, ValueError):
    """Configuração inválida"""


class TrainingError(NumericsError, RuntimeError):
    """Falha durante o treinamento (NaN/Inf em gradientes ou perdas)"""


def as_tensor(data: Any, dtype: Any = DEFAULT_DTYPE) -> np.ndarray:
    """
    Converte dados para um array contíguo em ordem row-major.

    Args:
        data: Valores (lista, array, escalar)
        dtype: Tipo numérico (64 bits por padrão)

    Returns:
        Array numpy contíguo
    """
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if arr.ndim > 0 and any(extent <= 0 for extent in arr.shape):
        raise DimensionError(f"Extensões devem ser positivas, recebido shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, name: str) -> np.ndarray:
    """
    Garante que todos os valores são finitos.

    Raises:
        NumericsError: Se houver NaN ou Inf
    """
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"Valores não finitos (NaN/Inf) em '{name}'")
    return x


# =============================================================================
# Álgebra básica
# =============================================================================

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Produto matricial de a (m×k) por b (k×n).

    Raises:
        DimensionError: Se as extensões internas não coincidirem
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul incompatível: {a.shape} · {b.shape}")
    return a @ b


def matmul_backward(
    grad_out: np.ndarray,
    a: np.ndarray,
    b: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Retorna (grad_a, grad_b) = (grad_out·bᵀ, aᵀ·grad_out)."""
    return grad_out @ b.T, a.T @ grad_out


def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Transformação afim x·W + b aplicada sobre a última dimensão.

    Args:
        x: Tensor (..., entrada)
        weight: Matriz (entrada, saída)
        bias: Vetor (saída) opcional
    """
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear incompatível: {x.shape} · {weight.shape}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def linear_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    weight: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Retorna (grad_x, grad_weight, grad_bias) para ``linear``."""
    flat_x = x.reshape(-1, x.shape[-1])
    flat_g = grad_out.reshape(-1, grad_out.shape[-1])
    grad_x = grad_out @ weight.T
    grad_w = flat_x.T @ flat_g
    grad_b = flat_g.sum(axis=0)
    return grad_x, grad_w, grad_b


# =============================================================================
# Softmax e atenção
# =============================================================================

def softmax_rows(x: np.ndarray) -> np.ndarray:
    """
    Softmax estável na última dimensão (subtrai o máximo de cada linha).

    Raises:
        DimensionError: Se a última extensão for vazia
    """
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax requer última extensão >= 1, recebido {x.shape}")
    shifted = x - x.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def softmax_backward(grad_out: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradiente da softmax dado a saída ``probs``."""
    inner = (grad_out * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def scaled_dot_attention_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    softmax(Q·Kᵀ/√d_k)·V sobre as duas últimas dimensões, com dimensões de
    lote opcionais à esquerda.

    Raises:
        DimensionError: Se d_k de Q e K ou o número de tokens de K e V divergirem
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"d_k divergente entre Q {q.shape} e K {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"Número de tokens divergente entre K {k.shape} e V {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    weights = softmax_rows(scores)
    out = weights @ v
    return out, {'q': q, 'k': k, 'v': v, 'weights': weights, 'scale': scale}


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Atenção por produto escalar escalado (apenas a saída)."""
    return scaled_dot_attention_forward(q, k, v)[0]


def scaled_dot_attention_backward(
    grad_out: np.ndarray,
    cache: Dict[str, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Retorna (grad_q, grad_k, grad_v)."""
    q, k, v, weights, scale = cache['q'], cache['k'], cache['v'], cache['weights'], cache['scale']
    grad_weights = grad_out @ np.swapaxes(v, -1, -2)
    grad_v = np.swapaxes(weights, -1, -2) @ grad_out
    grad_scores = softmax_backward(grad_weights, weights) * scale
    grad_q = grad_scores @ k
    grad_k = np.swapaxes(grad_scores, -1, -2) @ q
    return grad_q, grad_k, grad_v


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """(..., t, d) -> (..., h, t, d/h)"""
    *lead, t, d = x.shape
    return np.moveaxis(x.reshape(*lead, t, n_heads, d // n_heads), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    """(..., h, t, d/h) -> (..., t, d)"""
    *lead, h, t, dk = x.shape
    return np.moveaxis(x, -3, -2).reshape(*lead, t, h * dk)


def check_heads(d_model: int, n_heads: int) -> None:
    """
    Valida a divisão de d_model entre as cabeças.

    Raises:
        ConfigurationError: Se d_model % n_heads != 0
    """
    if n_heads < 1 or d_model % n_heads != 0:
        raise ConfigurationError(f"d_model={d_model} não é divisível por n_heads={n_heads}")


def multi_head_attention_forward(
    x: np.ndarray,
    params: Dict[str, np.ndarray],
    n_heads: int
) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Auto-atenção multi-cabeça: projeções Q, K, V de x, atenção por cabeça
    (d_k = d/h), concatenação e projeção de saída W_o (+ b_o).

    Args:
        x: Tensor (..., t, d)
        params: Dicionário com 'w_q', 'w_k', 'w_v', 'w_o' (d×d) e 'b_o' (d)
        n_heads: Número de cabeças
    """
    check_heads(x.shape[-1], n_heads)
    q = _split_heads(x @ params['w_q'], n_heads)
    k = _split_heads(x @ params['w_k'], n_heads)
    v = _split_heads(x @ params['w_v'], n_heads)
    heads, att_cache = scaled_dot_attention_forward(q, k, v)
    concat = _merge_heads(heads)
    out = linear(concat, params['w_o'], params['b_o'])
    return out, {'x': x, 'concat': concat, 'att': att_cache, 'n_heads': n_heads}


def multi_head_attention(x: np.ndarray, params: Dict[str, np.ndarray], n_heads: int) -> np.ndarray:
    """Auto-atenção multi-cabeça (apenas a saída)."""
    return multi_head_attention_forward(x, params, n_heads)[0]


def multi_head_attention_backward(
    grad_out: np.ndarray,
    params: Dict[str, np.ndarray],
    cache: Dict[str, Any]
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Retorna (grad_x, gradientes por nome de parâmetro)."""
    x, concat, n_heads = cache['x'], cache['concat'], cache['n_heads']
    grad_concat, grad_wo, grad_bo = linear_backward(grad_out, concat, params['w_o'])
    grad_heads = _split_heads(grad_concat, n_heads)
    grad_q, grad_k, grad_v = scaled_dot_attention_backward(grad_heads, cache['att'])
    grads = {'w_o': grad_wo, 'b_o': grad_bo}
    grad_x = np.zeros_like(x)
    for name, g in (('w_q', grad_q), ('w_k', grad_k), ('w_v', grad_v)):
        merged = _merge_heads(g)
        gx, gw, _ = linear_backward(merged, x, params[name])
        grad_x += gx
        grads[name] = gw
    return grad_x, grads


# =============================================================================
# Normalização, ativações, feed-forward e dropout
# =============================================================================

def layer_norm_forward(
    x: np.ndarray,
    gain: np.ndarray,
    bias: np.ndarray,
    eps: float = LAYER_NORM_EPS
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Normalização por linha (média zero, variância unitária) seguida de
    transformação afim.
    """
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise DimensionError(f"layer_norm incompatível: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    return gain * x_hat + bias, {'x_hat': x_hat, 'inv_std': inv_std, 'gain': gain}


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Layer normalization (apenas a saída)."""
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_backward(
    grad_out: np.ndarray,
    cache: Dict[str, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Retorna (grad_x, grad_gain, grad_bias)."""
    x_hat, inv_std, gain = cache['x_hat'], cache['inv_std'], cache['gain']
    d = x_hat.shape[-1]
    grad_xhat = grad_out * gain
    grad_x = inv_std * (
        grad_xhat
        - grad_xhat.mean(axis=-1, keepdims=True)
        - x_hat * (grad_xhat * x_hat).sum(axis=-1, keepdims=True) / d
    )
    flat = grad_out.reshape(-1, d)
    grad_gain = (flat * x_hat.reshape(-1, d)).sum(axis=0)
    grad_bias = flat.sum(axis=0)
    return grad_x, grad_gain, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU exata: x·Φ(x)."""
    return 0.5 * x * (1.0 + special.erf(x / math.sqrt(2.0)))


def activation_forward(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'relu':
        return relu(x)
    if activation == 'gelu':
        return gelu(x)
    raise ConfigurationError(f"Ativação inválida: {activation}. Use uma de {ACTIVATIONS}")


def activation_backward(grad_out: np.ndarray, x: np.ndarray, activation: str) -> np.ndarray:
    """Gradiente da ativação avaliado na entrada ``x``."""
    if activation == 'relu':
        return grad_out * (x > 0)
    if activation == 'gelu':
        cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return grad_out * (cdf + x * pdf)
    raise ConfigurationError(f"Ativação inválida: {activation}. Use uma de {ACTIVATIONS}")


def feed_forward_forward(
    x: np.ndarray,
    w1: np.ndarray,
    b1: np.ndarray,
    w2: np.ndarray,
    b2: np.ndarray,
    activation: str = 'gelu'
) -> Tuple[np.ndarray, Dict[str, Any]]:
    """W2·act(W1·x + b1) + b2 aplicado a cada token."""
    pre = linear(x, w1, b1)
    hidden = activation_forward(pre, activation)
    out = linear(hidden, w2, b2)
    return out, {'x': x, 'pre': pre, 'hidden': hidden, 'w1': w1, 'w2': w2, 'activation': activation}


def feed_forward(
    x: np.ndarray,
    w1: np.ndarray,
    b1: np.ndarray,
    w2: np.ndarray,
    b2: np.ndarray,
    activation: str = 'gelu'
) -> np.ndarray:
    """Feed-forward ponto a ponto (apenas a saída)."""
    return feed_forward_forward(x, w1, b1, w2, b2, activation)[0]


def feed_forward_backward(
    grad_out: np.ndarray,
    cache: Dict[str, Any]
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Retorna (grad_x, {'w1','b1','w2','b2'})."""
    grad_hidden, grad_w2, grad_b2 = linear_backward(grad_out, cache['hidden'], cache['w2'])
    grad_pre = activation_backward(grad_hidden, cache['pre'], cache['activation'])
    grad_x, grad_w1, grad_b1 = linear_backward(grad_pre, cache['x'], cache['w1'])
    return grad_x, {'w1': grad_w1, 'b1': grad_b1, 'w2': grad_w2, 'b2': grad_b2}


def dropout_forward(
    x: np.ndarray,
    rate: float,
    rng: Optional[np.random.Generator],
    train_mode: bool
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Dropout invertido. Em modo de avaliação (ou taxa zero) é a identidade.

    Returns:
        Tupla (saída, máscara escalada ou None)
    """
    if not train_mode or rate <= 0.0:
        return x, None
    if rng is None:
        raise ConfigurationError("Dropout em modo de treino requer um gerador aleatório")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(grad_out: np.ndarray, keep: Optional[np.ndarray]) -> np.ndarray:
    return grad_out if keep is None else grad_out * keep


# =============================================================================
# Armazenamento de parâmetros
# =============================================================================

@dataclass
class Parameter:
    """Valor, acumulador de gradiente e momentos do otimizador de um parâmetro"""
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParameterStore:
    """
    Mapa ordenado (lexicograficamente) de nome pontuado para parâmetro.

    Valor, gradiente e os dois momentos compartilham a mesma forma.
    Parâmetros congelados não são atualizados pelo otimizador.
    """

    def __init__(self) -> None:
        self._params: Dict[str, Parameter] = {}
        self.frozen: set = set()

    def add(self, name: str, value: np.ndarray) -> None:
        """
        Registra um novo parâmetro.

        Raises:
            ConfigurationError: Se o nome já existir
        """
        if name in self._params:
            raise ConfigurationError(f"Parâmetro duplicado: {name}")
        value = np.array(value, dtype=DEFAULT_DTYPE, copy=True)
        self._params[name] = Parameter(
            value=value,
            grad=np.zeros_like(value),
            m=np.zeros_like(value),
            v=np.zeros_like(value)
        )

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def names(self, prefix: Optional[str] = None) -> List[str]:
        """Nomes em ordem lexicográfica, opcionalmente filtrados por prefixo."""
        names = sorted(self._params)
        if prefix is not None:
            names = [n for n in names if n.startswith(prefix)]
        return names

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad

    def set_value(self, name: str, value: np.ndarray) -> None:
        """
        Substitui o valor de um parâmetro existente.

        Raises:
            DimensionError: Se a forma divergir
        """
        current = self._params[name].value
        value = np.asarray(value, dtype=DEFAULT_DTYPE)
        if value.shape != current.shape:
            raise DimensionError(f"Forma divergente para '{name}': {value.shape} != {current.shape}")
        current[...] = value

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        """Soma ``grad`` ao acumulador do parâmetro."""
        target = self._params[name].grad
        if grad.shape != target.shape:
            raise DimensionError(f"Gradiente com forma divergente para '{name}': {grad.shape} != {target.shape}")
        target += grad

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad.fill(0.0)

    def count(self, prefix: Optional[str] = None) -> int:
        """Número total de escalares treináveis."""
        return int(sum(self._params[n].value.size for n in self.names(prefix)))

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {n: tuple(self._params[n].value.shape) for n in self.names()}

    def freeze(self, prefixes: Sequence[str]) -> None:
        """Congela todos os parâmetros cujo nome começa com algum dos prefixos."""
        for name in self.names():
            if any(name.startswith(p) for p in prefixes):
                self.frozen.add(name)

    def copy(self) -> 'ParameterStore':
        clone = ParameterStore()
        for name in self.names():
            p = self._params[name]
            clone._params[name] = Parameter(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy())
        clone.frozen = set(self.frozen)
        return clone


# =============================================================================
# Otimizador e agendamento
# =============================================================================

@dataclass
class OptimizerConfig:
    """Hiperparâmetros do AdamW com decaimento por cosseno"""
    initial_lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    total_steps: int = 1
    alpha: float = 0.0

    def __post_init__(self) -> None:
        if self.initial_lr <= 0:
            raise ConfigurationError(f"initial_lr deve ser > 0, recebido {self.initial_lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay deve ser >= 0, recebido {self.weight_decay}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigurationError(f"betas devem estar em (0,1), recebido ({self.beta1}, {self.beta2})")
        if self.epsilon <= 0:
            raise ConfigurationError(f"epsilon deve ser > 0, recebido {self.epsilon}")
        if int(self.total_steps) < 1:
            raise ConfigurationError(f"total_steps deve ser >= 1, recebido {self.total_steps}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha deve estar em [0,1], recebido {self.alpha}")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'OptimizerConfig':
        return cls(**_known_keys(cls, values))

    def with_total_steps(self, total_steps: int) -> 'OptimizerConfig':
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data['total_steps'] = int(total_steps)
        return OptimizerConfig(**data)


def _known_keys(cls: Any, values: Dict[str, Any]) -> Dict[str, Any]:
    """Valida chaves de um dicionário de configuração contra os campos do dataclass."""
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigurationError(
            f"Chaves desconhecidas para {cls.__name__}: {sorted(unknown)}. "
            f"Chaves válidas: {sorted(allowed)}"
        )
    return dict(values)


def cosine_decay_lr(cfg: OptimizerConfig, step: int) -> float:
    """
    lr = initial_lr·(alpha + (1−alpha)·0.5·(1 + cos(π·step/total_steps))).

    Passos além de total_steps são limitados ao valor final.
    """
    step = min(max(int(step), 0), cfg.total_steps)
    cosine = 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps))
    return cfg.initial_lr * (cfg.alpha + (1.0 - cfg.alpha) * cosine)


def adamw_step(store: ParameterStore, cfg: OptimizerConfig, step: int, lr: float) -> None:
    """
    Um passo do AdamW: decaimento de pesos desacoplado, momentos com correção
    de viés e zeragem dos gradientes ao final.

    Raises:
        ConfigurationError: Se step < 1
        TrainingError: Se algum gradiente contiver NaN/Inf
    """
    if step < 1:
        raise ConfigurationError(f"step deve ser >= 1, recebido {step}")
    for name in store.names():
        if not np.all(np.isfinite(store.grad(name))):
            raise TrainingError(f"Gradiente não finito no parâmetro '{name}'")

    correction1 = 1.0 - cfg.beta1 ** step
    correction2 = 1.0 - cfg.beta2 ** step
    for name in store.names():
        p = store.parameter(name)
        if name in store.frozen:
            p.grad.fill(0.0)
            continue
        if cfg.weight_decay:
            p.value -= lr * cfg.weight_decay * p.value
        p.m *= cfg.beta1
        p.m += (1.0 - cfg.beta1) * p.grad
        p.v *= cfg.beta2
        p.v += (1.0 - cfg.beta2) * p.grad * p.grad
        m_hat = p.m / correction1
        v_hat = p.v / correction2
        p.value -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        p.grad.fill(0.0)


# =============================================================================
# Verificação de gradientes
# =============================================================================

def finite_difference_gradient(
    fn: Callable[[], float],
    x: np.ndarray,
    h: float = 1e-6
) -> np.ndarray:
    """
    Gradiente numérico por diferenças centrais, perturbando ``x`` in-place.

    Args:
        fn: Função sem argumentos que lê ``x`` e retorna um escalar
        x: Array a perturbar
        h: Passo da diferença

    Returns:
        Array com a mesma forma de ``x``
    """
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=['multi_index'], op_flags=[['readwrite']])
    for _ in it:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + h
        plus = fn()
        x[idx] = original - h
        minus = fn()
        x[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analítico − numérico| / max(1, |analítico|)."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
