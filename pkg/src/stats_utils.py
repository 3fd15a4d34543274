"""
Utilitários para análises estatísticas dos resultados de experimentos
"""

import logging
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

# Configurar logging
logger = logging.getLogger(__name__)


def confidence_interval(
    data: Sequence[float],
    confidence: float = 0.95
) -> Tuple[float, float]:
    """
    Calcula intervalo de confiança t de Student para a média

    Args:
        data: Valores (ex.: métrica por fold)
        confidence: Nível de confiança (padrão 95%)

    Returns:
        Tupla com (limite_inferior, limite_superior); com menos de 2 valores
        o intervalo degenera na própria média
    """
    values = np.asarray(data, dtype=np.float64)
    mean = float(values.mean())
    if values.size < 2:
        return (mean, mean)
    std_err = stats.sem(values)
    margin = float(std_err * stats.t.ppf((1 + confidence) / 2, values.size - 1))
    return (mean - margin, mean + margin)


def aggregate_reports(
    reports: Sequence[Any],
    confidence: float = 0.95
) -> Dict[str, Dict[str, float]]:
    """
    Agrega MetricReports (ex.: os k folds de uma validação cruzada)

    Args:
        reports: Objetos com ``metrics_dict()``
        confidence: Nível do intervalo t

    Returns:
        {métrica: {'mean', 'std', 'ci_low', 'ci_high', 'n'}}; std é o desvio
        amostral (ddof=1), 0 com um único relatório

    Raises:
        ValueError: Se ``reports`` estiver vazio
    """
    if not reports:
        raise ValueError("Nenhum relatório para agregar")
    frame = pd.DataFrame([r.metrics_dict() for r in reports])
    summary = {}
    for metric in frame.columns:
        values = frame[metric].to_numpy(dtype=np.float64)
        low, high = confidence_interval(values, confidence)
        summary[metric] = {
            'mean': float(np.mean(values)),
            'std': float(np.std(values, ddof=1)) if values.size > 1 else 0.0,
            'ci_low': low,
            'ci_high': high,
            'n': int(values.size),
        }
    return summary


def compare_regimes(
    sample1: Sequence[float],
    sample2: Sequence[float],
    alternative: str = 'two-sided'
) -> Dict[str, Any]:
    """
    Teste t pareado entre dois regimes avaliados nas mesmas sementes ou folds

    Args:
        sample1: Métrica do primeiro regime
        sample2: Métrica do segundo regime (mesma ordem de pareamento)
        alternative: Hipótese alternativa ('two-sided', 'less', 'greater')

    Returns:
        Dicionário com diferença média, estatística t e p-valor

    Raises:
        ValueError: Amostras de tamanhos diferentes ou com menos de 2 pares
    """
    a = np.asarray(sample1, dtype=np.float64)
    b = np.asarray(sample2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Amostras pareadas com tamanhos diferentes: {a.size} e {b.size}")
    if a.size < 2:
        raise ValueError("São necessários ao menos 2 pares")
    diff = a - b
    if np.allclose(diff, diff[0]):
        # diferenças constantes: t indefinido
        logger.warning("Diferenças pareadas constantes (%.6g); teste t indefinido", diff[0])
        return {'mean_difference': float(diff.mean()), 'statistic': float('nan'),
                'pvalue': float('nan'), 'significant_5pct': False, 'wins': int((diff > 0).sum())}
    statistic, pvalue = stats.ttest_rel(a, b, alternative=alternative)
    return {
        'mean_difference': float(diff.mean()),
        'statistic': float(statistic),
        'pvalue': float(pvalue),
        'significant_5pct': bool(pvalue < 0.05),
        'wins': int((diff > 0).sum()),
    }


def summarize_results(results: pd.DataFrame, fold: Optional[str] = None) -> pd.DataFrame:
    """
    Tabela (dataset, modelo, regime, métrica) → média, desvio e contagem a partir do CSV de resultados

    Args:
        results: DataFrame com colunas dataset, model, regime, fold, metric, value, seed
        fold: Filtra um fold específico (ex.: 'test'); None usa todos

    Returns:
        DataFrame agregado, ordenado de forma determinística
    """
    frame = results if fold is None else results[results['fold'].astype(str) == fold]
    grouped = frame.groupby(['dataset', 'model', 'regime', 'metric'], sort=True)['value']
    summary = grouped.agg(['mean', 'std', 'count']).reset_index()
    summary['std'] = summary['std'].fillna(0.0)
    return summary
