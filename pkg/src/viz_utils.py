"""
Utilitários para visualizações padronizadas dos resultados
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

# Configurar logging
logger = logging.getLogger(__name__)

# Configuração de estilo padrão
sns.set_style("whitegrid")
plt.rcParams['figure.figsize'] = (10, 6)
plt.rcParams['font.size'] = 10
plt.rcParams['savefig.dpi'] = 300
# ids estáveis nos SVGs
plt.rcParams['svg.hashsalt'] = 'tabssl'

METRIC_LABELS = {
    'binary_accuracy': 'Acurácia binária',
    'bce_loss': 'Entropia cruzada binária',
    'mse': 'MSE',
    'mae': 'MAE',
    'rmse': 'RMSE',
}


def configure_style(visualization: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Aplica a seção ``visualization`` das configurações (estilo, paleta,
    tamanho e dpi) e retorna as opções efetivas
    """
    options = {'style': 'whitegrid', 'palette': 'husl', 'figsize': [10, 6], 'dpi': 300, 'save_format': 'svg'}
    options.update(visualization or {})
    sns.set_style(options['style'])
    sns.set_palette(options['palette'])
    plt.rcParams['figure.figsize'] = tuple(options['figsize'])
    plt.rcParams['savefig.dpi'] = options['dpi']
    return options


def save_figure(fig, filename: str, output_dir: str = "reports/figures", dpi: Optional[int] = None) -> Path:
    """
    Salva uma figura no diretório de relatórios

    SVGs são gravados sem data nos metadados, de modo que entradas iguais
    produzem arquivos idênticos.

    Args:
        fig: Figura matplotlib
        filename: Nome do arquivo (a extensão define o formato)
        output_dir: Diretório de saída
        dpi: Resolução (formatos raster; padrão de configure_style)

    Returns:
        Caminho do arquivo salvo
    """
    output_path = Path(output_dir)
    output_path.mkdir(parents=True, exist_ok=True)
    target = output_path / filename
    metadata = {'Date': None} if target.suffix.lower() == '.svg' else None
    fig.savefig(target, dpi=dpi, bbox_inches='tight', metadata=metadata)
    plt.close(fig)
    logger.info("Figura salva em %s", target)
    return target


def plot_regime_bars(
    summary: pd.DataFrame,
    dataset: str,
    metrics: Optional[Sequence[str]] = None,
    title: Optional[str] = None,
    palette: str = 'husl',
    save: bool = False,
    filename: Optional[str] = None,
    output_dir: str = "reports/figures"
) -> plt.Figure:
    """
    Cria gráfico de barras por regime, um painel por métrica

    Args:
        summary: Saída de ``stats_utils.summarize_results``
        dataset: Dataset a plotar
        metrics: Métricas (padrão: todas do dataset, em ordem alfabética)
        title: Título da figura
        palette: Paleta seaborn
        save: Se True, salva a figura
        filename: Nome do arquivo (se save=True)
        output_dir: Diretório de saída

    Returns:
        Figura matplotlib
    """
    data = summary[summary['dataset'] == dataset].copy()
    if data.empty:
        raise ValueError(f"Nenhum resultado para o dataset '{dataset}'")
    data['label'] = data['regime'] + ' (' + data['model'] + ')'
    metrics = list(metrics) if metrics else sorted(data['metric'].unique())
    order: List[str] = sorted(data['label'].unique())

    fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 5), squeeze=False)
    colors = sns.color_palette(palette, len(order))
    for ax, metric in zip(axes[0], metrics):
        subset = data[data['metric'] == metric].set_index('label').reindex(order)
        positions = np.arange(len(order))
        ax.bar(positions, subset['mean'], yerr=subset['std'], color=colors, capsize=4)
        for x, value in zip(positions, subset['mean']):
            if np.isfinite(value):
                ax.annotate(f'{value:.4f}', (x, value), ha='center', va='bottom', fontsize=8)
        ax.set_xticks(positions)
        ax.set_xticklabels(order, rotation=45, ha='right')
        ax.set_title(METRIC_LABELS.get(metric, metric))
        ax.set_ylabel(metric)

    fig.suptitle(title or f'Resultados - {dataset}')
    fig.tight_layout()

    if save and filename:
        save_figure(fig, filename, output_dir)

    return fig


def plot_loss_history(
    history: pd.DataFrame,
    title: str = "Perda de reconstrução por época",
    save: bool = False,
    filename: Optional[str] = None,
    output_dir: str = "reports/figures"
) -> plt.Figure:
    """
    Cria gráfico de linha do histórico de pré-treino

    Args:
        history: DataFrame com colunas epoch e mean_loss (e opcionalmente regime)
        title: Título do gráfico
        save: Se True, salva a figura
        filename: Nome do arquivo (se save=True)
        output_dir: Diretório de saída

    Returns:
        Figura matplotlib
    """
    fig, ax = plt.subplots()

    if 'regime' in history.columns:
        for regime, group in history.groupby('regime', sort=True):
            ax.plot(group['epoch'], group['mean_loss'], label=regime, marker='o')
        ax.legend()
    else:
        ax.plot(history['epoch'], history['mean_loss'], marker='o')

    ax.set_title(title)
    ax.set_xlabel('Época')
    ax.set_ylabel('Perda média')
    ax.grid(True, alpha=0.3)

    if save and filename:
        save_figure(fig, filename, output_dir)

    return fig
