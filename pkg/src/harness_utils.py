"""
Orquestração de experimentos: planos, matriz de regimes × datasets,
arquivos de resultados, renderização de relatórios e linha de comando.

Example:
    >>> python -m src prep --dataset adult --mode domain --domain-col sex --source Male --seed 7
    >>> python -m src experiment --plan config/plans/california.json
    >>> python -m src report --results reports/california/results.csv --svg reports/california
"""

import argparse
import json
import logging
import sys
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .api_utils import FetchError, fetch_dataset, file_sha256
from .config_utils import deep_merge, env_seed, load_env, load_settings, project_root, setup_logging
from .data_utils import (
    DataError,
    DatasetDescriptor,
    RawTable,
    SplitIndices,
    SplitSpec,
    apply_bins,
    content_hash,
    fit_bins,
    fit_encoders,
    load_clean_table,
    load_descriptor,
    load_partition_manifests,
    make_split,
    save_manifest,
    save_partition_manifests,
    schema_hash,
    transform,
)
from .model_utils import ModelError, TabTransformer, load_weights, save_weights
from .numerics_utils import ConfigurationError, NumericsError, _known_keys
from .ssl_utils import HistoryRow, PretrainConfig, pretrain, save_backbone, save_history
from .stats_utils import summarize_results
from .train_utils import (
    REGIMES,
    FinetuneConfig,
    MetricReport,
    Regime,
    RunSettings,
    cross_validate,
    evaluate,
    finetune,
    run_regime,
)
from .viz_utils import configure_style, plot_loss_history, plot_regime_bars

# Configurar logging
logger = logging.getLogger(__name__)

RESULTS_COLUMNS = ['dataset', 'model', 'regime', 'fold', 'metric', 'value', 'seed']
TEST_FOLD = 'test'

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class PlanError(Exception):
    """Plano de experimento inválido"""


# =============================================================================
# Planos
# =============================================================================

@dataclass
class ExperimentPlan:
    """
    Plano de experimento (JSON).

    Chaves: dataset (caminho do descritor), split, regimes, seed, cv_folds,
    sl_train, model/pretrain/finetune/optimizer/binning (sobrescritas
    globais), overrides (por regime) e output_dir.
    """
    dataset: str
    split: SplitSpec
    regimes: Tuple[str, ...]
    seed: int = 42
    cv_folds: int = 0
    sl_train: Optional[str] = None
    model: Dict[str, Any] = field(default_factory=dict)
    pretrain: Dict[str, Any] = field(default_factory=dict)
    finetune: Dict[str, Any] = field(default_factory=dict)
    optimizer: Dict[str, Any] = field(default_factory=dict)
    binning: Dict[str, Any] = field(default_factory=dict)
    overrides: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    output_dir: str = 'reports'

    def __post_init__(self) -> None:
        if not self.regimes:
            raise PlanError("O plano deve listar ao menos um regime")
        for name in self.regimes:
            if name not in REGIMES:
                raise PlanError(f"Regime desconhecido '{name}'. Use um de {list(REGIMES)}")
        for name, sections in self.overrides.items():
            if name not in self.regimes:
                raise PlanError(f"Sobrescrita para regime fora do plano: '{name}'")
            unknown = set(sections) - {'model', 'pretrain', 'finetune', 'optimizer', 'binning'}
            if unknown:
                raise PlanError(f"Seções desconhecidas na sobrescrita de '{name}': {sorted(unknown)}")
        if self.cv_folds == 1 or self.cv_folds < 0:
            raise PlanError(f"cv_folds deve ser 0 (desligado) ou >= 2, recebido {self.cv_folds}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'dataset': self.dataset,
            'split': self.split.to_dict(),
            'regimes': list(self.regimes),
            'seed': self.seed,
            'cv_folds': self.cv_folds,
            'sl_train': self.sl_train,
            'model': self.model,
            'pretrain': self.pretrain,
            'finetune': self.finetune,
            'optimizer': self.optimizer,
            'binning': self.binning,
            'overrides': self.overrides,
            'output_dir': self.output_dir,
        }


def _resolve(path: Union[str, Path], base: Path) -> Path:
    path = Path(path)
    if path.is_absolute() or path.exists():
        return path
    return base / path


def resolve_descriptor_path(name: Union[str, Path], datasets_dir: Optional[Union[str, Path]] = None) -> Path:
    """Aceita caminho direto, nome de arquivo ou nome curto ('adult') no diretório de descritores."""
    path = Path(name)
    if path.exists():
        return path
    datasets_dir = _resolve(datasets_dir or 'config/datasets', project_root())
    for candidate in (datasets_dir / path.name, datasets_dir / f'{path.name}.json'):
        if candidate.exists():
            return candidate
    raise PlanError(f"Descritor de dataset não encontrado: {name}")


def load_plan(path: Union[str, Path], seed: Optional[int] = None) -> ExperimentPlan:
    """
    Carrega e valida um plano JSON

    A semente segue a precedência: argumento ``seed`` (flag) > TABSSL_SEED >
    plano.

    Raises:
        PlanError: JSON inválido, chaves desconhecidas ou valores inválidos
    """
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise PlanError(f"Não foi possível ler o plano '{path}': {exc}") from exc

    try:
        raw = _known_keys(ExperimentPlan, raw)
        if 'dataset' not in raw or 'split' not in raw or 'regimes' not in raw:
            raise PlanError(f"Plano '{path}' requer as chaves 'dataset', 'split' e 'regimes'")
        seed_value = seed if seed is not None else env_seed()
        if seed_value is None:
            seed_value = int(raw.get('seed', 42))
        split_values = dict(raw['split'])
        split_values['seed'] = seed_value
        raw['split'] = SplitSpec.from_dict(split_values)
        raw['seed'] = seed_value
        raw['regimes'] = tuple(raw['regimes'])
        raw['dataset'] = str(_resolve(raw['dataset'], project_root()))
        return ExperimentPlan(**raw)
    except (ConfigurationError, DataError, TypeError, ValueError) as exc:
        raise PlanError(f"Plano '{path}' inválido: {exc}") from exc


def build_run_settings(
    settings: Dict[str, Any],
    descriptor: DatasetDescriptor,
    seed: int,
    plan: Optional[ExperimentPlan] = None,
    regime: Optional[str] = None,
    flags: Optional[Dict[str, Any]] = None
) -> RunSettings:
    """
    Monta o RunSettings de uma célula

    Precedência: flags > sobrescrita do regime > plano > descritor
    (batch_size) > settings.yaml > padrões dos dataclasses.
    """
    sections = {key: dict(settings.get(key) or {}) for key in ('model', 'pretrain', 'finetune', 'optimizer', 'binning')}
    if descriptor.batch_size:
        sections['pretrain']['batch_size'] = descriptor.batch_size
        sections['finetune']['batch_size'] = descriptor.batch_size
    layers = []
    if plan is not None:
        layers.append({key: getattr(plan, key) for key in sections})
        if regime is not None:
            layers.append(plan.overrides.get(regime, {}))
    if flags:
        layers.append(flags)
    for layer in layers:
        sections = deep_merge(sections, {k: v for k, v in layer.items() if k in sections})

    optimizer = sections.pop('optimizer')
    sl_train = (settings.get('experiment') or {}).get('sl_train', 'pretrain_only')
    if plan is not None and plan.sl_train:
        sl_train = plan.sl_train
    return RunSettings(
        model=sections['model'],
        pretrain=PretrainConfig.from_dict({**sections['pretrain'], 'optimizer': optimizer, 'seed': seed}),
        finetune=FinetuneConfig.from_dict({**sections['finetune'], 'optimizer': optimizer, 'seed': seed,
                                           'task': descriptor.task}),
        binning=sections['binning'],
        sl_train=sl_train,
        seed=seed,
    )


# =============================================================================
# Execução
# =============================================================================

@dataclass
class CellResult:
    """Resultado de uma célula (dataset, regime)"""
    regime: str
    status: str
    report: Optional[MetricReport] = None
    cv_reports: List[MetricReport] = field(default_factory=list)
    cv_aggregate: Optional[Dict[str, Dict[str, float]]] = None
    pretrain_history: List[HistoryRow] = field(default_factory=list)
    n_parameters: Optional[int] = None
    config: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None
    seconds: float = 0.0

    @property
    def pretrain_losses(self) -> List[float]:
        return [row.mean_loss for row in self.pretrain_history]

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {'regime': self.regime, 'status': self.status, 'config': self.config}
        if self.status == 'ok':
            data['metrics'] = self.report.to_dict()
            data['n_parameters'] = self.n_parameters
            if self.cv_aggregate is not None:
                data['cv'] = {'folds': [r.to_dict() for r in self.cv_reports], 'aggregate': self.cv_aggregate}
            if self.pretrain_losses:
                data['pretrain_losses'] = self.pretrain_losses
        else:
            data['error'] = self.error
        return data


@dataclass
class ExperimentReport:
    """Relatório de um plano; tempos ficam fora do JSON reprodutível"""
    dataset: str
    seed: int
    content_hash: str
    manifest_hash: str
    split_sizes: Tuple[int, int, int]
    plan: Dict[str, Any]
    cells: List[CellResult]

    @property
    def timings(self) -> Dict[str, float]:
        return {cell.regime: round(cell.seconds, 3) for cell in self.cells}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'dataset': self.dataset,
            'seed': self.seed,
            'content_hash': self.content_hash,
            'manifest_hash': self.manifest_hash,
            'split_sizes': list(self.split_sizes),
            'plan': self.plan,
            'cells': [cell.to_dict() for cell in self.cells],
        }

    def results_frame(self) -> pd.DataFrame:
        rows = []
        for cell in self.cells:
            if cell.status != 'ok':
                continue
            regime = Regime.from_name(cell.regime)
            for metric, value in cell.report.metrics_dict().items():
                rows.append((self.dataset, regime.model, regime.mode, TEST_FOLD, metric, value, self.seed))
            for i, report in enumerate(cell.cv_reports):
                for metric, value in report.metrics_dict().items():
                    rows.append((self.dataset, regime.model, regime.mode, str(i), metric, value, self.seed))
        return pd.DataFrame(rows, columns=RESULTS_COLUMNS)


def run_cell(
    regime_name: str,
    table: RawTable,
    descriptor: DatasetDescriptor,
    split: SplitIndices,
    run_settings: RunSettings,
    cv_folds: int = 0
) -> CellResult:
    """Executa uma célula; qualquer falha vira um registro com a mensagem de erro."""
    start = time.perf_counter()
    config = run_settings.to_dict()
    try:
        regime = Regime.from_name(regime_name)
        result = run_regime(regime, table, descriptor, split, run_settings)
        cell = CellResult(regime=regime_name, status='ok', report=result.report,
                          pretrain_history=result.pretrain_history, n_parameters=result.n_parameters, config=config)
        if cv_folds:
            cv = cross_validate(regime, table, descriptor, split.spec, run_settings, k=cv_folds)
            cell.cv_reports = cv.reports
            cell.cv_aggregate = cv.aggregate
    except Exception as exc:  # noqa: BLE001 - falhas de célula são registradas e a execução segue
        logger.error("Célula %s falhou: %s\n%s", regime_name, exc, traceback.format_exc())
        cell = CellResult(regime=regime_name, status='failed', config=config, error=f"{type(exc).__name__}: {exc}")
    cell.seconds = time.perf_counter() - start
    logger.info("Célula %s concluída (%s) em %.1fs", regime_name, cell.status, cell.seconds)
    return cell


def experiment_hash(descriptor_path: Path, descriptor: DatasetDescriptor, plan: ExperimentPlan,
                    run_settings: Dict[str, Dict[str, Any]]) -> str:
    """Hash das entradas: descritor, CSV, plano (sem output_dir), configurações efetivas e semente."""
    return content_hash({
        'descriptor': file_sha256(descriptor_path),
        'data': file_sha256(descriptor.data_path),
        'plan': {k: v for k, v in plan.to_dict().items() if k != 'output_dir'},
        'settings': run_settings,
        'seed': plan.seed,
    })


def run_experiment(
    plan: ExperimentPlan,
    settings: Optional[Dict[str, Any]] = None,
    n_jobs: int = 1,
    write: bool = True
) -> ExperimentReport:
    """
    Executa todos os regimes de um plano sobre o mesmo split

    Regimes SSL pré-treinam no split de pré-treino e fazem fine-tuning nos
    10%; regimes SL treinam no pré-treino (ou pré-treino ∪ fine-tuning).
    Todos avaliam nas mesmas linhas de teste.

    Args:
        plan: Plano validado
        settings: Configurações (settings.yaml)
        n_jobs: Células em paralelo (joblib)
        write: Se True, grava resultados em ``plan.output_dir``

    Returns:
        ExperimentReport
    """
    settings = settings if settings is not None else load_settings()
    descriptor_path = Path(plan.dataset)
    descriptor = load_descriptor(descriptor_path)
    table = load_clean_table(descriptor)
    split = make_split(table, plan.split)
    cell_settings = {name: build_run_settings(settings, descriptor, plan.seed, plan, name) for name in plan.regimes}

    logger.info("Experimento %s: %s regimes, split %s", descriptor.name, len(plan.regimes), split.sizes())
    cells = Parallel(n_jobs=n_jobs)(
        delayed(run_cell)(name, table, descriptor, split, cell_settings[name], plan.cv_folds)
        for name in plan.regimes
    )

    report = ExperimentReport(
        dataset=descriptor.name,
        seed=plan.seed,
        content_hash=experiment_hash(descriptor_path, descriptor, plan,
                                     {k: v.to_dict() for k, v in cell_settings.items()}),
        manifest_hash=content_hash(split.to_manifest()),
        split_sizes=split.sizes(),
        plan=plan.to_dict(),
        cells=list(cells),
    )
    if write:
        write_experiment(report, split, Path(plan.output_dir))
    return report


def _slug(name: str) -> str:
    return ''.join(ch.lower() if ch.isalnum() else '_' for ch in name).strip('_').replace('__', '_')


def write_experiment(report: ExperimentReport, split: SplitIndices, output_dir: Path) -> Dict[str, Path]:
    """
    Grava manifesto, CSV de resultados, relatório JSON, históricos e tempos

    Apenas ``timings.json`` depende do relógio.
    """
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        'manifest': save_manifest(split, output_dir / 'split_manifest.json', {'dataset': report.dataset}),
        'results': output_dir / 'results.csv',
        'report': output_dir / 'report.json',
        'timings': output_dir / 'timings.json',
    }
    report.results_frame().to_csv(paths['results'], index=False)
    with open(paths['report'], 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    with open(paths['timings'], 'w', encoding='utf-8') as f:
        json.dump(report.timings, f, indent=2, sort_keys=True)
    for cell in report.cells:
        if cell.pretrain_history:
            save_history(cell.pretrain_history, output_dir / f'history_{_slug(cell.regime)}.csv')
    logger.info("Resultados gravados em %s", output_dir)
    return paths


# =============================================================================
# Relatório
# =============================================================================

def render_report(results: pd.DataFrame) -> str:
    """
    Tabela de texto alinhada: uma seção por dataset, uma linha por regime e
    uma coluna por métrica (média ± desvio quando houver folds)
    """
    if results.empty:
        return "(sem resultados)\n"
    sections = []
    for fold_label, frame in (('teste', results[results['fold'].astype(str) == TEST_FOLD]),
                              ('validação cruzada', results[results['fold'].astype(str) != TEST_FOLD])):
        if frame.empty:
            continue
        summary = summarize_results(frame)
        for dataset, group in summary.groupby('dataset', sort=True):
            group = group.assign(label=group['regime'] + ' (' + group['model'] + ')')
            if fold_label == 'teste':
                cells = group.assign(text=group['mean'].map(lambda v: f'{v:.4f}'))
            else:
                cells = group.assign(text=[f'{m:.4f} ± {s:.4f}' for m, s in zip(group['mean'], group['std'])])
            table = cells.pivot(index='label', columns='metric', values='text').sort_index()
            table.index.name = 'regime'
            sections.append(f"== {dataset} ({fold_label}) ==\n{table.to_string()}\n")
    return '\n'.join(sections)


def load_histories(directory: Path) -> pd.DataFrame:
    """Junta os ``history_<regime>.csv`` de um diretório de resultados, com a coluna regime."""
    names = {_slug(name): name for name in REGIMES}
    frames = []
    for path in sorted(Path(directory).glob('history_*.csv')):
        slug = path.stem[len('history_'):]
        frames.append(pd.read_csv(path).assign(regime=names.get(slug, slug)))
    if not frames:
        return pd.DataFrame(columns=['epoch', 'mean_loss', 'lr', 'regime'])
    return pd.concat(frames, ignore_index=True)


def report_command(
    results_path: Path,
    svg_dir: Optional[Path] = None,
    out_path: Optional[Path] = None,
    visualization: Optional[Dict[str, Any]] = None
) -> str:
    """
    Renderiza o CSV de resultados; com ``svg_dir`` grava as barras por
    dataset e as curvas de pré-treino dos ``history_*.csv`` vizinhos
    """
    results = pd.read_csv(results_path, dtype={'fold': str})
    text = render_report(results)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text, encoding='utf-8')
    if svg_dir is not None:
        ext = configure_style(visualization)['save_format']
        summary = summarize_results(results, fold=TEST_FOLD)
        for dataset in sorted(summary['dataset'].unique()):
            plot_regime_bars(summary, dataset, save=True, filename=f'{_slug(dataset)}_results.{ext}',
                             output_dir=str(svg_dir))
        histories = load_histories(results_path.parent)
        if not histories.empty:
            prefix = _slug(str(results['dataset'].iloc[0])) if not results.empty else 'pretrain'
            plot_loss_history(histories, save=True, filename=f'{prefix}_loss_history.{ext}', output_dir=str(svg_dir))
    return text


# =============================================================================
# Estágios individuais
# =============================================================================

def _descriptor(name: str, settings: Dict[str, Any]) -> DatasetDescriptor:
    return load_descriptor(resolve_descriptor_path(name, settings['data'].get('datasets_path')))


def _stage_inputs(
    dataset: str,
    manifests: Path,
    settings: Dict[str, Any]
) -> Tuple[DatasetDescriptor, RawTable, SplitIndices]:
    descriptor = _descriptor(dataset, settings)
    table = load_clean_table(descriptor)
    split = load_partition_manifests(manifests, descriptor.name)
    return descriptor, table, split


def _stage_model(descriptor: DatasetDescriptor, table: RawTable, split: SplitIndices, variant: str,
                 run_settings: RunSettings, with_reconstruction: bool):
    pretrain_rows = table.take(split.pretrain)
    schema = fit_encoders(pretrain_rows, descriptor)
    pretrain_ds = transform(pretrain_rows, schema, clip=False)
    bins = None
    if variant == 'binned':
        bins = fit_bins(pretrain_ds, run_settings.binning.strategy, run_settings.binning.n_bins)
        pretrain_ds = apply_bins(pretrain_ds, bins)
    model = TabTransformer.create(run_settings.model_config(variant), schema, run_settings.seed, bins=bins,
                                  with_reconstruction=with_reconstruction, with_prediction=not with_reconstruction)
    return model, pretrain_ds


def _encode_partition(table: RawTable, rows: np.ndarray, model: TabTransformer):
    dataset = transform(table.take(rows), model.schema)
    if model.bins is not None:
        dataset = apply_bins(dataset, model.bins)
    return dataset


def _write_json(payload: Dict[str, Any], path: Optional[Path]) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is None:
        print(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + '\n', encoding='utf-8')


# =============================================================================
# Linha de comando
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='python -m src', description='Pré-treino auto-supervisionado de TabTransformers')
    parser.add_argument('--settings', type=Path, default=None, help='Caminho do settings.yaml')
    parser.add_argument('--log-level', default=None, help='Nível de logging (DEBUG, INFO, ...)')
    sub = parser.add_subparsers(dest='command', required=True)

    prep = sub.add_parser('prep', help='Ajusta codificadores e grava os manifestos do split')
    prep.add_argument('--dataset', required=True)
    prep.add_argument('--mode', choices=['random', 'domain'], default='random')
    prep.add_argument('--domain-col', default=None)
    prep.add_argument('--source', nargs='+', default=[])
    prep.add_argument('--target', nargs='+', default=[])
    prep.add_argument('--seed', type=int, default=None)
    prep.add_argument('--out', type=Path, default=None)

    for name, help_text in (('pretrain', 'Pré-treina um backbone'), ('finetune', 'Fine-tuning e avaliação'),
                            ('evaluate', 'Avalia pesos salvos')):
        stage = sub.add_parser(name, help=help_text)
        stage.add_argument('--dataset', required=True)
        stage.add_argument('--manifests', type=Path, required=True)
        stage.add_argument('--variant', choices=['vanilla', 'binned', 'vanilla-mlp', 'mlp-based'], default='vanilla')
        stage.add_argument('--seed', type=int, default=None)
        stage.add_argument('--epochs', type=int, default=None)
        if name == 'pretrain':
            stage.add_argument('--out', type=Path, required=True)
            stage.add_argument('--history', type=Path, default=None)
        elif name == 'finetune':
            stage.add_argument('--backbone', type=Path, default=None)
            stage.add_argument('--freeze-backbone', action='store_true')
            stage.add_argument('--out', type=Path, required=True)
            stage.add_argument('--report', type=Path, default=None)
        else:
            stage.add_argument('--weights', type=Path, required=True)
            stage.add_argument('--partition', choices=['pretrain', 'finetune', 'test'], default='test')
            stage.add_argument('--report', type=Path, default=None)

    experiment = sub.add_parser('experiment', help='Executa um plano completo')
    experiment.add_argument('--plan', type=Path, required=True)
    experiment.add_argument('--seed', type=int, default=None)
    experiment.add_argument('--out', type=Path, default=None)
    experiment.add_argument('--n-jobs', type=int, default=None)
    experiment.add_argument('--cv-folds', type=int, default=None)

    report = sub.add_parser('report', help='Renderiza o CSV de resultados')
    report.add_argument('--results', type=Path, required=True)
    report.add_argument('--svg', type=Path, default=None)
    report.add_argument('--out', type=Path, default=None)

    fetch = sub.add_parser('fetch', help='Baixa os datasets públicos')
    fetch.add_argument('--dataset', nargs='+', default=['adult', 'california', 'cancer'])
    return parser


def _seed(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    if getattr(args, 'seed', None) is not None:
        return args.seed
    from_env = env_seed()
    if from_env is not None:
        return from_env
    return int(settings['models']['random_seed'])


def _epoch_flags(args: argparse.Namespace, section: str) -> Dict[str, Any]:
    return {section: {'epochs': args.epochs}} if getattr(args, 'epochs', None) else {}


def _cmd_prep(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    descriptor = _descriptor(args.dataset, settings)
    table = load_clean_table(descriptor)
    spec = SplitSpec.from_dict({
        **(settings.get('split') or {}),
        'mode': args.mode,
        'seed': _seed(args, settings),
        'domain_column': args.domain_col,
        'source_values': args.source,
        'target_values': args.target,
    })
    split = make_split(table, spec)
    out = args.out or Path(settings['data']['processed_path'])
    schema = fit_encoders(table.take(split.pretrain), descriptor)
    extra = {'dataset': descriptor.name, 'schema_hash': schema_hash(schema), 'n_rows': len(table)}
    save_partition_manifests(split, out, descriptor.name, extra)
    _write_json(schema.to_dict(), out / f'{descriptor.name}_schema.json')
    return EXIT_OK


def _cmd_pretrain(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    descriptor, table, split = _stage_inputs(args.dataset, args.manifests, settings)
    run_settings = build_run_settings(settings, descriptor, _seed(args, settings),
                                      flags=_epoch_flags(args, 'pretrain'))
    model, pretrain_ds = _stage_model(descriptor, table, split, args.variant, run_settings, True)
    result = pretrain(model, pretrain_ds, run_settings.pretrain, progress=True)
    save_backbone(result.model, args.out)
    if args.history:
        save_history(result.history, args.history)
    return EXIT_OK


def _cmd_finetune(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    descriptor, table, split = _stage_inputs(args.dataset, args.manifests, settings)
    run_settings = build_run_settings(settings, descriptor, _seed(args, settings),
                                      flags=_epoch_flags(args, 'finetune'))
    model, _ = _stage_model(descriptor, table, split, args.variant, run_settings, False)
    train_ds = _encode_partition(table, split.finetune, model)
    test_ds = _encode_partition(table, split.test, model)
    cfg = replace(run_settings.finetune, freeze_backbone=args.freeze_backbone)
    result = finetune(model.config, train_ds, test_ds, cfg, backbone=args.backbone, progress=True)
    save_weights(result.model, args.out)
    _write_json(result.report.to_dict(), args.report)
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    descriptor, table, split = _stage_inputs(args.dataset, args.manifests, settings)
    run_settings = build_run_settings(settings, descriptor, _seed(args, settings))
    model, _ = _stage_model(descriptor, table, split, args.variant, run_settings, False)
    load_weights(model, args.weights)
    dataset = _encode_partition(table, getattr(split, args.partition), model)
    report = evaluate(model, dataset, descriptor.task, run_settings.finetune.threshold)
    _write_json(report.to_dict(), args.report)
    return EXIT_OK


def _cmd_experiment(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    plan = load_plan(args.plan, seed=args.seed)
    if args.out is not None:
        plan.output_dir = str(args.out)
    if args.cv_folds is not None:
        plan = replace(plan, cv_folds=args.cv_folds)
    n_jobs = args.n_jobs if args.n_jobs is not None else int(settings['models'].get('n_jobs', 1))
    report = run_experiment(plan, settings, n_jobs=n_jobs)
    failed = [cell.regime for cell in report.cells if cell.status != 'ok']
    if failed:
        logger.error("Células com falha: %s", failed)
        return EXIT_FAILURE
    return EXIT_OK


def _cmd_report(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    text = report_command(args.results, args.svg, args.out, settings.get('visualization'))
    if args.out is None:
        print(text, end='')
    return EXIT_OK


def _cmd_fetch(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    for name in args.dataset:
        fetch_dataset(_descriptor(name, settings), api=settings.get('api'))
    return EXIT_OK


COMMANDS = {
    'prep': _cmd_prep,
    'pretrain': _cmd_pretrain,
    'finetune': _cmd_finetune,
    'evaluate': _cmd_evaluate,
    'experiment': _cmd_experiment,
    'report': _cmd_report,
    'fetch': _cmd_fetch,
}


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Ponto de entrada da linha de comando

    Returns:
        0 sucesso, 1 falha de estágio, 2 uso inválido
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK

    load_env()
    try:
        settings = load_settings(args.settings)
    except ConfigurationError as exc:
        print(f"Erro: {exc}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(settings, args.log_level)

    try:
        return COMMANDS[args.command](args, settings)
    except PlanError as exc:
        logger.error("Plano inválido: %s", exc)
        return EXIT_USAGE
    except (DataError, ModelError, NumericsError, FetchError, OSError, ValueError) as exc:
        logger.error("Falha no estágio '%s': %s", args.command, exc)
        return EXIT_FAILURE
