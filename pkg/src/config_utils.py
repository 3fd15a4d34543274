"""
Utilitários de configuração: settings.yaml, variáveis de ambiente e logging
"""

import copy
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from dotenv import load_dotenv

from .numerics_utils import ConfigurationError

# Configurar logging
logger = logging.getLogger(__name__)

SEED_ENV_VAR = 'TABSSL_SEED'

_current_file = Path(__file__).resolve()
_project_root = _current_file.parent.parent  # Sobe dois níveis (src -> raiz)
_env_paths = [
    _project_root / 'config' / '.env',  # Caminho absoluto a partir deste arquivo
    Path('config/.env'),  # Caminho relativo da raiz do projeto
    Path('../config/.env'),  # Caminho relativo de src/
    Path('.env'),  # .env na raiz do projeto
]
_settings_paths = [
    _project_root / 'config' / 'settings.yaml',
    Path('config/settings.yaml'),
    Path('../config/settings.yaml'),
]

DEFAULT_SETTINGS: Dict[str, Any] = {
    'data': {
        'processed_path': 'data/processed',
        'datasets_path': 'config/datasets',
    },
    'models': {'random_seed': 42, 'n_jobs': 1},
    'model': {},
    'pretrain': {},
    'finetune': {},
    'optimizer': {},
    'binning': {},
    'split': {},
    'experiment': {'sl_train': 'pretrain_only'},
    'visualization': {'style': 'whitegrid', 'palette': 'husl', 'figsize': [10, 6], 'dpi': 300, 'save_format': 'svg'},
    'api': {'timeout': 60, 'max_retries': 3, 'retry_delay': 1.0},
    'logging': {'level': 'INFO', 'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s', 'file': None},
}


def project_root() -> Path:
    return _project_root


def load_env() -> Optional[str]:
    """
    Carrega o primeiro .env encontrado nos caminhos candidatos

    Returns:
        Caminho do arquivo usado ou None
    """
    for env_path in _env_paths:
        if env_path.exists():
            load_dotenv(env_path)
            return str(env_path.resolve())
    return None


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Mescla dicionários recursivamente; ``override`` vence."""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_settings(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Carrega config/settings.yaml sobre os valores padrão

    Args:
        path: Caminho explícito (opcional). Se não especificado, busca em:
              1. <raiz>/config/settings.yaml
              2. ./config/settings.yaml
              3. ../config/settings.yaml

    Returns:
        Dicionário de configurações

    Raises:
        ConfigurationError: Se o caminho explícito não existir ou o YAML for inválido
    """
    if path is not None:
        candidates = [Path(path)]
        if not candidates[0].exists():
            raise ConfigurationError(f"Arquivo de configurações não encontrado: {path}")
    else:
        candidates = [p for p in _settings_paths if p.exists()]
    if not candidates:
        logger.debug("settings.yaml não encontrado; usando valores padrão")
        return copy.deepcopy(DEFAULT_SETTINGS)

    try:
        with open(candidates[0], 'r', encoding='utf-8') as f:
            loaded = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"YAML inválido em {candidates[0]}: {e}") from e
    return deep_merge(DEFAULT_SETTINGS, loaded)


def env_seed() -> Optional[int]:
    """
    Semente definida em TABSSL_SEED (ou None)

    Raises:
        ConfigurationError: Se o valor não for inteiro
    """
    raw = os.getenv(SEED_ENV_VAR)
    if raw is None or raw.strip() == '':
        return None
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigurationError(f"{SEED_ENV_VAR} deve ser inteiro, recebido '{raw}'") from e


def setup_logging(settings: Optional[Dict[str, Any]] = None, level: Optional[str] = None) -> None:
    """
    Configura o logger raiz a partir da seção ``logging`` das configurações

    Args:
        settings: Configurações carregadas
        level: Sobrescreve o nível (ex.: 'DEBUG')
    """
    cfg = (settings or DEFAULT_SETTINGS).get('logging', {})
    handlers = [logging.StreamHandler()]
    log_file = cfg.get('file')
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(
        level=getattr(logging, str(level or cfg.get('level', 'INFO')).upper(), logging.INFO),
        format=cfg.get('format', DEFAULT_SETTINGS['logging']['format']),
        handlers=handlers,
        force=True,
    )
