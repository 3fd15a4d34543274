"""
Utilitários para download dos datasets públicos
"""

import hashlib
import json
import logging
import time
from functools import wraps
from pathlib import Path
from typing import Any, Dict, Optional, Union

import requests

from .data_utils import DatasetDescriptor

# Configurar logging
logger = logging.getLogger(__name__)


class FetchError(Exception):
    """Falha ao baixar ou verificar um dataset"""


def retry_on_failure(max_retries: int = 3, delay: float = 1.0):
    """
    Decorator para tentar novamente em caso de falha de rede

    Args:
        max_retries: Número máximo de tentativas
        delay: Tempo de espera entre tentativas (segundos, cresce linearmente)
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            last_exception = None
            for attempt in range(max_retries):
                try:
                    return func(*args, **kwargs)
                except requests.RequestException as e:
                    last_exception = e
                    logger.warning("Tentativa %s/%s falhou: %s", attempt + 1, max_retries, e)
                    if attempt < max_retries - 1:
                        time.sleep(delay * (attempt + 1))
            raise FetchError(f"Falha após {max_retries} tentativas: {last_exception}") from last_exception
        return wrapper
    return decorator


def _get_text(url: str, timeout: float) -> str:
    response = requests.get(url, timeout=timeout)
    response.raise_for_status()
    return response.text


def download_text(url: str, timeout: float = 60, max_retries: int = 3, retry_delay: float = 1.0) -> str:
    """
    Baixa um recurso de texto, com novas tentativas em falhas de rede

    Args:
        url: URL do arquivo
        timeout: Timeout em segundos
        max_retries: Número máximo de tentativas
        retry_delay: Espera base entre tentativas (segundos)

    Returns:
        Conteúdo decodificado
    """
    return retry_on_failure(max_retries=max_retries, delay=retry_delay)(_get_text)(url, timeout)



def normalize_csv_text(text: str, descriptor: DatasetDescriptor) -> str:
    """
    Normaliza o conteúdo baixado: remove linhas vazias, espaços ao redor dos
    campos e adiciona o cabeçalho quando a fonte não tem um
    """
    lines = []
    for line in text.splitlines():
        if not line.strip():
            continue
        lines.append(','.join(part.strip() for part in line.split(',')))
    if not descriptor.source_has_header:
        header = list(descriptor.source_columns) or descriptor.header
        lines.insert(0, ','.join(header))
    return '\n'.join(lines) + '\n'


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _load_checksums(path: Path) -> Dict[str, Any]:
    if not path.exists():
        return {}
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def fetch_dataset(
    descriptor: DatasetDescriptor,
    destination: Optional[Union[str, Path]] = None,
    checksums_path: Optional[Union[str, Path]] = None,
    text: Optional[str] = None,
    api: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Baixa o CSV de um descritor, verifica a contagem de linhas e o checksum

    Na primeira vez o sha256 é registrado em ``checksums.json``; depois ele
    é conferido.

    Args:
        descriptor: Descritor com ``source_url`` e ``expected_rows``
        destination: Caminho do CSV (padrão: ``descriptor.data_path``)
        checksums_path: Registro de checksums (padrão: ao lado do CSV)
        text: Conteúdo já obtido (pula o download)
        api: Seção ``api`` das configurações (timeout, max_retries, retry_delay)

    Returns:
        Caminho do CSV escrito

    Raises:
        FetchError: Falha de download, contagem de linhas ou checksum divergente
    """
    if text is None:
        if not descriptor.source_url:
            raise FetchError(f"Descritor '{descriptor.name}' sem 'source_url'")
        logger.info("Baixando %s de %s", descriptor.name, descriptor.source_url)
        options = api or {}
        text = download_text(
            descriptor.source_url,
            timeout=options.get('timeout', 60),
            max_retries=options.get('max_retries', 3),
            retry_delay=options.get('retry_delay', 1.0),
        )

    content = normalize_csv_text(text, descriptor)
    n_rows = content.count('\n') - 1
    if descriptor.expected_rows is not None and n_rows != descriptor.expected_rows:
        raise FetchError(
            f"Dataset '{descriptor.name}' com {n_rows} linhas; esperado {descriptor.expected_rows}"
        )

    destination = Path(destination) if destination is not None else descriptor.data_path
    destination.parent.mkdir(parents=True, exist_ok=True)
    with open(destination, 'w', encoding='utf-8', newline='') as f:
        f.write(content)

    checksums_path = Path(checksums_path) if checksums_path else destination.parent / 'checksums.json'
    checksums = _load_checksums(checksums_path)
    digest = file_sha256(destination)
    recorded = checksums.get(descriptor.name)
    if recorded is None:
        checksums[descriptor.name] = digest
        with open(checksums_path, 'w', encoding='utf-8') as f:
            json.dump(checksums, f, indent=2, sort_keys=True)
        logger.info("Checksum de %s registrado em %s", descriptor.name, checksums_path)
    elif recorded != digest:
        raise FetchError(f"Checksum divergente para '{descriptor.name}': {digest} != {recorded}")

    logger.info("✓ %s salvo em %s (%s linhas)", descriptor.name, destination, f"{n_rows:,}")
    return destination
