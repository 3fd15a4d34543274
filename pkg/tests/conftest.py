"""
Fixtures compartilhadas: tabelas sintéticas no formato dos três datasets
(classificação com categóricas, regressão, só contínuas) gravadas em CSV.
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.data_utils import load_clean_table, load_descriptor, make_split, SplitSpec
from src.model_utils import ModelConfig
from src.train_utils import RunSettings

PROJECT_ROOT = Path(__file__).resolve().parent.parent


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: testes de aceitação com os datasets reais')


def write_dataset(directory: Path, name: str, frame: pd.DataFrame, descriptor: dict) -> Path:
    """Grava CSV e descritor; retorna o caminho do descritor."""
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f'{name}.csv'
    frame.to_csv(csv_path, index=False)
    payload = {'name': name, 'path': str(csv_path), **descriptor}
    descriptor_path = directory / f'{name}.json'
    descriptor_path.write_text(json.dumps(payload), encoding='utf-8')
    return descriptor_path


def adult_like_frame(n: int = 240, seed: int = 0) -> pd.DataFrame:
    """Renda depende de educação e horas; sexo define o domínio."""
    rng = np.random.default_rng(seed)
    education = rng.choice(['Bachelors', 'HS-grad', 'Masters', 'Some-college'], size=n)
    sex = rng.choice(['Male', 'Female'], size=n, p=[0.6, 0.4])
    workclass = rng.choice(['Private', 'Self-emp', 'Gov'], size=n)
    age = rng.integers(18, 70, size=n)
    hours = rng.integers(10, 70, size=n)
    score = (np.isin(education, ['Bachelors', 'Masters']).astype(float) * 2
             + (hours > 40) + rng.normal(0, 0.5, size=n))
    income = np.where(score > 1.5, '>50K', '<=50K')
    frame = pd.DataFrame({
        'age': age, 'workclass': workclass, 'education': education,
        'sex': sex, 'hours-per-week': hours, 'income': income,
    })
    frame.loc[[3, 17], 'workclass'] = '?'
    return frame


ADULT_LIKE = {
    'columns': [
        {'name': 'age', 'kind': 'continuous'},
        {'name': 'workclass', 'kind': 'categorical'},
        {'name': 'education', 'kind': 'categorical'},
        {'name': 'sex', 'kind': 'categorical'},
        {'name': 'hours-per-week', 'kind': 'continuous'},
    ],
    'target': 'income',
    'task': 'binary-classification',
    'positive_label': '>50K',
    'domain_column': 'sex',
}


def california_like_frame(n: int = 200, seed: int = 1) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    income = rng.uniform(1, 10, size=n)
    rooms = rng.uniform(500, 5000, size=n)
    ocean = rng.choice(['INLAND', 'NEAR BAY', '<1H OCEAN'], size=n)
    value = 50000 * income + 20 * rooms + np.where(ocean == 'INLAND', -30000, 0) + rng.normal(0, 5000, size=n)
    return pd.DataFrame({
        'median_income': income.round(4), 'total_rooms': rooms.round(1),
        'ocean_proximity': ocean, 'median_house_value': value.round(0),
    })


CALIFORNIA_LIKE = {
    'columns': [
        {'name': 'median_income', 'kind': 'continuous'},
        {'name': 'total_rooms', 'kind': 'continuous'},
        {'name': 'ocean_proximity', 'kind': 'categorical'},
    ],
    'target': 'median_house_value',
    'task': 'regression',
}


def cancer_like_frame(n: int = 120, seed: int = 2) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    radius = rng.normal(14, 3, size=n)
    texture = rng.normal(19, 4, size=n)
    diagnosis = np.where(radius + rng.normal(0, 1, size=n) > 15, 'M', 'B')
    return pd.DataFrame({
        'id': np.arange(1000, 1000 + n), 'diagnosis': diagnosis,
        'radius_mean': radius.round(3), 'texture_mean': texture.round(3),
    })


CANCER_LIKE = {
    'columns': [
        {'name': 'radius_mean', 'kind': 'continuous'},
        {'name': 'texture_mean', 'kind': 'continuous'},
    ],
    'target': 'diagnosis',
    'task': 'binary-classification',
    'positive_label': 'M',
    'drop_columns': ['id'],
}


@pytest.fixture
def adult_descriptor_path(tmp_path):
    return write_dataset(tmp_path / 'datasets', 'adult_like', adult_like_frame(), ADULT_LIKE)


@pytest.fixture
def california_descriptor_path(tmp_path):
    return write_dataset(tmp_path / 'datasets', 'california_like', california_like_frame(), CALIFORNIA_LIKE)


@pytest.fixture
def cancer_descriptor_path(tmp_path):
    return write_dataset(tmp_path / 'datasets', 'cancer_like', cancer_like_frame(), CANCER_LIKE)


@pytest.fixture
def adult_descriptor(adult_descriptor_path):
    return load_descriptor(adult_descriptor_path)


@pytest.fixture
def adult_table(adult_descriptor):
    return load_clean_table(adult_descriptor)


@pytest.fixture
def california_descriptor(california_descriptor_path):
    return load_descriptor(california_descriptor_path)


@pytest.fixture
def california_table(california_descriptor):
    return load_clean_table(california_descriptor)


@pytest.fixture
def cancer_descriptor(cancer_descriptor_path):
    return load_descriptor(cancer_descriptor_path)


@pytest.fixture
def cancer_table(cancer_descriptor):
    return load_clean_table(cancer_descriptor)


@pytest.fixture
def adult_split(adult_table):
    return make_split(adult_table, SplitSpec(mode='random', seed=7))


@pytest.fixture
def tiny_model_settings():
    """Modelo pequeno para testes rápidos."""
    return {'d_model': 8, 'n_heads': 2, 'n_blocks': 1, 'ff_hidden': 16,
            'mlp_hidden': [8], 'recon_hidden': 8, 'dropout': 0.0}


@pytest.fixture
def tiny_config(tiny_model_settings):
    def factory(variant: str) -> ModelConfig:
        return ModelConfig.for_variant(variant, **tiny_model_settings)
    return factory


@pytest.fixture
def fast_settings(tiny_model_settings):
    return RunSettings(
        model=tiny_model_settings,
        pretrain={'epochs': 2, 'batch_size': 32, 'optimizer': {'initial_lr': 0.01}},
        finetune={'epochs': 5, 'batch_size': 32, 'optimizer': {'initial_lr': 0.01}},
        binning={'strategy': 'quantile', 'n_bins': 4},
        seed=3,
    )
