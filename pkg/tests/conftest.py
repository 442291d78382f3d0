"""
Общие фикстуры: опубликованные таблицы исходов и путь к данным.
"""

from pathlib import Path

import pytest

from snl_sieve.models import FailureTable, TargetSpec

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    """Каталог с примерами таблиц."""
    return DATA_DIR


@pytest.fixture
def step_table() -> FailureTable:
    """STEP, Gag 84: V - вакцинный остаток, T - невакцинный (целевой)."""
    return FailureTable(n_p=[0, 9, 17], n_v=[0, 31, 8], labels=["none", "V", "T"])


@pytest.fixture
def step_target() -> TargetSpec:
    return TargetSpec.of([2], 2)


@pytest.fixture
def rv144_table() -> FailureTable:
    """RV144, Env 169: K - остаток вакцины (целевой)."""
    return FailureTable(
        n_p=[7914, 57, 7, 2, 0, 0, 0],
        n_v=[7909, 30, 9, 2, 1, 1, 1],
        labels=["none", "K", "Q", "R", "E", "T", "V"],
    )


@pytest.fixture
def rv144_target() -> TargetSpec:
    return TargetSpec.of([1], 6)


@pytest.fixture
def null_table() -> FailureTable:
    """Одинаковые доли типов отказов в обеих группах."""
    return FailureTable(n_p=[900, 80, 20], n_v=[900, 80, 20])
