"""
Точный условный тест Фишера для таблиц 2 x J по отказам.
"""

import logging
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.special import gammaln

from .exceptions import DegenerateDataError, ValidationError
from .models import FailureTable, TestResult
from .utils import make_rng

logger = logging.getLogger(__name__)

# Предел точного перебора
MAX_EXACT_FAILURES = 500
MAX_EXACT_TABLES = 2_000_000
# Относительный допуск при сравнении вероятностей таблиц
TIE_TOL = 1e-7


class ContingencySlice(BaseModel):
    """Матрица 2 x J счётчиков отказов (без столбца отсутствия отказа)."""

    rows: List[List[int]]

    model_config = ConfigDict(frozen=True)

    @field_validator("rows")
    @classmethod
    def _check_rows(cls, v: List[List[int]]) -> List[List[int]]:
        if len(v) != 2:
            raise ValidationError(f"slice must have two rows, got {len(v)}")
        if len(v[0]) != len(v[1]) or len(v[0]) < 2:
            raise ValidationError("slice rows must have equal length of at least 2")
        if any(c < 0 for row in v for c in row):
            raise ValidationError("slice counts must be non-negative")
        for i, row in enumerate(v):
            if sum(row) == 0:
                raise DegenerateDataError(f"row {i} of the failure slice is all zero")
        return v

    @classmethod
    def from_table(cls, table: FailureTable) -> "ContingencySlice":
        """Срез отказов таблицы исходов: строки плацебо и вакцины, столбец 0 отброшен."""
        return cls(rows=[list(table.n_p[1:]), list(table.n_v[1:])])

    @property
    def column_totals(self) -> np.ndarray:
        return np.asarray(self.rows[0]) + np.asarray(self.rows[1])

    @property
    def row_total(self) -> int:
        """Сумма первой строки."""
        return int(sum(self.rows[0]))


def _log_choose(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _support_size(cols: np.ndarray) -> float:
    return float(np.prod(cols.astype(float) + 1.0))


def hypergeometric_support(slice_: ContingencySlice) -> Tuple[np.ndarray, np.ndarray]:
    """
    Перебрать все таблицы с наблюдёнными маргиналами.

    Первая строка перебирается по столбцам; на каждом шаге отбрасываются
    частичные таблицы, которые уже нельзя дополнить до нужной суммы строки.

    Args:
        slice_: Срез отказов

    Returns:
        Tuple[np.ndarray, np.ndarray]: Первые строки всех таблиц (n x J)
        и их логарифмы вероятностей по многомерному гипергеометрическому закону
    """
    cols = slice_.column_totals
    r1 = slice_.row_total
    N = int(cols.sum())
    tail = np.concatenate([np.cumsum(cols[::-1])[::-1][1:], [0]])

    rows = np.zeros((1, 0), dtype=np.int64)
    sums = np.zeros(1, dtype=np.int64)
    logp = np.zeros(1)
    for j, c in enumerate(cols[:-1]):
        x = np.arange(c + 1)
        new_sums = (sums[:, None] + x[None, :]).ravel()
        new_logp = (logp[:, None] + _log_choose(c, x)[None, :]).ravel()
        new_rows = np.concatenate(
            [np.repeat(rows, x.size, axis=0), np.tile(x, sums.size)[:, None]], axis=1
        )
        keep = (new_sums <= r1) & (new_sums + tail[j] >= r1)
        rows, sums, logp = new_rows[keep], new_sums[keep], new_logp[keep]

    last = r1 - sums
    keep = (last >= 0) & (last <= cols[-1])
    rows = np.concatenate([rows[keep], last[keep][:, None]], axis=1)
    logp = logp[keep] + _log_choose(cols[-1], last[keep]) - _log_choose(N, r1)
    return rows, logp


def _table_log_prob(first_rows: np.ndarray, cols: np.ndarray, r1: int) -> np.ndarray:
    N = cols.sum()
    return _log_choose(cols, first_rows).sum(axis=-1) - _log_choose(N, r1)


def fisher_exact(
    slice_: ContingencySlice,
    *,
    n_mc: int = 20000,
    seed: int = 0,
) -> TestResult:
    """
    Двусторонний точный тест Фишера для таблицы 2 x J.

    p-значение - сумма вероятностей всех таблиц с наблюдёнными маргиналами,
    вероятность которых не превосходит вероятности наблюдённой таблицы
    (с относительным допуском на равенство). При числе отказов больше 500
    или слишком большом носителе используется условная оценка Монте-Карло
    со стандартной ошибкой.

    Args:
        slice_: Срез отказов
        n_mc: Число выборок для оценки Монте-Карло
        seed: Сид для оценки Монте-Карло

    Returns:
        TestResult: p-значение (statistic - вероятность наблюдённой таблицы)
    """
    cols_all = slice_.column_totals
    keep = cols_all > 0
    cols = cols_all[keep]
    observed = np.asarray(slice_.rows[0])[keep]
    r1 = slice_.row_total

    if cols.size < 2:
        return TestResult(
            method="fisher",
            statistic=1.0,
            p_value=1.0,
            details={"exact": True, "tables": 1, "columns": int(cols.size)},
        )

    log_obs = float(_table_log_prob(observed, cols, r1))
    threshold = log_obs + np.log1p(TIE_TOL)
    n_failures = int(cols.sum())

    if n_failures <= MAX_EXACT_FAILURES and _support_size(cols) <= MAX_EXACT_TABLES:
        _, logp = hypergeometric_support(
            ContingencySlice(rows=[observed.tolist(), (cols - observed).tolist()])
        )
        p_value = float(np.exp(logp[logp <= threshold]).sum())
        return TestResult(
            method="fisher",
            statistic=float(np.exp(log_obs)),
            p_value=min(p_value, 1.0),
            details={"exact": True, "tables": int(logp.size), "columns": int(cols.size)},
        )

    logger.warning(
        f"Fisher test falls back to Monte Carlo ({n_failures} failures, {cols.size} columns)"
    )
    rng = make_rng(seed)
    draws = rng.multivariate_hypergeometric(cols, r1, size=n_mc)
    hits = _table_log_prob(draws, cols, r1) <= threshold
    p_value = float(hits.mean())
    return TestResult(
        method="fisher",
        statistic=float(np.exp(log_obs)),
        p_value=p_value,
        mc_se=float(np.sqrt(p_value * (1.0 - p_value) / n_mc)),
        seed=seed,
        n_mc=n_mc,
        details={"exact": False, "columns": int(cols.size)},
    )


def fisher_from_table(table: FailureTable, **kwargs) -> TestResult:
    """Тест Фишера по таблице исходов (столбец 0 отбрасывается)."""
    return fisher_exact(ContingencySlice.from_table(table), **kwargs)
