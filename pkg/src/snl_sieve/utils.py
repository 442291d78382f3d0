import logging
from typing import List, Sequence

import numpy as np

from .exceptions import ValidationError

logger = logging.getLogger(__name__)

# Допуск на отклонение суммы симплекса от 1, который ещё исправляется нормировкой
SIMPLEX_RENORMALIZE_TOL = 1e-6
SIMPLEX_TOL = 1e-12


def setup_logging(level: str = "INFO"):
    """Настройка логирования."""
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def derive_seed(*keys: int) -> int:
    """
    Детерминированно вывести сид из набора ключей.

    Используется для (seed, replicate), (seed, scenario, replicate) и т.п.,
    чтобы результат не зависел от порядка выполнения задач.

    Args:
        *keys: Неотрицательные целые ключи

    Returns:
        int: 32-битный сид
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def make_rng(*keys: int) -> np.random.Generator:
    """Создать генератор по набору ключей (seed, index, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def normalize_simplex(values: Sequence[float], name: str = "simplex") -> List[float]:
    """
    Проверить и при необходимости перенормировать вектор вероятностей.

    Args:
        values: Вектор вероятностей
        name: Имя вектора для сообщений об ошибках

    Returns:
        List[float]: Вектор, сумма которого равна 1

    Raises:
        ValidationError: Отрицательные элементы или сумма далека от 1
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    if np.any(arr < 0):
        raise ValidationError(
            f"{name} has negative entries", {"values": arr.tolist()}
        )
    total = float(arr.sum())
    if abs(total - 1.0) > SIMPLEX_RENORMALIZE_TOL:
        raise ValidationError(
            f"{name} sums to {total:.10g}, expected 1",
            {"sum": total, "tolerance": SIMPLEX_RENORMALIZE_TOL},
        )
    if abs(total - 1.0) > SIMPLEX_TOL:
        logger.debug(f"Renormalizing {name}: sum was {total:.12g}")
        arr = arr / total
    return arr.tolist()


def proportions(counts: Sequence[float]) -> np.ndarray:
    """Доли по вектору счётчиков (сумма должна быть положительной)."""
    arr = np.asarray(counts, dtype=float)
    total = arr.sum()
    if total <= 0:
        raise ValidationError("cannot form proportions from an empty count vector")
    return arr / total
