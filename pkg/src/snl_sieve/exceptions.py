from typing import Dict, Optional


class SieveError(Exception):
    """Базовое исключение для анализа решета."""

    def __init__(self, message: str, details: Optional[Dict] = None):
        self.message = message
        self.details = details or {}
        super().__init__(self.message)


class ValidationError(SieveError):
    """Ошибка валидации входных данных или параметров."""

    pass


class ParseError(ValidationError):
    """Ошибка разбора CSV/JSON файла."""

    def __init__(
        self,
        message: str,
        line: Optional[int] = None,
        column: Optional[str] = None,
        details: Optional[Dict] = None,
    ):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message, {**(details or {}), "line": line, "column": column})


class UnsupportedVariantError(ValidationError):
    """Вариант модели не поддерживается данной процедурой."""

    pass


class DegenerateDataError(SieveError):
    """Вырожденные данные (пустые маргиналы, нулевые строки)."""

    pass


class InfeasibleModelError(SieveError):
    """Нарушено ограничение допустимости I_E <= p_cG * p_t."""

    pass


class ConvergenceError(SieveError):
    """Оптимизация или пересэмплирование не завершились."""

    pass


# Коды выхода CLI
EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_INFEASIBLE = 3
EXIT_NO_CONVERGENCE = 4

_EXIT_CODES = {
    ValidationError: EXIT_INPUT_ERROR,
    DegenerateDataError: EXIT_INPUT_ERROR,
    InfeasibleModelError: EXIT_INFEASIBLE,
    ConvergenceError: EXIT_NO_CONVERGENCE,
}


def exit_code_for(exc: BaseException) -> int:
    """
    Получить код выхода CLI для исключения.

    Args:
        exc: Исключение

    Returns:
        int: Код выхода (2, 3 или 4; 1 для непредвиденных ошибок)
    """
    for exception_class, code in _EXIT_CODES.items():
        if isinstance(exc, exception_class):
            return code
    return 1
