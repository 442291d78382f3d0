"""
Чтение и запись файлов: таблицы исходов (CSV), сценарии (JSON), отчёты.
"""

import json
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from pydantic import ValidationError as PydanticValidationError

from .exceptions import ParseError, ValidationError
from .models import (
    FailureTable,
    GridReport,
    ModelScanResult,
    PosteriorCurve,
    RocEntry,
    ScenarioConfig,
    TestResult,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ARMS = ("P", "V")
_LINE_RE = re.compile(r"line (\d+)")
_COUNT_RE = re.compile(r"^\d+$")


# ==================== FAILURE TABLES ====================


def labels_path_for(table_path: PathLike) -> Path:
    """Путь к файлу меток рядом с таблицей: <имя>.labels.json."""
    path = Path(table_path)
    return path.with_name(f"{path.stem}.labels.json")


def _read_labels(path: Path) -> List[str]:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed label file {path}: {e.msg}", line=e.lineno)
    labels = payload.get("labels") if isinstance(payload, dict) else payload
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise ParseError(f"label file {path} must hold a list of strings")
    return labels


def read_failure_table(
    path: PathLike, labels_path: Optional[PathLike] = None
) -> FailureTable:
    """
    Прочитать таблицу исходов из CSV.

    Формат: заголовок `arm,cat0,cat1,...,catJ`, две строки данных `P,...`
    и `V,...`. Метки категорий читаются из JSON рядом с таблицей, если он
    существует.

    Args:
        path: Путь к CSV
        labels_path: Явный путь к JSON с метками

    Returns:
        FailureTable: Таблица исходов

    Raises:
        ParseError: Файл не разбирается (с номером строки и столбцом)
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(f"table file {path} not found")
    try:
        df = pd.read_csv(path, dtype=str, skipinitialspace=True, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ParseError(f"table file {path} is empty", line=1)
    except pd.errors.ParserError as e:
        match = _LINE_RE.search(str(e))
        raise ParseError(
            f"malformed CSV in {path}", line=int(match.group(1)) if match else None
        )

    columns = [str(c).strip() for c in df.columns]
    if not columns or columns[0] != "arm":
        raise ParseError("first column must be 'arm'", line=1, column=columns[0] if columns else None)
    for k, name in enumerate(columns[1:]):
        if name != f"cat{k}":
            raise ParseError(f"expected column 'cat{k}', found '{name}'", line=1, column=name)
    if len(columns) < 4:
        raise ParseError("table needs cat0 and at least two failure types", line=1)
    if df.empty:
        raise ParseError(f"table file {path} has no data rows", line=2)

    counts: Dict[str, List[int]] = {}
    for row_number, (_, row) in enumerate(df.iterrows(), start=2):
        arm = str(row.iloc[0]).strip()
        if arm not in ARMS:
            raise ParseError(f"unknown arm '{arm}' (expected P or V)", line=row_number, column="arm")
        if arm in counts:
            raise ParseError(f"duplicate arm '{arm}'", line=row_number, column="arm")
        values = []
        for name, raw in zip(columns[1:], row.iloc[1:]):
            text = str(raw).strip()
            if not _COUNT_RE.match(text):
                raise ParseError(
                    f"count '{text}' is not a non-negative integer", line=row_number, column=name
                )
            values.append(int(text))
        counts[arm] = values

    missing = [a for a in ARMS if a not in counts]
    if missing:
        raise ParseError(f"missing arm row(s): {', '.join(missing)}", line=len(df) + 2)

    sidecar = Path(labels_path) if labels_path is not None else labels_path_for(path)
    labels = None
    if sidecar.exists():
        labels = _read_labels(sidecar)
    elif labels_path is not None:
        raise ParseError(f"label file {sidecar} not found")

    try:
        table = FailureTable(n_p=counts["P"], n_v=counts["V"], labels=labels)
    except PydanticValidationError as e:
        raise ValidationError(f"invalid failure table: {e.errors()[0]['msg']}")
    logger.info(f"Loaded table {path.name}: J={table.J}, n_p={table.n_p_total}, n_v={table.n_v_total}")
    return table


def write_failure_table(table: FailureTable, path: PathLike) -> Path:
    """Записать таблицу исходов в CSV (и метки в JSON рядом)."""
    path = Path(path)
    columns = ["arm"] + [f"cat{k}" for k in range(table.J + 1)]
    df = pd.DataFrame([["P", *table.n_p], ["V", *table.n_v]], columns=columns)
    df.to_csv(path, index=False)
    if table.labels is not None:
        labels_path_for(path).write_text(json.dumps({"labels": table.labels}, indent=2), encoding="utf-8")
    return path


# ==================== SCENARIOS ====================


def load_scenarios(path: PathLike) -> List[ScenarioConfig]:
    """
    Загрузить сценарии из JSON (один объект или список).

    Raises:
        ParseError: Некорректный JSON
        ValidationError: Некорректные поля сценария
        InfeasibleModelError: Недопустимый сценарий
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(f"scenario file {path} not found")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed scenario JSON in {path}: {e.msg}", line=e.lineno, column=str(e.colno))
    items = payload if isinstance(payload, list) else [payload]
    scenarios = []
    for k, item in enumerate(items):
        try:
            scenarios.append(ScenarioConfig.model_validate(item))
        except PydanticValidationError as e:
            first = e.errors()[0]
            raise ValidationError(
                f"scenario {k}: {'.'.join(str(p) for p in first['loc'])}: {first['msg']}"
            )
    return scenarios


def read_external_decisions(path: PathLike) -> Dict[str, List[int]]:
    """
    Прочитать внешние решения (например, GWJ): столбцы scenario, replicate, decision.

    Returns:
        Dict[str, List[int]]: Решения 0/1 по сценариям в порядке репликаций
    """
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, FileNotFoundError) as e:
        raise ParseError(f"cannot read decisions from {path}: {e}")
    for column in ("scenario", "replicate", "decision"):
        if column not in df.columns:
            raise ParseError(f"decisions file lacks column '{column}'", line=1, column=column)
    bad = ~df["decision"].isin([0, 1])
    if bad.any():
        raise ParseError(
            "decisions must be 0 or 1", line=int(np.flatnonzero(bad.to_numpy())[0]) + 2, column="decision"
        )
    out = {}
    for label, group in df.sort_values(["scenario", "replicate"]).groupby("scenario", sort=False):
        out[str(label)] = group["decision"].astype(int).tolist()
    return out


# ==================== REPORTS ====================


def write_json(model: BaseModel, path: PathLike) -> Path:
    """Записать pydantic-модель в JSON."""
    path = Path(path)
    path.write_text(model.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path


def write_posterior_csv(curve: PosteriorCurve, path: PathLike) -> Path:
    """Двухстолбцовый CSV (p_s, log_density)."""
    path = Path(path)
    pd.DataFrame({"p_s": curve.grid, "log_density": curve.log_density}).to_csv(path, index=False)
    logger.info(f"Wrote {path}")
    return path


def write_null_draws_csv(result: TestResult, path: PathLike) -> Path:
    """Одностолбцовый CSV нулевых значений статистики."""
    path = Path(path)
    pd.DataFrame({"null_statistic": result.null_draws or []}).to_csv(path, index=False)
    return path


def write_grid_csv(report: GridReport, path: PathLike) -> Path:
    """Матрица долей отвержений: строки - сценарии, столбцы - методы."""
    path = Path(path)
    df = pd.DataFrame(report.rejection_rate, index=report.rows, columns=report.cols)
    df.to_csv(path, index_label="scenario")
    logger.info(f"Wrote {path}")
    return path


def write_decision_log(report: GridReport, path: PathLike) -> Path:
    """Оценки всех методов по репликациям в длинном формате."""
    path = Path(path)
    records = [
        {"scenario": scenario, "method": method, "replicate": r, "score": score}
        for scenario, by_method in report.scores.items()
        for method, values in by_method.items()
        for r, score in enumerate(values)
    ]
    pd.DataFrame(records, columns=["scenario", "method", "replicate", "score"]).to_csv(path, index=False)
    return path


def write_roc_csv(entries: List[RocEntry], path: PathLike) -> Path:
    path = Path(path)
    pd.DataFrame([e.model_dump() for e in entries]).to_csv(path, index=False)
    return path


def write_scan_csv(result: ModelScanResult, path: PathLike) -> Path:
    """Ранжированная таблица моделей."""
    path = Path(path)
    rows = [
        {
            "model": e.label,
            "targets": "" if e.targets is None else ",".join(str(t) for t in e.targets),
            "prior": e.prior,
            "bayes_factor": e.bayes_factor,
            "posterior": e.posterior,
            "error": e.error or "",
        }
        for e in result.entries
    ]
    pd.DataFrame(rows).to_csv(path, index=False)
    return path
