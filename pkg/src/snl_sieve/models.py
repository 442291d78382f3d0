from __future__ import annotations

from datetime import datetime
from enum import Enum
from typing import Any, ClassVar, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .exceptions import InfeasibleModelError, ValidationError
from .utils import SIMPLEX_TOL, normalize_simplex


# ==================== ENUMS ====================


class ModelVariant(str, Enum):
    """Варианты моделей some-or-none."""

    ALL_OR_NONE = "all_or_none"
    SOME_OR_NONE = "some_or_none"
    REPLACEMENT_ONLY = "replacement_only"
    INSERT_ONLY = "insert_only"


class Phase(str, Enum):
    """Одно- или двухфазный анализ."""

    ONE_PHASE = "one_phase"
    # Условное правдоподобие только по вакцинной группе при фиксированном p_c
    TWO_PHASE = "two_phase"


class QMode(str, Enum):
    """Распределение замещающих отказов в сценарии."""

    UNIFORM = "uniform"
    INSERT_ONLY = "insert_only"


class NullMode(str, Enum):
    """Нулевые сценарии симуляционного исследования."""

    NONE = "none"
    ALL_OR_NONE_NULL = "all_or_none_null"
    PERMUTED_ONE_OR_NONE = "permuted_one_or_none"


class InsertOnlyKind(str, Enum):
    """Три прочтения insert-only модели."""

    NO_REPLACEMENT = "no_replacement"
    REPLACEMENT_ONLY = "replacement_only"
    NON_REPLACEMENT_ONLY = "non_replacement_only"


class EmptyCellRule(str, Enum):
    """
    Псевдосчёт для пустых ячеек отказов плацебо.

    Если хотя бы одна ячейка пуста, псевдосчёт добавляется ко всем ячейкам.
    """

    # 1 / (2N), N - число участников обеих групп
    VANISHING = "vanishing"
    # Единица на ячейку
    LAPLACE = "laplace"


class PermutationScheme(str, Enum):
    """Что перемешивается при построении перестановочного нуля."""

    # Метки групп всех участников: сохраняются размеры групп и итоги категорий
    SUBJECTS = "subjects"
    # Метки групп только среди отказов: сохраняются и маргиналы таблицы отказов
    FAILURES = "failures"


# ==================== DATA MODELS ====================


class FailureTable(BaseModel):
    """
    Таблица исходов двух групп.

    Индекс 0 - отсутствие отказа, индексы 1..J - типы отказов.
    """

    n_p: List[int]
    n_v: List[int]
    labels: Optional[List[str]] = None

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_counts(self) -> "FailureTable":
        if len(self.n_p) != len(self.n_v):
            raise ValidationError(
                "placebo and vaccine count vectors differ in length",
                {"n_p": len(self.n_p), "n_v": len(self.n_v)},
            )
        if len(self.n_p) < 3:
            raise ValidationError("a failure table needs at least two failure types")
        if any(c < 0 for c in self.n_p) or any(c < 0 for c in self.n_v):
            raise ValidationError("counts must be non-negative")
        if sum(self.n_p) == 0 or sum(self.n_v) == 0:
            raise ValidationError("each arm needs at least one subject")
        if self.labels is not None and len(self.labels) != len(self.n_p):
            raise ValidationError(
                "labels must name every category including 0",
                {"labels": len(self.labels), "categories": len(self.n_p)},
            )
        return self

    @property
    def J(self) -> int:
        """Число типов отказов."""
        return len(self.n_p) - 1

    @property
    def n_p_total(self) -> int:
        return sum(self.n_p)

    @property
    def n_v_total(self) -> int:
        return sum(self.n_v)

    @property
    def placebo_failures(self) -> np.ndarray:
        """Счётчики отказов плацебо по типам 1..J."""
        return np.asarray(self.n_p[1:], dtype=float)

    @property
    def vaccine_failures(self) -> np.ndarray:
        """Счётчики отказов вакцины по типам 1..J."""
        return np.asarray(self.n_v[1:], dtype=float)

    def label(self, j: int) -> str:
        """Имя категории j (0 - без отказа)."""
        if self.labels is not None:
            return self.labels[j]
        return f"cat{j}"


class TargetSpec(BaseModel):
    """Набор типов отказов, на которые действует g-or-none вмешательство."""

    targets: List[int]
    n_types: int

    model_config = ConfigDict(frozen=True)

    @field_validator("targets")
    @classmethod
    def _sorted_unique(cls, v: List[int]) -> List[int]:
        return sorted(set(int(t) for t in v))

    @model_validator(mode="after")
    def _check_subset(self) -> "TargetSpec":
        if not self.targets:
            raise ValidationError("target set must not be empty")
        if any(t < 1 or t > self.n_types for t in self.targets):
            raise ValidationError(
                f"target indices must lie in 1..{self.n_types}",
                {"targets": self.targets},
            )
        if len(self.targets) >= self.n_types:
            raise ValidationError(
                "target set must be a strict subset of the failure types",
                {"targets": self.targets, "J": self.n_types},
            )
        return self

    @classmethod
    def of(cls, targets, n_types: int) -> "TargetSpec":
        if isinstance(targets, int):
            targets = [targets]
        return cls(targets=list(targets), n_types=n_types)

    @property
    def g(self) -> int:
        return len(self.targets)

    @property
    def mask(self) -> np.ndarray:
        """Булева маска длины J по типам 1..J (True - целевой тип)."""
        m = np.zeros(self.n_types, dtype=bool)
        m[np.asarray(self.targets) - 1] = True
        return m

    @property
    def nontargets(self) -> List[int]:
        return [j for j in range(1, self.n_types + 1) if j not in self.targets]

    @property
    def order(self) -> List[int]:
        """Перестановка, ставящая целевые типы на позиции 1..g."""
        return list(self.targets) + self.nontargets


class SnlParams(BaseModel):
    """Первичные параметры some-or-none модели."""

    p_c: List[float]
    p_s: float = Field(ge=0.0, le=1.0)
    I_E: float = Field(ge=0.0, lt=1.0)
    r_c0: float = Field(gt=0.0, lt=1.0)
    q: List[float]

    model_config = ConfigDict(frozen=True)

    @field_validator("p_c")
    @classmethod
    def _p_c_simplex(cls, v: List[float]) -> List[float]:
        return normalize_simplex(v, "p_c")

    @field_validator("q")
    @classmethod
    def _q_simplex(cls, v: List[float]) -> List[float]:
        return normalize_simplex(v, "q")

    @property
    def J(self) -> int:
        return len(self.p_c)


class DerivedRates(BaseModel):
    """Производные величины профиля вакцины."""

    p_t: float
    p_2: float
    p_v: List[float]
    r_v0: float
    p_cG: float

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_simplex(self) -> "DerivedRates":
        if abs(sum(self.p_v) - 1.0) > 1e-10:
            raise ValidationError("p_v does not sum to 1", {"sum": sum(self.p_v)})
        return self


class FeasibilityReport(BaseModel):
    """Вердикт ограничения I_E <= p_cG * (1 - (1 - p_s)(1 - I_E))."""

    feasible: bool
    slack: float
    ie_bound: float
    p_cg_bound: float
    p_s_bound: float
    I_E: float
    p_cG: float
    p_s: float

    model_config = ConfigDict(frozen=True)

    def describe(self) -> str:
        return (
            f"I_E={self.I_E:.4g} <= p_cG*p_t={self.I_E + self.slack:.4g} "
            f"(bounds: I_E <= {self.ie_bound:.4g}, p_cG >= {self.p_cg_bound:.4g}, "
            f"p_s >= {self.p_s_bound:.4g})"
        )


class PluginEstimate(BaseModel):
    """Оценки подстановки; могут нарушать совместные ограничения."""

    p_c: List[float]
    p_v: List[float]
    r_c0: Optional[float] = None
    I_E: float
    I_E_raw: float
    p_s: float
    p_t: float
    p_2: Optional[float] = None
    q: Optional[List[float]] = None
    clamped_efficacy: bool = False
    violations: List[str] = Field(default_factory=list)

    model_config = ConfigDict(frozen=True)

    @property
    def valid(self) -> bool:
        return not self.violations


class CounterfactualSummary(BaseModel):
    """Интерпретация силы решета p_s."""

    p_s: float
    p_t: float
    p_2: float
    I_E: float
    all_or_none_efficacy: float
    sieve_share: float
    take_share: float
    unavoided_probability: float
    r_v0: float

    model_config = ConfigDict(frozen=True)


class InsertOnlyReading(BaseModel):
    """Одно из трёх прочтений insert-only модели."""

    kind: InsertOnlyKind
    p_t: float
    p_2: float
    I_E: float
    p_s: float

    model_config = ConfigDict(frozen=True)


# ==================== RESULTS ====================


class FitResult(BaseModel):
    """Результат подгонки максимального правдоподобия."""

    params: SnlParams
    log_lik: float
    variant: ModelVariant
    phase: Phase
    converged: bool
    iterations: int = 0
    at_boundary: bool = False
    pseudocount: float = 0.0
    message: str = ""

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")


class TestResult(BaseModel):
    """Результат теста: статистика, p-значение или фактор Байеса."""

    __test__: ClassVar[bool] = False

    method: str
    statistic: float
    p_value: Optional[float] = None
    bayes_factor: Optional[float] = None
    log10_bayes_factor: Optional[float] = None
    mc_se: Optional[float] = None
    null_draws: Optional[List[float]] = None
    params: Optional[SnlParams] = None
    seed: Optional[int] = None
    B: Optional[int] = None
    n_mc: Optional[int] = None
    details: Dict[str, Any] = Field(default_factory=dict)

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    @field_validator("p_value")
    @classmethod
    def _p_in_unit(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not (0.0 <= v <= 1.0):
            raise ValidationError(f"p-value {v} outside [0, 1]")
        return v


class PriorSpec(BaseModel):
    """Априорные распределения байесовских процедур."""

    p_c_concentration: Optional[List[float]] = None
    q_concentration: Optional[List[float]] = None
    hierarchical: bool = True
    mbs_pseudocount: Optional[float] = None
    # Концентрация p_c на пустых ячейках плацебо не превосходит псевдосчёта правила
    empty_cells: EmptyCellRule = EmptyCellRule.VANISHING

    model_config = ConfigDict(frozen=True)

    @field_validator("p_c_concentration", "q_concentration")
    @classmethod
    def _positive(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None and any(a <= 0 for a in v):
            raise ValidationError("Dirichlet concentrations must be positive")
        return v

    def p_c_alpha(self, J: int) -> np.ndarray:
        """Концентрация Дирихле для p_c (по умолчанию единицы)."""
        if self.p_c_concentration is None:
            return np.ones(J)
        if len(self.p_c_concentration) != J:
            raise ValidationError(
                f"p_c concentration has length {len(self.p_c_concentration)}, expected {J}"
            )
        return np.asarray(self.p_c_concentration, dtype=float)

    def q_beta(self, size: int, J: int) -> np.ndarray:
        """Концентрация Дирихле для q (по умолчанию 1/J на каждый нецелевой тип)."""
        if self.q_concentration is None:
            return np.full(size, 1.0 / J)
        if len(self.q_concentration) != size:
            raise ValidationError(
                f"q concentration has length {len(self.q_concentration)}, expected {size}"
            )
        return np.asarray(self.q_concentration, dtype=float)

    def mbs_alpha(self, J: int) -> float:
        return 1.0 / J if self.mbs_pseudocount is None else self.mbs_pseudocount


class PosteriorCurve(BaseModel):
    """Ненормированная апостериорная кривая p_s."""

    grid: List[float]
    log_density: List[float]
    mc_draws_per_point: int
    argmax: float
    I_E: float
    targets: List[int]

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")


class ModelScanEntry(BaseModel):
    """Строка ранжирования моделей."""

    label: str
    targets: Optional[List[int]] = None
    prior: float
    bayes_factor: float = 0.0
    log_bayes_factor: float = float("-inf")
    mc_se: Optional[float] = None
    posterior: float = 0.0
    error: Optional[str] = None

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")


class ModelScanResult(BaseModel):
    """Апостериорные вероятности some-or-none моделей и нулевой модели."""

    entries: List[ModelScanEntry]
    n_mc: int
    seed: int

    model_config = ConfigDict(frozen=True)

    def posterior_of(self, targets: Optional[List[int]]) -> float:
        for entry in self.entries:
            if entry.targets == (sorted(targets) if targets is not None else None):
                return entry.posterior
        raise KeyError(targets)


# ==================== SIMULATION ====================

# Вектор p_c симуляционного исследования (сумма 1.000006, нормируется при создании)
STUDY_P_C = [0.815, 0.171, 0.0135, 0.0005, 0.000006]


class ScenarioConfig(BaseModel):
    """Генеративные настройки одного сценария симуляции."""

    label: str
    n_p: int = Field(default=1000, ge=1)
    n_v: int = Field(default=1000, ge=1)
    r_c0: float = Field(default=0.9, gt=0.0, lt=1.0)
    p_c: List[float] = Field(default_factory=lambda: list(STUDY_P_C))
    targets: List[int] = Field(default_factory=lambda: [1])
    I_E: float = Field(default=0.0, ge=0.0, lt=1.0)
    p_s: float = Field(default=0.0, ge=0.0, le=1.0)
    q_mode: QMode = QMode.UNIFORM
    null_mode: NullMode = NullMode.NONE
    replicates: int = Field(default=1000, ge=1)
    seed: int = 0

    model_config = ConfigDict(frozen=True)

    @field_validator("p_c")
    @classmethod
    def _normalize_p_c(cls, v: List[float]) -> List[float]:
        # Опубликованный вектор суммируется в 1.000006
        arr = np.asarray(v, dtype=float)
        if np.any(arr < 0) or arr.sum() <= 0:
            raise ValidationError("scenario p_c must be non-negative with positive sum")
        if abs(arr.sum() - 1.0) > 1e-4:
            raise ValidationError(f"scenario p_c sums to {arr.sum():.6g}")
        return (arr / arr.sum()).tolist()

    @model_validator(mode="after")
    def _check_feasible(self) -> "ScenarioConfig":
        from .core import feasibility_check

        target = self.target()
        if self.null_mode is NullMode.ALL_OR_NONE_NULL:
            return self
        p_cG = float(np.asarray(self.p_c)[target.mask].sum())
        report = feasibility_check(self.I_E, p_cG, self.p_s)
        if not report.feasible:
            raise InfeasibleModelError(
                f"scenario '{self.label}' is infeasible: {report.describe()}",
                report.model_dump(),
            )
        return self

    def target(self) -> TargetSpec:
        return TargetSpec.of(self.targets, len(self.p_c))

    def q_vector(self) -> List[float]:
        """Распределение замещения по нецелевым типам."""
        target = self.target()
        non = np.asarray(self.p_c)[~target.mask]
        if self.q_mode is QMode.INSERT_ONLY and non.sum() > 0:
            return (non / non.sum()).tolist()
        return (np.ones(non.size) / non.size).tolist()

    def params(self) -> SnlParams:
        return SnlParams(
            p_c=self.p_c, p_s=self.p_s, I_E=self.I_E, r_c0=self.r_c0, q=self.q_vector()
        )


class GridReport(BaseModel):
    """Матрица долей отвержений: сценарии x методы."""

    rows: List[str]
    cols: List[str]
    rejection_rate: List[List[float]]
    replicates: List[int]
    error_counts: List[List[int]]
    seed: int
    scenario_seeds: List[int]
    scores: Dict[str, Dict[str, List[float]]] = Field(default_factory=dict)
    settings: Dict[str, Any] = Field(default_factory=dict)

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    def rate(self, row: str, col: str) -> float:
        return self.rejection_rate[self.rows.index(row)][self.cols.index(col)]

    def with_external_column(
        self, name: str, decisions: Dict[str, List[int]]
    ) -> "GridReport":
        """
        Добавить столбец внешних решений (0/1 на репликацию), например GWJ.

        Args:
            name: Имя метода
            decisions: Решения по метке сценария

        Returns:
            GridReport: Новый отчёт с дополнительным столбцом
        """
        rates = []
        errors = []
        for i, row in enumerate(self.rows):
            values = decisions.get(row)
            if values is None:
                raise ValidationError(f"no external decisions for scenario '{row}'")
            if len(values) != self.replicates[i]:
                raise ValidationError(
                    f"scenario '{row}' has {len(values)} external decisions, "
                    f"expected {self.replicates[i]}"
                )
            rates.append(self.rejection_rate[i] + [float(np.mean(values))])
            errors.append(self.error_counts[i] + [0])
        return self.model_copy(
            update={
                "cols": self.cols + [name],
                "rejection_rate": rates,
                "error_counts": errors,
            }
        )


class Decision(BaseModel):
    """Решение одного метода на одной репликации."""

    method: str
    reject: bool
    score: Optional[float] = None
    error: Optional[str] = None

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")


class RocEntry(BaseModel):
    """AUC одного метода на паре (позитивный, негативный) сценариев."""

    method: str
    positive: str
    negative: str
    auc: float
    n_pos: int
    n_neg: int

    model_config = ConfigDict(frozen=True)


# ==================== SETTINGS / REPORTS ====================


class FitSettings(BaseModel):
    """Настройки подгонки."""

    # None - по правилу empty_cells: 0, если в плацебо нет пустых ячеек
    pseudocount: Optional[float] = Field(default=None, ge=0)
    empty_cells: EmptyCellRule = EmptyCellRule.VANISHING

    model_config = ConfigDict(frozen=True)


class RunnerSettings(BaseModel):
    """Настройки прогона сетки симуляций."""

    alpha: float = Field(default=0.05, gt=0, lt=1)
    bf_threshold: float = Field(default=1.0, gt=0)
    n_mc: int = Field(default=1000, ge=10)
    n_permutations: int = Field(default=100, ge=1)
    max_workers: Optional[int] = None
    # LRT-методы сравнивают распределения типов отказов при I_E = 0,
    # BF-методы фиксируют I_E на оценке подстановки
    lrt_variant: ModelVariant = ModelVariant.REPLACEMENT_ONLY
    bf_variant: ModelVariant = ModelVariant.SOME_OR_NONE
    # В таблицах симуляции почти всегда пуста ячейка с p_c = 6e-6
    fit: FitSettings = Field(
        default_factory=lambda: FitSettings(empty_cells=EmptyCellRule.LAPLACE)
    )
    priors: PriorSpec = Field(
        default_factory=lambda: PriorSpec(empty_cells=EmptyCellRule.LAPLACE)
    )

    model_config = ConfigDict(frozen=True)


class AnalysisReport(BaseModel):
    """Отчёт команды analyze."""

    table: FailureTable
    targets: List[int]
    order: List[int]
    replacement_only: bool
    plugin: Optional[PluginEstimate] = None
    results: Dict[str, TestResult] = Field(default_factory=dict)
    errors: Dict[str, str] = Field(default_factory=dict)

    model_config = ConfigDict(frozen=True)


class RunManifest(BaseModel):
    """Манифест запуска: всё, что нужно для воспроизведения результата."""

    command: str
    inputs: List[str] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int
    tool_version: str
    started_at: datetime
    finished_at: Optional[datetime] = None
    outputs: List[str] = Field(default_factory=list)


__all__ = [
    # Enums
    "ModelVariant",
    "Phase",
    "QMode",
    "NullMode",
    "InsertOnlyKind",
    "EmptyCellRule",
    "PermutationScheme",
    # Data
    "FailureTable",
    "TargetSpec",
    "SnlParams",
    "DerivedRates",
    "FeasibilityReport",
    "PluginEstimate",
    "CounterfactualSummary",
    "InsertOnlyReading",
    # Results
    "FitResult",
    "TestResult",
    "PosteriorCurve",
    "ModelScanEntry",
    "ModelScanResult",
    "Decision",
    "GridReport",
    "RocEntry",
    "AnalysisReport",
    "RunManifest",
    # Configuration
    "STUDY_P_C",
    "PriorSpec",
    "ScenarioConfig",
    "FitSettings",
    "RunnerSettings",
]
