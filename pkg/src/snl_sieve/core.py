"""
Математическое ядро some-or-none моделей.

Отображение первичных параметров в профиль вакцинной группы, ограничение
допустимости, оценки подстановки и функция правдоподобия.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import gammaln, xlog1py, xlogy

from .exceptions import DegenerateDataError, InfeasibleModelError, ValidationError
from .models import (
    CounterfactualSummary,
    DerivedRates,
    EmptyCellRule,
    FailureTable,
    FeasibilityReport,
    InsertOnlyKind,
    InsertOnlyReading,
    Phase,
    PluginEstimate,
    SnlParams,
    TargetSpec,
)

logger = logging.getLogger(__name__)

# Допуск на совпадение с границей допустимости
FEASIBILITY_TOL = 1e-12


# ==================== FEASIBILITY ====================


def take_rate(p_s, I_E):
    """p_t = 1 - (1 - p_s)(1 - I_E); работает и с массивами."""
    return 1.0 - (1.0 - np.asarray(p_s, dtype=float)) * (1.0 - np.asarray(I_E, dtype=float))


def feasibility_check(I_E: float, p_cG: float, p_s: float) -> FeasibilityReport:
    """
    Проверить ограничение I_E <= p_cG * p_t.

    Кроме вердикта возвращаются три эквивалентные односторонние границы:
    на I_E (при данных p_cG, p_s), на p_cG (при данных I_E, p_s) и на p_s
    (при данных I_E, p_cG).

    Args:
        I_E: Эффективность вмешательства
        p_cG: Суммарная доля целевых типов среди отказов плацебо
        p_s: Сила эффекта решета

    Returns:
        FeasibilityReport: Вердикт, запас и границы
    """
    for name, value in (("I_E", I_E), ("p_cG", p_cG), ("p_s", p_s)):
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"{name}={value} outside [0, 1]")

    p_t = 1.0 - (1.0 - p_s) * (1.0 - I_E)
    slack = p_cG * p_t - I_E

    denom = 1.0 - p_cG * (1.0 - p_s)
    ie_bound = p_cG * p_s / denom if denom > 0 else 1.0

    denom = p_s + I_E * (1.0 - p_s)
    p_cg_bound = I_E / denom if denom > 0 else 0.0

    if p_cG > 0 and I_E < 1.0:
        p_s_bound = I_E * (1.0 - p_cG) / (p_cG * (1.0 - I_E))
    else:
        p_s_bound = 0.0 if I_E == 0 else float("inf")

    return FeasibilityReport(
        feasible=bool(slack >= -FEASIBILITY_TOL),
        slack=float(slack),
        ie_bound=float(ie_bound),
        p_cg_bound=float(p_cg_bound),
        p_s_bound=float(p_s_bound),
        I_E=float(I_E),
        p_cG=float(p_cG),
        p_s=float(p_s),
    )


def feasible_ps_floor(I_E: float, p_cG: float) -> float:
    """
    Наименьшее допустимое p_s при данных I_E и p_cG.

    Returns:
        float: Нижняя граница p_s (может быть > 1, если допустимых нет)
    """
    if I_E == 0:
        return 0.0
    if p_cG <= 0:
        return float("inf")
    return I_E * (1.0 - p_cG) / (p_cG * (1.0 - I_E))


def _check_dims(params: SnlParams, target: TargetSpec):
    if params.J != target.n_types:
        raise ValidationError(
            f"p_c has {params.J} failure types but the target set was built for {target.n_types}"
        )
    expected = target.n_types - target.g
    if len(params.q) != expected:
        raise ValidationError(
            f"q has length {len(params.q)}, expected {expected} non-targeted types",
            {"targets": target.targets},
        )


def ensure_feasible(params: SnlParams, target: TargetSpec) -> FeasibilityReport:
    """Проверить размерности и допустимость, иначе InfeasibleModelError."""
    _check_dims(params, target)
    p_cG = float(np.asarray(params.p_c)[target.mask].sum())
    report = feasibility_check(params.I_E, p_cG, params.p_s)
    if not report.feasible:
        raise InfeasibleModelError(
            f"infeasible parameters: {report.describe()}", report.model_dump()
        )
    return report


# ==================== VACCINE PROFILE ====================


def failure_probs(p_c, p_s, I_E: float, q, mask: np.ndarray) -> np.ndarray:
    """
    Векторизованное отображение (p_c, p_s, I_E, q) -> p_v.

    Args:
        p_c: Массив (..., J) распределений отказов плацебо
        p_s: Скаляр или массив (...) сил решета
        I_E: Эффективность (скаляр)
        q: Массив (..., J - g) или (J - g,) распределений замещения
        mask: Булева маска целевых типов длины J

    Returns:
        np.ndarray: p_v той же формы, что и p_c
    """
    p_c = np.asarray(p_c, dtype=float)
    p_s = np.asarray(p_s, dtype=float)
    q = np.asarray(q, dtype=float)

    p_cG = p_c[..., mask].sum(axis=-1)
    p_t = take_rate(p_s, I_E)
    # Масса замещения; отрицательные значения - ошибка округления на границе
    moved = np.clip(p_cG * p_t - I_E, 0.0, None)

    p_v = np.empty(np.broadcast_shapes(p_c.shape, p_s.shape + (1,)))
    p_v[..., mask] = p_c[..., mask] * (1.0 - p_s)[..., None]
    p_v[..., ~mask] = (p_c[..., ~mask] + moved[..., None] * q) / (1.0 - I_E)
    return p_v


def replacement_rate(I_E: float, p_cG: float, p_t: float) -> float:
    """
    Доля замещения p_2 = 1 - I_E / (p_cG * p_t).

    При p_cG * p_t = 0 и I_E = 0 принимается предельное значение 1.
    """
    denom = p_cG * p_t
    if denom > 0:
        return float(min(max(1.0 - I_E / denom, 0.0), 1.0))
    if I_E == 0:
        return 1.0
    raise InfeasibleModelError(
        f"replacement rate undefined: I_E={I_E} with p_cG*p_t=0",
        {"I_E": I_E, "p_cG": p_cG, "p_t": p_t},
    )


def vaccine_profile(params: SnlParams, target: TargetSpec) -> DerivedRates:
    """
    Вычислить профиль вакцинной группы.

    Args:
        params: Первичные параметры
        target: Целевые типы

    Returns:
        DerivedRates: p_t, p_2, p_v, r_v0, p_cG

    Raises:
        InfeasibleModelError: Нарушено ограничение I_E <= p_cG * p_t
    """
    report = ensure_feasible(params, target)
    p_t = 1.0 - (1.0 - params.p_s) * (1.0 - params.I_E)
    p_2 = replacement_rate(params.I_E, report.p_cG, p_t)
    p_v = failure_probs(params.p_c, params.p_s, params.I_E, params.q, target.mask)
    # Сумма равна 1 алгебраически; нормировка снимает только ошибку округления
    p_v = p_v / p_v.sum()
    r_v0 = 1.0 - (1.0 - params.I_E) * (1.0 - params.r_c0)
    return DerivedRates(
        p_t=float(p_t), p_2=p_2, p_v=p_v.tolist(), r_v0=float(r_v0), p_cG=report.p_cG
    )


def sieve_strength(p_t: float, p_2: float, p_cG: float) -> float:
    """
    Сила решета по (p_t, p_2, p_cG).

    p_s = p_t (1 - p_cG (1 - p_2)) / (1 - p_t p_cG (1 - p_2))
    """
    lost = p_t * p_cG * (1.0 - p_2)
    if lost >= 1.0:
        raise ValidationError("sieve strength undefined when every failure is avoided")
    return float(p_t * (1.0 - p_cG * (1.0 - p_2)) / (1.0 - lost))


def counterfactual_summary(params: SnlParams, target: TargetSpec) -> CounterfactualSummary:
    """
    Контрфактическая интерпретация p_s.

    all_or_none_efficacy - эффективность, которую имело бы вмешательство,
    если бы ответившие были защищены от всех типов (равна p_t).
    """
    rates = vaccine_profile(params, target)
    return CounterfactualSummary(
        p_s=params.p_s,
        p_t=rates.p_t,
        p_2=rates.p_2,
        I_E=params.I_E,
        all_or_none_efficacy=rates.p_t,
        sieve_share=params.p_s,
        take_share=1.0 - params.p_s,
        unavoided_probability=1.0 - rates.p_t * rates.p_cG * (1.0 - rates.p_2),
        r_v0=rates.r_v0,
    )


def insert_only_interpretations(
    I_E: float, p_cG: float, p_s: float
) -> List[InsertOnlyReading]:
    """
    Три прочтения insert-only модели.

    Все три дают одинаковые вероятности целевых типов в вакцинной группе
    и q_v = q_c для нецелевых:

    - no_replacement: замещений нет, p_2 = 0; I_E на своей границе при
      данных (p_cG, p_s), p_t = I_E / p_cG;
    - replacement_only: I_E = 0, p_2 = 1, p_t = p_s;
    - non_replacement_only: наблюдаемые (I_E, p_s), p_2 из тождества.

    Args:
        I_E: Эффективность
        p_cG: Доля целевых типов
        p_s: Сила решета

    Returns:
        List[InsertOnlyReading]: Три прочтения
    """
    report = feasibility_check(I_E, p_cG, p_s)
    if not report.feasible:
        raise InfeasibleModelError(
            f"insert-only reading infeasible: {report.describe()}", report.model_dump()
        )
    if p_cG <= 0:
        raise DegenerateDataError("insert-only readings need a positive targeted mass")

    readings = []

    # Без замещений каждое избежание целевого отказа идёт в эффективность
    denom = 1.0 - p_cG * (1.0 - p_s)
    I_E_nr = p_cG * p_s / denom if denom > 0 else 1.0
    readings.append(
        InsertOnlyReading(
            kind=InsertOnlyKind.NO_REPLACEMENT,
            p_t=min(I_E_nr / p_cG, 1.0),
            p_2=0.0,
            I_E=I_E_nr,
            p_s=p_s,
        )
    )
    readings.append(
        InsertOnlyReading(
            kind=InsertOnlyKind.REPLACEMENT_ONLY, p_t=p_s, p_2=1.0, I_E=0.0, p_s=p_s
        )
    )
    p_t = 1.0 - (1.0 - p_s) * (1.0 - I_E)
    readings.append(
        InsertOnlyReading(
            kind=InsertOnlyKind.NON_REPLACEMENT_ONLY,
            p_t=p_t,
            p_2=replacement_rate(I_E, p_cG, p_t),
            I_E=I_E,
            p_s=p_s,
        )
    )
    return readings


# ==================== PLUG-IN ESTIMATES ====================


def efficacy_estimate(table: FailureTable) -> float:
    """Сырая оценка Î_E = 1 - (доля отказов вакцины) / (доля отказов плацебо)."""
    rate_p = (table.n_p_total - table.n_p[0]) / table.n_p_total
    rate_v = (table.n_v_total - table.n_v[0]) / table.n_v_total
    if rate_p <= 0:
        raise DegenerateDataError("placebo arm has no failures")
    return float(1.0 - rate_v / rate_p)


def placebo_failure_probs(table: FailureTable, pseudocount: float = 0.0) -> np.ndarray:
    """Оценка p_c по отказам плацебо с псевдосчётом на категорию."""
    counts = table.placebo_failures + pseudocount
    total = counts.sum()
    if total <= 0:
        raise DegenerateDataError("placebo arm has no failures")
    return counts / total


def empty_cell_pseudocount(table: FailureTable, rule: EmptyCellRule) -> float:
    """Псевдосчёт правила: 1/(2N) для VANISHING, 1 для LAPLACE."""
    if rule is EmptyCellRule.LAPLACE:
        return 1.0
    return 1.0 / (2.0 * (table.n_p_total + table.n_v_total))


def resolve_pseudocount(
    table: FailureTable,
    pseudocount: Optional[float],
    rule: EmptyCellRule = EmptyCellRule.VANISHING,
) -> float:
    """
    Определить псевдосчёт для фиксированного p_c.

    Явное значение возвращается как есть. None означает выбор по правилу:
    0, если среди отказов плацебо нет пустых ячеек, иначе псевдосчёт
    правила для каждой ячейки.

    Args:
        table: Таблица исходов
        pseudocount: Явный псевдосчёт или None
        rule: Правило для пустых ячеек

    Returns:
        float: Псевдосчёт на ячейку
    """
    if pseudocount is not None:
        return float(pseudocount)
    if np.any(table.placebo_failures == 0):
        return empty_cell_pseudocount(table, rule)
    return 0.0


def plugin_from_rates(
    p_c: Sequence[float],
    p_v: Sequence[float],
    I_E: float,
    target: TargetSpec,
    *,
    I_E_raw: Optional[float] = None,
    r_c0: Optional[float] = None,
    clamped: bool = False,
    consistent_take: bool = False,
) -> PluginEstimate:
    """
    Оценки подстановки по частотам отказов двух групп.

    По умолчанию p̂_t = 1 - (1 - p̂_s) / (1 - Î_E), как в опубликованных
    оценках. При consistent_take используется тождество модели
    p̂_t = 1 - (1 - p̂_s)(1 - Î_E); тогда оценки по точным ожидаемым
    частотам возвращают исходные параметры и при Î_E > 0.

    Args:
        p_c: Частоты типов отказов плацебо
        p_v: Частоты типов отказов вакцины
        I_E: Используемая эффективность (после фиксации/обрезки)
        target: Целевые типы
        I_E_raw: Исходная оценка эффективности
        r_c0: Доля без отказа в плацебо
        clamped: Была ли эффективность обрезана до 0
        consistent_take: Оценивать p_t по тождеству модели

    Returns:
        PluginEstimate: Оценки и список нарушенных ограничений
    """
    p_c = np.asarray(p_c, dtype=float)
    p_v = np.asarray(p_v, dtype=float)
    mask = target.mask
    violations: List[str] = []

    p_cG = float(p_c[mask].sum())
    p_vG = float(p_v[mask].sum())
    if p_cG <= 0:
        raise DegenerateDataError(
            "no placebo failures of the targeted types; p_s is not identified",
            {"targets": target.targets},
        )

    p_s = 1.0 - p_vG / p_cG
    if consistent_take:
        p_t = float(take_rate(p_s, I_E))
    else:
        p_t = 1.0 - (1.0 - p_s) / (1.0 - I_E)

    p_2: Optional[float] = None
    denom = p_cG * p_t
    if denom > 0:
        p_2 = 1.0 - I_E / denom
    elif I_E == 0:
        p_2 = 1.0
    else:
        violations.append("p_2 undefined: p_cG*p_t <= 0 with positive I_E")

    q: Optional[List[float]] = None
    if p_2 is not None:
        denom = p_cG * p_t * p_2
        if abs(denom) > 1e-15:
            q_arr = ((1.0 - I_E) * p_v[~mask] - p_c[~mask]) / denom
            q = q_arr.tolist()
            if np.any(q_arr < -1e-12) or np.any(q_arr > 1 + 1e-12):
                violations.append("q outside [0, 1]")
            if abs(q_arr.sum() - 1.0) > 1e-9:
                violations.append(f"q sums to {q_arr.sum():.6g}")
        else:
            violations.append("q not identified: no replacement mass")

    for name, value in (("p_s", p_s), ("p_t", p_t), ("p_2", p_2)):
        if value is not None and not -1e-12 <= value <= 1 + 1e-12:
            violations.append(f"{name}={value:.6g} outside [0, 1]")

    if violations:
        logger.debug(f"Plug-in estimates violate constraints: {violations}")

    return PluginEstimate(
        p_c=p_c.tolist(),
        p_v=p_v.tolist(),
        r_c0=r_c0,
        I_E=I_E,
        I_E_raw=I_E if I_E_raw is None else I_E_raw,
        p_s=float(p_s),
        p_t=float(p_t),
        p_2=None if p_2 is None else float(p_2),
        q=q,
        clamped_efficacy=clamped,
        violations=violations,
    )


def plugin_estimates(
    table: FailureTable,
    target: TargetSpec,
    assume_replacement_only: bool = False,
    *,
    consistent_take: bool = False,
) -> PluginEstimate:
    """
    Оценки подстановки по таблице исходов.

    Args:
        table: Таблица исходов
        target: Целевые типы
        assume_replacement_only: Принудительно положить Î_E = 0
        consistent_take: Оценивать p_t по тождеству p_t = 1 - (1 - p_s)(1 - I_E)

    Returns:
        PluginEstimate: Оценки и отчёт о нарушенных ограничениях

    Raises:
        DegenerateDataError: В одной из групп нет отказов
    """
    if table.placebo_failures.sum() == 0 or table.vaccine_failures.sum() == 0:
        raise DegenerateDataError(
            "each arm needs at least one failure",
            {"placebo": int(table.placebo_failures.sum()), "vaccine": int(table.vaccine_failures.sum())},
        )
    if target.n_types != table.J:
        raise ValidationError(f"target set built for J={target.n_types}, table has J={table.J}")

    I_E_raw = efficacy_estimate(table)
    clamped = False
    if assume_replacement_only:
        I_E = 0.0
    elif I_E_raw < 0:
        logger.warning(
            f"Estimated efficacy {I_E_raw:.4f} is negative; clamping to 0 "
            f"(consider the replacement-only model)"
        )
        I_E = 0.0
        clamped = True
    else:
        I_E = I_E_raw

    return plugin_from_rates(
        placebo_failure_probs(table),
        table.vaccine_failures / table.vaccine_failures.sum(),
        I_E,
        target,
        I_E_raw=I_E_raw,
        r_c0=table.n_p[0] / table.n_p_total,
        clamped=clamped,
        consistent_take=consistent_take,
    )


# ==================== LIKELIHOOD ====================


def multinomial_logpmf(x, p) -> np.ndarray:
    """
    Логарифм мультиномиальной вероятности; p может быть пакетом (..., J).

    Нулевая вероятность при положительном счётчике даёт -inf.
    """
    x = np.asarray(x, dtype=float)
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    n = x.sum()
    return gammaln(n + 1) - gammaln(x + 1).sum() + xlogy(x, p).sum(axis=-1)


def binomial_logpmf(k: float, n: float, p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    return (
        gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
        + xlogy(k, p) + xlog1py(n - k, -p)
    )


def log_likelihood(
    table: FailureTable,
    params: SnlParams,
    target: TargetSpec,
    phase: Phase = Phase.ONE_PHASE,
    include_nonfailure: bool = False,
) -> float:
    """
    Логарифм правдоподобия some-or-none модели.

    Однофазный вариант - полное совместное правдоподобие: биномиальные
    члены для отсутствия отказа в обеих группах и мультиномиальные члены
    для типов отказов. Двухфазный - только мультиномиальный член вакцинной
    группы при фиксированном p_c (биномиальный член добавляется при
    include_nonfailure).

    Args:
        table: Таблица исходов
        params: Первичные параметры
        target: Целевые типы
        phase: Фаза анализа
        include_nonfailure: Добавить биномиальный член вакцинной группы

    Returns:
        float: Логарифм вероятности (может быть -inf)
    """
    rates = vaccine_profile(params, target)
    value = multinomial_logpmf(table.vaccine_failures, rates.p_v)

    if phase is Phase.ONE_PHASE:
        value += multinomial_logpmf(table.placebo_failures, params.p_c)
        value += binomial_logpmf(table.n_p[0], table.n_p_total, params.r_c0)
        value += binomial_logpmf(table.n_v[0], table.n_v_total, rates.r_v0)
    elif include_nonfailure:
        value += binomial_logpmf(table.n_v[0], table.n_v_total, rates.r_v0)

    value = float(value)
    return value if not np.isnan(value) else float("-inf")


def expected_counts(
    params: SnlParams, target: TargetSpec, counterfactual_counts: Sequence[float]
) -> List[float]:
    """
    Ожидаемые счётчики вакцинной группы по контрфактическим счётчикам.

    E[n_vj] = n_cj (1 - p_t) для целевых j;
    E[n_v0] = n_c0 + n_cG p_t (1 - p_2);
    E[n_vj] = n_cj + n_cG p_t p_2 q_j для нецелевых j.

    Args:
        params: Первичные параметры
        target: Целевые типы
        counterfactual_counts: Счётчики n_c длины J + 1

    Returns:
        List[float]: Ожидаемые счётчики длины J + 1
    """
    n_c = np.asarray(counterfactual_counts, dtype=float)
    if n_c.size != target.n_types + 1:
        raise ValidationError(
            f"counterfactual counts have length {n_c.size}, expected {target.n_types + 1}"
        )
    rates = vaccine_profile(params, target)
    mask = target.mask
    failures = n_c[1:]
    n_cG = failures[mask].sum()

    out = np.empty_like(n_c)
    out[0] = n_c[0] + n_cG * rates.p_t * (1.0 - rates.p_2)
    shifted = np.empty_like(failures)
    shifted[mask] = failures[mask] * (1.0 - rates.p_t)
    shifted[~mask] = failures[~mask] + n_cG * rates.p_t * rates.p_2 * np.asarray(params.q)
    out[1:] = shifted
    return out.tolist()


# ==================== GENERATIVE ORACLE ====================


def simulate_subjects(
    params: SnlParams, target: TargetSpec, n: int, rng: np.random.Generator
) -> np.ndarray:
    """
    Прямое моделирование вакцинной группы на уровне участников.

    Каждому участнику сначала сопоставляется контрфактический исход,
    затем независимо ответ на вмешательство (вероятность p_t). Ответивший
    с целевым контрфактическим отказом избегает его и с вероятностью p_2
    получает нецелевой отказ из q.

    Args:
        params: Первичные параметры
        target: Целевые типы
        n: Число участников
        rng: Генератор случайных чисел

    Returns:
        np.ndarray: Счётчики категорий 0..J
    """
    rates = vaccine_profile(params, target)
    J = params.J
    probs = np.concatenate([[params.r_c0], (1.0 - params.r_c0) * np.asarray(params.p_c)])
    outcome = rng.choice(J + 1, size=n, p=probs)

    targeted = np.concatenate([[False], target.mask])[outcome]
    took = rng.random(n) < rates.p_t
    avoided = took & targeted
    replaced = avoided & (rng.random(n) < rates.p_2)

    outcome[avoided & ~replaced] = 0
    n_replaced = int(replaced.sum())
    if n_replaced:
        nontargets = np.asarray(target.nontargets)
        outcome[replaced] = rng.choice(nontargets, size=n_replaced, p=params.q)
    return np.bincount(outcome, minlength=J + 1)


def all_or_none_log_likelihood(
    table: FailureTable,
    p_c: Sequence[float],
    r_c0: float,
    I_E: float,
    phase: Phase = Phase.ONE_PHASE,
) -> float:
    """
    Логарифм правдоподобия all-or-none модели (p_v = p_c).

    В двухфазном варианте остаётся только мультиномиальный член вакцинной
    группы при фиксированном p_c.
    """
    value = multinomial_logpmf(table.vaccine_failures, p_c)
    if phase is Phase.ONE_PHASE:
        r_v0 = 1.0 - (1.0 - I_E) * (1.0 - r_c0)
        value += multinomial_logpmf(table.placebo_failures, p_c)
        value += binomial_logpmf(table.n_p[0], table.n_p_total, r_c0)
        value += binomial_logpmf(table.n_v[0], table.n_v_total, r_v0)
    value = float(value)
    return value if not np.isnan(value) else float("-inf")
