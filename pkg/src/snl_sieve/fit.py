"""
Подгонка максимального правдоподобия, тест отношения правдоподобий
и перестановочное нулевое распределение.

Все подгонки точные: ограничения моделей сводятся к покомпонентным
ограничениям порядка на вероятности ячеек, и оптимум находится решением
монотонного кусочно-линейного уравнения.
"""

import logging
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import erfc

from .core import (
    all_or_none_log_likelihood,
    efficacy_estimate,
    feasibility_check,
    feasible_ps_floor,
    log_likelihood,
    placebo_failure_probs,
    resolve_pseudocount,
)
from .exceptions import (
    ConvergenceError,
    DegenerateDataError,
    InfeasibleModelError,
    SieveError,
    ValidationError,
)
from .models import (
    FailureTable,
    FitResult,
    FitSettings,
    ModelVariant,
    PermutationScheme,
    Phase,
    SnlParams,
    TargetSpec,
    TestResult,
)
from .utils import make_rng

logger = logging.getLogger(__name__)

# Доля без отказа держится внутри (0, 1)
RATE_CLIP = 1e-12
IE_CEILING = 1.0 - 1e-12
# Запас ограничения I_E <= p_cG * p_t, ниже которого оптимум считается граничным
BOUNDARY_TOL = 1e-9


def _clip_rate(r: float) -> float:
    return float(min(max(r, RATE_CLIP), 1.0 - RATE_CLIP))


def _shares(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    if total <= 0:
        return np.full(counts.size, 1.0 / counts.size)
    return counts / total


# ==================== ORDER-CONSTRAINED MULTINOMIALS ====================


def _ratio_root(x: np.ndarray, y: np.ndarray, sense: np.ndarray) -> float:
    """
    Корень g(R) = sum_{+} max(0, y - R x) + sum_{-} min(0, y - R x).

    g непрерывна, кусочно-линейна с изломами в точках y/x и не возрастает,
    поэтому корень ищется точно: перебором изломов и линейной интерполяцией
    на найденном отрезке.

    Raises:
        DegenerateDataError: Корня нет (у ячеек со знаком минус нет счётчиков плацебо)
    """

    def g(R: float) -> float:
        d = y - R * x
        return float(np.maximum(d[sense > 0], 0.0).sum() + np.minimum(d[sense < 0], 0.0).sum())

    lo, g_lo = 0.0, g(0.0)
    if g_lo <= 0.0:
        return 0.0
    live = (sense != 0) & (x > 0)
    for knot in np.unique(y[live] / x[live]):
        g_knot = g(float(knot))
        if g_knot <= 0.0:
            return lo + g_lo * (knot - lo) / (g_lo - g_knot)
        lo, g_lo = float(knot), g_knot

    # За последним изломом наклон g равен минус сумме x по ячейкам со знаком минус
    slope = float(x[sense < 0].sum())
    if slope <= 0:
        raise DegenerateDataError("order-constrained fit has no solution: no placebo mass to shrink")
    return lo + g_lo / slope


def order_constrained_pair(
    x, y, sense
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Совместная оценка двух мультиномиальных векторов при ограничениях порядка.

    Максимизирует sum x log u + sum y log rho по двум симплексам при
    rho_k >= u_k (sense = +1), rho_k <= u_k (sense = -1) и rho_k = u_k
    (sense = 0). В оптимуме ячейка либо свободна (u = x / lambda,
    rho = y / mu), либо объединена (u = rho = (x + y) / N), где N - сумма
    всех счётчиков; отношение mu / lambda - корень монотонного уравнения.

    Args:
        x: Счётчики первой группы
        y: Счётчики второй группы
        sense: Знак ограничения по ячейкам

    Returns:
        Tuple[np.ndarray, np.ndarray]: (u, rho)
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sense = np.asarray(sense, dtype=float)
    N = x.sum() + y.sum()
    pooled = (x + y) / N

    R = _ratio_root(x, y, sense)
    d = y - R * x
    free = ((sense > 0) & (d > 0)) | ((sense < 0) & (d < 0))
    X, Y = float(x[free].sum()), float(y[free].sum())
    if X <= 0 or Y <= 0:
        return pooled, pooled.copy()

    lam = X * N / (X + Y)
    mu = Y * N / (X + Y)
    return np.where(free, x / lam, pooled), np.where(free, y / mu, pooled)


def water_fill(counts, lo, hi) -> np.ndarray:
    """
    Мультиномиальная оценка с покомпонентными границами.

    Максимум sum c log rho при lo <= rho <= hi и sum rho = 1 имеет вид
    rho = clip(c t, lo, hi); уровень t находится точно по изломам.

    Args:
        counts: Счётчики
        lo: Нижние границы (sum lo <= 1)
        hi: Верхние границы (может быть inf)

    Returns:
        np.ndarray: rho
    """
    counts = np.asarray(counts, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    def total(t: float) -> float:
        return float(np.clip(counts * t, lo, hi).sum())

    prev, s_prev = 0.0, total(0.0)
    if s_prev >= 1.0:
        return lo / s_prev
    pos = counts > 0
    knots = np.concatenate([lo[pos] / counts[pos], hi[pos] / counts[pos]])
    for knot in np.unique(knots[np.isfinite(knots)]):
        s = total(float(knot))
        if s >= 1.0:
            t = prev + (1.0 - s_prev) * (knot - prev) / (s - s_prev)
            return np.clip(counts * t, lo, hi)
        prev, s_prev = float(knot), s

    slope = float(counts[pos & np.isinf(hi)].sum())
    if slope <= 0:
        rho = np.clip(counts * prev, lo, hi)
        return rho / rho.sum()
    return np.clip(counts * (prev + (1.0 - s_prev) / slope), lo, hi)


# ==================== FITTING ====================


def _check_table(table: FailureTable, target: TargetSpec):
    if target.n_types != table.J:
        raise ValidationError(
            f"target set built for J={target.n_types}, table has J={table.J}"
        )
    if table.placebo_failures.sum() == 0 or table.vaccine_failures.sum() == 0:
        raise DegenerateDataError(
            "each arm needs at least one failure",
            {
                "placebo": int(table.placebo_failures.sum()),
                "vaccine": int(table.vaccine_failures.sum()),
            },
        )


def _fixed_efficacy(table: FailureTable, zero_efficacy: bool) -> float:
    if zero_efficacy:
        return 0.0
    raw = efficacy_estimate(table)
    if raw < 0:
        logger.warning(f"Estimated efficacy {raw:.4f} is negative; fixing I_E at 0")
        return 0.0
    return min(raw, IE_CEILING)


def _nontarget_share(p_c: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return _shares(np.asarray(p_c, dtype=float)[~mask])


def _replacement_share(extra: np.ndarray, p_c: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # При нулевой массе замещения q не идентифицируется
    extra = np.clip(extra, 0.0, None)
    if extra.sum() <= 1e-15:
        return _nontarget_share(p_c, mask)
    return extra / extra.sum()


def _fit_all_or_none(
    table: FailureTable,
    target: TargetSpec,
    phase: Phase,
    zero_efficacy: bool,
    settings: FitSettings,
) -> FitResult:
    pseudocount = 0.0
    if phase is Phase.TWO_PHASE:
        pseudocount = resolve_pseudocount(table, settings.pseudocount, settings.empty_cells)
        p_c = placebo_failure_probs(table, pseudocount)
        I_E = _fixed_efficacy(table, zero_efficacy)
        r_c0 = _clip_rate(table.n_p[0] / table.n_p_total)
    else:
        pooled = table.placebo_failures + table.vaccine_failures
        p_c = pooled / pooled.sum()
        r_c0 = table.n_p[0] / table.n_p_total
        r_v0 = table.n_v[0] / table.n_v_total
        if zero_efficacy or r_v0 < r_c0:
            # Ограничение I_E >= 0 активно: доли без отказа объединяются
            r_c0 = r_v0 = (table.n_p[0] + table.n_v[0]) / (table.n_p_total + table.n_v_total)
        r_c0 = _clip_rate(r_c0)
        I_E = min(max(1.0 - (1.0 - r_v0) / (1.0 - r_c0), 0.0), IE_CEILING)

    log_lik = all_or_none_log_likelihood(table, p_c, r_c0, I_E, phase)
    params = SnlParams(
        p_c=p_c.tolist(), p_s=0.0, I_E=I_E, r_c0=r_c0, q=_nontarget_share(p_c, target.mask).tolist()
    )
    return FitResult(
        params=params,
        log_lik=log_lik,
        variant=ModelVariant.ALL_OR_NONE,
        phase=phase,
        converged=True,
        pseudocount=pseudocount,
        message="closed form",
    )


def _fit_one_phase(
    table: FailureTable, target: TargetSpec, zero_efficacy: bool, insert_only: bool
) -> SnlParams:
    """
    Однофазная оценка some-or-none модели.

    Ячейки: отсутствие отказа (rho_0 >= u_0, равенство при I_E = 0),
    объединённые целевые типы (rho_G <= u_G) и нецелевые типы
    (rho_j >= u_j; при insert-only объединяются). Доли внутри объединённых
    ячеек общие для обеих групп и оцениваются по суммарным счётчикам.
    """
    mask = target.mask
    x_f = table.placebo_failures.astype(float)
    y_f = table.vaccine_failures.astype(float)
    if x_f[mask].sum() <= 0:
        raise DegenerateDataError(
            "no placebo failures of the targeted types", {"targets": target.targets}
        )

    x_nt, y_nt = x_f[~mask], y_f[~mask]
    if insert_only:
        x_nt, y_nt = x_nt.sum(keepdims=True), y_nt.sum(keepdims=True)
    x = np.concatenate([[table.n_p[0], x_f[mask].sum()], x_nt])
    y = np.concatenate([[table.n_v[0], y_f[mask].sum()], y_nt])
    sense = np.concatenate([[0.0 if zero_efficacy else 1.0, -1.0], np.ones(x_nt.size)])
    u, rho = order_constrained_pair(x, y, sense)

    p_c = np.empty(table.J)
    p_c[mask] = u[1] * _shares(x_f[mask] + y_f[mask])
    if insert_only:
        p_c[~mask] = u[2] * _shares(x_f[~mask] + y_f[~mask])
    else:
        p_c[~mask] = u[2:]
    p_c = p_c / p_c.sum()

    I_E = 0.0
    if not zero_efficacy:
        I_E = float(np.clip(1.0 - (1.0 - rho[0]) / (1.0 - u[0]), 0.0, IE_CEILING))
    p_t = float(np.clip(1.0 - rho[1] / u[1], 0.0, 1.0))
    p_s = float(np.clip(1.0 - (1.0 - p_t) / (1.0 - I_E), 0.0, 1.0))
    if insert_only:
        q = _nontarget_share(p_c, mask)
    else:
        q = _replacement_share(rho[2:] - u[2:], p_c, mask)

    return SnlParams(p_c=p_c.tolist(), p_s=p_s, I_E=I_E, r_c0=_clip_rate(u[0]), q=q.tolist())


def _fit_two_phase(
    table: FailureTable, target: TargetSpec, p_c: np.ndarray, I_E: float, insert_only: bool
) -> SnlParams:
    """
    Двухфазная оценка при фиксированных p_c и I_E.

    Целевые типы объединяются (0 <= rho_G <= (p_cG - I_E) / (1 - I_E)),
    нецелевые ограничены снизу: rho_j >= p_cj / (1 - I_E). Верхняя граница
    rho_G соответствует наименьшему допустимому p_s.
    """
    mask = target.mask
    y = table.vaccine_failures.astype(float)
    p_cG = float(p_c[mask].sum())
    cap = (p_cG - I_E) / (1.0 - I_E)

    if insert_only:
        rho_G = min(max(y[mask].sum() / y.sum(), 0.0), cap)
        q = _nontarget_share(p_c, mask)
    else:
        floor_nt = p_c[~mask] / (1.0 - I_E)
        rho = water_fill(
            np.concatenate([[y[mask].sum()], y[~mask]]),
            np.concatenate([[0.0], floor_nt]),
            np.concatenate([[cap], np.full(floor_nt.size, np.inf)]),
        )
        rho_G = float(rho[0])
        q = _replacement_share(rho[1:] - floor_nt, p_c, mask)

    p_s = float(np.clip(1.0 - rho_G / p_cG, 0.0, 1.0))
    return SnlParams(
        p_c=p_c.tolist(),
        p_s=p_s,
        I_E=I_E,
        r_c0=_clip_rate(table.n_p[0] / table.n_p_total),
        q=q.tolist(),
    )


def fit_mle(
    table: FailureTable,
    target: TargetSpec,
    variant: ModelVariant = ModelVariant.SOME_OR_NONE,
    phase: Phase = Phase.TWO_PHASE,
    *,
    zero_efficacy: Optional[bool] = None,
    settings: Optional[FitSettings] = None,
) -> FitResult:
    """
    Подгонка максимального правдоподобия.

    Однофазная подгонка максимизирует полное совместное правдоподобие по
    (r_c0, p_c, I_E, p_s, q). Двухфазная фиксирует p_c по плацебо (с
    псевдосчётом при пустых ячейках), I_E по оценке подстановки и
    максимизирует условное правдоподобие вакцинной группы по (p_s, q).
    Оптимум вычисляется точно, без случайных стартов.

    Args:
        table: Таблица исходов
        target: Целевые типы
        variant: Вариант модели
        phase: Фаза анализа
        zero_efficacy: Фиксировать I_E = 0 (по умолчанию для replacement-only)
        settings: Псевдосчёт и правило для пустых ячеек

    Returns:
        FitResult: Результат подгонки

    Raises:
        DegenerateDataError: В одной из групп нет отказов или нет целевых отказов плацебо
        InfeasibleModelError: Зафиксированная I_E недостижима ни при каком p_s
    """
    settings = settings or FitSettings()
    if zero_efficacy is None:
        zero_efficacy = variant is ModelVariant.REPLACEMENT_ONLY
    if variant is ModelVariant.REPLACEMENT_ONLY and not zero_efficacy:
        raise ValidationError("replacement-only model requires zero efficacy")
    _check_table(table, target)

    if variant is ModelVariant.ALL_OR_NONE:
        return _fit_all_or_none(table, target, phase, zero_efficacy, settings)

    insert_only = variant is ModelVariant.INSERT_ONLY
    pseudocount = 0.0
    if phase is Phase.ONE_PHASE:
        params = _fit_one_phase(table, target, zero_efficacy, insert_only)
    else:
        pseudocount = resolve_pseudocount(table, settings.pseudocount, settings.empty_cells)
        p_c = placebo_failure_probs(table, pseudocount)
        I_E = _fixed_efficacy(table, zero_efficacy)
        p_cG = float(p_c[target.mask].sum())
        if p_cG <= 0:
            raise DegenerateDataError(
                "no placebo failures of the targeted types", {"targets": target.targets}
            )
        if feasible_ps_floor(I_E, p_cG) > 1.0:
            report = feasibility_check(I_E, p_cG, 1.0)
            logger.error(f"Two-phase fit infeasible: {report.describe()}")
            raise InfeasibleModelError(
                f"estimated efficacy exceeds the targeted placebo share: {report.describe()}",
                report.model_dump(),
            )
        params = _fit_two_phase(table, target, p_c, I_E, insert_only)

    log_lik = log_likelihood(table, params, target, phase)
    p_cG = float(np.asarray(params.p_c)[target.mask].sum())
    report = feasibility_check(params.I_E, p_cG, params.p_s)
    at_boundary = params.I_E > 0 and report.slack <= BOUNDARY_TOL
    if at_boundary:
        logger.info("Optimum lies on the feasibility boundary; chi-squared reference is approximate")
    logger.debug(f"MLE {variant.value}/{phase.value}: p_s={params.p_s:.4f}, log_lik={log_lik:.4f}")

    return FitResult(
        params=params,
        log_lik=log_lik,
        variant=variant,
        phase=phase,
        converged=True,
        at_boundary=bool(at_boundary),
        pseudocount=pseudocount,
        message="closed form",
    )


# ==================== TESTS ====================


def chi2_sf_1df(x: float) -> float:
    """
    Верхний хвост хи-квадрат с одной степенью свободы.

    P(X > x) = erfc(sqrt(x / 2)).

    Raises:
        ValidationError: x < 0
    """
    if np.isnan(x) or x < 0:
        raise ValidationError(f"chi-squared statistic must be non-negative, got {x}")
    return float(erfc(np.sqrt(x / 2.0)))


def _method_label(phase: Phase) -> str:
    return "lrt-1phase" if phase is Phase.ONE_PHASE else "lrt-2phase"


def lrt(
    table: FailureTable,
    target: TargetSpec,
    variant: ModelVariant = ModelVariant.SOME_OR_NONE,
    phase: Phase = Phase.TWO_PHASE,
    *,
    zero_efficacy: Optional[bool] = None,
    settings: Optional[FitSettings] = None,
) -> TestResult:
    """
    Тест отношения правдоподобий some-or-none против all-or-none.

    Нулевая модель - all-or-none с тем же режимом эффективности. Статистика
    обрезается снизу нулём; сырое значение сохраняется в details.

    Returns:
        TestResult: Статистика и p-значение по хи-квадрат(1)
    """
    settings = settings or FitSettings()
    if zero_efficacy is None:
        zero_efficacy = variant is ModelVariant.REPLACEMENT_ONLY

    alt = fit_mle(table, target, variant, phase, zero_efficacy=zero_efficacy, settings=settings)
    null = fit_mle(
        table, target, ModelVariant.ALL_OR_NONE, phase, zero_efficacy=zero_efficacy, settings=settings
    )
    if not np.isfinite(alt.log_lik) and not np.isfinite(null.log_lik):
        raise DegenerateDataError("the data have zero probability under both models")

    raw = 2.0 * (alt.log_lik - null.log_lik)
    if raw < -1e-8 and zero_efficacy:
        logger.warning(f"Nested LRT statistic is negative ({raw:.3g}); clipping at 0")
    statistic = max(raw, 0.0)

    return TestResult(
        method=_method_label(phase),
        statistic=statistic,
        p_value=chi2_sf_1df(statistic),
        params=alt.params,
        details={
            "variant": variant.value,
            "phase": phase.value,
            "zero_efficacy": zero_efficacy,
            "log_lik_alt": alt.log_lik,
            "log_lik_null": null.log_lik,
            "raw_statistic": raw,
            "converged": alt.converged,
            "at_boundary": alt.at_boundary,
            "pseudocount": alt.pseudocount,
            "targets": target.targets,
        },
    )


def lrt_statistic(
    target: TargetSpec,
    variant: ModelVariant = ModelVariant.SOME_OR_NONE,
    phase: Phase = Phase.TWO_PHASE,
    *,
    zero_efficacy: Optional[bool] = None,
    settings: Optional[FitSettings] = None,
) -> Callable[[FailureTable], float]:
    """Функция-статистика -2 log LR для перестановочного движка."""

    def _statistic(table: FailureTable) -> float:
        return lrt(
            table, target, variant, phase, zero_efficacy=zero_efficacy, settings=settings
        ).statistic

    return _statistic


# ==================== PERMUTATION ====================


def permute_labels(
    table: FailureTable,
    rng: np.random.Generator,
    scheme: PermutationScheme = PermutationScheme.SUBJECTS,
) -> FailureTable:
    """
    Перемешать метки групп.

    SUBJECTS перемешивает метки всех участников: сохраняются размеры групп
    и суммарные счётчики категорий. FAILURES перемешивает метки только
    среди отказов: дополнительно сохраняются число отказов в каждой группе
    и столбец отсутствия отказа.
    """
    pooled = np.asarray(table.n_p) + np.asarray(table.n_v)
    if scheme is PermutationScheme.FAILURES:
        failures = rng.permutation(np.repeat(np.arange(1, pooled.size), pooled[1:]))
        split = int(table.placebo_failures.sum())
        n_p = np.bincount(failures[:split], minlength=pooled.size)
        n_v = np.bincount(failures[split:], minlength=pooled.size)
        n_p[0], n_v[0] = table.n_p[0], table.n_v[0]
    else:
        subjects = rng.permutation(np.repeat(np.arange(pooled.size), pooled))
        n_p = np.bincount(subjects[: table.n_p_total], minlength=pooled.size)
        n_v = np.bincount(subjects[table.n_p_total :], minlength=pooled.size)
    return FailureTable(n_p=n_p.tolist(), n_v=n_v.tolist(), labels=table.labels)


def permutation_null(
    table: FailureTable,
    statistic: Callable[[FailureTable], float],
    B: int = 1000,
    seed: int = 0,
    *,
    observed: Optional[float] = None,
    method: str = "permutation",
    scheme: PermutationScheme = PermutationScheme.SUBJECTS,
) -> TestResult:
    """
    Перестановочное нулевое распределение статистики.

    Метки групп перемешиваются B раз (репликация b использует генератор,
    выведенный из (seed, b, попытка)). Если статистика не вычисляется на
    перемешанной таблице, репликация пересэмплируется; всего допускается
    не более 10 * B попыток.

    Args:
        table: Наблюдённая таблица
        statistic: Функция таблица -> число
        B: Число перестановок
        seed: Сид
        observed: Уже вычисленное наблюдённое значение
        method: Метка метода в результате
        scheme: Что перемешивается (участники или только отказы)

    Returns:
        TestResult: p = (1 + #{null >= observed}) / (1 + B) и нулевые значения

    Raises:
        ConvergenceError: Исчерпан лимит попыток
    """
    if B < 1:
        raise ValidationError(f"number of permutations must be positive, got {B}")
    obs = float(statistic(table)) if observed is None else float(observed)
    if np.isnan(obs):
        raise ValidationError("observed statistic is NaN")

    draws: List[float] = []
    attempts = 0
    resampled = 0
    for b in range(B):
        attempt = 0
        while True:
            if attempts >= 10 * B:
                logger.error(f"Permutation engine gave up after {attempts} attempts")
                raise ConvergenceError(
                    f"statistic failed on too many permuted tables ({resampled} of {attempts})",
                    {"B": B, "attempts": attempts, "completed": len(draws)},
                )
            attempts += 1
            permuted = permute_labels(table, make_rng(seed, b, attempt), scheme)
            try:
                value = float(statistic(permuted))
            except (SieveError, ValueError, FloatingPointError) as e:
                logger.debug(f"Permutation {b} attempt {attempt} failed: {e}")
                value = float("nan")
            if not np.isnan(value):
                break
            attempt += 1
            resampled += 1
        draws.append(value)

    if resampled:
        logger.warning(f"Resampled {resampled} permuted tables on which the statistic failed")

    null = np.asarray(draws)
    tol = 1e-9 * max(1.0, abs(obs)) if np.isfinite(obs) else 0.0
    exceed = int(np.sum(null >= obs - tol))
    return TestResult(
        method=method,
        statistic=obs,
        p_value=(1.0 + exceed) / (1.0 + B),
        null_draws=draws,
        seed=seed,
        B=B,
        details={"exceedances": exceed, "resampled": resampled, "scheme": scheme.value},
    )


def perm_lrt(
    table: FailureTable,
    target: TargetSpec,
    variant: ModelVariant = ModelVariant.SOME_OR_NONE,
    phase: Phase = Phase.TWO_PHASE,
    *,
    B: int = 1000,
    seed: int = 0,
    zero_efficacy: Optional[bool] = None,
    settings: Optional[FitSettings] = None,
    scheme: PermutationScheme = PermutationScheme.FAILURES,
) -> TestResult:
    """
    Перестановочный вариант LRT.

    Псевдосчёт для фиксированного p_c определяется по наблюдённой таблице
    и затем используется для всех перестановок. По умолчанию метки
    перемешиваются только среди отказов, то есть нуль условен на маргиналах
    таблицы отказов.
    """
    settings = settings or FitSettings()
    settings = settings.model_copy(
        update={
            "pseudocount": resolve_pseudocount(table, settings.pseudocount, settings.empty_cells)
        }
    )
    observed = lrt(table, target, variant, phase, zero_efficacy=zero_efficacy, settings=settings)
    result = permutation_null(
        table,
        lrt_statistic(target, variant, phase, zero_efficacy=zero_efficacy, settings=settings),
        B=B,
        seed=seed,
        observed=observed.statistic,
        method="perm-lrt",
        scheme=scheme,
    )
    return result.model_copy(
        update={
            "params": observed.params,
            "details": {
                **result.details,
                **observed.details,
                "asymptotic_p_value": observed.p_value,
            },
        }
    )
