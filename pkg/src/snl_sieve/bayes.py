"""
Байесовские процедуры: факторы Байеса методом Монте-Карло, фактор Байеса
MBS, апостериорная кривая p_s и сравнение моделей по наборам целевых типов.
"""

import itertools
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import dirichlet_multinomial

from .core import (
    efficacy_estimate,
    empty_cell_pseudocount,
    failure_probs,
    feasibility_check,
    feasible_ps_floor,
    multinomial_logpmf,
    placebo_failure_probs,
    resolve_pseudocount,
)
from .exceptions import (
    DegenerateDataError,
    InfeasibleModelError,
    SieveError,
    UnsupportedVariantError,
    ValidationError,
)
from .models import (
    FailureTable,
    ModelScanEntry,
    ModelScanResult,
    ModelVariant,
    Phase,
    PosteriorCurve,
    PriorSpec,
    TargetSpec,
    TestResult,
)
from .utils import derive_seed, make_rng, normalize_simplex

logger = logging.getLogger(__name__)

MIN_MC_DRAWS = 100
MC_BATCHES = 20
# Исчерпывающий перебор наборов целевых типов возможен до J = 12
MAX_SCAN_TYPES = 12
NULL_LABEL = "all-or-none"


# ==================== HELPERS ====================


def _check_inputs(table: FailureTable, target: TargetSpec, n_mc: int):
    if n_mc < MIN_MC_DRAWS:
        raise ValidationError(f"n_mc must be at least {MIN_MC_DRAWS}, got {n_mc}")
    if target.n_types != table.J:
        raise ValidationError(f"target set built for J={target.n_types}, table has J={table.J}")
    if table.vaccine_failures.sum() == 0:
        raise DegenerateDataError("vaccine arm has no failures")
    if table.placebo_failures.sum() == 0:
        raise DegenerateDataError("placebo arm has no failures")


def fixed_efficacy(table: FailureTable, replacement_only: bool) -> float:
    """I_E для двухфазных байесовских процедур: 0 или обрезанная оценка подстановки."""
    if replacement_only:
        return 0.0
    raw = efficacy_estimate(table)
    if raw < 0:
        logger.warning(f"Estimated efficacy {raw:.4f} is negative; fixing I_E at 0")
        return 0.0
    return min(raw, 1.0 - 1e-12)


def _uses_placebo_posterior(phase: Phase, priors: PriorSpec) -> bool:
    return phase is Phase.ONE_PHASE or priors.hierarchical


def placebo_alpha(table: FailureTable, priors: PriorSpec) -> np.ndarray:
    """
    Априорная концентрация p_c с учётом пустых ячеек плацебо.

    На ячейках без отказов плацебо концентрация не превосходит псевдосчёта
    правила priors.empty_cells.
    """
    alpha = priors.p_c_alpha(table.J).copy()
    empty = table.placebo_failures == 0
    if np.any(empty):
        alpha[empty] = np.minimum(alpha[empty], empty_cell_pseudocount(table, priors.empty_cells))
    return alpha


def draw_components(
    table: FailureTable,
    target: TargetSpec,
    priors: PriorSpec,
    phase: Phase,
    insert_only: bool,
    n: int,
    rng: np.random.Generator,
    pseudocount: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Выборки (p_c, q) из априорных (или обновлённых плацебо) распределений.

    Однофазный вариант и иерархический двухфазный берут p_c из
    Dirichlet(alpha + отказы плацебо); неиерархический двухфазный фиксирует
    p_c на оценке подстановки. В иерархическом двухфазном варианте q
    обновляется нецелевыми отказами плацебо.
    """
    J = table.J
    mask = target.mask
    x_p = table.placebo_failures

    if _uses_placebo_posterior(phase, priors):
        p_c = rng.dirichlet(placebo_alpha(table, priors) + x_p, size=n)
    else:
        p_c = np.broadcast_to(placebo_failure_probs(table, pseudocount), (n, J))

    n_rest = int((~mask).sum())
    if insert_only:
        rest = p_c[:, ~mask]
        totals = rest.sum(axis=1, keepdims=True)
        q = np.where(totals > 0, rest / np.where(totals > 0, totals, 1.0), 1.0 / n_rest)
    elif n_rest == 1:
        q = np.ones((n, 1))
    else:
        beta = priors.q_beta(n_rest, J)
        if phase is Phase.TWO_PHASE and priors.hierarchical:
            beta = beta + x_p[~mask]
        q = rng.dirichlet(beta, size=n)
    return p_c, q


def _ps_floor(I_E: float, p_cG: np.ndarray) -> np.ndarray:
    """Векторизованная нижняя граница p_s."""
    if I_E == 0:
        return np.zeros_like(p_cG)
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = I_E * (1.0 - p_cG) / (p_cG * (1.0 - I_E))
    return np.where(p_cG > 0, lo, np.inf)


def _null_log_marginal(
    table: FailureTable, priors: PriorSpec, phase: Phase, pseudocount: float
) -> float:
    x_v = table.vaccine_failures.astype(int)
    if _uses_placebo_posterior(phase, priors):
        alpha = placebo_alpha(table, priors) + table.placebo_failures
        return float(dirichlet_multinomial.logpmf(x_v, alpha, int(x_v.sum())))
    return float(multinomial_logpmf(x_v, placebo_failure_probs(table, pseudocount)))


def _mc_summary(log_weights: np.ndarray, log_null: float) -> Tuple[float, float, float]:
    """
    Оценка log-маргинала и ошибка Монте-Карло фактора Байеса по батчам.

    Returns:
        (log_marginal, bayes_factor, mc_se)
    """
    n = log_weights.size
    log_marginal = float(logsumexp(log_weights) - np.log(n))
    with np.errstate(over="ignore"):
        bf = float(np.exp(log_marginal - log_null))

    n_batches = max(2, min(MC_BATCHES, n // 5))
    batch_lbf = np.array(
        [
            logsumexp(batch) - np.log(batch.size) - log_null
            for batch in np.array_split(log_weights, n_batches)
        ]
    )
    finite = batch_lbf[np.isfinite(batch_lbf)]
    if finite.size == 0:
        return log_marginal, bf, 0.0
    scale = finite.max()
    with np.errstate(over="ignore"):
        spread = np.std(np.exp(batch_lbf - scale), ddof=1) / np.sqrt(n_batches)
        se = float(np.exp(scale) * spread)
    return log_marginal, bf, se


def _bf_label(phase: Phase, priors: PriorSpec) -> str:
    if phase is Phase.ONE_PHASE:
        return "bf-1ph"
    return "bf-hier" if priors.hierarchical else "bf-2ph"


def _log10(bf: float) -> float:
    return float(np.log10(bf)) if bf > 0 else float("-inf")


# ==================== BAYES FACTORS ====================


def bayes_factor(
    table: FailureTable,
    target: TargetSpec,
    variant: ModelVariant = ModelVariant.SOME_OR_NONE,
    phase: Phase = Phase.TWO_PHASE,
    priors: Optional[PriorSpec] = None,
    n_mc: int = 1000,
    seed: int = 0,
    *,
    zero_efficacy: Optional[bool] = None,
    pseudocount: Optional[float] = None,
) -> TestResult:
    """
    Фактор Байеса some-or-none модели против all-or-none.

    Маргинальное правдоподобие альтернативы оценивается усреднением
    правдоподобия вакцинной группы по выборкам (p_c, q, p_s) из априорных
    распределений; p_s ~ U(0, 1), усечённое до допустимого интервала при
    фиксированной I_E и выбранном p_cG. Выборки без допустимых p_s дают
    нулевое правдоподобие. Маргинал нулевой модели вычисляется точно
    (Дирихле-мультиномиальное или мультиномиальное распределение).

    Args:
        table: Таблица исходов
        target: Целевые типы
        variant: some_or_none, replacement_only или insert_only
        phase: one_phase (BF1ph) или two_phase (BF2ph / иерархический)
        priors: Априорные распределения
        n_mc: Число выборок Монте-Карло
        seed: Сид
        zero_efficacy: Фиксировать I_E = 0 (по умолчанию для replacement-only)
        pseudocount: Псевдосчёт фиксированного p_c (None - автоматически)

    Returns:
        TestResult: Фактор Байеса, log10 и стандартная ошибка Монте-Карло

    Raises:
        InfeasibleModelError: Ни одна выборка не допускает p_s в [0, 1]
    """
    priors = priors or PriorSpec()
    if variant is ModelVariant.ALL_OR_NONE:
        raise UnsupportedVariantError("the all-or-none model is the null of the Bayes factor")
    _check_inputs(table, target, n_mc)
    if zero_efficacy is None:
        zero_efficacy = variant is ModelVariant.REPLACEMENT_ONLY

    I_E = fixed_efficacy(table, zero_efficacy)
    pseudocount = resolve_pseudocount(table, pseudocount, priors.empty_cells)
    rng = make_rng(seed)

    p_c, q = draw_components(
        table, target, priors, phase, variant is ModelVariant.INSERT_ONLY, n_mc, rng, pseudocount
    )
    lo = _ps_floor(I_E, p_c[:, target.mask].sum(axis=1))
    feasible = lo <= 1.0
    if not feasible.any():
        p_cG = float(placebo_failure_probs(table, pseudocount)[target.mask].sum())
        report = feasibility_check(I_E, min(p_cG, 1.0), 1.0)
        logger.error(f"Bayes factor has no feasible prior draws: {report.describe()}")
        raise InfeasibleModelError(
            f"no prior draw admits a feasible p_s: {report.describe()}", report.model_dump()
        )

    p_s = np.where(feasible, lo + (1.0 - np.minimum(lo, 1.0)) * rng.random(n_mc), 1.0)
    p_v = failure_probs(p_c, p_s, I_E, q, target.mask)
    log_weights = np.where(feasible, multinomial_logpmf(table.vaccine_failures, p_v), -np.inf)

    log_null = _null_log_marginal(table, priors, phase, pseudocount)
    log_alt, bf, se = _mc_summary(log_weights, log_null)
    label = _bf_label(phase, priors)
    logger.debug(f"{label}: log10 BF={_log10(bf):.3f} (se {se:.3g}, {n_mc} draws)")

    return TestResult(
        method=label,
        statistic=bf,
        bayes_factor=bf,
        log10_bayes_factor=float((log_alt - log_null) / np.log(10)),
        mc_se=se,
        seed=seed,
        n_mc=n_mc,
        details={
            "variant": variant.value,
            "phase": phase.value,
            "hierarchical": _uses_placebo_posterior(phase, priors),
            "I_E": I_E,
            "pseudocount": pseudocount,
            "log_marginal_alt": log_alt,
            "log_marginal_null": log_null,
            "feasible_fraction": float(feasible.mean()),
            "priors": priors.model_dump(),
            "targets": target.targets,
        },
    )


def mbs_log_likelihood(
    table: FailureTable, target: TargetSpec, p_s, proportional: bool, pseudocount: Optional[float] = None
) -> np.ndarray:
    """
    Правдоподобие вакцинной группы в модели MBS.

    Вероятность целевого типа умножается на (1 - p_s), снятая масса
    распределяется пропорционально (proportional=True) или равномерно.
    p_c фиксирован на частотах плацебо с псевдосчётом 1/J.
    """
    mask = target.mask
    a = 1.0 / table.J if pseudocount is None else pseudocount
    p_c = placebo_failure_probs(table, a)
    rest = p_c[~mask]
    q = rest / rest.sum() if proportional else np.full(rest.size, 1.0 / rest.size)
    p_v = failure_probs(p_c, np.asarray(p_s, dtype=float), 0.0, q, mask)
    return multinomial_logpmf(table.vaccine_failures, p_v)


def mbs_bayes_factor(
    table: FailureTable,
    target: TargetSpec,
    n_mc: int = 1000,
    seed: int = 0,
    priors: Optional[PriorSpec] = None,
) -> TestResult:
    """
    Фактор Байеса MBS.

    Нулевая модель: отказы вакцины мультиномиальны с p_c по плацебо плюс
    псевдосчёт 1/J. Альтернатива: смесь i ~ Bernoulli(0.5) (равномерное или
    пропорциональное перераспределение) и p_s ~ U(0, 1).

    Raises:
        UnsupportedVariantError: Целевых типов больше одного
    """
    priors = priors or PriorSpec()
    if target.g != 1:
        raise UnsupportedVariantError(
            f"MBS targets a single failure type, got {target.g}", {"targets": target.targets}
        )
    _check_inputs(table, target, n_mc)
    a = priors.mbs_alpha(table.J)
    rng = make_rng(seed)

    proportional = rng.random(n_mc) < 0.5
    p_s = rng.random(n_mc)
    log_weights = np.where(
        proportional,
        mbs_log_likelihood(table, target, p_s, True, a),
        mbs_log_likelihood(table, target, p_s, False, a),
    )
    log_null = float(multinomial_logpmf(table.vaccine_failures, placebo_failure_probs(table, a)))
    log_alt, bf, se = _mc_summary(log_weights, log_null)

    return TestResult(
        method="mbs",
        statistic=bf,
        bayes_factor=bf,
        log10_bayes_factor=float((log_alt - log_null) / np.log(10)),
        mc_se=se,
        seed=seed,
        n_mc=n_mc,
        details={
            "pseudocount": a,
            "log_marginal_alt": log_alt,
            "log_marginal_null": log_null,
            "targets": target.targets,
        },
    )


# ==================== POSTERIOR OF p_s ====================


def ps_posterior(
    table: FailureTable,
    target: TargetSpec,
    priors: Optional[PriorSpec] = None,
    grid: Union[int, Sequence[float]] = 101,
    n_mc: int = 1000,
    seed: int = 0,
    fixed_I_E: Optional[float] = None,
    *,
    replacement_only: bool = False,
    phase: Phase = Phase.TWO_PHASE,
    variant: ModelVariant = ModelVariant.SOME_OR_NONE,
    pseudocount: Optional[float] = None,
) -> PosteriorCurve:
    """
    Ненормированная апостериорная кривая p_s.

    Для каждой точки сетки берётся логарифм среднего по выборкам (p_c, q)
    условного правдоподобия вакцинной группы. Выборки общие для всех
    точек, поэтому кривая гладкая по p_s. Выборки, для которых точка
    недопустима, дают нулевое правдоподобие.

    Args:
        table: Таблица исходов
        target: Целевые типы
        priors: Априорные распределения
        grid: Число точек (равномерно от допустимого минимума до 1) или сами точки
        n_mc: Выборок на точку
        seed: Сид
        fixed_I_E: Фиксированная эффективность (по умолчанию оценка подстановки)
        replacement_only: Положить I_E = 0
        phase: Фаза (однофазный вариант не обновляет q)
        variant: some_or_none или insert_only
        pseudocount: Псевдосчёт фиксированного p_c

    Returns:
        PosteriorCurve: Сетка, логарифм плотности и argmax

    Raises:
        InfeasibleModelError: Вся сетка недопустима
    """
    priors = priors or PriorSpec()
    _check_inputs(table, target, n_mc)
    I_E = fixed_I_E if fixed_I_E is not None else fixed_efficacy(table, replacement_only)
    if not 0.0 <= I_E < 1.0:
        raise ValidationError(f"fixed I_E={I_E} outside [0, 1)")
    pseudocount = resolve_pseudocount(table, pseudocount, priors.empty_cells)

    p_cG_hat = float(placebo_failure_probs(table, pseudocount)[target.mask].sum())
    floor = feasible_ps_floor(I_E, p_cG_hat)

    if isinstance(grid, int):
        if grid < 2:
            raise ValidationError("posterior grid needs at least two points")
        if floor > 1.0:
            report = feasibility_check(I_E, p_cG_hat, 1.0)
            logger.error(f"Posterior grid is empty: {report.describe()}")
            raise InfeasibleModelError(
                f"no feasible p_s for the estimated efficacy: {report.describe()}",
                report.model_dump(),
            )
        points = np.linspace(floor, 1.0, grid)
    else:
        points = np.asarray(grid, dtype=float)
        if points.ndim != 1 or points.size == 0 or np.any(points < 0) or np.any(points > 1):
            raise ValidationError("posterior grid points must lie in [0, 1]")
        if np.any(np.diff(points) <= 0):
            raise ValidationError("posterior grid must be strictly increasing")

    rng = make_rng(seed)
    p_c, q = draw_components(
        table, target, priors, phase, variant is ModelVariant.INSERT_ONLY, n_mc, rng, pseudocount
    )
    lo = _ps_floor(I_E, p_c[:, target.mask].sum(axis=1))

    log_density = np.empty(points.size)
    for k, p_s in enumerate(points):
        ok = lo <= p_s + 1e-12
        if not ok.any():
            log_density[k] = -np.inf
            continue
        p_v = failure_probs(p_c, p_s, I_E, q, target.mask)
        weights = np.where(ok, multinomial_logpmf(table.vaccine_failures, p_v), -np.inf)
        log_density[k] = logsumexp(weights) - np.log(n_mc)

    if not np.any(np.isfinite(log_density)):
        raise InfeasibleModelError(
            "posterior of p_s is zero on the whole grid",
            {"I_E": I_E, "p_cG": p_cG_hat, "p_s_bound": floor},
        )

    argmax = float(points[int(np.argmax(log_density))])
    logger.info(f"Posterior of p_s peaks at {argmax:.3f} ({points.size} points, {n_mc} draws)")
    return PosteriorCurve(
        grid=points.tolist(),
        log_density=log_density.tolist(),
        mc_draws_per_point=n_mc,
        argmax=argmax,
        I_E=I_E,
        targets=target.targets,
    )


# ==================== MODEL SCAN ====================


def all_target_sets(J: int) -> List[TargetSpec]:
    """Все непустые собственные подмножества {1..J}."""
    if J > MAX_SCAN_TYPES:
        raise ValidationError(
            f"exhaustive scan supports J <= {MAX_SCAN_TYPES}, got J={J}; pass explicit candidates"
        )
    sets = []
    for g in range(1, J):
        for combo in itertools.combinations(range(1, J + 1), g):
            sets.append(TargetSpec.of(list(combo), J))
    return sets


def _candidate_label(table: FailureTable, target: TargetSpec) -> str:
    return "+".join(table.label(j) for j in target.targets)


def model_scan(
    table: FailureTable,
    candidate_targets: Optional[List[TargetSpec]] = None,
    priors: Optional[PriorSpec] = None,
    prior_model_odds: Optional[Sequence[float]] = None,
    n_mc: int = 1000,
    seed: int = 0,
    *,
    replacement_only: bool = False,
    include_null: bool = True,
    phase: Phase = Phase.TWO_PHASE,
) -> ModelScanResult:
    """
    Апостериорные вероятности some-or-none моделей и all-or-none модели.

    Апостериорная вероятность пропорциональна априорной, умноженной на
    фактор Байеса против общей нулевой модели. Кандидаты, для которых
    оценка I_E превышает долю целевых типов в плацебо, отсеиваются до
    вычислений Монте-Карло. Кандидат с ошибкой получает нулевой вес и
    текст ошибки.

    Args:
        table: Таблица исходов
        candidate_targets: Наборы целевых типов (None - все при J <= 12)
        priors: Априорные распределения
        prior_model_odds: Априорные вероятности кандидатов (и нулевой модели последней)
        n_mc: Выборок Монте-Карло на кандидата
        seed: Сид
        replacement_only: Положить I_E = 0
        include_null: Включить all-or-none модель
        phase: Фаза фактора Байеса

    Returns:
        ModelScanResult: Кандидаты по убыванию апостериорной вероятности
    """
    priors = priors or PriorSpec()
    candidates = all_target_sets(table.J) if candidate_targets is None else list(candidate_targets)
    if not candidates and not include_null:
        raise ValidationError("model scan needs at least one candidate")

    n_models = len(candidates) + int(include_null)
    if prior_model_odds is None:
        prior = np.full(n_models, 1.0 / n_models)
    else:
        if len(prior_model_odds) != n_models:
            raise ValidationError(
                f"prior model odds have length {len(prior_model_odds)}, expected {n_models}"
            )
        prior = np.asarray(normalize_simplex(prior_model_odds, "prior model odds"))

    I_E = fixed_efficacy(table, replacement_only)
    pseudocount = resolve_pseudocount(table, None, priors.empty_cells)
    p_c_hat = placebo_failure_probs(table, pseudocount)

    log_bf = np.full(n_models, -np.inf)
    bfs = np.zeros(n_models)
    ses: List[Optional[float]] = [None] * n_models
    errors: List[Optional[str]] = [None] * n_models

    for k, target in enumerate(candidates):
        p_cG = float(p_c_hat[target.mask].sum())
        if I_E > p_cG:
            errors[k] = f"screened out: I_E={I_E:.4g} exceeds targeted placebo share {p_cG:.4g}"
            logger.debug(f"Candidate {target.targets} {errors[k]}")
            continue
        try:
            result = bayes_factor(
                table,
                target,
                ModelVariant.REPLACEMENT_ONLY if replacement_only else ModelVariant.SOME_OR_NONE,
                phase,
                priors,
                n_mc,
                derive_seed(seed, k),
                pseudocount=pseudocount,
            )
        except SieveError as e:
            errors[k] = e.message
            logger.warning(f"Candidate {target.targets} failed: {e.message}")
            continue
        log_bf[k] = result.log10_bayes_factor * np.log(10)
        bfs[k] = result.bayes_factor
        ses[k] = result.mc_se

    if include_null:
        log_bf[-1] = 0.0
        bfs[-1] = 1.0

    with np.errstate(divide="ignore"):
        log_post = np.log(prior) + log_bf
    if not np.any(np.isfinite(log_post)):
        raise InfeasibleModelError("every candidate model failed or was screened out")
    posterior = np.exp(log_post - logsumexp(log_post))

    entries = []
    for k in range(n_models):
        is_null = include_null and k == n_models - 1
        entries.append(
            ModelScanEntry(
                label=NULL_LABEL if is_null else _candidate_label(table, candidates[k]),
                targets=None if is_null else candidates[k].targets,
                prior=float(prior[k]),
                bayes_factor=float(bfs[k]),
                log_bayes_factor=float(log_bf[k]),
                mc_se=ses[k],
                posterior=float(posterior[k]),
                error=errors[k],
            )
        )
    entries.sort(key=lambda e: e.posterior, reverse=True)
    return ModelScanResult(entries=entries, n_mc=n_mc, seed=seed)
