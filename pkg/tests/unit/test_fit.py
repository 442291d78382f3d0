"""
Unit tests for maximum-likelihood fitting, the LRT and the permutation engine.
"""

import numpy as np
import pytest
from scipy import stats

from snl_sieve.analyzer import SieveAnalyzer
from snl_sieve.core import feasible_ps_floor, log_likelihood
from snl_sieve.exceptions import (
    ConvergenceError,
    DegenerateDataError,
    InfeasibleModelError,
    ValidationError,
)
from snl_sieve.fit import (
    chi2_sf_1df,
    fit_mle,
    lrt,
    order_constrained_pair,
    perm_lrt,
    permutation_null,
    permute_labels,
    water_fill,
)
from snl_sieve.models import (
    EmptyCellRule,
    FailureTable,
    FitSettings,
    ModelVariant,
    PermutationScheme,
    Phase,
    ScenarioConfig,
    SnlParams,
    TargetSpec,
)
from snl_sieve.simulation import simulate_dataset
from snl_sieve.utils import make_rng


@pytest.fixture
def shifted_table():
    """Счётчики, точно ожидаемые при p_c = (0.8, 0.2), p_s = 0.5, I_E = 0."""
    return FailureTable(n_p=[900, 80, 20], n_v=[900, 40, 60])


class TestChiSquared:
    """Тесты хвоста хи-квадрат."""

    def test_critical_value(self):
        assert chi2_sf_1df(3.8415) == pytest.approx(0.05, abs=1e-4)

    def test_zero(self):
        assert chi2_sf_1df(0.0) == 1.0

    def test_negative(self):
        with pytest.raises(ValidationError):
            chi2_sf_1df(-1.0)


class TestFitMle:
    """Тесты подгонки максимального правдоподобия."""

    def test_two_phase_recovers_sieve(self, shifted_table):
        target = TargetSpec.of([1], 2)
        fit = fit_mle(shifted_table, target, ModelVariant.REPLACEMENT_ONLY, Phase.TWO_PHASE)
        assert fit.converged
        assert fit.params.p_s == pytest.approx(0.5, abs=1e-4)
        assert fit.params.I_E == 0.0
        assert fit.pseudocount == 0.0

    def test_one_phase_recovers_sieve(self, shifted_table):
        target = TargetSpec.of([1], 2)
        fit = fit_mle(shifted_table, target, ModelVariant.REPLACEMENT_ONLY, Phase.ONE_PHASE)
        assert fit.params.p_s == pytest.approx(0.5, abs=1e-9)
        assert fit.params.p_c == pytest.approx([0.8, 0.2], abs=1e-9)
        assert fit.params.r_c0 == pytest.approx(0.9, abs=1e-9)

    def test_all_or_none_closed_form(self, shifted_table):
        fit = fit_mle(shifted_table, TargetSpec.of([1], 2), ModelVariant.ALL_OR_NONE, Phase.TWO_PHASE)
        assert fit.variant is ModelVariant.ALL_OR_NONE
        assert fit.params.p_s == 0.0
        assert fit.message == "closed form"

    def test_some_or_none_beats_all_or_none(self, step_table, step_target):
        alt = fit_mle(step_table, step_target, ModelVariant.SOME_OR_NONE, Phase.ONE_PHASE)
        null = fit_mle(step_table, step_target, ModelVariant.ALL_OR_NONE, Phase.ONE_PHASE)
        assert alt.log_lik >= null.log_lik - 1e-8

    def test_replacement_only_needs_zero_efficacy(self, step_table, step_target):
        with pytest.raises(ValidationError):
            fit_mle(
                step_table,
                step_target,
                ModelVariant.REPLACEMENT_ONLY,
                Phase.TWO_PHASE,
                zero_efficacy=False,
            )

    def test_no_vaccine_failures(self):
        table = FailureTable(n_p=[90, 5, 5], n_v=[100, 0, 0])
        with pytest.raises(DegenerateDataError):
            fit_mle(table, TargetSpec.of([1], 2))

    def test_efficacy_beyond_targeted_share(self):
        """Î_E = 0.9 при доле целевого типа 0.1 недостижима ни при каком p_s."""
        table = FailureTable(n_p=[900, 10, 90], n_v=[990, 5, 5])
        with pytest.raises(InfeasibleModelError):
            fit_mle(table, TargetSpec.of([1], 2), ModelVariant.SOME_OR_NONE, Phase.TWO_PHASE)

    def test_target_dimension_mismatch(self, step_table):
        with pytest.raises(ValidationError):
            fit_mle(step_table, TargetSpec.of([1], 3))


class TestLrt:
    """Тесты теста отношения правдоподобий."""

    def test_step_two_phase(self, step_table, step_target):
        """STEP, gag 84: статистика около 33 при одной степени свободы."""
        result = lrt(step_table, step_target, ModelVariant.REPLACEMENT_ONLY, Phase.TWO_PHASE)
        assert result.method == "lrt-2phase"
        assert result.statistic == pytest.approx(32.99, abs=0.5)
        assert 9.3e-9 / 3 < result.p_value < 9.3e-9 * 3
        assert result.params.p_s == pytest.approx(0.686, abs=0.01)
        assert result.details["raw_statistic"] == pytest.approx(result.statistic)
        assert result.details["log_lik_alt"] > result.details["log_lik_null"]

    def test_null_data(self, null_table):
        result = lrt(null_table, TargetSpec.of([1], 2), ModelVariant.REPLACEMENT_ONLY, Phase.TWO_PHASE)
        assert result.statistic == pytest.approx(0.0, abs=1e-6)
        assert result.p_value == pytest.approx(1.0, abs=1e-3)

    def test_statistic_non_negative(self):
        """Данные, противоположные эффекту решета, дают статистику 0."""
        table = FailureTable(n_p=[900, 80, 20], n_v=[900, 95, 5])
        result = lrt(table, TargetSpec.of([1], 2), ModelVariant.REPLACEMENT_ONLY, Phase.TWO_PHASE)
        assert result.statistic == pytest.approx(0.0, abs=1e-6)
        assert result.p_value == pytest.approx(1.0, abs=1e-3)

    def test_rv144_with_pseudocount(self, rv144_table, rv144_target):
        """RV144, Env 169: пустые ячейки плацебо получают 1/(2N), N = 15933."""
        result = lrt(rv144_table, rv144_target, ModelVariant.SOME_OR_NONE, Phase.TWO_PHASE)
        assert result.details["pseudocount"] == pytest.approx(1 / (2 * 15933))
        assert result.statistic == pytest.approx(63.9, abs=1.0)
        assert 1.3e-15 / 10 < result.p_value < 1.3e-15 * 10

    def test_rv144_laplace_rule(self, rv144_table, rv144_target):
        settings = FitSettings(empty_cells=EmptyCellRule.LAPLACE)
        result = lrt(
            rv144_table, rv144_target, ModelVariant.SOME_OR_NONE, Phase.TWO_PHASE, settings=settings
        )
        assert result.details["pseudocount"] == 1.0
        assert result.statistic < 63.9 - 1.0

    def test_identical_arms(self, null_table):
        target = TargetSpec.of([1], 2)
        for phase in Phase:
            result = lrt(null_table, target, ModelVariant.REPLACEMENT_ONLY, phase)
            assert result.statistic == pytest.approx(0.0, abs=1e-9)
            assert result.params.p_s == pytest.approx(0.0, abs=1e-9)

    def test_one_phase_label(self, shifted_table):
        result = lrt(shifted_table, TargetSpec.of([1], 2), ModelVariant.REPLACEMENT_ONLY, Phase.ONE_PHASE)
        assert result.method == "lrt-1phase"
        assert result.statistic > 20


def _random_feasible(rng, fit, target, phase, variant, local):
    """Случайная допустимая точка модели; при local - возмущение оптимума."""
    mask = target.mask
    params = fit.params
    if phase is Phase.TWO_PHASE:
        p_c = np.asarray(params.p_c)
        I_E, r_c0 = params.I_E, params.r_c0
    elif local:
        p_c = 0.98 * np.asarray(params.p_c) + 0.02 * rng.dirichlet(np.ones(target.n_types))
        I_E = params.I_E + rng.normal(0.0, 0.01)
        r_c0 = float(np.clip(params.r_c0 + rng.normal(0.0, 1e-3), 1e-6, 1 - 1e-6))
    else:
        p_c = rng.dirichlet(np.ones(target.n_types))
        I_E = rng.uniform(0.0, 0.5)
        r_c0 = rng.uniform(0.5, 0.999)

    p_cG = float(p_c[mask].sum())
    if variant is ModelVariant.REPLACEMENT_ONLY:
        I_E = 0.0
    elif phase is Phase.ONE_PHASE:
        I_E = float(np.clip(I_E, 0.0, 0.99 * p_cG))
    floor = feasible_ps_floor(I_E, p_cG)
    if local:
        p_s = float(np.clip(params.p_s + rng.normal(0.0, 0.02), floor, 1.0))
    else:
        p_s = rng.uniform(floor, 1.0)

    rest = p_c[~mask] / p_c[~mask].sum()
    if variant is ModelVariant.INSERT_ONLY:
        q = rest
    elif local:
        q = 0.98 * np.asarray(params.q) + 0.02 * rng.dirichlet(np.ones(rest.size))
    else:
        q = rng.dirichlet(np.ones(rest.size))
    return SnlParams(p_c=p_c.tolist(), p_s=p_s, I_E=I_E, r_c0=r_c0, q=q.tolist())


class TestExactFit:
    """Найденный оптимум не хуже ни одной из 100 случайных допустимых точек."""

    @pytest.mark.parametrize("phase", list(Phase))
    @pytest.mark.parametrize(
        "table_name, targets, variant",
        [
            ("rv144_table", [1], ModelVariant.SOME_OR_NONE),
            ("rv144_table", [1], ModelVariant.INSERT_ONLY),
            ("step_table", [2], ModelVariant.REPLACEMENT_ONLY),
            ("step_table", [2], ModelVariant.SOME_OR_NONE),
        ],
    )
    def test_no_feasible_point_beats_fit(self, request, table_name, targets, variant, phase):
        table = request.getfixturevalue(table_name)
        target = TargetSpec.of(targets, table.J)
        fit = fit_mle(table, target, variant, phase)
        assert fit.log_lik == pytest.approx(log_likelihood(table, fit.params, target, phase))

        rng = make_rng(11)
        for k in range(100):
            params = _random_feasible(rng, fit, target, phase, variant, local=k % 2 == 0)
            assert log_likelihood(table, params, target, phase) <= fit.log_lik + 1e-9

    @pytest.mark.parametrize("phase", list(Phase))
    def test_statistic_independent_of_seed(self, rv144_table, rv144_target, phase):
        """Подгонка детерминирована: главный сид анализатора не влияет на LRT."""
        method = "lrt-1phase" if phase is Phase.ONE_PHASE else "lrt-2phase"
        values = [
            SieveAnalyzer(seed=seed).analyze(rv144_table, rv144_target, [method]).results[method].statistic
            for seed in range(10)
        ]
        assert max(values) - min(values) < 1e-6


class TestOrderConstrained:
    """Тесты точных решателей с ограничениями."""

    def test_unconstrained_interior(self):
        """Ограничения не активны: оценки - обычные частоты."""
        u, rho = order_constrained_pair([50, 30, 20], [40, 40, 20], [-1, 1, 0])
        assert u == pytest.approx([0.5, 0.3, 0.2])
        assert rho == pytest.approx([0.4, 0.4, 0.2])

    def test_violated_pair_pooled(self):
        u, rho = order_constrained_pair([50, 50], [60, 40], [-1, 1])
        assert u == pytest.approx([0.55, 0.45])
        assert rho == pytest.approx(u)

    def test_water_fill_bounds(self):
        rho = water_fill([8, 2], [0.0, 0.5], [0.6, np.inf])
        assert rho == pytest.approx([0.5, 0.5])
        rho = water_fill([8, 2], [0.0, 0.1], [0.6, np.inf])
        assert rho == pytest.approx([0.6, 0.4])
        rho = water_fill([8, 2], [0.0, 0.1], [1.0, np.inf])
        assert rho == pytest.approx([0.8, 0.2])


class TestPermutation:
    """Тесты перестановочного движка."""

    def test_permute_preserves_margins(self, step_table):
        permuted = permute_labels(step_table, make_rng(1))
        assert permuted.n_p_total == step_table.n_p_total
        assert permuted.n_v_total == step_table.n_v_total
        pooled = np.asarray(permuted.n_p) + np.asarray(permuted.n_v)
        assert pooled.tolist() == (np.asarray(step_table.n_p) + np.asarray(step_table.n_v)).tolist()
        assert permuted.labels == step_table.labels

    def test_failure_scheme_preserves_failure_margins(self, rv144_table):
        for seed in range(5):
            permuted = permute_labels(rv144_table, make_rng(seed), PermutationScheme.FAILURES)
            assert permuted.n_p[0] == rv144_table.n_p[0]
            assert permuted.n_v[0] == rv144_table.n_v[0]
            assert permuted.placebo_failures.sum() == rv144_table.placebo_failures.sum()
            pooled = permuted.placebo_failures + permuted.vaccine_failures
            expected = rv144_table.placebo_failures + rv144_table.vaccine_failures
            assert pooled.tolist() == expected.tolist()

    def test_gives_up_after_attempt_cap(self, step_table):
        """Статистика не вычисляется ни на одной перестановке: после 10 * B попыток - ошибка."""

        def broken(table):
            raise DegenerateDataError("no failures")

        with pytest.raises(ConvergenceError) as exc_info:
            permutation_null(step_table, broken, B=3, seed=0, observed=0.0)
        assert exc_info.value.details["attempts"] == 30
        assert exc_info.value.details["completed"] == 0

    def test_scheme_recorded(self, step_table):
        result = permutation_null(
            step_table, lambda t: 0.0, B=5, seed=0, scheme=PermutationScheme.FAILURES
        )
        assert result.details["scheme"] == "failures"

    def test_constant_statistic(self, step_table):
        """Статистика-константа: все нулевые значения достигают наблюдённого, p = 1."""
        result = permutation_null(step_table, lambda t: 1.0, B=20, seed=0)
        assert result.p_value == 1.0
        assert result.null_draws == [1.0] * 20
        assert result.B == 20

    def test_p_value_floor(self, step_table):
        result = permutation_null(step_table, lambda t: float(t.n_v[1]), B=9, seed=0, observed=1e9)
        assert result.p_value == pytest.approx(0.1)

    def test_failed_permutations_resampled(self, step_table):
        calls = {"n": 0}

        def flaky(table):
            calls["n"] += 1
            if calls["n"] % 2 == 0:
                raise DegenerateDataError("no failures")
            return 0.0

        result = permutation_null(step_table, flaky, B=5, seed=0, observed=0.0)
        assert result.details["resampled"] == 4
        assert len(result.null_draws) == 5

    def test_reproducible(self, step_table):
        stat = lambda t: float(t.n_v[2])  # noqa: E731
        a = permutation_null(step_table, stat, B=30, seed=4)
        b = permutation_null(step_table, stat, B=30, seed=4)
        assert a.null_draws == b.null_draws

    def test_invalid_B(self, step_table):
        with pytest.raises(ValidationError):
            permutation_null(step_table, lambda t: 0.0, B=0)

    @pytest.mark.slow
    def test_step_perm_lrt(self, step_table, step_target):
        result = perm_lrt(
            step_table, step_target, ModelVariant.REPLACEMENT_ONLY, Phase.TWO_PHASE, B=400, seed=1
        )
        assert result.method == "perm-lrt"
        assert result.p_value < 0.005
        assert len(result.null_draws) == 400
        assert result.details["asymptotic_p_value"] < 1e-7

    @pytest.mark.slow
    def test_rv144_perm_lrt(self, rv144_table, rv144_target):
        """Перестановки только среди отказов; недопустимые таблицы пересэмплируются."""
        result = perm_lrt(rv144_table, rv144_target, B=1000, seed=3)
        assert result.details["scheme"] == "failures"
        assert result.statistic == pytest.approx(63.9, abs=1.0)
        assert 0.01 <= result.p_value <= 0.07
        assert result.details["resampled"] > 0


class TestNullDistribution:
    """Распределение LRT и перестановочных p-значений без эффекта решета."""

    @pytest.mark.slow
    def test_insert_only_statistic_is_chi_bar(self):
        """
        Однофазный insert-only LRT при I_E = 0: одно одностороннее ограничение.

        Половина статистик равна нулю, положительная часть распределена как хи-квадрат(1).
        """
        cfg = ScenarioConfig(label="null", n_p=5000, n_v=5000, seed=21)
        target = cfg.target()
        values = np.array(
            [
                lrt(
                    simulate_dataset(cfg, r),
                    target,
                    ModelVariant.INSERT_ONLY,
                    Phase.ONE_PHASE,
                    zero_efficacy=True,
                ).statistic
                for r in range(1000)
            ]
        )
        zero_share = np.mean(values <= 1e-9)
        assert 0.44 <= zero_share <= 0.58
        assert stats.kstest(values[values > 1e-9], stats.chi2(1).cdf).pvalue > 0.001

    @pytest.mark.slow
    def test_perm_lrt_p_values_uniform(self):
        """Ниже доли нулевых статистик p-значения перестановочного LRT равномерны."""
        cfg = ScenarioConfig(label="null", n_p=500, n_v=500, r_c0=0.8, p_c=[0.6, 0.3, 0.1], seed=5)
        target = cfg.target()
        p_values = np.array(
            [
                perm_lrt(
                    simulate_dataset(cfg, r),
                    target,
                    ModelVariant.REPLACEMENT_ONLY,
                    Phase.TWO_PHASE,
                    B=199,
                    seed=r,
                ).p_value
                for r in range(300)
            ]
        )
        for alpha in (0.05, 0.1, 0.2, 0.3):
            bound = 3 * np.sqrt(alpha * (1 - alpha) / 300) + 1 / 200
            assert abs(np.mean(p_values <= alpha) - alpha) <= bound
        lower = p_values[p_values <= 0.3] / 0.3
        assert stats.kstest(lower, "uniform").pvalue > 0.001
