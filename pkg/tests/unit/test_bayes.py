"""
Unit tests for the Bayesian procedures.

Маргинальные правдоподобия Монте-Карло сверяются с численным
интегрированием на таблицах с двумя типами отказов.
"""

import numpy as np
import pytest
from scipy import integrate, stats

from snl_sieve.bayes import (
    all_target_sets,
    bayes_factor,
    draw_components,
    mbs_bayes_factor,
    mbs_log_likelihood,
    model_scan,
    placebo_alpha,
    ps_posterior,
)
from snl_sieve.core import failure_probs, multinomial_logpmf, placebo_failure_probs
from snl_sieve.exceptions import (
    InfeasibleModelError,
    UnsupportedVariantError,
    ValidationError,
)
from snl_sieve.models import (
    EmptyCellRule,
    FailureTable,
    ModelVariant,
    Phase,
    PriorSpec,
    TargetSpec,
)
from snl_sieve.utils import make_rng

TARGET = TargetSpec.of([1], 2)


@pytest.fixture
def sieve_table():
    return FailureTable(n_p=[90, 8, 2], n_v=[90, 3, 7])


def _binom_pmf(x, p1):
    return stats.binom.pmf(x[0], x[0] + x[1], p1)


class TestBayesFactorQuadrature:
    """Сверка факторов Байеса с квадратурой при I_E = 0 и J = 2."""

    def test_two_phase_fixed_placebo(self):
        """Неиерархический двухфазный: p_c = (0.8, 0.2), p_s ~ U(0, 1)."""
        table = FailureTable(n_p=[900, 80, 20], n_v=[975, 10, 15])
        x = [10, 15]
        alt, _ = integrate.quad(lambda s: _binom_pmf(x, 0.8 * (1 - s)), 0, 1, epsabs=1e-12)
        expected = alt / _binom_pmf(x, 0.8)

        result = bayes_factor(
            table,
            TARGET,
            ModelVariant.REPLACEMENT_ONLY,
            Phase.TWO_PHASE,
            PriorSpec(hierarchical=False),
            n_mc=20000,
            seed=5,
        )
        assert result.method == "bf-2ph"
        assert result.bayes_factor == pytest.approx(expected, rel=0.05)
        assert result.details["feasible_fraction"] == 1.0

    @pytest.mark.parametrize(
        "phase, hierarchical, label",
        [
            (Phase.ONE_PHASE, True, "bf-1ph"),
            (Phase.TWO_PHASE, True, "bf-hier"),
        ],
    )
    def test_placebo_posterior(self, sieve_table, phase, hierarchical, label):
        """p_c ~ Beta(9, 3) после обновления равномерного априорного отказами плацебо."""
        x = [3, 7]
        prior = stats.beta(9, 3)
        alt, _ = integrate.dblquad(
            lambda s, p: prior.pdf(p) * _binom_pmf(x, p * (1 - s)),
            0,
            1,
            0,
            1,
            epsabs=1e-12,
        )
        null, _ = integrate.quad(lambda p: prior.pdf(p) * _binom_pmf(x, p), 0, 1, epsabs=1e-12)

        result = bayes_factor(
            sieve_table,
            TARGET,
            ModelVariant.REPLACEMENT_ONLY,
            phase,
            PriorSpec(hierarchical=hierarchical),
            n_mc=20000,
            seed=9,
        )
        assert result.method == label
        assert result.bayes_factor == pytest.approx(alt / null, rel=0.05)
        assert result.details["log_marginal_null"] == pytest.approx(np.log(null), abs=1e-8)

    def test_opposite_direction_data(self):
        """Все отказы вакцины целевого типа: данные против решета, BF < 1."""
        table = FailureTable(n_p=[900, 80, 20], n_v=[900, 100, 0])
        result = bayes_factor(table, TARGET, ModelVariant.REPLACEMENT_ONLY, n_mc=2000)
        assert result.bayes_factor < 1
        assert result.log10_bayes_factor < 0

    def test_mc_se_reported(self, sieve_table):
        result = bayes_factor(sieve_table, TARGET, ModelVariant.REPLACEMENT_ONLY, n_mc=1000)
        assert result.mc_se is not None and result.mc_se >= 0
        assert result.n_mc == 1000

    def test_reproducible(self, sieve_table):
        a = bayes_factor(sieve_table, TARGET, n_mc=500, seed=2)
        b = bayes_factor(sieve_table, TARGET, n_mc=500, seed=2)
        assert a.bayes_factor == b.bayes_factor


class TestPriorDraws:
    """Тесты априорных выборок."""

    def test_empty_placebo_cells_capped(self, rv144_table):
        alpha = placebo_alpha(rv144_table, PriorSpec())
        assert alpha[:3].tolist() == [1.0, 1.0, 1.0]
        assert alpha[3:] == pytest.approx([1 / (2 * 15933)] * 3)
        laplace = placebo_alpha(rv144_table, PriorSpec(empty_cells=EmptyCellRule.LAPLACE))
        assert laplace.tolist() == [1.0] * 6

    def test_insert_only_draws_keep_nontarget_shares(self, rv144_table, rv144_target):
        """В insert-only выборках q совпадает с долями нецелевых типов p_c."""
        mask = rv144_target.mask
        p_c, q = draw_components(
            rv144_table, rv144_target, PriorSpec(), Phase.TWO_PHASE, True, 500, make_rng(3), 0.0
        )
        rest = p_c[:, ~mask] / p_c[:, ~mask].sum(axis=1, keepdims=True)
        assert q == pytest.approx(rest, abs=1e-12)

        p_s = np.full(500, 0.6)
        p_v = failure_probs(p_c, p_s, 0.2, q, mask)
        shares = p_v[:, ~mask] / p_v[:, ~mask].sum(axis=1, keepdims=True)
        assert shares == pytest.approx(rest, abs=1e-10)

    def test_q_concentration_default(self, rv144_table, rv144_target):
        """Концентрация q по умолчанию 1/J плюс нецелевые отказы плацебо."""
        priors = PriorSpec()
        draws = [
            draw_components(
                rv144_table, rv144_target, priors, Phase.TWO_PHASE, False, 20000, make_rng(s), 0.0
            )[1]
            for s in range(2)
        ]
        beta = np.full(5, 1 / 6) + rv144_table.placebo_failures[1:]
        for q in draws:
            assert q.mean(axis=0) == pytest.approx(beta / beta.sum(), abs=0.01)


class TestBayesFactorErrors:
    """Тесты ошибок фактора Байеса."""

    def test_all_or_none_variant(self, sieve_table):
        with pytest.raises(UnsupportedVariantError):
            bayes_factor(sieve_table, TARGET, ModelVariant.ALL_OR_NONE)

    def test_too_few_draws(self, sieve_table):
        with pytest.raises(ValidationError):
            bayes_factor(sieve_table, TARGET, n_mc=10)

    def test_no_feasible_draws(self):
        table = FailureTable(n_p=[900, 10, 90], n_v=[990, 5, 5])
        with pytest.raises(InfeasibleModelError):
            bayes_factor(table, TARGET, priors=PriorSpec(hierarchical=False))


class TestMbs:
    """Тесты фактора Байеса MBS."""

    def test_zero_sieve_equals_null(self, sieve_table):
        a = 1.0 / sieve_table.J
        null = multinomial_logpmf(sieve_table.vaccine_failures, placebo_failure_probs(sieve_table, a))
        for proportional in (True, False):
            value = mbs_log_likelihood(sieve_table, TARGET, 0.0, proportional)
            assert float(value) == pytest.approx(float(null))

    def test_bayes_factor(self, step_table, step_target):
        result = mbs_bayes_factor(step_table, step_target, n_mc=2000)
        assert result.method == "mbs"
        assert result.bayes_factor > 1
        assert result.details["pseudocount"] == 0.5

    def test_quadrature(self):
        """Смесь пропорционального и равномерного перераспределения при J = 3."""
        table = FailureTable(n_p=[90, 6, 3, 1], n_v=[90, 2, 5, 3])
        target = TargetSpec.of([1], 3)
        x = [2, 5, 3]
        p_c = (np.array([6, 3, 1]) + 1 / 3) / (10 + 1)
        shares = {"proportional": p_c[1:] / p_c[1:].sum(), "uniform": np.array([0.5, 0.5])}

        def lik(s, w):
            p_v = np.concatenate([[p_c[0] * (1 - s)], p_c[1:] + p_c[0] * s * w])
            return stats.multinomial.pmf(x, 10, p_v)

        alt = 0.5 * sum(
            integrate.quad(lambda s: lik(s, w), 0, 1, epsabs=1e-12)[0] for w in shares.values()
        )
        expected = alt / stats.multinomial.pmf(x, 10, p_c)

        result = mbs_bayes_factor(table, target, n_mc=20000, seed=4)
        assert result.bayes_factor == pytest.approx(expected, rel=0.05)
        assert result.details["log_marginal_null"] == pytest.approx(
            stats.multinomial.logpmf(x, 10, p_c)
        )

    def test_multiple_targets(self, rv144_table):
        with pytest.raises(UnsupportedVariantError):
            mbs_bayes_factor(rv144_table, TargetSpec.of([1, 2], 6))


class TestPosterior:
    """Тесты апостериорной кривой p_s."""

    def test_grid_size_and_floor(self, sieve_table):
        curve = ps_posterior(sieve_table, TARGET, grid=11, n_mc=500, replacement_only=True)
        assert len(curve.grid) == 11
        assert len(curve.log_density) == 11
        assert curve.grid[0] == 0.0 and curve.grid[-1] == 1.0
        assert curve.argmax in curve.grid

    def test_floor_with_efficacy(self, rv144_table, rv144_target):
        curve = ps_posterior(rv144_table, rv144_target, grid=5, n_mc=200)
        assert curve.grid[0] > 0
        assert curve.I_E == pytest.approx(0.333, abs=0.005)

    def test_explicit_grid(self, sieve_table):
        curve = ps_posterior(sieve_table, TARGET, grid=[0.1, 0.5, 0.9], n_mc=200, replacement_only=True)
        assert curve.grid == [0.1, 0.5, 0.9]

    @pytest.mark.parametrize("grid", [1, [0.5, 0.2], [0.1, 1.5]])
    def test_invalid_grid(self, sieve_table, grid):
        with pytest.raises(ValidationError):
            ps_posterior(sieve_table, TARGET, grid=grid, n_mc=200)

    def test_fixed_efficacy_out_of_range(self, sieve_table):
        with pytest.raises(ValidationError):
            ps_posterior(sieve_table, TARGET, fixed_I_E=1.0, n_mc=200)

    @pytest.mark.slow
    def test_step_posterior_peak(self, step_table, step_target):
        curve = ps_posterior(step_table, step_target, grid=101, n_mc=2000, seed=1, replacement_only=True)
        assert curve.argmax == pytest.approx(0.68, abs=0.05)

    @pytest.mark.slow
    def test_rv144(self, rv144_table, rv144_target):
        """RV144, Env 169: log10 BF около 10.5, максимум апостериорной p_s около 0.24."""
        bf = bayes_factor(rv144_table, rv144_target, n_mc=5000, seed=3)
        assert bf.log10_bayes_factor == pytest.approx(10.5, abs=1.0)
        curve = ps_posterior(rv144_table, rv144_target, grid=101, n_mc=2000, seed=3)
        assert curve.argmax == pytest.approx(0.24, abs=0.05)


class TestModelScan:
    """Тесты сравнения моделей по наборам целевых типов."""

    def test_all_target_sets(self):
        sets = all_target_sets(3)
        assert len(sets) == 6
        assert [s.targets for s in sets][:3] == [[1], [2], [3]]

    def test_scan_limit(self):
        with pytest.raises(ValidationError):
            all_target_sets(13)

    def test_posteriors_normalized(self, sieve_table):
        result = model_scan(sieve_table, n_mc=500, replacement_only=True)
        posteriors = [e.posterior for e in result.entries]
        assert sum(posteriors) == pytest.approx(1.0)
        assert posteriors == sorted(posteriors, reverse=True)
        assert result.posterior_of(None) > 0
        null = [e for e in result.entries if e.targets is None][0]
        assert null.label == "all-or-none"
        assert null.bayes_factor == 1.0

    def test_symmetric_table(self):
        table = FailureTable(n_p=[900, 50, 50], n_v=[900, 50, 50])
        result = model_scan(table, n_mc=4000, replacement_only=True)
        assert result.posterior_of([1]) == pytest.approx(result.posterior_of([2]), abs=0.05)

    def test_single_candidate(self, sieve_table):
        result = model_scan(sieve_table, [TARGET], n_mc=200, include_null=False)
        assert result.entries[0].posterior == pytest.approx(1.0)

    def test_screening(self, rv144_table):
        """Q не может нести Î_E = 0.33: кандидат отсеивается без вычислений."""
        candidates = [TargetSpec.of([1], 6), TargetSpec.of([2], 6)]
        result = model_scan(rv144_table, candidates, n_mc=500)
        screened = [e for e in result.entries if e.targets == [2]][0]
        assert screened.error.startswith("screened out")
        assert screened.posterior == 0.0

    def test_prior_odds_length(self, sieve_table):
        with pytest.raises(ValidationError):
            model_scan(sieve_table, [TARGET], prior_model_odds=[1.0], n_mc=200)

    @pytest.mark.slow
    def test_rv144_k_ranked_first(self, rv144_table):
        result = model_scan(rv144_table, n_mc=2000, seed=0)
        assert result.entries[0].targets == [1]
        assert result.entries[0].label == "K"

    @pytest.mark.slow
    def test_rv144_k_against_null(self, rv144_table):
        result = model_scan(rv144_table, [TargetSpec.of([1], 6)], n_mc=5000, seed=1)
        assert result.posterior_of([1]) > 0.99


class TestMonteCarloError:
    """Ошибка Монте-Карло фактора Байеса убывает как 1 / n_mc."""

    @pytest.mark.slow
    def test_log_variance_slope(self, sieve_table):
        sizes = [1_000, 10_000, 100_000]
        variances = []
        for n_mc in sizes:
            values = [
                bayes_factor(
                    sieve_table,
                    TARGET,
                    ModelVariant.REPLACEMENT_ONLY,
                    Phase.TWO_PHASE,
                    PriorSpec(hierarchical=False),
                    n_mc=n_mc,
                    seed=seed,
                ).log10_bayes_factor
                for seed in range(40)
            ]
            variances.append(np.var(values, ddof=1))
        slope = np.polyfit(np.log10(sizes), np.log10(variances), 1)[0]
        assert -1.3 <= slope <= -0.7
