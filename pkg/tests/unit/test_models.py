"""
Unit tests for domain models and exceptions.

Проверяем:
- Валидацию таблиц, наборов целевых типов и параметров
- Проверку допустимости сценариев при создании
- Коды выхода CLI по типам исключений
"""

import math

import pytest
from pydantic import BaseModel

from snl_sieve.exceptions import (
    ConvergenceError,
    DegenerateDataError,
    InfeasibleModelError,
    ParseError,
    SieveError,
    UnsupportedVariantError,
    ValidationError,
    exit_code_for,
)
from snl_sieve.models import (
    STUDY_P_C,
    EmptyCellRule,
    GridReport,
    ModelScanEntry,
    ModelScanResult,
    PriorSpec,
    ScenarioConfig,
    SnlParams,
    TargetSpec,
    FailureTable,
    TestResult,
)


class TestFailureTable:
    """Тесты для FailureTable."""

    def test_properties(self, step_table):
        """Тест производных свойств таблицы."""
        assert isinstance(step_table, BaseModel)
        assert step_table.J == 2
        assert step_table.n_p_total == 26
        assert step_table.n_v_total == 39
        assert step_table.placebo_failures.tolist() == [9.0, 17.0]
        assert step_table.label(2) == "T"

    def test_default_labels(self):
        """Тест имён категорий по умолчанию."""
        table = FailureTable(n_p=[5, 1, 1], n_v=[5, 1, 1])
        assert table.label(1) == "cat1"

    @pytest.mark.parametrize(
        "n_p, n_v",
        [
            ([1, 2], [1, 2]),
            ([1, 2, 3], [1, 2]),
            ([1, -2, 3], [1, 2, 3]),
            ([0, 0, 0], [1, 2, 3]),
        ],
    )
    def test_invalid_tables(self, n_p, n_v):
        """Тест отказа на некорректных счётчиках."""
        with pytest.raises(ValidationError):
            FailureTable(n_p=n_p, n_v=n_v)

    def test_labels_length(self):
        """Тест проверки длины меток."""
        with pytest.raises(ValidationError):
            FailureTable(n_p=[1, 2, 3], n_v=[1, 2, 3], labels=["a", "b"])

    def test_frozen(self, step_table):
        """Тест неизменяемости."""
        with pytest.raises(Exception):
            step_table.n_p = [1, 2, 3]


class TestTargetSpec:
    """Тесты для TargetSpec."""

    def test_sorted_unique(self):
        target = TargetSpec.of([3, 1, 3], 4)
        assert target.targets == [1, 3]
        assert target.g == 2
        assert target.mask.tolist() == [True, False, True, False]
        assert target.nontargets == [2, 4]
        assert target.order == [1, 3, 2, 4]

    def test_single_index(self):
        assert TargetSpec.of(2, 3).targets == [2]

    @pytest.mark.parametrize("targets", [[], [0], [4], [1, 2, 3]])
    def test_invalid(self, targets):
        """Тест пустого, выходящего за диапазон и полного набора."""
        with pytest.raises(ValidationError):
            TargetSpec.of(targets, 3)


class TestSnlParams:
    """Тесты для SnlParams."""

    def test_renormalizes_small_error(self):
        params = SnlParams(p_c=[0.5, 0.5 + 1e-8], p_s=0.2, I_E=0.0, r_c0=0.9, q=[1.0])
        assert math.isclose(sum(params.p_c), 1.0, abs_tol=1e-14)

    def test_rejects_bad_simplex(self):
        with pytest.raises(ValidationError):
            SnlParams(p_c=[0.5, 0.6], p_s=0.2, I_E=0.0, r_c0=0.9, q=[1.0])

    def test_rejects_negative(self):
        with pytest.raises(ValidationError):
            SnlParams(p_c=[1.2, -0.2], p_s=0.2, I_E=0.0, r_c0=0.9, q=[1.0])


class TestPriorSpec:
    """Тесты для PriorSpec."""

    def test_defaults(self):
        priors = PriorSpec()
        assert priors.p_c_alpha(3).tolist() == [1.0, 1.0, 1.0]
        assert priors.q_beta(2, 4).tolist() == [0.25, 0.25]
        assert priors.empty_cells is EmptyCellRule.VANISHING
        assert priors.mbs_alpha(4) == 0.25
        assert priors.hierarchical

    def test_wrong_length(self):
        with pytest.raises(ValidationError):
            PriorSpec(p_c_concentration=[1.0, 2.0]).p_c_alpha(3)

    def test_non_positive(self):
        with pytest.raises(ValidationError):
            PriorSpec(q_concentration=[1.0, 0.0])


class TestScenarioConfig:
    """Тесты для ScenarioConfig."""

    def test_study_p_c_normalized(self):
        cfg = ScenarioConfig(label="s")
        assert math.isclose(sum(cfg.p_c), 1.0, abs_tol=1e-12)
        assert math.isclose(cfg.p_c[0], STUDY_P_C[0] / sum(STUDY_P_C))

    def test_infeasible_rejected(self):
        """I_E = 0.5, p_s = 0.15 при p_cG = 0.815 недопустимо."""
        with pytest.raises(InfeasibleModelError) as exc_info:
            ScenarioConfig(label="bad", I_E=0.5, p_s=0.15)
        assert "p_s >=" in exc_info.value.message
        assert exc_info.value.details["feasible"] is False

    def test_all_or_none_null_skips_check(self):
        cfg = ScenarioConfig(label="null", I_E=0.5, null_mode="all_or_none_null")
        assert cfg.p_s == 0.0

    def test_insert_only_q(self):
        cfg = ScenarioConfig(label="io", p_s=0.25, q_mode="insert_only")
        rest = cfg.p_c[1:]
        expected = [v / sum(rest) for v in rest]
        assert cfg.q_vector() == pytest.approx(expected)

    def test_uniform_q(self):
        cfg = ScenarioConfig(label="u", p_s=0.25)
        assert cfg.q_vector() == pytest.approx([0.25] * 4)


class TestGridReport:
    """Тесты для GridReport."""

    @pytest.fixture
    def report(self):
        return GridReport(
            rows=["a", "b"],
            cols=["m"],
            rejection_rate=[[0.5], [0.0]],
            replicates=[2, 2],
            error_counts=[[0], [0]],
            seed=1,
            scenario_seeds=[10, 11],
        )

    def test_rate(self, report):
        assert report.rate("a", "m") == 0.5

    def test_external_column(self, report):
        extended = report.with_external_column("GWJ", {"a": [1, 1], "b": [0, 1]})
        assert extended.cols == ["m", "GWJ"]
        assert extended.rate("a", "GWJ") == 1.0
        assert extended.rate("b", "GWJ") == 0.5

    def test_external_column_length_mismatch(self, report):
        with pytest.raises(ValidationError):
            report.with_external_column("GWJ", {"a": [1], "b": [0, 1]})


class TestResultModels:
    """Тесты сериализации результатов."""

    def test_infinite_values_serialize(self):
        result = TestResult(method="bf-hier", statistic=float("inf"), bayes_factor=float("inf"))
        assert "Infinity" in result.model_dump_json()

    def test_p_value_range(self):
        with pytest.raises(Exception):
            TestResult(method="x", statistic=1.0, p_value=1.5)

    def test_posterior_of(self):
        scan = ModelScanResult(
            entries=[
                ModelScanEntry(label="K", targets=[1], prior=0.5, posterior=0.9),
                ModelScanEntry(label="all-or-none", prior=0.5, posterior=0.1),
            ],
            n_mc=100,
            seed=0,
        )
        assert scan.posterior_of([1]) == 0.9
        assert scan.posterior_of(None) == 0.1
        with pytest.raises(KeyError):
            scan.posterior_of([2])


class TestExceptions:
    """Тесты иерархии исключений и кодов выхода."""

    def test_parse_error_location(self):
        e = ParseError("bad count", line=3, column="cat1")
        assert isinstance(e, ValidationError)
        assert "line 3" in e.message and "column cat1" in e.message
        assert e.details["line"] == 3

    @pytest.mark.parametrize(
        "exc, code",
        [
            (ValidationError("x"), 2),
            (ParseError("x"), 2),
            (UnsupportedVariantError("x"), 2),
            (DegenerateDataError("x"), 2),
            (InfeasibleModelError("x"), 3),
            (ConvergenceError("x"), 4),
            (SieveError("x"), 1),
            (RuntimeError("x"), 1),
        ],
    )
    def test_exit_codes(self, exc, code):
        assert exit_code_for(exc) == code
