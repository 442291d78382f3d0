import logging
from typing import Callable, Dict, List, Optional, Sequence

from .baselines import fisher_from_table
from .bayes import bayes_factor, mbs_bayes_factor, model_scan, ps_posterior
from .core import plugin_estimates
from .exceptions import SieveError, ValidationError
from .fit import lrt, perm_lrt
from .models import (
    AnalysisReport,
    FailureTable,
    FitSettings,
    ModelScanResult,
    ModelVariant,
    PermutationScheme,
    Phase,
    PosteriorCurve,
    PriorSpec,
    TargetSpec,
    TestResult,
)
from .utils import derive_seed, setup_logging

logger = logging.getLogger(__name__)

# Порядок фиксирован: сид метода зависит от его позиции здесь, а не в запросе
ANALYSIS_METHODS = (
    "lrt-1phase",
    "lrt-2phase",
    "perm-lrt",
    "bf-1ph",
    "bf-2ph",
    "bf-hier",
    "mbs",
    "fisher",
)


class SieveAnalyzer:
    """
    Фасад анализа одной таблицы исходов.

    Скрывает выбор фазы, варианта модели, априорных распределений и сидов
    для отдельных тестов и собирает их результаты в один отчёт.

    Пример использования:
    ```python
    analyzer = SieveAnalyzer(n_mc=5000, B=1000, seed=7)
    table = read_failure_table("data/step_gag84.csv")
    report = analyzer.analyze(
        table,
        analyzer.target(table, [2]),
        methods=["lrt-2phase", "perm-lrt", "fisher"],
        replacement_only=True,
    )
    print(report.results["lrt-2phase"].statistic)
    ```
    """

    def __init__(
        self,
        fit_settings: Optional[FitSettings] = None,
        priors: Optional[PriorSpec] = None,
        n_mc: int = 1000,
        B: int = 1000,
        seed: int = 0,
        enable_logging: bool = False,
        permutation_scheme: PermutationScheme = PermutationScheme.FAILURES,
        consistent_take: bool = False,
    ):
        """
        Инициализация анализатора.

        Args:
            fit_settings: Настройки подгонки
            priors: Априорные распределения байесовских тестов
            n_mc: Число выборок Монте-Карло
            B: Число перестановок
            seed: Главный сид
            enable_logging: Настроить логирование
            permutation_scheme: Что перемешивается в perm-lrt
            consistent_take: Оценка подстановки p_t через p_s и I_E
        """
        self.fit_settings = fit_settings or FitSettings()
        self.priors = priors or PriorSpec()
        self.n_mc = n_mc
        self.B = B
        self.seed = seed
        self.permutation_scheme = permutation_scheme
        self.consistent_take = consistent_take

        if enable_logging:
            setup_logging("INFO")

        self._runners: Dict[str, Callable[..., TestResult]] = {
            "lrt-1phase": self._lrt_one_phase,
            "lrt-2phase": self._lrt_two_phase,
            "perm-lrt": self._perm_lrt,
            "bf-1ph": self._bf_one_phase,
            "bf-2ph": self._bf_two_phase,
            "bf-hier": self._bf_hierarchical,
            "mbs": self._mbs,
            "fisher": self._fisher,
        }

    @staticmethod
    def target(table: FailureTable, targets: Sequence[int]) -> TargetSpec:
        """Построить набор целевых типов для таблицы."""
        return TargetSpec.of(list(targets), table.J)

    def method_seed(self, method: str) -> int:
        """Сид метода, выведенный из главного сида."""
        return derive_seed(self.seed, ANALYSIS_METHODS.index(method))

    @staticmethod
    def _variant(replacement_only: bool) -> ModelVariant:
        return ModelVariant.REPLACEMENT_ONLY if replacement_only else ModelVariant.SOME_OR_NONE

    # ==================== RUNNERS ====================

    def _lrt_one_phase(self, table, target, replacement_only, seed):
        return lrt(table, target, self._variant(replacement_only), Phase.ONE_PHASE, settings=self.fit_settings)

    def _lrt_two_phase(self, table, target, replacement_only, seed):
        return lrt(table, target, self._variant(replacement_only), Phase.TWO_PHASE, settings=self.fit_settings)

    def _perm_lrt(self, table, target, replacement_only, seed):
        return perm_lrt(
            table,
            target,
            self._variant(replacement_only),
            Phase.TWO_PHASE,
            B=self.B,
            seed=seed,
            settings=self.fit_settings,
            scheme=self.permutation_scheme,
        )

    def _bf(self, table, target, replacement_only, seed, phase, hierarchical):
        priors = self.priors.model_copy(update={"hierarchical": hierarchical})
        return bayes_factor(
            table, target, self._variant(replacement_only), phase, priors, self.n_mc, seed
        )

    def _bf_one_phase(self, table, target, replacement_only, seed):
        return self._bf(table, target, replacement_only, seed, Phase.ONE_PHASE, self.priors.hierarchical)

    def _bf_two_phase(self, table, target, replacement_only, seed):
        return self._bf(table, target, replacement_only, seed, Phase.TWO_PHASE, False)

    def _bf_hierarchical(self, table, target, replacement_only, seed):
        return self._bf(table, target, replacement_only, seed, Phase.TWO_PHASE, True)

    def _mbs(self, table, target, replacement_only, seed):
        return mbs_bayes_factor(table, target, self.n_mc, seed, self.priors)

    def _fisher(self, table, target, replacement_only, seed):
        return fisher_from_table(table, seed=seed)

    # ==================== PUBLIC API ====================

    def analyze(
        self,
        table: FailureTable,
        target: TargetSpec,
        methods: Optional[Sequence[str]] = None,
        replacement_only: bool = False,
        raise_if_all_failed: bool = True,
    ) -> AnalysisReport:
        """
        Выполнить набор тестов на одной таблице.

        Ошибка отдельного метода записывается в отчёт и не прерывает
        остальные методы.

        Args:
            table: Таблица исходов
            target: Целевые типы
            methods: Имена методов (None - все)
            replacement_only: Фиксировать I_E = 0
            raise_if_all_failed: Пробросить первую ошибку, если ни один метод не отработал

        Returns:
            AnalysisReport: Оценки подстановки, результаты и ошибки по методам

        Raises:
            ValidationError: Неизвестное имя метода
            SieveError: Все методы завершились ошибкой
        """
        methods = list(methods) if methods is not None else list(ANALYSIS_METHODS)
        unknown = [m for m in methods if m not in self._runners]
        if unknown:
            raise ValidationError(
                f"unknown methods: {', '.join(unknown)}", {"known": list(ANALYSIS_METHODS)}
            )
        if not methods:
            raise ValidationError("no methods requested")

        try:
            plugin = plugin_estimates(
                table,
                target,
                assume_replacement_only=replacement_only,
                consistent_take=self.consistent_take,
            )
        except SieveError as e:
            logger.warning(f"Plug-in estimates unavailable: {e.message}")
            plugin = None

        results: Dict[str, TestResult] = {}
        errors: Dict[str, str] = {}
        failures: List[SieveError] = []
        for method in methods:
            seed = self.method_seed(method)
            try:
                results[method] = self._runners[method](table, target, replacement_only, seed)
            except SieveError as e:
                logger.warning(f"Method {method} failed: {e.message}")
                errors[method] = e.message
                failures.append(e)
                continue
            logger.info(f"Method {method} done")

        if not results and failures and raise_if_all_failed:
            logger.error(f"All requested methods failed; first error: {failures[0].message}")
            raise failures[0]

        return AnalysisReport(
            table=table,
            targets=target.targets,
            order=target.order,
            replacement_only=replacement_only,
            plugin=plugin,
            results=results,
            errors=errors,
        )

    def posterior(
        self,
        table: FailureTable,
        target: TargetSpec,
        grid: int = 101,
        replacement_only: bool = False,
        fixed_I_E: Optional[float] = None,
    ) -> PosteriorCurve:
        """Апостериорная кривая p_s (иерархическая двухфазная модель)."""
        return ps_posterior(
            table,
            target,
            self.priors,
            grid=grid,
            n_mc=self.n_mc,
            seed=self.seed,
            fixed_I_E=fixed_I_E,
            replacement_only=replacement_only,
        )

    def scan(
        self,
        table: FailureTable,
        candidates: Optional[List[TargetSpec]] = None,
        prior_model_odds: Optional[Sequence[float]] = None,
        replacement_only: bool = False,
        include_null: bool = True,
    ) -> ModelScanResult:
        """Апостериорные вероятности моделей по наборам целевых типов."""
        return model_scan(
            table,
            candidates,
            self.priors,
            prior_model_odds,
            n_mc=self.n_mc,
            seed=self.seed,
            replacement_only=replacement_only,
            include_null=include_null,
        )
