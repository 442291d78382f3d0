"""
Процедуры решения симуляционного исследования.

Каждый метод превращает таблицу исходов в решение (отвергнуть / нет) и
числовую оценку для ROC-анализа.
"""

import logging
from abc import ABC, abstractmethod
from typing import Dict, List, Optional, Sequence, Type

import numpy as np

from .baselines import fisher_from_table
from .bayes import bayes_factor, mbs_bayes_factor
from .core import resolve_pseudocount
from .exceptions import SieveError, ValidationError
from .fit import lrt, permutation_null
from .models import (
    Decision,
    FailureTable,
    Phase,
    PriorSpec,
    RunnerSettings,
    TargetSpec,
    TestResult,
)
from .utils import derive_seed

logger = logging.getLogger(__name__)


class DecisionMethod(ABC):
    """
    Базовый абстрактный класс процедуры решения.
    """

    name: str = ""
    bayesian: bool = False

    def __init__(self, settings: Optional[RunnerSettings] = None):
        """
        Инициализация процедуры.

        Args:
            settings: Настройки прогона (alpha, порог BF, n_mc, число перестановок)
        """
        self.settings = settings or RunnerSettings()

    @abstractmethod
    def _run(self, table: FailureTable, target: TargetSpec, seed: int) -> TestResult:
        """
        Выполнить тест на одной таблице.

        Args:
            table: Таблица исходов
            target: Целевые типы сценария
            seed: Сид репликации

        Returns:
            TestResult: Результат теста
        """
        pass

    @abstractmethod
    def _reject(self, result: TestResult) -> bool:
        """Правило отвержения нулевой гипотезы."""
        pass

    def _score(self, result: TestResult) -> float:
        """Оценка для ROC: чем больше, тем сильнее свидетельство эффекта решета."""
        return float(result.statistic)

    def decide(self, table: FailureTable, target: TargetSpec, seed: int) -> Decision:
        """
        Принять решение; ошибка метода записывается как неотвержение.

        Returns:
            Decision: Решение, оценка и текст ошибки
        """
        try:
            result = self._run(table, target, seed)
        except (SieveError, ValueError, FloatingPointError) as e:
            message = getattr(e, "message", str(e))
            logger.debug(f"{self.name} failed on replicate (seed {seed}): {message}")
            return Decision(method=self.name, reject=False, error=message)
        return Decision(method=self.name, reject=bool(self._reject(result)), score=self._score(result))


# ==================== FREQUENTIST ====================


class _LrtMethod(DecisionMethod):
    phase: Phase = Phase.ONE_PHASE

    def _run(self, table, target, seed):
        return lrt(
            table,
            target,
            self.settings.lrt_variant,
            self.phase,
            settings=self.settings.fit,
        )

    def _reject(self, result):
        return result.p_value < self.settings.alpha


class OnePhaseLrt(_LrtMethod):
    """Однофазный LRT против хи-квадрат(1)."""

    name = "1phase"
    phase = Phase.ONE_PHASE


class TwoPhaseLrt(_LrtMethod):
    """Двухфазный LRT против хи-квадрат(1)."""

    name = "2phase"
    phase = Phase.TWO_PHASE


class FisherMethod(DecisionMethod):
    """Точный тест Фишера по таблице отказов."""

    name = "Fisher"

    def _run(self, table, target, seed):
        return fisher_from_table(table, seed=seed)

    def _reject(self, result):
        return result.p_value < self.settings.alpha

    def _score(self, result):
        return 1.0 - result.p_value


# ==================== BAYESIAN ====================


class _BayesMethod(DecisionMethod):
    bayesian = True

    def _reject(self, result):
        return result.bayes_factor > self.settings.bf_threshold

    def _score(self, result):
        return float(result.log10_bayes_factor)


class OnePhaseBf(_BayesMethod):
    """Однофазный фактор Байеса."""

    name = "BF1ph"
    phase = Phase.ONE_PHASE

    def _bf(self, table, target, seed, pseudocount=None):
        return bayes_factor(
            table,
            target,
            self.settings.bf_variant,
            self.phase,
            self.settings.priors,
            self.settings.n_mc,
            seed,
            pseudocount=pseudocount,
        )

    def _run(self, table, target, seed):
        return self._bf(table, target, seed)


class TwoPhaseBf(OnePhaseBf):
    """Иерархический двухфазный фактор Байеса."""

    name = "BF2ph"
    phase = Phase.TWO_PHASE

    def __init__(self, settings: Optional[RunnerSettings] = None):
        super().__init__(settings)
        priors: PriorSpec = self.settings.priors
        if not priors.hierarchical:
            self.settings = self.settings.model_copy(
                update={"priors": priors.model_copy(update={"hierarchical": True})}
            )


class MbsBf(_BayesMethod):
    """Фактор Байеса MBS с порогом BF > 1."""

    name = "MBS-BF"

    def _bf(self, table, target, seed, pseudocount=None):
        return mbs_bayes_factor(
            table, target, self.settings.n_mc, seed, self.settings.priors
        )

    def _run(self, table, target, seed):
        return self._bf(table, target, seed)


class _PermutedBayes(_BayesMethod):
    """
    Перестановочная калибровка фактора Байеса.

    Отвергает, если наблюдённый BF больше (1 - alpha)-квантиля BF на
    таблицах с перемешанными метками групп.
    """

    base: Type[DecisionMethod]

    def __init__(self, settings: Optional[RunnerSettings] = None):
        super().__init__(settings)
        self._inner = self.base(self.settings)

    def _run(self, table, target, seed):
        pseudocount = resolve_pseudocount(table, None, self.settings.priors.empty_cells)
        bf_seed = derive_seed(seed, 0)
        observed = self._inner._bf(table, target, bf_seed, pseudocount)

        def statistic(permuted: FailureTable) -> float:
            return self._inner._bf(permuted, target, bf_seed, pseudocount).log10_bayes_factor

        null = permutation_null(
            table,
            statistic,
            B=self.settings.n_permutations,
            seed=derive_seed(seed, 1),
            observed=observed.log10_bayes_factor,
            method=self.name,
        )
        cutoff = float(np.quantile(null.null_draws, 1.0 - self.settings.alpha, method="higher"))
        return observed.model_copy(
            update={
                "method": self.name,
                "p_value": null.p_value,
                "B": null.B,
                "details": {**observed.details, "null_cutoff_log10": cutoff},
            }
        )

    def _reject(self, result):
        return result.log10_bayes_factor > result.details["null_cutoff_log10"]


class OnePhaseBfPerm(_PermutedBayes):
    name = "BF1ph-perm"
    base = OnePhaseBf


class TwoPhaseBfPerm(_PermutedBayes):
    name = "BF2ph-perm"
    base = TwoPhaseBf


class MbsPerm(_PermutedBayes):
    """MBS с перестановочной калибровкой."""

    name = "MBS"
    base = MbsBf


METHODS: Dict[str, Type[DecisionMethod]] = {
    cls.name: cls
    for cls in (
        OnePhaseLrt,
        TwoPhaseLrt,
        OnePhaseBf,
        TwoPhaseBf,
        MbsBf,
        OnePhaseBfPerm,
        TwoPhaseBfPerm,
        MbsPerm,
        FisherMethod,
    )
}


def build_methods(
    names: Sequence[str], settings: Optional[RunnerSettings] = None
) -> List[DecisionMethod]:
    """
    Создать процедуры по именам.

    Raises:
        ValidationError: Неизвестное имя метода
    """
    unknown = [n for n in names if n not in METHODS]
    if unknown:
        raise ValidationError(
            f"unknown methods: {', '.join(unknown)}", {"known": sorted(METHODS)}
        )
    return [METHODS[n](settings) for n in names]
