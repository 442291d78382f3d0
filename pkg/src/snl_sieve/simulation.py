"""
Симуляционное исследование: генерация сценариев, прогон методов по
репликациям, матрица долей отвержений и ROC-анализ.
"""

import asyncio
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .core import vaccine_profile
from .exceptions import ValidationError
from .fit import permute_labels
from .methods import METHODS, build_methods
from .models import (
    STUDY_P_C,
    Decision,
    FailureTable,
    GridReport,
    NullMode,
    QMode,
    RocEntry,
    RunnerSettings,
    ScenarioConfig,
)
from .utils import derive_seed, make_rng, setup_logging

logger = logging.getLogger(__name__)

# Репликаций в одной задаче пула
CHUNK_SIZE = 25

BAYESIAN_METHODS = [name for name, cls in METHODS.items() if cls.bayesian]


# ==================== DATA GENERATION ====================


def _draw_arm(rng: np.random.Generator, n: int, r0: float, p_fail) -> np.ndarray:
    probs = np.concatenate([[r0], (1.0 - r0) * np.asarray(p_fail, dtype=float)])
    return rng.multinomial(n, probs / probs.sum())


def simulate_dataset(cfg: ScenarioConfig, replicate_index: int) -> FailureTable:
    """
    Сгенерировать одну таблицу исходов сценария.

    Плацебо: мультиномиальное распределение (r_c0, (1 - r_c0) p_c).
    Вакцина: (r_v0, (1 - r_v0) p_v) по профилю some-or-none модели; в
    нулевом all-or-none сценарии p_v = p_c. В перемешанном нулевом сценарии
    метки групп дополнительно перемешиваются по участникам.

    Args:
        cfg: Настройки сценария
        replicate_index: Номер репликации (вместе с cfg.seed задаёт генератор)

    Returns:
        FailureTable: Таблица исходов
    """
    rng = make_rng(cfg.seed, replicate_index)
    target = cfg.target()

    if cfg.null_mode is NullMode.ALL_OR_NONE_NULL:
        p_v = cfg.p_c
        r_v0 = 1.0 - (1.0 - cfg.I_E) * (1.0 - cfg.r_c0)
    else:
        rates = vaccine_profile(cfg.params(), target)
        p_v = rates.p_v
        r_v0 = rates.r_v0

    placebo = _draw_arm(rng, cfg.n_p, cfg.r_c0, cfg.p_c)
    vaccine = _draw_arm(rng, cfg.n_v, r_v0, p_v)
    table = FailureTable(n_p=placebo.tolist(), n_v=vaccine.tolist())

    if cfg.null_mode is NullMode.PERMUTED_ONE_OR_NONE:
        table = permute_labels(table, rng)
    return table


def builtin_scenarios(replicates: int = 1000, seed: int = 0) -> List[ScenarioConfig]:
    """
    Одиннадцать сценариев исследования операционных характеристик.

    Равномерное q: I_E = 0 при p_s из {0.15, 0.25, 0.5}, I_E = 0.2 при
    p_s = 0.15 (комбинация I_E = 0.5, p_s = 0.15 недопустима), I_E = 0.5
    при p_s из {0.25, 0.5}. Insert-only replacement-only сценарии при трёх
    значениях p_s. Нулевые сценарии: all-or-none с I_E = 0.5 и
    перемешанный one-or-none (I_E = 0.5, p_s = 0.5).
    """
    common = {"p_c": list(STUDY_P_C), "targets": [1], "replicates": replicates, "seed": seed}
    scenarios = []
    for I_E, p_s in ((0.0, 0.15), (0.0, 0.25), (0.0, 0.5), (0.2, 0.15), (0.5, 0.25), (0.5, 0.5)):
        scenarios.append(
            ScenarioConfig(label=f"uniform I_E={I_E:g} p_s={p_s:g}", I_E=I_E, p_s=p_s, **common)
        )
    for p_s in (0.15, 0.25, 0.5):
        scenarios.append(
            ScenarioConfig(
                label=f"insert-only p_s={p_s:g}", p_s=p_s, q_mode=QMode.INSERT_ONLY, **common
            )
        )
    scenarios.append(
        ScenarioConfig(
            label="null all-or-none I_E=0.5",
            I_E=0.5,
            null_mode=NullMode.ALL_OR_NONE_NULL,
            **common,
        )
    )
    scenarios.append(
        ScenarioConfig(
            label="null permuted one-or-none",
            I_E=0.5,
            p_s=0.5,
            null_mode=NullMode.PERMUTED_ONE_OR_NONE,
            **common,
        )
    )
    return scenarios


# ==================== GRID RUNNER ====================


def _run_chunk(
    cfg: ScenarioConfig,
    method_names: List[str],
    settings: RunnerSettings,
    replicate_indices: List[int],
) -> List[Tuple[int, List[Decision]]]:
    """Выполнить методы на группе репликаций одного сценария (в процессе пула)."""
    methods = build_methods(method_names, settings)
    target = cfg.target()
    out = []
    for r in replicate_indices:
        table = simulate_dataset(cfg, r)
        decisions = [
            method.decide(table, target, derive_seed(cfg.seed, r, m + 1))
            for m, method in enumerate(methods)
        ]
        out.append((r, decisions))
    return out


class AsyncGridRunner:
    """
    Асинхронный прогон сетки сценарии x методы.

    Репликации разбиваются на задачи, которые выполняются в пуле процессов
    (или в текущем процессе при max_workers <= 1); результаты собираются в
    порядке номеров репликаций, поэтому отчёт не зависит от расписания.

    Пример использования:
    ```python
    async with AsyncGridRunner(settings, max_workers=4) as runner:
        report = await runner.run(builtin_scenarios(), ["1phase", "2phase", "Fisher"], seed=1)
    ```
    """

    def __init__(
        self,
        settings: Optional[RunnerSettings] = None,
        max_workers: Optional[int] = None,
        enable_logging: bool = False,
    ):
        """
        Инициализация раннера.

        Args:
            settings: Настройки методов
            max_workers: Число процессов (None - из settings)
            enable_logging: Настроить логирование
        """
        self.settings = settings or RunnerSettings()
        self.max_workers = max_workers if max_workers is not None else self.settings.max_workers
        self._executor: Optional[ProcessPoolExecutor] = None

        if enable_logging:
            setup_logging("INFO")

    async def __aenter__(self):
        if self.max_workers and self.max_workers > 1:
            self._executor = ProcessPoolExecutor(max_workers=self.max_workers)
            logger.info(f"Started process pool with {self.max_workers} workers")
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        await self.close()

    async def close(self):
        """Остановить пул процессов."""
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    async def _submit(self, *args):
        if self._executor is None:
            return _run_chunk(*args)
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(self._executor, _run_chunk, *args)

    async def run(
        self,
        scenarios: Sequence[ScenarioConfig],
        methods: Sequence[str],
        replicates: Optional[int] = None,
        seed: int = 0,
    ) -> GridReport:
        """
        Прогнать сетку.

        Args:
            scenarios: Сценарии (строки)
            methods: Имена методов (столбцы)
            replicates: Число репликаций (None - из каждого сценария)
            seed: Главный сид; сид сценария i выводится как (seed, i)

        Returns:
            GridReport: Доли отвержений, счётчики ошибок и оценки
        """
        if not scenarios:
            raise ValidationError("no scenarios to run")
        labels = [cfg.label for cfg in scenarios]
        if len(set(labels)) != len(labels):
            raise ValidationError("scenario labels must be unique", {"labels": labels})
        method_names = list(methods)
        build_methods(method_names, self.settings)

        configs = []
        for i, cfg in enumerate(scenarios):
            update = {"seed": derive_seed(seed, i)}
            if replicates is not None:
                update["replicates"] = replicates
            configs.append(cfg.model_copy(update=update))

        tasks = []
        keys = []
        for i, cfg in enumerate(configs):
            indices = list(range(cfg.replicates))
            for start in range(0, len(indices), CHUNK_SIZE):
                tasks.append(
                    self._submit(cfg, method_names, self.settings, indices[start : start + CHUNK_SIZE])
                )
                keys.append(i)

        logger.info(
            f"Running {len(configs)} scenarios x {len(method_names)} methods in {len(tasks)} tasks"
        )
        chunks = await asyncio.gather(*tasks)

        per_scenario: Dict[int, List[Tuple[int, List[Decision]]]] = {i: [] for i in range(len(configs))}
        for i, chunk in zip(keys, chunks):
            per_scenario[i].extend(chunk)

        rates, errors, scores = [], [], {}
        for i, cfg in enumerate(configs):
            rows = [decisions for _, decisions in sorted(per_scenario[i], key=lambda item: item[0])]
            reject = np.array([[d.reject for d in row] for row in rows], dtype=float)
            failed = np.array([[d.error is not None for d in row] for row in rows], dtype=int)
            rates.append(reject.mean(axis=0).tolist())
            errors.append(failed.sum(axis=0).tolist())
            scores[cfg.label] = {
                name: [np.nan if row[m].score is None else row[m].score for row in rows]
                for m, name in enumerate(method_names)
            }
            if failed.any():
                logger.warning(f"Scenario '{cfg.label}': method errors {dict(zip(method_names, errors[-1]))}")
            logger.info(f"Scenario '{cfg.label}' done: {dict(zip(method_names, np.round(rates[-1], 3)))}")

        return GridReport(
            rows=[cfg.label for cfg in configs],
            cols=method_names,
            rejection_rate=rates,
            replicates=[cfg.replicates for cfg in configs],
            error_counts=errors,
            seed=seed,
            scenario_seeds=[cfg.seed for cfg in configs],
            scores=scores,
            settings={"runner": self.settings.model_dump(mode="json"), "methods": method_names},
        )


def run_grid(
    scenarios: Sequence[ScenarioConfig],
    methods: Sequence[str],
    replicates: Optional[int] = None,
    seed: int = 0,
    settings: Optional[RunnerSettings] = None,
    max_workers: Optional[int] = None,
) -> GridReport:
    """Синхронная обёртка над AsyncGridRunner."""

    async def _run() -> GridReport:
        async with AsyncGridRunner(settings, max_workers=max_workers) as runner:
            return await runner.run(scenarios, methods, replicates, seed)

    return asyncio.run(_run())


# ==================== ROC ====================


def _clean_scores(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    finite_or_inf = arr[~np.isnan(arr)]
    if finite_or_inf.size < arr.size:
        logger.warning(f"Dropping {arr.size - finite_or_inf.size} missing {name} scores")
    if finite_or_inf.size == 0:
        raise ValidationError(f"no {name} scores")
    return finite_or_inf


def roc_auc(effect_scores: Sequence[float], null_scores: Sequence[float]) -> float:
    """
    AUC = P(оценка эффекта > оценки нуля) + P(равенство) / 2.

    Вычисляется точно по рангам (статистика Манна-Уитни).
    """
    effect = _clean_scores(effect_scores, "effect")
    null = _clean_scores(null_scores, "null")
    ranks = rankdata(np.concatenate([effect, null]))
    n1, n2 = effect.size, null.size
    return float((ranks[:n1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n2))


def roc_curve(
    effect_scores: Sequence[float], null_scores: Sequence[float]
) -> Tuple[List[float], List[float]]:
    """
    Точки ROC-кривой (fpr, tpr) по убывающим порогам.

    Returns:
        Tuple[List[float], List[float]]: fpr и tpr, начиная с (0, 0)
    """
    effect = _clean_scores(effect_scores, "effect")
    null = _clean_scores(null_scores, "null")
    thresholds = np.unique(np.concatenate([effect, null]))[::-1]
    fpr = [0.0] + [float(np.mean(null >= t)) for t in thresholds]
    tpr = [0.0] + [float(np.mean(effect >= t)) for t in thresholds]
    return fpr, tpr


def roc_report(
    report: GridReport,
    positives: Sequence[str],
    negatives: Sequence[str],
    methods: Optional[Sequence[str]] = None,
) -> List[RocEntry]:
    """
    AUC для каждой пары (позитивный, негативный сценарий) и каждого метода.

    По умолчанию берутся байесовские методы отчёта.
    """
    methods = list(methods) if methods is not None else [m for m in report.cols if m in BAYESIAN_METHODS]
    entries = []
    for pos in positives:
        for neg in negatives:
            for method in methods:
                try:
                    effect = report.scores[pos][method]
                    null = report.scores[neg][method]
                except KeyError as e:
                    raise ValidationError(f"no scores for {e.args[0]!r} in the grid report")
                entries.append(
                    RocEntry(
                        method=method,
                        positive=pos,
                        negative=neg,
                        auc=roc_auc(effect, null),
                        n_pos=int(np.sum(~np.isnan(effect))),
                        n_neg=int(np.sum(~np.isnan(null))),
                    )
                )
    return entries


def roc_panels(
    scenarios: Sequence[ScenarioConfig], p_s: float = 0.15
) -> Tuple[List[str], List[str]]:
    """
    Позитивные и негативные сценарии ROC-панелей при заданном p_s.

    Позитивные: сценарии с эффектом и данным p_s (I_E > 0, insert-only,
    replacement-only); негативные: оба нулевых сценария.
    """
    positives = [
        s.label for s in scenarios if s.null_mode is NullMode.NONE and abs(s.p_s - p_s) < 1e-12
    ]
    negatives = [s.label for s in scenarios if s.null_mode is not NullMode.NONE]
    if not positives:
        raise ValidationError(f"no effect scenarios with p_s={p_s}")
    if not negatives:
        raise ValidationError("no null scenarios for ROC")
    return positives, negatives
