"""
Configuration for end-to-end CLI tests.
"""

import json
import os
import subprocess
import sys
from pathlib import Path
from typing import Callable, List

import pytest

from snl_sieve.cli import main

PROJECT_ROOT = Path(__file__).parent.parent.parent


@pytest.fixture(scope="session")
def project_root() -> Path:
    return PROJECT_ROOT


@pytest.fixture
def run_cli(capsys) -> Callable[..., tuple]:
    """Запустить CLI в текущем процессе; возвращает (код выхода, stdout, stderr)."""

    def _run(*argv: str):
        code = main([str(a) for a in argv])
        captured = capsys.readouterr()
        return code, captured.out, captured.err

    return _run


@pytest.fixture
def run_module() -> Callable[..., subprocess.CompletedProcess]:
    """Запустить `python -m snl_sieve.cli` отдельным процессом."""

    def _run(*argv: str) -> subprocess.CompletedProcess:
        env = {**os.environ, "PYTHONPATH": str(PROJECT_ROOT / "src")}
        cmd: List[str] = [sys.executable, "-m", "snl_sieve.cli", *[str(a) for a in argv]]
        return subprocess.run(cmd, capture_output=True, text=True, env=env, cwd=PROJECT_ROOT, timeout=300)

    return _run


@pytest.fixture
def scenario_file(tmp_path) -> Path:
    """Два маленьких сценария: эффект решета и нулевой all-or-none."""
    common = {"n_p": 400, "n_v": 400, "p_c": [0.8, 0.2], "targets": [1], "replicates": 3}
    payload = [
        {"label": "effect", "p_s": 0.15, **common},
        {"label": "null", "I_E": 0.3, "null_mode": "all_or_none_null", **common},
    ]
    path = tmp_path / "scenarios.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path
