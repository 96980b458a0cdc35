import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from causalgcl.config import load_config, render_config  # noqa: E402
from causalgcl.synthetic import SyntheticSpec, generate, synthetic_config, write_dataset  # noqa: E402

RESULTS: list[str] = []


def write_synthetic(root: Path, seed=0, users=30, items=20, **overrides) -> Path:
    """Small synthetic dataset plus config; returns the config path."""
    data = generate(SyntheticSpec(num_users=users, num_items=items, seed=seed))
    paths = write_dataset(data, root)
    values = synthetic_config(paths, "out", seed)
    for section, kv in overrides.items():
        values.setdefault(section, {}).update(kv)
    path = root / "config.ini"
    path.write_text(render_config(values), encoding="utf-8")
    return path


FAST = {"stage1": {"epochs": 3}, "train": {"epochs": 3}}


@pytest.fixture
def tiny_config(tmp_path):
    return load_config(write_synthetic(tmp_path, **FAST))


@pytest.fixture
def record():
    """Collects one pass/fail line per acceptance check for the terminal summary."""
    return RESULTS.append


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
