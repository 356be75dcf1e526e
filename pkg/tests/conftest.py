import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# one line per acceptance criterion, filled by test_acceptance.py
VERDICTS: list[str] = []

# desk-scale trained generators: (task, model kind)
TRAINED = [("umaze", "gan"), ("crossroad", "gan"), ("obstacles", "gan"), ("umaze", "ddim")]


@pytest.fixture(scope="session")
def trained_models():
    """Train each generator once per session; roughly half a minute per GAN."""
    from certiplan.pipeline import get_task, train_model, variant_of
    from certiplan.tasks import make_dataset
    from certiplan.training import TrainingConfig

    cache = {}

    def get(name, kind):
        if (name, kind) not in cache:
            task = get_task(name)
            data = make_dataset(task.env, 500, variant_of(kind), seed=0)
            cache[name, kind] = (task, train_model(task, kind, data, TrainingConfig(iterations=3000, seed=0)))
        return cache[name, kind]

    return get


@pytest.fixture
def verdict():
    def record(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
        VERDICTS.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
