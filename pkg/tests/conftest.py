import time

import pytest

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """``verdict(n, title, ok, detail)`` records one acceptance line, then asserts ``ok``."""

    def record(n, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}" + (f" | {detail}" if detail else "")
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture(scope="session")
def trained():
    """The documented training recipe, trained once per session and shared."""
    from flashpath.pipeline import TrainingRecipe, train_recipe

    recipe = TrainingRecipe()
    t0 = time.perf_counter()
    model, history, data = train_recipe(recipe)
    return {"recipe": recipe, "model": model, "history": history, "patches": len(data),
            "seconds": time.perf_counter() - t0}


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        seen = {}
        for line in _VERDICTS:
            seen[int(line.split("criterion ")[1].split(":")[0])] = line
        for n in range(1, 9):
            terminalreporter.write_line(
                seen.get(n, f"[FAIL] criterion {n}: no verdict (errored or not run)"))
