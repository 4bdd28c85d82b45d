import numpy as np
import pytest

from esam.model import FieldSpec, TowerConfig


def small_tower(L: int = 8, hidden: int = 6, num_items: int = 12) -> TowerConfig:
    return TowerConfig(
        query_fields=(FieldSpec("user", 5, 3), FieldSpec("behavior", num_items, 3, multi=True)),
        item_fields=(FieldSpec("item", num_items, 3), FieldSpec("genre", 4, 2, multi=True)),
        num_items=num_items,
        hidden=(hidden, L),
    )


@pytest.fixture
def tower():
    return small_tower()


def random_queries(rng, cfg, count):
    nb = cfg.query_fields[1].vocab
    return [{"user": int(rng.integers(5)), "behavior": rng.integers(0, nb, size=rng.integers(0, 4)).tolist()}
            for _ in range(count)]


def random_items(rng, cfg, count):
    return [{"item": int(i), "genre": rng.integers(0, 4, size=rng.integers(1, 3)).tolist()}
            for i in rng.integers(0, cfg.num_items, size=count)]


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary and return the flag."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
