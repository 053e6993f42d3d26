from __future__ import annotations

import time

import pytest

from umx.evaluator import random_corpus, train_hint_sets
from umx.extractor import HINT_SETS, TrainConfig
from umx.model_zoo import RandomModelConfig
from umx.umsim import MemoryConfig, NoiseProfile

# criterion id -> (passed, detail); filled by the acceptance tests
CRITERIA: dict[str, tuple[bool, str]] = {}

SUITE_SEED = 0
SUITE_MODELS = 200


class TrainedSuite:
    def __init__(self) -> None:
        t0 = time.perf_counter()
        self.corpus = random_corpus(SUITE_MODELS, RandomModelConfig(), MemoryConfig(), NoiseProfile.snooped(),
                                    SUITE_SEED)
        self.classifiers = train_hint_sets(self.corpus, sorted(HINT_SETS), TrainConfig(), SUITE_SEED)
        self.train_seconds = time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained_suite() -> TrainedSuite:
    return TrainedSuite()


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
