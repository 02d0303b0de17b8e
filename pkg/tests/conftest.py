import os
import sys
import time
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

from dronefuse import fusion_net  # noqa: E402

settings.register_profile("ci", deadline=None, print_blob=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

E2E_SEEDS = (0, 1, 2, 3, 4)


# ---------------------------------------------------------------------------
# suite-wide attention monitor
# ---------------------------------------------------------------------------

class AttentionMonitor:
    """Worst row-sum deviation and smallest entry over every MMFF forward pass."""

    def __init__(self):
        self.forwards = 0
        self.max_dev = 0.0
        self.min_entry = np.inf

    def observe(self, cap):
        for key in ("aw_tfi", "aw_zc"):
            aw = cap[key]
            self.max_dev = max(self.max_dev, float(np.abs(aw.sum(axis=-1) - 1.0).max()))
            self.min_entry = min(self.min_entry, float(aw.min()))
        self.forwards += 1


ATTENTION = AttentionMonitor()
_mmff_forward = fusion_net.Mmff.forward


def _watched_forward(self, ff_tfi, ff_zc, capture=None):
    cap = {} if capture is None else capture
    out = _mmff_forward(self, ff_tfi, ff_zc, capture=cap)
    ATTENTION.observe(cap)
    return out


fusion_net.Mmff.forward = _watched_forward


# ---------------------------------------------------------------------------
# acceptance report
# ---------------------------------------------------------------------------

ACCEPTANCE_LINES = []


def report(criterion: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
    if ATTENTION.forwards:
        terminalreporter.write_line(
            f"MMFF attention over {ATTENTION.forwards} forward passes: max |row sum - 1| = "
            f"{ATTENTION.max_dev:.3g}, min entry = {ATTENTION.min_entry:.3g}")


# ---------------------------------------------------------------------------
# trained models shared by the end-to-end checks
# ---------------------------------------------------------------------------

@dataclass
class SeedRun:
    seed: int
    results: dict        # ablation id -> AblationResult
    e2e_seconds: float   # corpus build plus the two gated trainings
    test: object
    ood: object


class _Runs:
    """Lazily trains each (seed, ablation) on that seed's corpus, once per session."""

    def __init__(self):
        self._runs = {}
        self._corpora = {}

    def _corpus(self, seed):
        from dronefuse.corpus import CorpusSpec, build_corpus
        if seed not in self._corpora:
            t0 = time.perf_counter()
            self._corpora[seed] = (build_corpus(CorpusSpec(seed=seed)), time.perf_counter() - t0)
        return self._corpora[seed]

    def get(self, seed, ablations=("fusion_proposed", "tfi_only")) -> SeedRun:
        from dronefuse.eval import run_ablation
        corpus, build_s = self._corpus(seed)
        run = self._runs.setdefault(seed, SeedRun(seed, {}, build_s, corpus.test, corpus.ood))
        for ab in ablations:
            if ab not in run.results:
                t0 = time.perf_counter()
                run.results[ab] = run_ablation(ab, corpus, seed)
                if ab in ("fusion_proposed", "tfi_only"):
                    run.e2e_seconds += time.perf_counter() - t0
        return run


@pytest.fixture(scope="session")
def trained_runs():
    return _Runs()
