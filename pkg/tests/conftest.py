from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rbae.config import smoke_config  # noqa: E402
from rbae.data_ingest import SyntheticSpec, generate_synthetic_corpus, select_reference  # noqa: E402

# pinned synthetic end-to-end run
SMOKE_CORPUS_SEED = 0

# criterion name -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides):
    """Smallest model that still runs the full pipeline at 64x64."""
    base = dict(widths=(4, 8, 8, 8, 8), ffm_channels=4, batch_size=2, epochs_phase1=1, epochs_phase2=1)
    base.update(overrides)
    return smoke_config(**base)


@pytest.fixture(scope="session")
def tiny_split():
    return generate_synthetic_corpus(SyntheticSpec(n_train=4, n_test=4), seed=3)


@pytest.fixture(scope="session")
def tiny_phase2(tiny_split):
    """A (phase-1, phase-2) checkpoint pair from a couple of steps on the tiny corpus."""
    from rbae.trainer import train_phase1, train_phase2

    cfg = tiny_config()
    r1 = train_phase1(tiny_split, cfg, max_steps=2)
    r2 = train_phase2(tiny_split, r1.checkpoint, cfg, max_steps=2)
    return r1.checkpoint, r2.checkpoint, cfg


@dataclass
class SmokeRun:
    split: object
    cfg: object
    phase1: object
    phase2: object
    seconds: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    maps: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def smoke_run() -> SmokeRun:
    """Pinned synthetic end-to-end run (trained once per session)."""
    from rbae.cli import score_maps
    from rbae.msfdm import dequantize_map, quantize_map
    from rbae.trainer import Inferencer, train_phase1, train_phase2

    split = generate_synthetic_corpus(SyntheticSpec(), SMOKE_CORPUS_SEED)
    cfg = smoke_config()
    t0 = time.perf_counter()
    r1 = train_phase1(split, cfg)
    t1 = time.perf_counter()
    r2 = train_phase2(split, r1.checkpoint, cfg)
    t2 = time.perf_counter()
    run = SmokeRun(split, cfg, r1, r2, {"phase1": t1 - t0, "phase2": t2 - t1})
    ref = select_reference(split, cfg.reference_index)
    for head in ("msfdm", "pixel-gap"):
        results = Inferencer(r2.checkpoint, ref, seg_head=head).batch(split.test_samples)
        maps = [dequantize_map(quantize_map(r.am_final)) for r in results]
        run.maps[head] = maps
        run.metrics[head] = score_maps(maps, split.test_samples, cfg)
    run.seconds["total"] = time.perf_counter() - t0
    return run
