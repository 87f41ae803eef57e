import dataclasses

import pytest

from vjepa.config import EvalConfig, FinetuneConfig, RunConfig
from vjepa.data import DatasetSpec
from vjepa.networks import PredictorConfig, ProbeConfig, ViTConfig
from vjepa.optim import ScheduleConfig
from vjepa.tokenizer import PatchGeometry


def tiny_config(**overrides) -> RunConfig:
    """A run small enough for unit tests: 4x16x16 clips, 2x4x4 grid, one block each."""
    cfg = RunConfig(
        data=DatasetSpec(frames=4, height=16, width=16, sprite_size=6),
        encoder=ViTConfig(depth=1, dim=24, heads=4, patch=PatchGeometry(2, 4, 4, 3)),
        predictor=PredictorConfig(depth=1, dim=12),
        schedule=ScheduleConfig.scaled(6),
        probe=ProbeConfig(heads=2, head_dim=6),
        eval=EvalConfig(train_videos=64, test_videos=32, epochs=2, batch_size=16),
        finetune=FinetuneConfig(iterations=3, batch_size=4, warmup_iters=1),
        batch_size=4,
        checkpoint_every=3,
        deterministic=True,
    )
    return dataclasses.replace(cfg, **overrides)


@pytest.fixture
def tiny():
    return tiny_config()


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str):
    """Print and remember one PASS/FAIL line; the lines are repeated in the terminal summary."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(line, flush=True)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
