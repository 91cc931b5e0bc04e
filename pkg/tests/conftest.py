import numpy as np
import pytest

from qavsd.encoders import ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_v=8, d_a=8, d_ia=8, d_i=8, heads=2, qa_layers=1, xs_layers=1, ffn_mult=2,
                visual_hidden=8, audio_hidden=8, n_bins=6, patch_size=4, context=1, temporal_half=1,
                sync_window=2, factor_k=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
