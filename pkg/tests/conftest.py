import os

import numpy as np
import pytest

from forge.nn import Conv2D, Dense, Flatten, MaxPool2D, Model, ReLU

ACCEPTANCE_LINES = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


def small_cnn(seed=0, size=8, classes=4) -> Model:
    """Conv-pool-dense-dense net with the TinyVGG layer pattern at toy size."""
    rng = np.random.default_rng(seed)
    flat = (size // 2) ** 2 * 4
    layers = [
        Conv2D(rng.normal(0, 0.5, (3, 3, 3, 4)), rng.normal(0, 0.1, 4)),
        ReLU(),
        MaxPool2D(2),
        Flatten(),
        Dense(rng.normal(0, 0.3, (flat, 12)), rng.normal(0, 0.1, 12)),
        ReLU(),
        Dense(rng.normal(0, 0.3, (12, classes)), rng.normal(0, 0.1, classes)),
    ]
    return Model(layers, (size, size, 3), classes, penultimate_index=4)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """The default desk experiment, run once per session."""
    from forge.pipeline import ExperimentConfig, run_pipeline

    out = str(tmp_path_factory.mktemp("desk"))
    report = run_pipeline(ExperimentConfig(), out)
    return {"report": report, "dir": out, "rows": {r["cell"]: r for r in report["rows"]}}


@pytest.fixture(scope="session")
def desk_artifacts(desk):
    from forge.compiler import load_image, load_program
    from forge.nn import load_model
    from forge.quant import load_qmf

    d = desk["dir"]
    return {
        "model": load_model(os.path.join(d, "model/clean.mdl")),
        "qm": load_qmf(os.path.join(d, "model/clean.qmf")),
        "image": load_image(os.path.join(d, "model/clean.ddr")),
        "program": load_program(os.path.join(d, "model/clean.prg")),
    }
