"""Shared fixtures: toy model configs, synthetic clips, and a trained run.

The toy configuration is small enough for float64 oracle comparisons and
finite-difference gradient checks while exercising every code path: message
attention across frames, intra-frame attention, temporal pooling, the text
encoder, prompting blocks and the similarity head.
"""

from __future__ import annotations

import numpy as np
import pytest

from fragreel.catalogue import EventLabel, GameId
from fragreel.params import (
    EncoderConfig,
    HeadConfig,
    ModelConfig,
    ModelParams,
    TextConfig,
)
from fragreel.training import TrainConfig, TrainExample, train

OVERFIT_LABELS = (
    EventLabel.KILL,
    EventLabel.DEATH,
    EventLabel.POWER_USE,
    EventLabel.BACKGROUND,
)


def toy_model_config(head_kind: str = "similarity") -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(
            t_frames=2, side=4, patch=2, d_model=8, n_heads=2,
            n_cct_layers=1, n_mit_layers=1, d_ffn=16,
        ),
        text=TextConfig(d_text=8, n_heads=2, n_layers=1, d_ffn=16, prompt_heads=2),
        head=HeadConfig(kind=head_kind, logit_scale_init=100.0),
    )


def plain_f64(params: ModelParams) -> dict[str, np.ndarray]:
    """Parameters as a plain name -> float64 array dict for the oracle."""
    return {name: params[name].data.astype(np.float64) for name in params.names()}


def overfit_clips(mag: float = 5.0) -> list[TrainExample]:
    """Eight synthetic clips, two per class, with row/column signatures.

    Class k lights row k and darkens column k, so classes are linearly
    separable in patch space while sharing the same overall energy.
    """
    examples = []
    for i in range(8):
        k = i % 4
        frames = np.zeros((2, 4, 4, 3), dtype=np.float32)
        frames[:, k, :, :] = mag
        frames[:, :, k, :] -= mag
        examples.append(TrainExample(clip=frames, game=GameId.OW2, label=OVERFIT_LABELS[k]))
    return examples


OVERFIT_TRAIN = TrainConfig(
    epochs=50, batch_size=4, lr_max=2e-2, lr_min=2e-5, seed=3,
)


def review_session():
    """Window decisions and annotations with known per-label accuracies.

    29 Kill windows of which 20 sit over a Kill annotation, 34 Death
    windows all over Death annotations, and 30 Background windows of which
    one clashes with an annotation: accuracies 20/29, 34/34 and 29/30 for a
    pooled 83/93.
    """
    from fragreel.annotations import AnnotatedEvent
    from fragreel.detection import WindowDecision

    decisions = []
    annotations = []
    for i in range(29):
        start = 10 * i
        decisions.append(
            WindowDecision(start_s=start, label=EventLabel.KILL, source_second=start, score=0.9)
        )
        if i < 20:
            annotations.append(
                AnnotatedEvent("review", start + 0.5, start + 1.5, EventLabel.KILL, GameId.CSGO)
            )
    for i in range(34):
        start = 1000 + 10 * i
        decisions.append(
            WindowDecision(start_s=start, label=EventLabel.DEATH, source_second=start, score=0.8)
        )
        annotations.append(
            AnnotatedEvent("review", start + 0.5, start + 1.5, EventLabel.DEATH, GameId.CSGO)
        )
    for i in range(30):
        start = 3000 + 10 * i
        decisions.append(
            WindowDecision(
                start_s=start, label=EventLabel.BACKGROUND, source_second=start, score=0.5
            )
        )
    annotations.append(
        AnnotatedEvent("review", 3290.5, 3291.5, EventLabel.KILL, GameId.CSGO)
    )
    return decisions, annotations


@pytest.fixture(scope="session")
def toy_config() -> ModelConfig:
    return toy_model_config()


@pytest.fixture()
def toy_params(toy_config) -> ModelParams:
    return ModelParams.init(toy_config, seed=7)


@pytest.fixture()
def toy_params_f64(toy_config) -> ModelParams:
    return ModelParams.init(toy_config, seed=7, dtype=np.float64)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """One full training run on the synthetic clips, shared by the suite.

    Returns the examples, the untouched initial parameters, the trained
    (best-checkpoint) parameters, the epoch history, and the paths of the
    written checkpoint and history files.
    """
    out = tmp_path_factory.mktemp("overfit")
    examples = overfit_clips()
    initial = ModelParams.init(toy_model_config(), seed=7)
    params = initial.copy()
    ckpt = out / "model.xckp"
    hist = out / "history.jsonl"
    best, history = train(
        examples, [], params, OVERFIT_TRAIN,
        checkpoint_path=ckpt, history_path=hist,
    )
    return {
        "examples": examples,
        "initial": initial,
        "final": params,
        "best": best,
        "history": history,
        "checkpoint": ckpt,
        "history_path": hist,
    }


_ACCEPTANCE_REPORTS: dict[str, object] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" in report.nodeid and report.when == "call":
        _ACCEPTANCE_REPORTS[report.nodeid] = report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_REPORTS:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE_REPORTS):
        report = _ACCEPTANCE_REPORTS[nodeid]
        verdict = "PASS" if report.passed else "FAIL"
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"ACCEPTANCE {verdict}: {name}")
