from dataclasses import dataclass

import numpy as np
import pytest

from defencing import cnn, synth


@dataclass(frozen=True)
class DetectorExperiment:
    """Trained classifier plus everything needed to score it on held-out scenes."""

    model: cnn.CnnModel
    report: cnn.TrainReport
    dataset_size: int
    n_train_scenes: int
    held_scenes: list  # (fenced Image, FenceLayer) pairs


@pytest.fixture(scope="session")
def detector_experiment() -> DetectorExperiment:
    """The desk-scale detector experiment: 10 stratified training scenes,
    augmented texel dataset, 60 training epochs, 5 held-out scenes.

    Built once per session (roughly two minutes); shared by the detector
    end-to-end test and the acceptance criteria.
    """
    spacings = np.linspace(24, 40, 10)
    angles = [-16, 12, -8, 16, -12, 4, -16, 8, -4, 14]
    colors = np.linspace(0.02, 0.24, 10)
    train_scenes = []
    for i in range(10):
        _, fenced, layer = synth.random_scene(
            160, 160, seed=100 + i,
            spacing=float(spacings[i]), angle=float(angles[i]),
            wire_thickness=3 + (i % 2), wire_color=float(colors[(i * 3) % 10]),
        )
        train_scenes.append((fenced, layer))
    held_scenes = []
    for i in range(5):
        _, fenced, layer = synth.random_scene(160, 160, seed=900 + i)
        held_scenes.append((fenced, layer))

    base = synth.build_texel_dataset(train_scenes, n_pos=160, n_neg=320, seed=1,
                                     hard_negative_fraction=0.35)
    dataset = synth.augment(base)
    model, report = cnn.train(cnn.init_model(0), dataset,
                              cnn.TrainConfig(epochs=60, batch_size=50, learning_rate=0.5, seed=0))
    return DetectorExperiment(
        model=model,
        report=report,
        dataset_size=len(dataset),
        n_train_scenes=len(train_scenes),
        held_scenes=held_scenes,
    )


@pytest.fixture(scope="session")
def untrained_model_file(tmp_path_factory):
    """Freshly initialized model on disk: enough for exercising CLI plumbing."""
    path = tmp_path_factory.mktemp("model") / "model.txt"
    cnn.save_model(cnn.init_model(0), path)
    return path
