import numpy as np
import pytest

from planttrack.optim import OptimizerConfig
from planttrack.synthetic import CameraModel, GenConfig, PlantScene, SceneKeypoint, render_view
from planttrack.train import TrainConfig, train

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def one_fruit_sample(channels=32, noise=0.05, cell=(5, 5)):
    """A view holding a single fruit whose projection lands in ``cell``."""
    cfg = GenConfig(channels=channels, noise_std=noise)
    cam = CameraModel(cfg.focal, cfg.focal, cfg.image_width / 2, cfg.image_height / 2, translation=np.array([0, 0, 1.0]))
    px, py = (14 * c + 7 for c in cell)
    point = ((px - cam.cx) / cfg.focal, (py - cam.cy) / cfg.focal, 0.0)
    scene = PlantScene([SceneKeypoint(point, "fruit")], background_depth=2.5)
    return render_view(scene, cam, cfg, np.random.default_rng(0)).sample


@pytest.fixture(scope="session")
def overfit_model():
    sample = one_fruit_sample()
    cfg = TrainConfig(stages=1, hidden=16, epochs=3000, batch_size=1, optimizer=OptimizerConfig(lr=1e-3))
    model, curve = train([sample], cfg)
    return model, curve


@pytest.fixture(scope="session")
def fruit_sample():
    return one_fruit_sample()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
