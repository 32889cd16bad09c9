import shutil
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from jetpose import data
from jetpose.img import GrayImage

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def textured(width=96, height=80, seed=0):
    """Smooth random texture as a GrayImage."""
    return GrayImage(np.rint(data.value_noise(width, height, seed)))


@pytest.fixture
def small_scene_spec():
    return data.SceneSpec(seed=5, width=160, height=120, focal=150.0, plane_d=6.0,
                          plane_normal=(0.1, -0.05, 1.0), rot_axis=(0.0, 1.0, 0.0), rot_deg=1.5,
                          t_dir=(1.0, 0.0, 0.2), t_scale=0.2, noise_sigma=0.0)


FIXTURES = Path(__file__).parent / "fixtures"

# scene used to render fixtures/kitti3: camera advances 0.5 m along +z per frame
KITTI3_SPEC = data.SceneSpec(seed=11, width=240, height=160, focal=180.0, plane_d=8.0,
                             plane_normal=(0.05, -0.1, 1.0), t_dir=(0.0, 0.0, -1.0), t_scale=0.5,
                             noise_sigma=0.5)


@pytest.fixture
def kitti3(tmp_path):
    """Writable copy of the shipped three-frame KITTI-layout sequence."""
    return Path(shutil.copytree(FIXTURES / "kitti3", tmp_path / "kitti3"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
