import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gridgrec.render import default_camera  # noqa: E402
from gridgrec.scene import generate_scene, make_scene  # noqa: E402


def arch_cells():
    # blue and green 3-high columns with a red bridge on top between them
    cells = [((0, y, 5), "blue") for y in range(3)]
    cells += [((4, y, 5), "green") for y in range(3)]
    cells += [((x, 2, 5), "red") for x in (1, 2, 3)]
    return cells


@pytest.fixture
def arch_scene():
    return make_scene(arch_cells(), scene_id="arch")


@pytest.fixture
def camera():
    return default_camera()


@pytest.fixture(scope="session")
def scenes():
    return [generate_scene(s) for s in range(6)]
