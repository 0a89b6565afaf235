import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from instaloc.geometry import Pose  # noqa: E402
from instaloc.simulator import LidarConfig, SceneSpec, generate_scene, raycast_scan  # noqa: E402


@pytest.fixture(scope="session")
def one_room_scene():
    return generate_scene(3, SceneSpec(rooms=1, furniture_per_room=8))


@pytest.fixture(scope="session")
def small_scene_scan(one_room_scene):
    room = one_room_scene.rooms[0]
    center = [(room.lo[0] + room.hi[0]) / 2, (room.lo[1] + room.hi[1]) / 2, 1.2]
    return raycast_scan(one_room_scene, Pose.from_yaw(0.3, center),
                        LidarConfig(beams=64, horizontal_resolution=256), seed=1)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance.RESULTS):
            terminalreporter.write_line(acceptance.RESULTS[n])
