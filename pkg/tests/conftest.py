import numpy as np
import pytest

from lidarodom.geometry import PoseSE3


def random_pose(rng, max_angle=np.pi, max_translation=10.0) -> PoseSE3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    return PoseSE3.from_rotvec(axis * angle, rng.uniform(-max_translation, max_translation, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; it is echoed now and repeated in the run summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(label: str, ok: bool | None, detail: str) -> None:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"{status} criterion {label}: {detail}"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
