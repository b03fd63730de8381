import numpy as np
import pytest

from pathforge.slide_io import open_slide, write_pyramid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_slide(tmp_path):
    """Write ``image`` as an SPYR container and return the opened handle."""
    counter = iter(range(10**6))

    def _make(image, tile_size=256, n_levels=1, metadata=None, name=None):
        path = tmp_path / (name or f"slide_{next(counter)}.spyr")
        write_pyramid(image, path, tile_size, n_levels, metadata or {})
        return open_slide(path)

    return _make


def gradient_image(h, w):
    y, x = np.mgrid[0:h, 0:w]
    return np.stack([(x * 7 + y) % 256, (y * 5 + x * 3) % 256, (x * y) % 256], axis=2).astype(np.uint8)


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the summary

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        _ACCEPTANCE[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, verdict = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}")
