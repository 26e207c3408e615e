import numpy as np
import pytest

from liftrec.domain import Interaction
from liftrec.ingest import SynthConfig, generate_synthetic


def make_interactions(timestamps, users=None, n_items=5, seed=0):
    """Interactions with ids in list order; features are (user, item, item % 3 + 1)."""
    rng = np.random.default_rng(seed)
    users = [1] * len(timestamps) if users is None else users
    out = []
    for i, (t, u) in enumerate(zip(timestamps, users)):
        item = int(rng.integers(1, n_items + 1))
        out.append(Interaction(i, u, item, int(t), (u, item, item % 3 + 1), int(rng.integers(2))))
    return out


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SynthConfig(n_users=30, n_items=40, n_genres=4, session_length_mean=30, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria: tests marked ``criterion(n, title)`` are rolled up into
# one pass/fail line per criterion at the end of the run
_criteria: dict[int, dict] = {}
_notes: dict[int, list[str]] = {}


def criterion_note(number: int, text: str) -> None:
    """Attach a measured value to a criterion's summary line."""
    _notes.setdefault(number, []).append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "failed": [], "skipped": [], "seconds": 0.0})
    if rep.failed and item.name not in entry["failed"]:
        entry["failed"].append(item.name)
    elif rep.skipped:
        entry["skipped"].append(item.name)
    entry["seconds"] += rep.duration


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "FAIL" if e["failed"] else "SKIP" if e["skipped"] else "PASS"
        extra = f"  failed: {', '.join(e['failed'])}" if e["failed"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {status}  {e['title']} ({e['seconds']:.1f}s){extra}")
        for text in _notes.get(number, []):
            terminalreporter.write_line(f"    {text}")
