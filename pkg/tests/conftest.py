import pytest
import torch

from attndistill.data import SyntheticSpec, render_synthetic
from attndistill.models import DiscriminatorSpec, GeneratorSpec

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_data():
    return render_synthetic(SyntheticSpec(n_images=64, image_size=32, seed=3))


@pytest.fixture
def teacher_spec():
    return GeneratorSpec.preset("teacher", 4, 32, base_channels=8)


@pytest.fixture
def student_spec():
    return GeneratorSpec.preset("student", 4, 32, base_channels=8)


@pytest.fixture
def disc_spec():
    return DiscriminatorSpec(8, 5, 4, 32)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion the test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m:
            _CRITERIA.setdefault(m.args[0], {"name": m.args[1], "outcomes": [], "details": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if not m or (rep.when != "call" and rep.passed):
        return
    entry = _CRITERIA[m.args[0]]
    entry["outcomes"].append("passed" if rep.passed else rep.outcome)
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        if not e["outcomes"]:
            status = "NOT RUN"
        elif all(o == "passed" for o in e["outcomes"]):
            status = "PASS"
        elif any(o == "failed" for o in e["outcomes"]):
            status = "FAIL"
        else:
            status = "SKIPPED"
        detail = f"  [{'; '.join(e['details'])}]" if e["details"] else ""
        terminalreporter.write_line(f"criterion {n}: {status}  {e['name']}{detail}")
