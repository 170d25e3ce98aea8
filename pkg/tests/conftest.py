import numpy as np
import pytest

from kstransformer.data import SynthSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(
        SynthSpec(n_samples=12, audio_dim=6, text_dim=5, audio_len=(4, 7), text_len=(3, 5), seed=11)
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")
    config._acceptance_lines = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    verdict = "PASS" if report.passed else "FAIL"
    item.config._acceptance_lines[number] = f"AC{number:>2} {verdict}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
