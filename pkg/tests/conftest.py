import numpy as np
import pytest

from pktids import capture, labeling, pipeline, trafficgen

SMALL_BUDGETS = dict(normal=600, ddos_http=120, ddos_tcp=200, ddos_udp=200, dos_http=120,
                     dos_tcp=200, dos_udp=200, os_fingerprint=120, service_scan=200,
                     data_exfiltration=120, keylogging=120)


@pytest.fixture(scope="session")
def small_scenario(tmp_path_factory):
    spec = trafficgen.ScenarioSpec.only(seed=5, **SMALL_BUDGETS)
    return trafficgen.generate(spec, tmp_path_factory.mktemp("small"))


@pytest.fixture(scope="session")
def small_records(small_scenario):
    return capture.read_capture(small_scenario.capture)


@pytest.fixture(scope="session")
def small_labeled(small_scenario, small_records):
    return labeling.label_records(small_records[0], labeling.read_rules(small_scenario.rules))


@pytest.fixture(scope="session")
def default_scenario(tmp_path_factory):
    return trafficgen.generate(trafficgen.ScenarioSpec(seed=7), tmp_path_factory.mktemp("default"))


@pytest.fixture(scope="session")
def default_labeled(default_scenario):
    records, stats = capture.read_capture(default_scenario.capture)
    table = labeling.label_records(records, labeling.read_rules(default_scenario.rules))
    return table, stats


@pytest.fixture(scope="session")
def default_prepared(default_labeled):
    return pipeline.prepare(default_labeled[0], seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
