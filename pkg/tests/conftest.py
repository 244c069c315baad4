"""Shared test configuration."""

from hypothesis import HealthCheck, settings

# First calls into numba kernels include JIT compilation, so per-example
# timing is meaningless.
settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, title): acceptance criterion reported in the summary")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is not None and not any(k == "criterion" for k, _ in item.user_properties):
        item.user_properties.append(("criterion", f"{marker.args[0]} {marker.args[1]}"))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "FAIL"
        CRITERIA.append((props["criterion"], status, props.get("measured", "")))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in CRITERIA:
        terminalreporter.write_line(f"{status}  criterion {label}" + (f"  [{detail}]" if detail else ""))
