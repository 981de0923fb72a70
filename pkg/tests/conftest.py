import os

import pytest
from hypothesis import HealthCheck, settings

from logstore import EngineConfig, LogStore, StoreConfig, TableSchema

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def fast_config(**kw) -> EngineConfig:
    store_kw = {k: kw.pop(k) for k in ("segment_capacity", "max_total_bytes", "sync_policy") if k in kw}
    store_kw.setdefault("segment_capacity", 64 * 1024)
    return EngineConfig(store=StoreConfig(durable_sync=False, **store_kw), **kw)


@pytest.fixture
def make_db(tmp_path):
    """Open engines under tmp_path; all of them are closed at teardown."""
    opened = []

    def _make(name="db", table=True, **kw):
        db = LogStore.open(tmp_path / name, fast_config(**kw))
        if table:
            db.create_table(TableSchema("t", {"g": ["a"]}))
        opened.append(db)
        return db

    yield _make
    for db in opened:
        db.close()


@pytest.fixture
def db(make_db):
    return make_db()


# -- acceptance report -----------------------------------------------------------

_criteria: list[tuple[int, str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    _criteria.append((m.args[0], m.args[1], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, verdict, detail in sorted(_criteria):
        line = f"{verdict} criterion {n:>2}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
