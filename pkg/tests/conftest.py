from __future__ import annotations

from pathlib import Path

import pytest

from cxraudit.synthgen import generate_corpus, preset


@pytest.fixture(scope="session")
def corpus_factory(tmp_path_factory):
    """Generate each (preset, seed, n) corpus once per session."""
    cache = {}

    def make(name: str, seed: int = 0, n_images=None) -> tuple[Path, dict]:
        key = (name, seed, n_images)
        if key not in cache:
            out = tmp_path_factory.mktemp(f"{name}-{seed}")
            manifest = generate_corpus(preset(name, seed, n_images), out)
            cache[key] = (out, manifest)
        return cache[key]

    return make


# ---- acceptance reporting: one PASS/FAIL line per criterion

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    prev = _ACCEPTANCE.get(number, (title, True))
    _ACCEPTANCE[number] = (title, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
