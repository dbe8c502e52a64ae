import os

from hypothesis import HealthCheck, settings

settings.register_profile('default', deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile('thorough', deadline=None, max_examples=200)
settings.load_profile(os.environ.get('HYPOTHESIS_PROFILE', 'default'))

import pytest

ACCEPTANCE = []


@pytest.fixture
def report(capsys):
    """``report(criterion, ok, detail)`` prints one PASS/FAIL line."""
    def _report(criterion, ok, detail=''):
        line = f'CRITERION {criterion}: {"PASS" if ok else "FAIL"}  {detail}'.rstrip()
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print('\n' + line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section('acceptance criteria')
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
