import pytest

from apar.script import ScriptNode, ScriptTree
from apar.sim import list_script

_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def fig3_script() -> ScriptTree:
    """Prompt Q; root 'a1 a2' forks into detail 'd1 d2', sibling 'b1'."""
    return ScriptTree(
        root=0,
        nodes={
            0: ScriptNode(0, ("a1", "a2"), first_child=1, next_sibling=2),
            1: ScriptNode(1, ("d1", "d2")),
            2: ScriptNode(2, ("b1",)),
        },
        prompt=("Q",),
    )


@pytest.fixture
def big_tree_script() -> ScriptTree:
    """Intro of 4 tokens, 5 items: 6-token heads forking 30-token details."""
    return list_script(items=5, intro_len=4, head_len=6, detail_len=30)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.module.__name__.endswith("test_acceptance"):
        _ACCEPTANCE[item.name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{_ACCEPTANCE[name]:4s} {name}")
