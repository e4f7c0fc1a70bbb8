import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """One CLI smoke-profile training run shared by the tests that need a trained checkpoint."""
    from avnet.cli import main

    out = tmp_path_factory.mktemp("smoke")
    code = main(["train", "--config", str(ROOT / "configs" / "smoke.json"), "--synthetic", "1",
                 "--iters", "500", "--out", str(out)])
    assert code == 0
    (run,) = list(out.glob("train-*"))
    return run


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
