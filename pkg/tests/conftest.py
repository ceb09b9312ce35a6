import pytest
import torch

from dgcvc.corpus import synth_toy_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    return synth_toy_corpus(4, 3, seed=0, out_dir=tmp_path_factory.mktemp("toy"))


_acceptance = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    detail = dict(report.user_properties).get("detail", "")
    _acceptance[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _acceptance[name]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {name.split('_')[2]}: {status}  {detail}".rstrip())
