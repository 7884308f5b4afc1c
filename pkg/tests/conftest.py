import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(number, title): acceptance criterion checked by this test"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        entry = _criteria.setdefault(number, {"title": title, "passed": 0, "failed": []})
        if rep.passed:
            entry["passed"] += 1
        else:
            entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "FAIL" if entry["failed"] else "PASS"
        line = f"criterion {number:>2}: {status}  {entry['title']}"
        if entry["failed"]:
            line += f"  (failed: {', '.join(entry['failed'])})"
        terminalreporter.write_line(line)


SMALL_SPEC = """\
n_users_pos: 40
n_users_neg: 60
communities: [news, politics, science]
planted_categories: {they: [0.10, 0.05], negemo: [0.08, 0.04]}
seed: 7
"""

SMALL_RUN = """\
paths: {inputs: [synth/corpus.ndjson], bot_list: synth/bots.txt, output_dir: %s}
target_community: conspiracy
n_resamples: 2
grid: {n_trees: [20], max_depth: [null, 5]}
n_perm: 5
shap_sample: 50
siamese: {epochs: 20}
seed: 1
"""


@pytest.fixture(scope="session")
def small_runs(tmp_path_factory):
    """A small synthetic corpus pushed through every stage twice with one config.

    The first run's output is moved to ``first`` before the second starts;
    returns ``(root, first, second)``.
    """
    import shutil

    from mindprint.cli import main

    root = tmp_path_factory.mktemp("e2e")
    (root / "spec.yaml").write_text(SMALL_SPEC)
    assert main(["synth", "--spec", str(root / "spec.yaml"), "--out", str(root / "synth")]) == 0
    cfg = root / "run.yaml"
    cfg.write_text(SMALL_RUN % "out")
    assert main(["run", "--config", str(cfg)]) == 0
    shutil.move(root / "out", root / "first")
    assert main(["run", "--config", str(cfg)]) == 0
    return root, root / "first", root / "out"
