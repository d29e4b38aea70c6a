import pytest

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(name, ok, detail=""):
        _ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


def tiny_raw(out, condition="scratch", teachers=None, seeds=(3, 4), episodes=6, **knowru):
    """A config mapping small enough to train in about a second."""
    raw = {
        "name": f"tiny-{condition}",
        "condition": condition,
        "seeds": list(seeds),
        "output_dir": str(out),
        "scenario": {"kind": "spread", "n_agents": 3, "n_landmarks": 3},
        "train": {"episodes": episodes, "batch_size": 32, "minibatch_size": 16, "update_every": 2,
                  "hidden": [16, 16]},
    }
    if teachers is not None:
        raw["knowru"] = {
            "teachers": [str(t) for t in teachers],
            "source_scenario": {"kind": "spread", "n_agents": 2, "n_landmarks": 2},
            **knowru,
        }
    return raw


@pytest.fixture(scope="session")
def teacher_paths(tmp_path_factory):
    from knowru import experiment as ex

    out = tmp_path_factory.mktemp("teacher")
    raw = tiny_raw(out, seeds=[0])
    raw["scenario"] = {"kind": "spread", "n_agents": 2, "n_landmarks": 2}
    ex.run(ex.parse_config(raw))
    return [out / "seed_0" / f"agent_{i}" / "actor.snap" for i in range(2)]
