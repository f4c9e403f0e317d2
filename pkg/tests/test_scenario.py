from __future__ import annotations

import json

import pytest

from ubfsim import bundled_scenario, bundled_scenario_names
from ubfsim.errors import ScenarioError
from ubfsim.scenario import TOGGLES, from_dict, load_scenario


def base(**extra):
    data = {
        "users": [{"name": "alice"}, {"name": "bob"}],
        "groups": [{"name": "proj1", "members": ["alice"]}],
        "hosts": [{"id": "hA"}],
        "events": [],
    }
    data.update(extra)
    return data


def test_minimal_loads():
    s = from_dict(base())
    assert s.events == []
    assert s.toggles == {t: True for t in TOGGLES}


def test_unknown_member_reports_path():
    data = base(groups=[{"name": "proj1", "members": ["carol"]}])
    with pytest.raises(ScenarioError, match=r"groups\[0\]\.members\[0\]: unknown user 'carol'"):
        from_dict(data)


def test_unknown_event_user():
    data = base(events=[{"t": 0, "kind": "spawn", "args": {"host": "hA", "user": "eve", "pid": 1}}])
    with pytest.raises(ScenarioError, match=r"events\[0\]\.args\.user"):
        from_dict(data)


def test_events_must_be_time_ordered():
    ev = {"kind": "tick"}
    with pytest.raises(ScenarioError, match=r"events\[1\]\.t"):
        from_dict(base(events=[{**ev, "t": 5}, {**ev, "t": 4}]))


def test_pid_must_be_spawned_first():
    data = base(events=[{"t": 0, "kind": "newgrp",
                         "args": {"host": "hA", "pid": 7, "group": "proj1"}}])
    with pytest.raises(ScenarioError, match="unknown pid 7"):
        from_dict(data)


def test_schema_errors():
    with pytest.raises(ScenarioError, match="mode"):
        from_dict(base(files=[{"path": "/x", "owner": "alice", "group": "alice", "mode": "9"}]))
    with pytest.raises(ScenarioError, match=r"events\[0\]\.args"):
        from_dict(base(events=[{"t": 0, "kind": "tick", "args": {"bogus": 1}}]))
    with pytest.raises(ScenarioError):
        from_dict(base(surprise=True))


def test_duplicate_job_ids():
    job = {"id": "j1", "user": "alice", "cores": 1, "duration_s": 1}
    with pytest.raises(ScenarioError, match="duplicate job id"):
        from_dict(base(jobs=[job, job]))


def test_parse_error_has_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "users": [\n    oops\n]}\n')
    with pytest.raises(ScenarioError, match=r"bad\.json:3:5"):
        load_scenario(p)
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "missing.json")


def test_digest_and_toggles(tmp_path):
    s = from_dict(base())
    off = s.with_toggles(smask=False)
    assert off.toggles["smask"] is False and s.toggles["smask"] is True
    assert off.digest() != s.digest()
    p = tmp_path / "s.json"
    p.write_text(json.dumps(base()))
    assert load_scenario(p).digest() == s.digest()


def test_bundled_scenarios_load():
    names = bundled_scenario_names()
    assert {"adversarial", "clean", "gpu_fault", "leaky", "newgrp_optin"} <= set(names)
    for name in names:
        bundled_scenario(name)
