from __future__ import annotations

import json

import numpy as np
import pytest

from qempo.core import LogitPolicy
from qempo.errors import ScenarioError
from qempo.scenario import (BUNDLED, dumps, load_bundled, load_policy, load_suite, loads_suite,
                            policy_from_dict, policy_to_dict, resolve_suite, save_policy,
                            save_suite, suite_to_dict)

GOOD = {"seed": 3, "instances": [{"id": "a", "candidates": [
    {"label": "yes", "reward": 1.0, "quality": "positive", "ref_prob": 0.25},
    {"reward": 0.0, "quality": "negative", "ref_prob": 0.75}]}]}


def test_round_trip_is_byte_identical(tmp_path):
    text = dumps(GOOD)
    suite = loads_suite(text)
    assert dumps(suite_to_dict(suite)) == text
    path = tmp_path / "s.json"
    save_suite(suite, path)
    assert path.read_text() == text
    assert load_suite(path).seed == 3


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_suites_load_and_round_trip(name):
    suite = load_bundled(name)
    assert len(suite) >= 4
    again = loads_suite(dumps(suite_to_dict(suite)))
    assert dumps(suite_to_dict(again)) == dumps(suite_to_dict(suite))
    assert resolve_suite(f"bundled:{name}").seed == suite.seed


def test_offline_suite_has_three_equal_reward_positives():
    for inst in load_bundled("offline"):
        top = inst.rewards[inst.positive]
        assert inst.num_positive >= 3 and np.all(top == top[0])


def _broken(mutator):
    doc = json.loads(json.dumps(GOOD))
    mutator(doc)
    return dumps(doc)


@pytest.mark.parametrize("mutate, where", [
    (lambda d: d["instances"][0]["candidates"][1].update(ref_prob=0.7), "ref_prob"),
    (lambda d: d["instances"][0]["candidates"][0].update(quality="good"), "candidates[0].quality"),
    (lambda d: d["instances"][0]["candidates"][0].pop("reward"), "candidates[0].reward"),
    (lambda d: d["instances"][0]["candidates"][0].update(reward="x"), "candidates[0].reward"),
    (lambda d: d["instances"][0]["candidates"][1].update(ref_prob=-0.1), "candidates[1].ref_prob"),
    (lambda d: d["instances"][0].update(candidates=d["instances"][0]["candidates"][:1]), "candidates"),
    (lambda d: d["instances"].append(d["instances"][0]), "instances[1].id"),
    (lambda d: d.update(seed=-1), "seed"),
])
def test_validation_errors_name_the_field(mutate, where):
    with pytest.raises(ScenarioError) as exc:
        loads_suite(_broken(mutate), source="case.json")
    assert where in exc.value.path
    assert "case.json" in str(exc.value)


def test_json_syntax_error_reports_line():
    with pytest.raises(ScenarioError) as exc:
        loads_suite('{\n  "instances": [\n  oops\n]}', source="bad.json")
    assert exc.value.line == 3
    assert str(exc.value).startswith("bad.json:3")


def test_missing_file_and_unknown_bundle(tmp_path):
    with pytest.raises(ScenarioError):
        load_suite(tmp_path / "nope.json")
    with pytest.raises(Exception):
        resolve_suite("bundled:nope")


def test_policy_file_round_trip_with_masked_logits(tmp_path):
    pol = LogitPolicy({"a": np.array([0.125, -np.inf, 3.0]), "b": np.array([1e-300, 2.0])})
    path = tmp_path / "p.json"
    save_policy(pol, path, seed=7, metadata={"method": "qempo"})
    text = path.read_text()
    loaded = load_policy(path)
    assert loaded.seed == 7 and loaded.metadata == {"method": "qempo"}
    np.testing.assert_array_equal(loaded.policy["a"], pol["a"])
    assert dumps(policy_to_dict(loaded.policy, seed=7, metadata=loaded.metadata)) == text


def test_policy_file_rejects_nan():
    with pytest.raises(ScenarioError):
        policy_from_dict({"instances": [{"id": "a", "logits": [float("nan"), 0.0]}]})
