"""Reading and writing scenario and policy files.

Scenario files are JSON::

    {"seed": 7,
     "instances": [
        {"id": "p0",
         "candidates": [
            {"label": "a", "reward": 1.0, "quality": "positive", "ref_prob": 0.5},
            {"label": "b", "reward": 0.0, "quality": "negative", "ref_prob": 0.5}]}]}

Policy files reuse the same layout with ``logits`` in place of ``candidates``.
"""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from .core import (DIST_TOL, AlignmentInstance, CandidateOutcome, LogitPolicy, Quality,
                   ScenarioSuite)
from .errors import InvalidArgument, ScenarioError

BUNDLED = ("default", "offline", "online")


def dumps(obj: Any) -> str:
    """Canonical text form used for every structured file the package writes."""
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def _read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read file: {exc.strerror}", source=str(path)) from exc
    return _parse_json(text, str(path))


def _parse_json(text: str, source: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg} (column {exc.colno})",
                            source=source, line=exc.lineno) from exc


def _number(value, source, path, inst_id, *, minimum=None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"expected a number, got {value!r}", source=source, path=path,
                            instance_id=inst_id)
    value = float(value)
    if not math.isfinite(value):
        raise ScenarioError("must be finite", source=source, path=path, instance_id=inst_id)
    if minimum is not None and value < minimum:
        raise ScenarioError(f"must be >= {minimum}, got {value!r}", source=source, path=path,
                            instance_id=inst_id)
    return value


def _seed(data: dict, source: str | None) -> int:
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ScenarioError(f"seed must be an unsigned integer, got {seed!r}", source=source,
                            path="seed")
    return seed


def suite_from_dict(data: Any, source: str | None = None) -> ScenarioSuite:
    """Validate a parsed scenario document, reporting the first violation."""
    if not isinstance(data, dict):
        raise ScenarioError("top level must be an object", source=source)
    seed = _seed(data, source)
    raw_instances = data.get("instances")
    if not isinstance(raw_instances, list) or not raw_instances:
        raise ScenarioError("must be a non-empty list", source=source, path="instances")
    instances = []
    seen: set[str] = set()
    for i, raw in enumerate(raw_instances):
        ipath = f"instances[{i}]"
        if not isinstance(raw, dict):
            raise ScenarioError("must be an object", source=source, path=ipath)
        inst_id = raw.get("id")
        if not isinstance(inst_id, str) or not inst_id:
            raise ScenarioError("id must be a non-empty string", source=source,
                                path=f"{ipath}.id")
        if inst_id in seen:
            raise ScenarioError("duplicate instance id", source=source, path=f"{ipath}.id",
                                instance_id=inst_id)
        seen.add(inst_id)
        cands_raw = raw.get("candidates")
        if not isinstance(cands_raw, list) or len(cands_raw) < 2:
            raise ScenarioError("must list at least 2 candidates", source=source,
                                path=f"{ipath}.candidates", instance_id=inst_id)
        cands = []
        for j, c in enumerate(cands_raw):
            cpath = f"{ipath}.candidates[{j}]"
            if not isinstance(c, dict):
                raise ScenarioError("must be an object", source=source, path=cpath,
                                    instance_id=inst_id)
            label = c.get("label")
            if label is not None and not isinstance(label, str):
                raise ScenarioError("label must be a string", source=source,
                                    path=f"{cpath}.label", instance_id=inst_id)
            if "reward" not in c:
                raise ScenarioError("missing field", source=source, path=f"{cpath}.reward",
                                    instance_id=inst_id)
            reward = _number(c["reward"], source, f"{cpath}.reward", inst_id)
            quality = c.get("quality")
            if quality not in (Quality.POSITIVE.value, Quality.NEGATIVE.value):
                raise ScenarioError(f"quality must be 'positive' or 'negative', got {quality!r}",
                                    source=source, path=f"{cpath}.quality", instance_id=inst_id)
            if "ref_prob" not in c:
                raise ScenarioError("missing field", source=source, path=f"{cpath}.ref_prob",
                                    instance_id=inst_id)
            ref_prob = _number(c["ref_prob"], source, f"{cpath}.ref_prob", inst_id, minimum=0.0)
            if ref_prob > 1.0:
                raise ScenarioError(f"must be <= 1, got {ref_prob!r}", source=source,
                                    path=f"{cpath}.ref_prob", instance_id=inst_id)
            cands.append(CandidateOutcome(index=j, reward=reward, quality=Quality(quality),
                                          ref_prob=ref_prob, label=label))
        total = math.fsum(c.ref_prob for c in cands)
        if abs(total - 1.0) > DIST_TOL:
            raise ScenarioError(f"ref_prob values sum to {total!r}, not 1 (tolerance {DIST_TOL})",
                                source=source, path=f"{ipath}.candidates[*].ref_prob",
                                instance_id=inst_id)
        try:
            instances.append(AlignmentInstance(id=inst_id, candidates=tuple(cands)))
        except InvalidArgument as exc:
            raise ScenarioError(str(exc), source=source, path=ipath, instance_id=inst_id) from exc
    return ScenarioSuite(instances=tuple(instances), seed=seed)


def suite_to_dict(suite: ScenarioSuite) -> dict:
    out = []
    for inst in suite:
        cands = []
        for c in inst.candidates:
            entry: dict[str, Any] = {}
            if c.label is not None:
                entry["label"] = c.label
            entry["reward"] = c.reward
            entry["quality"] = c.quality.value
            entry["ref_prob"] = c.ref_prob
            cands.append(entry)
        out.append({"id": inst.id, "candidates": cands})
    return {"seed": suite.seed, "instances": out}


def load_suite(path: str | Path) -> ScenarioSuite:
    return suite_from_dict(_read_json(path), source=str(path))


def loads_suite(text: str, source: str = "<string>") -> ScenarioSuite:
    return suite_from_dict(_parse_json(text, source), source=source)


def save_suite(suite: ScenarioSuite, path: str | Path):
    Path(path).write_text(dumps(suite_to_dict(suite)), encoding="utf-8")


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise InvalidArgument(f"unknown bundled suite {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("qempo") / "data" / f"{name}.json"))


def load_bundled(name: str = "default") -> ScenarioSuite:
    return load_suite(bundled_path(name))


def resolve_suite(spec: str) -> ScenarioSuite:
    """Load ``spec`` as a path, or as ``bundled:<name>``."""
    if spec.startswith("bundled:"):
        return load_bundled(spec.split(":", 1)[1])
    return load_suite(spec)


# --- policy files ---------------------------------------------------------------------

def policy_to_dict(policy: LogitPolicy, *, seed: int = 0, metadata: dict | None = None) -> dict:
    doc: dict[str, Any] = {"seed": seed}
    if metadata:
        doc["metadata"] = metadata
    doc["instances"] = [{"id": key, "logits": [float(v) for v in policy[key]]}
                        for key in policy]
    return doc


class PolicyFile(NamedTuple):
    policy: LogitPolicy
    seed: int
    metadata: dict


def policy_from_dict(data: Any, source: str | None = None) -> PolicyFile:
    if not isinstance(data, dict):
        raise ScenarioError("top level must be an object", source=source)
    seed = _seed(data, source)
    raw = data.get("instances")
    if not isinstance(raw, list):
        raise ScenarioError("must be a list", source=source, path="instances")
    logits = {}
    for i, entry in enumerate(raw):
        path = f"instances[{i}]"
        if not isinstance(entry, dict) or not isinstance(entry.get("id"), str):
            raise ScenarioError("needs a string id", source=source, path=path)
        vals = entry.get("logits")
        if not isinstance(vals, list) or len(vals) < 1:
            raise ScenarioError("logits must be a non-empty list", source=source,
                                path=f"{path}.logits", instance_id=entry["id"])
        arr = np.array(vals, dtype=np.float64)
        if np.any(np.isnan(arr)) or np.any(arr == np.inf) or np.all(arr == -np.inf):
            raise ScenarioError("logits must be finite or -inf", source=source,
                                path=f"{path}.logits", instance_id=entry["id"])
        arr.setflags(write=False)
        logits[entry["id"]] = arr
    return PolicyFile(LogitPolicy(logits), seed, dict(data.get("metadata", {})))


def save_policy(policy: LogitPolicy, path: str | Path, *, seed: int = 0,
                metadata: dict | None = None):
    Path(path).write_text(dumps(policy_to_dict(policy, seed=seed, metadata=metadata)),
                          encoding="utf-8")


def load_policy(path: str | Path) -> PolicyFile:
    return policy_from_dict(_read_json(path), source=str(path))
