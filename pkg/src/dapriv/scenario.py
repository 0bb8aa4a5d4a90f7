"""Scenario configuration: schema, defaults, validation, file loading.

Scenarios are YAML or JSON. Unknown fields are rejected by name; cross
references (coalition members, flow participants) are validated against
the declared entity counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Optional

import yaml


class ScenarioError(Exception):
    pass


_DEFAULT_HIERARCHIES = {
    "zip_code": {"kind": "prefix", "lengths": [4, 3, 2]},
    "birth_date": {"kind": "prefix", "lengths": [7, 4]},  # YYYY-MM, then YYYY
    "gender": {"kind": "suppress"},
}


@dataclass
class KeyPoolParams:
    private_keys: int = 2
    subkeys_per_private: int = 2
    public_threshold: int = 1
    private_threshold: int = 1000


@dataclass
class AnonymizationParams:
    k: int = 2
    l: float = 1.0
    quasi_id_fields: tuple[str, ...] = ("birth_date", "zip_code", "gender")
    sensitive_field: str = "diagnosis"
    hierarchies: dict = field(default_factory=lambda: dict(_DEFAULT_HIERARCHIES))
    min_pool_size: int = 5


@dataclass
class ResearchFlowSpec:
    researcher: int = 0
    consent_fraction: float = 0.6
    share_fields: tuple[str, ...] = ("birth_date", "zip_code", "gender", "diagnosis")
    bypass_anonymizer: bool = False


@dataclass
class EmergencySpec:
    deposits: int = 0
    accesses: int = 0
    wrong_key_attempts: int = 0


@dataclass
class Scenario:
    seed: int = 0
    patients: int = 1
    physicians: int = 1
    labs: int = 1
    researchers: int = 0
    lab_sessions_per_patient: int = 1
    token_mode: str = "dapriv_keys"  # or "baseline_ssn"
    key_pool: KeyPoolParams = field(default_factory=KeyPoolParams)
    anonymization: AnonymizationParams = field(default_factory=AnonymizationParams)
    research_flows: list[ResearchFlowSpec] = field(default_factory=list)
    emergency: EmergencySpec = field(default_factory=EmergencySpec)
    coalition: tuple[str, ...] = ()  # entity ids, e.g. "lab:0"
    tamper_flows: list[str] = field(default_factory=list)  # one tamper kind per extra flow
    lab_capabilities: tuple[str, ...] = ("blood_panel", "xray", "mri")
    prescribed_tests: tuple[str, ...] = ("blood_panel",)

    def validate(self):
        if self.token_mode not in ("dapriv_keys", "baseline_ssn"):
            raise ScenarioError(f"field 'token_mode': unknown value {self.token_mode!r}")
        for name in ("patients", "physicians", "labs"):
            if getattr(self, name) < 1:
                raise ScenarioError(f"field {name!r}: must be >= 1")
        kp = self.key_pool
        if min(kp.private_keys, kp.subkeys_per_private, kp.public_threshold, kp.private_threshold) < 1:
            raise ScenarioError("field 'key_pool': all parameters must be >= 1")
        for member in self.coalition:
            kind, _, idx = member.partition(":")
            if kind == "lab" and int(idx) >= self.labs:
                raise ScenarioError(f"field 'coalition': lab {member!r} does not exist")
            if kind == "physician" and int(idx) >= self.physicians:
                raise ScenarioError(f"field 'coalition': physician {member!r} does not exist")
            if kind not in ("lab", "physician", "auth"):
                raise ScenarioError(f"field 'coalition': unknown entity kind {kind!r}")
        for flow in self.research_flows:
            if flow.researcher >= self.researchers:
                raise ScenarioError(
                    f"field 'research_flows': researcher {flow.researcher} does not exist"
                )
            if not 0.0 <= flow.consent_fraction <= 1.0:
                raise ScenarioError("field 'consent_fraction': must be within [0, 1]")
        valid_tampers = {"flip_prescription", "substitute_store_key", "mutate_envelope"}
        for t in self.tamper_flows:
            if t not in valid_tampers:
                raise ScenarioError(f"field 'tamper_flows': unknown tamper kind {t!r}")
        if not set(self.prescribed_tests) <= set(self.lab_capabilities):
            raise ScenarioError("field 'prescribed_tests': not covered by lab_capabilities")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _build(data: dict[str, Any]) -> Scenario:
    def sub(cls, key, item_cls=None):
        raw = data.pop(key, None)
        if raw is None:
            return cls()
        _check_fields(raw, cls, key)
        return cls(**raw)

    scenario = Scenario()
    if "key_pool" in data:
        scenario.key_pool = sub(KeyPoolParams, "key_pool")
    if "anonymization" in data:
        raw = data.pop("anonymization")
        _check_fields(raw, AnonymizationParams, "anonymization")
        if "quasi_id_fields" in raw:
            raw["quasi_id_fields"] = tuple(raw["quasi_id_fields"])
        scenario.anonymization = AnonymizationParams(**raw)
    if "research_flows" in data:
        flows = []
        for i, raw in enumerate(data.pop("research_flows")):
            _check_fields(raw, ResearchFlowSpec, f"research_flows[{i}]")
            if "share_fields" in raw:
                raw["share_fields"] = tuple(raw["share_fields"])
            flows.append(ResearchFlowSpec(**raw))
        scenario.research_flows = flows
    if "emergency" in data:
        raw = data.pop("emergency")
        _check_fields(raw, EmergencySpec, "emergency")
        scenario.emergency = EmergencySpec(**raw)
    for key in ("coalition", "lab_capabilities", "prescribed_tests"):
        if key in data:
            data[key] = tuple(data[key])
    _check_fields(data, Scenario, "scenario")
    for key, value in data.items():
        setattr(scenario, key, value)
    return scenario.validate()


def _check_fields(raw: dict, cls, where: str):
    if not isinstance(raw, dict):
        raise ScenarioError(f"field {where!r}: expected a mapping")
    allowed = set(cls.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ScenarioError(f"field {where!r}: unknown field(s) {sorted(unknown)}")


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    try:
        return _build(dict(data))
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def scenario_from_dict(data: dict[str, Any]) -> Scenario:
    return _build(dict(data))
