"""Decentralized anonymizer: pools sealed submissions, enforces the
k-anonymity and entropy diversity gates, generalizes quasi-identifiers
when the raw pool fails the gates, and releases batches to the researcher.

Records at this layer are plain dicts of field name -> string value (the
sanitized submissions; explicit identifiers were already stripped by the
patient and are stripped again here as defense in depth).
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import crypto

EXPLICIT_ID_FIELDS = frozenset({"name", "national_id"})
SUPPRESSED = "*"

# float slack so an entropy of exactly log(l) passes the gate
_ENTROPY_EPS = 1e-9


class AnonymizerError(Exception):
    pass


class MalformedRecordError(AnonymizerError):
    """A record is missing a required quasi-identifier field."""


class Hierarchy:
    """Generalization ladder for one quasi-identifier field.

    Level 0 is the raw value and the last level is full suppression ("*").
    Intermediate levels come from the level spec:

    - {"kind": "prefix", "lengths": [4, 3]}  keep the first N characters
    - {"kind": "table", "levels": [{raw: coarse, ...}, ...]}
    - {"kind": "suppress"}                   raw -> "*" only
    """

    def __init__(self, spec: dict):
        kind = spec.get("kind")
        if kind == "prefix":
            lengths = list(spec["lengths"])
            if any(n < 1 for n in lengths):
                raise AnonymizerError("prefix lengths must be >= 1")
            self._lengths = lengths
            self._tables = None
        elif kind == "table":
            self._tables = [dict(t) for t in spec["levels"]]
            self._lengths = None
        elif kind == "suppress":
            self._tables = []
            self._lengths = None
        else:
            raise AnonymizerError(f"unknown hierarchy kind: {kind!r}")

    @property
    def max_level(self) -> int:
        if self._lengths is not None:
            return len(self._lengths) + 1
        return len(self._tables) + 1

    def generalize(self, value: str, level: int) -> str:
        if level < 0 or level > self.max_level:
            raise AnonymizerError(f"level {level} out of range")
        if level == 0:
            return value
        if level == self.max_level:
            return SUPPRESSED
        if self._lengths is not None:
            return value[: self._lengths[level - 1]] + SUPPRESSED
        table = self._tables[level - 1]
        if value not in table:
            raise AnonymizerError(f"hierarchy not total: no level-{level} image for {value!r}")
        return table[value]


@dataclass(frozen=True)
class AnonymizationPolicy:
    k: int
    l: float
    quasi_id_fields: tuple[str, ...]
    sensitive_field: str
    hierarchies: dict[str, Hierarchy] = field(default_factory=dict)
    min_pool_size: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise AnonymizerError("k must be >= 1")
        if self.l < 1:
            raise AnonymizerError("l must be >= 1")

    def hierarchy_for(self, fname: str) -> Hierarchy:
        return self.hierarchies.get(fname, Hierarchy({"kind": "suppress"}))


def _projection(record: dict, quasi_id_fields: Sequence[str]) -> tuple:
    try:
        return tuple(record[f] for f in quasi_id_fields)
    except KeyError as exc:
        raise MalformedRecordError(f"record missing quasi-id field {exc}") from None


def equivalence_classes(
    records: Sequence[dict], quasi_id_fields: Sequence[str]
) -> dict[tuple, list[dict]]:
    """Group records by exact equality on the quasi-id projection."""
    classes: dict[tuple, list[dict]] = {}
    for r in records:
        classes.setdefault(_projection(r, quasi_id_fields), []).append(r)
    return classes


def check_k_anonymity(records: Sequence[dict], quasi_id_fields: Sequence[str], k: int) -> bool:
    if k < 1:
        raise AnonymizerError("k must be >= 1")
    classes = equivalence_classes(records, quasi_id_fields)
    return all(len(members) >= k for members in classes.values())


def class_entropy(members: Sequence[dict], sensitive_field: str) -> float:
    """Empirical Shannon entropy (natural log) of the sensitive values."""
    counts: dict = {}
    for r in members:
        v = r.get(sensitive_field)
        counts[v] = counts.get(v, 0) + 1
    n = len(members)
    return math.log(n) - sum(c * math.log(c) for c in counts.values()) / n


def entropy_l_diversity(
    records: Sequence[dict],
    quasi_id_fields: Sequence[str],
    sensitive_field: str,
    l: float,
) -> bool:
    """True iff every equivalence class has sensitive-value entropy of at
    least log(l)."""
    if l < 1:
        raise AnonymizerError("l must be >= 1")
    classes = equivalence_classes(records, quasi_id_fields)
    bound = math.log(l) - _ENTROPY_EPS
    return all(
        class_entropy(members, sensitive_field) >= bound for members in classes.values()
    )


def _apply_levels(
    records: Sequence[dict], policy: AnonymizationPolicy, levels: Sequence[int]
) -> list[dict]:
    out = []
    for r in records:
        g = dict(r)
        for fname, level in zip(policy.quasi_id_fields, levels):
            if fname not in g:
                raise MalformedRecordError(f"record missing quasi-id field {fname!r}")
            g[fname] = policy.hierarchy_for(fname).generalize(g[fname], level)
        out.append(g)
    return out


def _gates_pass(records: Sequence[dict], policy: AnonymizationPolicy) -> bool:
    return check_k_anonymity(records, policy.quasi_id_fields, policy.k) and entropy_l_diversity(
        records, policy.quasi_id_fields, policy.sensitive_field, policy.l
    )


def _violating_count(records: Sequence[dict], policy: AnonymizationPolicy) -> int:
    """Number of records sitting in a class that fails either gate."""
    classes = equivalence_classes(records, policy.quasi_id_fields)
    bound = math.log(policy.l) - _ENTROPY_EPS
    bad = 0
    for members in classes.values():
        if len(members) < policy.k or class_entropy(members, policy.sensitive_field) < bound:
            bad += len(members)
    return bad


def _drop_violating(records: Sequence[dict], policy: AnonymizationPolicy) -> list[dict]:
    classes = equivalence_classes(records, policy.quasi_id_fields)
    bound = math.log(policy.l) - _ENTROPY_EPS
    keep = []
    for members in classes.values():
        if len(members) >= policy.k and class_entropy(members, policy.sensitive_field) >= bound:
            keep.extend(members)
    return keep


@dataclass(frozen=True)
class GeneralizationResult:
    feasible: bool
    records: tuple[dict, ...] = ()
    levels: tuple[int, ...] = ()
    suppressed: int = 0


def generalize_to_policy(
    records: Sequence[dict], policy: AnonymizationPolicy
) -> GeneralizationResult:
    """Greedy full-domain generalization.

    Repeatedly raise the hierarchy level of the quasi-id field whose
    increment most reduces the number of gate-violating records (ties go to
    the leftmost field). If the gates still fail with every field fully
    suppressed, drop the violating classes; dropping more than half the
    records makes the request infeasible and nothing may be released.
    """
    if not records:
        return GeneralizationResult(feasible=True, records=(), levels=tuple(0 for _ in policy.quasi_id_fields))

    levels = [0] * len(policy.quasi_id_fields)
    max_levels = [policy.hierarchy_for(f).max_level for f in policy.quasi_id_fields]

    current = _apply_levels(records, policy, levels)
    while not _gates_pass(current, policy):
        best_field = None
        best_count = None
        for i in range(len(levels)):
            if levels[i] >= max_levels[i]:
                continue
            trial = levels.copy()
            trial[i] += 1
            count = _violating_count(_apply_levels(records, policy, trial), policy)
            if best_count is None or count < best_count:
                best_field, best_count = i, count
        if best_field is None:
            # everything fully suppressed and still failing: suppress classes
            kept = _drop_violating(current, policy)
            suppressed = len(records) - len(kept)
            if suppressed > len(records) / 2:
                return GeneralizationResult(feasible=False, levels=tuple(levels), suppressed=suppressed)
            return GeneralizationResult(
                feasible=True, records=tuple(kept), levels=tuple(levels), suppressed=suppressed
            )
        levels[best_field] += 1
        current = _apply_levels(records, policy, levels)
    return GeneralizationResult(feasible=True, records=tuple(current), levels=tuple(levels))


@dataclass(frozen=True)
class ReleasedBatch:
    records: tuple[dict, ...]
    levels: tuple[int, ...]
    suppressed: int
    # generator-side audit trail for the consent sweep; never shown to the
    # researcher entity
    source_patients: tuple[str, ...] = ()


class SubmissionPool:
    """The anonymizer entity's working state. Decrypted records never leave
    except through release_batch."""

    def __init__(self, policy: AnonymizationPolicy, keypair: crypto.EncryptionKeyPair, seed):
        self.policy = policy
        self.keypair = keypair
        self._rng = random.Random(seed)
        self._working: list[dict] = []
        self._sources: list[str] = []  # audit only, parallel to _working

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_bytes

    def size(self) -> int:
        return len(self._working)

    def accept(self, envelope: crypto.SealedEnvelope, source_patient: str):
        opened = crypto.open_envelope(envelope, self.keypair.private_bytes)
        record = _decode_record(opened.plaintext)
        self._working.append(record)
        self._sources.append(source_patient)

    def accept_plain(self, record: dict, source_patient: str):
        """Direct (anonymizer-bypassing) submission routed here only when a
        scenario explicitly enables the bypass flag."""
        self._working.append(dict(record))
        self._sources.append(source_patient)

    def release_batch(self) -> Optional[ReleasedBatch]:
        """Release only if the pool is large enough and the gates pass
        (after generalization). Explicit identifiers are stripped again and
        submission order is destroyed by a seeded shuffle."""
        if len(self._working) < self.policy.min_pool_size:
            return None
        cleaned = [
            {k: v for k, v in r.items() if k not in EXPLICIT_ID_FIELDS}
            for r in self._working
        ]
        usable = [
            (r, src)
            for r, src in zip(cleaned, self._sources)
            if all(f in r for f in self.policy.quasi_id_fields)
        ]
        if len(usable) < self.policy.min_pool_size:
            return None
        result = generalize_to_policy([r for r, _ in usable], self.policy)
        if not result.feasible:
            return None
        kept = list(result.records)
        # map kept records back to sources by object value (generalized
        # records were produced positionally by generalize_to_policy, but
        # suppression may have dropped some)
        gen_all = _apply_levels([r for r, _ in usable], self.policy, result.levels)
        sources: list[str] = []
        remaining = list(kept)
        kept_pairs = []
        for g, (_, src) in zip(gen_all, usable):
            if g in remaining:
                remaining.remove(g)
                kept_pairs.append((g, src))
        self._rng.shuffle(kept_pairs)
        records = tuple(dict(g) for g, _ in kept_pairs)
        sources = tuple(src for _, src in kept_pairs)
        return ReleasedBatch(
            records=records,
            levels=result.levels,
            suppressed=result.suppressed,
            source_patients=sources,
        )


def encode_record(record: dict) -> bytes:
    return json.dumps(record, sort_keys=True).encode()


def _decode_record(blob: bytes) -> dict:
    return json.loads(blob.decode())
